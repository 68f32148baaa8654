"""Seen/unseen evaluation protocol and the report it produces."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ProtocolError, UndefinedMetricError
from .metrics import DetectionRecord, and_efficiency, average_precision, relative_drop
from .prompts import PromptBundle, decompose
from .synth import Corpus, Prompt, SynthScene, targets_for

# predict(images (B,3,H,W), bundles) -> per image list of (score in (0,1], bool mask (H,W))
PredictFn = Callable[[np.ndarray, Sequence[PromptBundle]], list]

GROUP_SPLITS = ("union", "test-unseen", "test-seen")
TABLE_COLUMNS = ("AP_unseen", "AP_seen", "R_d", "AND-Eff")


@dataclass(frozen=True)
class Protocol:
    group_split: str = "union"  # which test scenes score the single-attribute prompts
    batch_size: int = 64
    score_threshold: float = 1e-9

    def __post_init__(self):
        if self.group_split not in GROUP_SPLITS:
            raise ConfigurationError(f"group_split must be one of {GROUP_SPLITS}")
        if not 0 < self.score_threshold <= 1:
            raise ConfigurationError("score_threshold must lie in (0, 1]")


@dataclass
class EvalReport:
    ap_seen: float
    ap_unseen: float
    r_d: float
    and_eff: float | None
    ap_group: dict[str, float]
    per_composition: dict[str, float]
    flags: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_nan_to_none(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        d["per_composition"] = {k: (math.nan if v is None else v) for k, v in d["per_composition"].items()}
        return cls(**d)

    def row(self) -> tuple[float, float, float, float | None]:
        return (self.ap_unseen, self.ap_seen, self.r_d, self.and_eff)


def _nan_to_none(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _nan_to_none(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_nan_to_none(v) for v in x]
    return x


def composition_key(prompt: Prompt) -> str:
    return "|".join([prompt.category, *(f"{g}={v}" for g, v in prompt.attributes)])


def _run_prompt_set(predict: PredictFn, scenes: Sequence[SynthScene], prompts: Sequence[Prompt],
                    corpus: Corpus, protocol: Protocol) -> dict[str, float]:
    """AP of each prompt evaluated over every scene in ``scenes``."""
    vocab = corpus.space.vocab()
    jobs = [(p, sc) for p in prompts for sc in scenes]
    dets: dict[Prompt, list[DetectionRecord]] = {p: [] for p in prompts}
    for start in range(0, len(jobs), protocol.batch_size):
        chunk = jobs[start:start + protocol.batch_size]
        images = np.stack([sc.image for _, sc in chunk])
        bundles = [decompose(p.category, p.attributes, vocab) for p, _ in chunk]
        for (p, sc), found in zip(chunk, predict(images, bundles)):
            for score, mask in found:
                if score >= protocol.score_threshold:
                    dets[p].append(DetectionRecord(sc.scene_id, float(score), np.asarray(mask, bool)))
    out = {}
    for p in prompts:
        gt = {}
        for sc in scenes:
            idx = targets_for(sc, p, corpus.space)
            gt[sc.scene_id] = sc.masks()[list(idx)]
        out[composition_key(p)] = average_precision(dets[p], gt)
    return out


def _mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else 0.0


def evaluate(predict: PredictFn, corpus: Corpus, protocol: Protocol = Protocol(),
             config: dict | None = None) -> EvalReport:
    """Composed prompts per split give AP_seen / AP_unseen; single-attribute
    prompts per group give AP_g. AP of a split is the mean over its
    compositions that have ground truth there."""
    for split in ("test-seen", "test-unseen"):
        if not corpus.scenes.get(split):
            raise ProtocolError(f"split {split!r} is missing or empty")
    space = corpus.space
    names = space.group_names

    def composed(comps):
        return [Prompt(c[0], tuple(zip(names, c[1:]))) for c in comps]

    per_comp = {}
    seen = _run_prompt_set(predict, corpus.scenes["test-seen"], composed(space.seen), corpus, protocol)
    unseen = _run_prompt_set(predict, corpus.scenes["test-unseen"], composed(space.unseen), corpus, protocol)
    per_comp.update(seen)
    per_comp.update(unseen)
    ap_seen, ap_unseen = _mean(seen.values()), _mean(unseen.values())

    if protocol.group_split == "union":
        group_scenes = corpus.scenes["test-seen"] + corpus.scenes["test-unseen"]
    else:
        group_scenes = corpus.scenes[protocol.group_split]
    ap_group = {}
    for g, values in space.groups:
        prompts = [Prompt(c, ((g, v),)) for c in space.categories for v in values]
        ap_group[g] = _mean(_run_prompt_set(predict, group_scenes, prompts, corpus, protocol).values())

    flags = []
    try:
        and_eff = and_efficiency(ap_unseen, ap_group)
    except UndefinedMetricError as exc:
        and_eff = None
        flags.append(f"and_eff_undefined: {exc}")
    return EvalReport(ap_seen, ap_unseen, relative_drop(ap_seen, ap_unseen), and_eff, ap_group, per_comp,
                      flags, dict(config or {}))


def model_predictor(model, batch_size: int = 64) -> PredictFn:
    """Adapter from a trained model to the protocol's predict function."""
    def predict(images, bundles):
        dets = model.predict_batch(images, bundles, threshold=1e-9)
        return [[(d.score, d.mask) for d in found] for found in dets]
    return predict


def oracle_predictor(corpus: Corpus, score: float = 0.9) -> PredictFn:
    """Emits every ground-truth mask matching the prompt with a fixed score.

    Images are matched to scenes by content, so it needs no side channel.
    """
    from .prompts import detokenize
    vocab = corpus.space.vocab()
    by_bytes = {sc.image.tobytes(): sc for split in corpus.scenes.values() for sc in split}

    def predict(images, bundles):
        out = []
        for image, bundle in zip(images, bundles):
            sc = by_bytes[np.asarray(image, dtype=np.float32).tobytes()]
            cat, attrs = detokenize(bundle, vocab)
            p = Prompt(cat, tuple((g, v) for g, v in attrs.items() if v is not None))
            out.append([(score, sc.instances[i].mask) for i in targets_for(sc, p, corpus.space)])
        return out
    return predict


def null_predictor() -> PredictFn:
    return lambda images, bundles: [[] for _ in bundles]


def format_table(rows: Sequence[tuple[str, EvalReport]], title: str = "") -> str:
    """Aligned plain-text table, columns AP_unseen, AP_seen, R_d, AND-Eff."""
    head = ("arm",) + TABLE_COLUMNS
    body = []
    for name, rep in rows:
        ae = "n/a" if rep.and_eff is None else f"{rep.and_eff:.3f}"
        body.append((name, f"{rep.ap_unseen:.2f}", f"{rep.ap_seen:.2f}", f"{rep.r_d:.3f}", ae))
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines = ([title] if title else []) + [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"
