"""Command-line runner: gen-data | train | eval | ablate | viz-gates."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as CK
from .errors import CompsegError, ConfigurationError, FormatError, NonFiniteError, ProtocolError, VocabularyError
from .evaluate import EvalReport, Protocol, evaluate, format_table, model_predictor, oracle_predictor
from .model import ModelConfig, SegModel, bilinear_matrix
from .synth import Corpus, Prompt, build_space, generate_corpus, load_corpus, save_corpus, ubc_space
from .train import Trainer, TrainingDiverged, items_from_corpus

log = logging.getLogger("compseg")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2

# (prompt strategy, feature fusion, score aggregation)
ARMS = {
    "concat": ("concat", "off", "log_and"),
    "indep-mean": ("decomposed", "off", "mean_logit"),
    "ours": ("decomposed", "gate", "log_and"),
    "additive": ("decomposed", "add", "additive"),
    "prob-product": ("decomposed", "off", "prob_product"),
    "max-score": ("decomposed", "off", "max_logit"),
    "gate-prob": ("decomposed", "gate", "prob_product"),
}
ARM_LABELS = {
    "concat": "Concatenated sentence",
    "indep-mean": "Independent + Mean score",
    "ours": "Decomposed + gating + log-space AND",
    "additive": "Additive fusion",
    "prob-product": "Prob-space product",
    "max-score": "Max-score (OR)",
    "gate-prob": "Feature gating + prob-space product",
}
PROMPT_TABLE_ARMS = ("concat", "indep-mean", "ours")
AGGREGATION_TABLE_ARMS = ("additive", "prob-product", "max-score", "gate-prob", "ours")


@dataclass
class RunConfig:
    # dataset
    data_dir: str = "data"
    preset: str = "ubc"
    num_categories: int = 1
    group_sizes: list = field(default_factory=lambda: [4, 4])
    seen_fraction: float = 0.1
    train_scenes: int = 600
    test_seen_scenes: int = 100
    test_unseen_scenes: int = 100
    # model and optimiser (mirrors ModelConfig)
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    heads: int = 4
    queries: int = 8
    depth: int = 2
    aggregation: str = "log_and"
    fusion: str = "gate"
    prompt_strategy: str = "decomposed"
    embed_dim: int = 32
    pixel_dim: int = 16
    temperature: float = 1.0
    alpha: float = 1.0
    gate_bias: float = 2.0
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    # run persistence
    out_dir: str = "runs/default"
    checkpoint: str = ""
    save_every: int = 1
    resume: bool = False
    # evaluation protocol
    group_split: str = "union"
    eval_batch_size: int = 64
    threshold: float = 0.3
    oracle: bool = False
    # ablation
    arms: list = field(default_factory=lambda: list(PROMPT_TABLE_ARMS))
    seeds: list = field(default_factory=lambda: [0])
    # gate visualisation
    scene: str = ""
    prompt: str = ""

    def validate(self) -> RunConfig:
        if self.preset not in ("ubc", "random"):
            raise ConfigurationError(f"preset must be 'ubc' or 'random', got {self.preset!r}")
        for name in ("train_scenes", "test_seen_scenes", "test_unseen_scenes"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.save_every < 1:
            raise ConfigurationError("save_every must be >= 1")
        if not 0 < self.threshold <= 1:
            raise ConfigurationError("threshold must lie in (0, 1]")
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown:
            raise ConfigurationError(f"unknown ablation arms {unknown}; choose from {sorted(ARMS)}")
        self.model_config()
        self.protocol()
        return self

    def model_config(self, **overrides) -> ModelConfig:
        names = [f.name for f in dataclasses.fields(ModelConfig)]
        return ModelConfig(**({n: getattr(self, n) for n in names} | overrides))

    def protocol(self) -> Protocol:
        return Protocol(group_split=self.group_split, batch_size=self.eval_batch_size)

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint.ckpt"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**d)


_FIELD_TYPES = {"int": int, "float": float, "str": str}


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
        if kind == "bool":
            parser.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        elif kind == "list":
            elem = str if f.name == "arms" else int
            parser.add_argument(flag, dest=f.name, default=None, type=elem, nargs="+")
        else:
            parser.add_argument(flag, dest=f.name, default=None, type=_FIELD_TYPES[kind])


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigurationError("config file must hold a JSON object")
    cfg = RunConfig.from_dict(base)
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg.validate()


def _load_corpus(cfg: RunConfig) -> Corpus:
    try:
        return load_corpus(cfg.data_dir)
    except (FileNotFoundError, FormatError) as exc:
        raise ConfigurationError(f"dataset at {cfg.data_dir} unusable: {exc}") from None


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- gen-data --------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    if cfg.preset == "ubc":
        space = ubc_space()
    else:
        space = build_space(cfg.num_categories, cfg.group_sizes, cfg.seen_fraction, cfg.seed)
    corpus = generate_corpus(space, cfg.train_scenes, cfg.test_seen_scenes, cfg.test_unseen_scenes,
                             seed=cfg.seed, image_size=cfg.image_size)
    root = save_corpus(corpus, cfg.data_dir)
    print(f"dataset written to {root}")
    for split, n in corpus.split_sizes().items():
        print(f"  {split:<12} {n:>5} scenes")
    print(f"  samples      {len(corpus.samples):>5}")
    print(f"seen compositions ({len(space.seen)}):")
    for c in space.seen:
        print("  " + " ".join(c))
    print(f"unseen compositions ({len(space.unseen)}):")
    for c in space.unseen:
        print("  " + " ".join(c))
    return EXIT_OK


# --- train -----------------------------------------------------------------------

def train_run(cfg: RunConfig, corpus: Corpus, out_dir: Path, model_cfg: ModelConfig | None = None,
              ckpt: Path | None = None) -> SegModel:
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = model_cfg or cfg.model_config()
    ckpt = ckpt or out_dir / "checkpoint.ckpt"
    loss_log = out_dir / "loss.jsonl"
    if cfg.resume and ckpt.exists():
        model, saved, arrays = CK.load_model(ckpt)
        if dataclasses.replace(model.cfg, epochs=model_cfg.epochs) != model_cfg:
            raise ConfigurationError("checkpoint was trained with a different model config")
        model.cfg = model_cfg
        trainer = Trainer(model, dump_dir=out_dir)
        CK.restore_trainer(trainer, saved, arrays)
        kept = []
        if loss_log.exists():
            kept = [ln for ln in loss_log.read_text().splitlines() if json.loads(ln)["epoch"] <= trainer.epoch]
        loss_log.write_text("".join(ln + "\n" for ln in kept))
        log.info("resumed from %s at epoch %d", ckpt, trainer.epoch)
    else:
        model = SegModel(model_cfg, corpus.space.vocab())
        trainer = Trainer(model, dump_dir=out_dir)
        CK.save(out_dir / "checkpoint-init.ckpt", model, trainer)
        loss_log.write_text("")
    items = items_from_corpus(corpus)
    while trainer.epoch < model_cfg.epochs:
        stats = trainer.train_epoch(items)
        with open(loss_log, "a") as fh:
            fh.write(json.dumps({k: stats[k] for k in sorted(stats)}, sort_keys=True) + "\n")
        log.info("epoch %d  total %.4f  score %.4f  dice %.4f  bce %.4f", stats["epoch"], stats["total"],
                 stats["score"], stats["dice"], stats["bce"])
        if trainer.epoch % cfg.save_every == 0 or trainer.epoch == model_cfg.epochs:
            CK.save(ckpt, model, trainer)
    if not ckpt.exists():
        CK.save(ckpt, model, trainer)
    return model


def cmd_train(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    out = Path(cfg.out_dir)
    model = train_run(cfg, corpus, out, ckpt=cfg.checkpoint_path())
    last = out / "loss.jsonl"
    lines = last.read_text().splitlines()
    final = json.loads(lines[-1]) if lines else {}
    print(json.dumps({"checkpoint": str(cfg.checkpoint_path()), "epochs": model.cfg.epochs,
                      "final": final}, sort_keys=True))
    return EXIT_OK


# --- eval ------------------------------------------------------------------------

def _write_report(rep: EvalReport, out_dir: Path, name: str = "") -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(rep.to_json())
    table = format_table([(name or "model", rep)])
    (out_dir / "report.txt").write_text(table)
    return table


def cmd_eval(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    echo = cfg.to_dict()
    if cfg.oracle:
        predict, name = oracle_predictor(corpus), "oracle"
    else:
        model, _, _ = CK.load_model(cfg.checkpoint_path())
        echo.update(model.cfg.to_dict())
        predict, name = model_predictor(model), "model"
    rep = evaluate(predict, corpus, cfg.protocol(), config=echo)
    print(_write_report(rep, Path(cfg.out_dir), name), end="")
    if rep.flags:
        for f in rep.flags:
            print(f"warning: {f}")
    return EXIT_OK


# --- ablate ----------------------------------------------------------------------

def _mean_report(reports: Sequence[EvalReport], config: dict) -> EvalReport:
    from .metrics import and_efficiency, relative_drop
    from .errors import UndefinedMetricError
    ap_seen = float(np.mean([r.ap_seen for r in reports]))
    ap_unseen = float(np.mean([r.ap_unseen for r in reports]))
    groups = {g: float(np.mean([r.ap_group[g] for r in reports])) for g in reports[0].ap_group}
    comps = {k: float(np.nanmean([r.per_composition[k] for r in reports])) for k in reports[0].per_composition}
    flags = []
    try:
        ae = and_efficiency(ap_unseen, groups)
    except UndefinedMetricError as exc:
        ae, flags = None, [f"and_eff_undefined: {exc}"]
    return EvalReport(ap_seen, ap_unseen, relative_drop(ap_seen, ap_unseen), ae, groups, comps, flags, config)


def run_ablation(cfg: RunConfig, corpus: Corpus) -> dict:
    root = Path(cfg.out_dir)
    results: dict = {"arms": {}, "failures": {}}
    for arm in cfg.arms:
        strategy, fusion, aggregation = ARMS[arm]
        reports = []
        for seed in cfg.seeds:
            run_dir = root / arm / f"seed{seed}"
            mcfg = cfg.model_config(prompt_strategy=strategy, fusion=fusion, aggregation=aggregation, seed=seed)
            echo = cfg.to_dict() | mcfg.to_dict() | {"arms": [arm], "seeds": [seed]}
            report_path = run_dir / "report.json"
            try:
                if cfg.resume and report_path.exists():
                    rep = EvalReport.from_json(report_path.read_text())
                    if rep.config == json.loads(json.dumps(echo)):
                        reports.append(rep)
                        log.info("arm %s seed %d: reusing %s", arm, seed, report_path)
                        continue
                model = train_run(cfg, corpus, run_dir, mcfg)
                rep = evaluate(model_predictor(model), corpus, cfg.protocol(), config=echo)
                _write_report(rep, run_dir, arm)
                reports.append(rep)
                log.info("arm %s seed %d: AP_unseen %.2f AP_seen %.2f", arm, seed, rep.ap_unseen, rep.ap_seen)
            except (CompsegError, ArithmeticError, ValueError) as exc:
                results["failures"].setdefault(arm, []).append(f"seed {seed}: {type(exc).__name__}: {exc}")
                log.error("arm %s seed %d failed: %s", arm, seed, exc)
        if reports:
            results["arms"][arm] = _mean_report(reports, {"arm": arm, "seeds": list(cfg.seeds)})
    return results


def ablation_table(results: dict, arms: Sequence[str]) -> str:
    rows = [(ARM_LABELS[a], results["arms"][a]) for a in arms if a in results["arms"]]
    text = format_table(rows)
    for arm, errs in results["failures"].items():
        for e in errs:
            text += f"failed {arm}: {e}\n"
    return text


def cmd_ablate(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    results = run_ablation(cfg, corpus)
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    text = ablation_table(results, cfg.arms)
    (root / "ablation.txt").write_text(text)
    _dump_json(root / "ablation.json", {
        "arms": {a: json.loads(r.to_json()) for a, r in results["arms"].items()},
        "failures": results["failures"],
    })
    print(text, end="")
    return EXIT_OK if results["arms"] else EXIT_INTERNAL


# --- viz-gates ---------------------------------------------------------------------

def parse_prompt(text: str, corpus: Corpus) -> Prompt:
    """``category|group=value|...``; groups may be omitted."""
    parts = [p for p in text.split("|") if p]
    if not parts:
        raise ConfigurationError("empty prompt")
    vocab = corpus.space.vocab()
    vocab.id_of(parts[0])
    attrs = {}
    for p in parts[1:]:
        if "=" not in p:
            raise ConfigurationError(f"prompt attribute {p!r} is not group=value")
        g, v = p.split("=", 1)
        if g not in vocab.group_names:
            raise VocabularyError(f"unknown attribute group {g!r}")
        vocab.id_of(v)
        attrs[g] = v
    return Prompt(parts[0], tuple((g, attrs[g]) for g in vocab.group_names if g in attrs))


def write_pgm(path: Path, img: np.ndarray) -> None:
    """Binary PGM (P5), 8-bit; ``img`` in [0, 1]."""
    h, w = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def write_ppm(path: Path, img: np.ndarray) -> None:
    """Binary PPM (P6), 8-bit; ``img`` (3, H, W) in [0, 1]."""
    _, h, w = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pnm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    arr = np.frombuffer(rest, dtype=np.uint8)
    return arr.reshape(h, w) if magic == b"P5" else arr.reshape(h, w, 3).transpose(2, 0, 1)


def gate_maps(model: SegModel, image: np.ndarray, prompt: Prompt) -> dict[str, np.ndarray]:
    """Per-branch (H, W) maps in [0, 1] from the pixel-token stage.

    ``concept``: the category tokens' attention over pixels (softmax over
    pixel positions, heads averaged, scaled to max 1). One map per attribute
    group: channel-mean gate value, exactly 1 where the attribute is absent.
    """
    from . import tensor as T
    from .prompts import decompose
    cfg = model.cfg
    bundle = decompose(prompt.category, prompt.attributes, model.vocab)
    batch = model.prepare([bundle])
    with T.no_grad():
        out = model.forward(image[None], batch)
        # recompute the pixel tokens the encoder stage saw
        from .model import patchify
        x = T.relu(patchify(np.asarray(image, float)[None], cfg.patch) @ model.patch_w1 + model.patch_b1)
        x = (x @ model.patch_w2 + model.patch_b2 + model.pos).data
    size, g = cfg.image_size, cfg.grid
    a = bilinear_matrix(size, g)
    up = lambda grid: a @ grid.reshape(g, g) @ a.T

    ca = model.enc_fgca.cat_attn
    t_c = model.table.lookup(batch.category_ids, batch.validity[0]).data[0]
    valid = batch.validity[0, 0].astype(bool)
    d = cfg.dim // cfg.heads
    q = (x[0] @ ca.wq.data + ca.bq.data).reshape(-1, cfg.heads, d)
    k = (t_c @ ca.wk.data + ca.bk.data).reshape(-1, cfg.heads, d)
    s = np.einsum("phd,thd->htp", q, k) / np.sqrt(d)  # (heads, tokens, pixels)
    s = s - s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=-1, keepdims=True)
    concept = w[:, valid].mean(axis=(0, 1))
    maps = {"concept": up(concept / concept.max())}

    gates = out.stages["encode"].gates
    present = batch.presence[:, 0].astype(bool)
    for kk, name in enumerate(model.vocab.group_names):
        if gates is None or not present[kk]:
            maps[name] = np.ones((size, size))
        else:
            maps[name] = np.clip(up(gates.data[kk, 0].mean(axis=-1)), 0.0, 1.0)
    return maps


def overlay(image: np.ndarray, masks: Sequence[np.ndarray]) -> np.ndarray:
    out = np.array(image, dtype=np.float64)
    tint = np.array([1.0, 0.2, 0.2])[:, None]
    for m in masks:
        out[:, m] = 0.5 * out[:, m] + 0.5 * tint
    return out


def cmd_viz_gates(cfg: RunConfig) -> int:
    if not cfg.scene or not cfg.prompt:
        raise ConfigurationError("viz-gates needs --scene and --prompt")
    corpus = _load_corpus(cfg)
    scenes = corpus.scene_index()
    if cfg.scene not in scenes:
        raise ConfigurationError(f"scene {cfg.scene!r} not in dataset")
    image = scenes[cfg.scene].image
    prompt = parse_prompt(cfg.prompt, corpus)
    model, _, _ = CK.load_model(cfg.checkpoint_path())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, m in gate_maps(model, image, prompt).items():
        write_pgm(out / f"{name}.pgm", m)
        print(out / f"{name}.pgm")
    from .prompts import decompose
    dets = model.predict(image, decompose(prompt.category, prompt.attributes, model.vocab), cfg.threshold)
    write_ppm(out / "overlay.ppm", overlay(image, [d.mask for d in dets]))
    print(out / "overlay.ppm")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "viz-gates": cmd_viz_gates,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compseg", description="Compositional segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config; flags override it")
        p.add_argument("-v", "--verbose", action="store_true")
        _add_overrides(p)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}; diagnostics at {exc.dump_path}", file=sys.stderr)
        return EXIT_INTERNAL
    except (ConfigurationError, VocabularyError, FormatError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (CompsegError, NonFiniteError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
