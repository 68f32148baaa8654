"""Procedural compositional segmentation benchmark.

Categories are drawn as shape classes, the first attribute group as a
luminance fill pattern and the second as a hue, so every semantic unit is
visible on its own. Training scenes only ever contain seen compositions.
"""

from __future__ import annotations

import colorsys
import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError
from .prompts import Vocabulary
from .rng import derive_seed, stream

SPLITS = ("train", "test-seen", "test-unseen")
SHAPES = ("square", "disc", "triangle", "diamond", "plus")
PATTERNS = ("solid", "striped", "dotted", "ring", "checker")
MAX_HUES = 8
BACKGROUND = 0.08
NOISE_SIGMA = 0.02
SEPARATION = 2
MIN_PIXELS = 16
PLACEMENT_TRIES = 200
MIN_IMAGE = 32

Composition = tuple  # (category, a_1, ..., a_K)


@dataclass(frozen=True)
class CompositionSpace:
    categories: tuple[str, ...]
    groups: tuple[tuple[str, tuple[str, ...]], ...]
    seen: tuple[Composition, ...]
    unseen: tuple[Composition, ...]

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(g for g, _ in self.groups)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def all_compositions(self) -> list[Composition]:
        return [tuple(c) for c in itertools.product(self.categories, *(v for _, v in self.groups))]

    def is_seen(self, comp: Composition) -> bool:
        return tuple(comp) in set(self.seen)

    def vocab(self) -> Vocabulary:
        return Vocabulary.build(self.categories, self.groups)

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "groups": [[g, list(v)] for g, v in self.groups],
            "seen": [list(c) for c in self.seen],
            "unseen": [list(c) for c in self.unseen],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> CompositionSpace:
        return cls(
            tuple(d["categories"]),
            tuple((g, tuple(v)) for g, v in d["groups"]),
            tuple(tuple(c) for c in d["seen"]),
            tuple(tuple(c) for c in d["unseen"]),
        )


def check_space(space: CompositionSpace) -> None:
    """Raise if the seen/unseen split is not a disjoint cover with full atom coverage."""
    seen, unseen = set(space.seen), set(space.unseen)
    if seen & unseen:
        raise ConfigurationError("seen and unseen compositions overlap")
    if seen | unseen != set(space.all_compositions()):
        raise ConfigurationError("seen and unseen do not cover the composition space")
    if not _covers(space.seen, space.categories, space.groups):
        raise ConfigurationError("some category or attribute value never appears in a seen composition")


def _covers(seen, categories, groups) -> bool:
    if {c[0] for c in seen} != set(categories):
        return False
    for gi, (_, values) in enumerate(groups):
        if {c[gi + 1] for c in seen} != set(values):
            return False
    return True


def _default_names(num_categories: int, group_sizes: Sequence[int]):
    categories = tuple(f"{SHAPES[i]}" if i < len(SHAPES) else f"category{i}" for i in range(num_categories))
    group_labels = ("pattern", "hue")
    groups = []
    for gi, size in enumerate(group_sizes):
        label = group_labels[gi] if gi < len(group_labels) else f"group{gi}"
        if gi == 0 and size <= len(PATTERNS):
            values = PATTERNS[:size]
        else:
            values = tuple(f"{label}{j}" for j in range(size))
        groups.append((label, tuple(values)))
    return categories, tuple(groups)


def build_space(num_categories: int, group_sizes: Sequence[int], seen_fraction: float, seed: int,
                max_attempts: int = 1000) -> CompositionSpace:
    """Random seen/unseen split over categories x groups.

    ``ceil(seen_fraction * |Y|)`` compositions are drawn as seen, resampling
    until every category and attribute value occurs in at least one.
    """
    if num_categories < 1 or any(s < 2 for s in group_sizes):
        raise ConfigurationError("need >= 1 category and every group size >= 2")
    categories, groups = _default_names(num_categories, group_sizes)
    every = [tuple(c) for c in itertools.product(categories, *(v for _, v in groups))]
    n_seen = math.ceil(seen_fraction * len(every) - 1e-9)
    if not 1 <= n_seen < len(every):
        raise ConfigurationError(f"seen_fraction {seen_fraction} leaves no seen or no unseen compositions")
    rng = stream(seed, "space")
    for _ in range(max_attempts):
        pick = sorted(rng.choice(len(every), size=n_seen, replace=False).tolist())
        seen = [every[i] for i in pick]
        if _covers(seen, categories, groups):
            unseen = [c for c in every if c not in set(seen)]
            return CompositionSpace(categories, groups, tuple(seen), tuple(unseen))
    raise ConfigurationError(f"no seen set covering every atom after {max_attempts} attempts")


UBC_ROOFS = ("hipped_roof", "gable_roof", "flat_roof", "other_roof")
UBC_USES = ("residential", "commercial", "industrial", "public")


def ubc_space() -> CompositionSpace:
    """One category, 4 roof types x 4 uses, the four diagonal pairs seen."""
    groups = (("roof", UBC_ROOFS), ("use", UBC_USES))
    every = [("building", r, u) for r in UBC_ROOFS for u in UBC_USES]
    seen = tuple(("building", r, u) for r, u in zip(UBC_ROOFS, UBC_USES))
    unseen = tuple(c for c in every if c not in seen)
    return CompositionSpace(("building",), groups, seen, unseen)


# --- rendering ---------------------------------------------------------------------

@dataclass(frozen=True)
class Instance:
    category: str
    attributes: tuple[str, ...]
    mask: np.ndarray  # (H, W) bool

    @property
    def composition(self) -> Composition:
        return (self.category, *self.attributes)


@dataclass
class SynthScene:
    scene_id: str
    split: str
    seed: int
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    instances: list[Instance] = field(default_factory=list)

    def masks(self) -> np.ndarray:
        h, w = self.image.shape[1:]
        if not self.instances:
            return np.zeros((0, h, w), dtype=bool)
        return np.stack([inst.mask for inst in self.instances])


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disc":
        return (yy - c) ** 2 + (xx - c) ** 2 <= c * c
    if shape == "triangle":
        return np.abs(xx - c) <= yy / 2.0
    if shape == "diamond":
        return np.abs(xx - c) + np.abs(yy - c) <= c
    if shape == "plus":
        t = size / 6.0
        return (np.abs(xx - c) <= t) | (np.abs(yy - c) <= t)
    raise ConfigurationError(f"no renderer for shape {shape!r}")


def _pattern(name: str, mask: np.ndarray) -> np.ndarray:
    size = mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    hi, lo = 0.95, 0.45
    if name == "solid":
        lum = np.full(mask.shape, 0.8)
    elif name == "striped":
        lum = np.where((yy // 2) % 2 == 0, hi, lo)
    elif name == "dotted":
        lum = np.where((yy % 4 == 1) & (xx % 4 == 1), hi, lo)
    elif name == "ring":
        inner = mask.copy()
        for _ in range(2):
            inner = _erode(inner)
        lum = np.where(inner, lo, hi)
    elif name == "checker":
        lum = np.where(((yy // 3) + (xx // 3)) % 2 == 0, hi, lo)
    else:
        raise ConfigurationError(f"no renderer for pattern {name!r}")
    return lum


def _erode(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1)
    return m & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]


def _dilate(m: np.ndarray, r: int) -> np.ndarray:
    out = m.copy()
    for _ in range(r):
        p = np.pad(out, 1)
        out = out | p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:] \
            | p[:-2, :-2] | p[:-2, 2:] | p[2:, :-2] | p[2:, 2:]
    return out


def _hue_rgb(index: int, count: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(index / count, 0.75, 1.0))


class Renderer:
    """Maps composition atoms to visual channels for one space."""

    def __init__(self, space: CompositionSpace, image_size: int = 64):
        if image_size < MIN_IMAGE:
            raise ConfigurationError(f"image size must be >= {MIN_IMAGE} to fit instances")
        if space.num_groups > 2:
            raise ConfigurationError("rendering supports at most two attribute groups")
        if len(space.categories) > len(SHAPES):
            raise ConfigurationError(f"at most {len(SHAPES)} categories can be rendered")
        if space.num_groups >= 1 and len(space.groups[0][1]) > len(PATTERNS):
            raise ConfigurationError(f"first group limited to {len(PATTERNS)} values")
        if space.num_groups == 2 and len(space.groups[1][1]) > MAX_HUES:
            raise ConfigurationError(f"second group limited to {MAX_HUES} values")
        self.space = space
        self.size = image_size
        self._shape = {c: SHAPES[i] for i, c in enumerate(space.categories)}
        self._pattern = {v: PATTERNS[j] for j, v in enumerate(space.groups[0][1])} if space.num_groups else {}
        if space.num_groups == 2:
            hues = space.groups[1][1]
            self._hue = {v: _hue_rgb(j, len(hues)) for j, v in enumerate(hues)}
        else:
            self._hue = {}

    def paint(self, comp: Composition, size: int) -> tuple[np.ndarray, np.ndarray]:
        cat, *attrs = comp
        mask = _shape_mask(self._shape[cat], size)
        lum = _pattern(self._pattern[attrs[0]], mask) if attrs else np.full(mask.shape, 0.8)
        rgb = self._hue[attrs[1]] if len(attrs) > 1 else np.ones(3)
        return mask, lum[None] * rgb[:, None, None]


def render_scene(space: CompositionSpace, split: str, seed: int, image_size: int = 64,
                 required: Composition | None = None, scene_id: str | None = None,
                 renderer: Renderer | None = None) -> SynthScene:
    """Draw 2-6 non-touching instances.

    train / test-seen draw from the seen set. test-unseen scenes hold at
    least one unseen composition (``required`` if given) and fill the rest
    from the whole space.
    """
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split {split!r}")
    renderer = renderer or Renderer(space, image_size)
    rng = np.random.default_rng(seed)
    seen = list(space.seen)
    every = space.all_compositions()
    n = int(rng.integers(2, 7))
    comps: list[Composition] = []
    if split == "test-unseen":
        if required is None:
            required = space.unseen[int(rng.integers(len(space.unseen)))]
        if space.is_seen(required):
            raise ConfigurationError("required composition for test-unseen must be unseen")
        comps.append(tuple(required))
        pool = every
    else:
        pool = seen
    while len(comps) < n:
        comps.append(tuple(pool[int(rng.integers(len(pool)))]))

    size = image_size
    image = np.full((3, size, size), BACKGROUND)
    occupied = np.zeros((size, size), dtype=bool)
    instances: list[Instance] = []
    for i, comp in enumerate(comps):
        placed = False
        for _ in range(PLACEMENT_TRIES):
            s = int(rng.integers(12, 19))
            y0, x0 = int(rng.integers(0, size - s + 1)), int(rng.integers(0, size - s + 1))
            local, paint = renderer.paint(comp, s)
            full = np.zeros((size, size), dtype=bool)
            full[y0:y0 + s, x0:x0 + s] = local
            if full.sum() < MIN_PIXELS or (_dilate(full, SEPARATION) & occupied).any():
                continue
            region = image[:, y0:y0 + s, x0:x0 + s]
            region[:, local] = paint[:, local]
            occupied |= full
            instances.append(Instance(comp[0], tuple(comp[1:]), full))
            placed = True
            break
        if not placed:
            if i == 0 and split == "test-unseen":
                raise ConfigurationError(f"could not place required instance in scene seed {seed}")
            # Retry budget exhausted: keep the scene with fewer instances.
            continue
    if not instances:
        raise ConfigurationError(f"placement failed for every instance (seed {seed})")
    image = image + rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SynthScene(scene_id or f"{split}-{seed}", split, int(seed), image, instances)


# --- labels ---------------------------------------------------------------------------

TIERS = ("category-only", "single-attribute", "composed")


@dataclass(frozen=True)
class Prompt:
    category: str
    attributes: tuple[tuple[str, str], ...]  # present (group, value) pairs, group order

    def as_dict(self) -> dict:
        return {"category": self.category, "attributes": dict(self.attributes)}

    @classmethod
    def from_dict(cls, d: Mapping, space: CompositionSpace) -> Prompt:
        attrs = d.get("attributes") or {}
        return cls(d["category"], tuple((g, attrs[g]) for g in space.group_names if attrs.get(g) is not None))

    def attribute_map(self) -> dict[str, str]:
        return dict(self.attributes)


@dataclass(frozen=True)
class LabeledSample:
    scene_id: str
    tier: str
    prompt: Prompt
    targets: tuple[int, ...]

    def bundle(self, vocab: Vocabulary):
        from .prompts import decompose
        return decompose(self.prompt.category, self.prompt.attributes, vocab)

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "tier": self.tier, "prompt": self.prompt.as_dict(),
                "targets": list(self.targets)}


def targets_for(scene: SynthScene, prompt: Prompt, space: CompositionSpace) -> tuple[int, ...]:
    """Indices of instances that satisfy the category and every present attribute."""
    gidx = {g: i for i, g in enumerate(space.group_names)}
    out = []
    for i, inst in enumerate(scene.instances):
        if inst.category != prompt.category:
            continue
        if all(inst.attributes[gidx[g]] == v for g, v in prompt.attributes):
            out.append(i)
    return tuple(out)


def make_labels(scene: SynthScene, space: CompositionSpace, tier_rng: np.random.Generator) -> list[LabeledSample]:
    """Three-tier prompts for one training scene.

    Tier 1 gives a category-only prompt per category present; tier 2 one
    single-attribute prompt per (category, group, value) present; tier 3 adds,
    on top of tier 2, a fully composed prompt for each seen composition present.
    """
    tier = TIERS[int(tier_rng.integers(3))]
    prompts: list[Prompt] = []
    cats = sorted({inst.category for inst in scene.instances}, key=space.categories.index)
    if tier == "category-only":
        prompts = [Prompt(c, ()) for c in cats]
    else:
        singles = set()
        for inst in scene.instances:
            for gi, g in enumerate(space.group_names):
                singles.add((inst.category, g, inst.attributes[gi]))
        order = {g: i for i, g in enumerate(space.group_names)}
        for c, g, v in sorted(singles, key=lambda t: (space.categories.index(t[0]), order[t[1]],
                                                        dict(space.groups)[t[1]].index(t[2]))):
            prompts.append(Prompt(c, ((g, v),)))
        if tier == "composed":
            comps = []
            for inst in scene.instances:
                comp = inst.composition
                if space.is_seen(comp) and comp not in comps:
                    comps.append(comp)
            for comp in comps:
                prompts.append(Prompt(comp[0], tuple(zip(space.group_names, comp[1:]))))
    return [LabeledSample(scene.scene_id, tier, p, targets_for(scene, p, space)) for p in prompts]


def prompt_encodes_unseen(prompt: Prompt, space: CompositionSpace) -> bool:
    """True when a fully specified prompt names an unseen composition."""
    if len(prompt.attributes) < space.num_groups:
        return False
    return not space.is_seen((prompt.category, *(v for _, v in prompt.attributes)))


# --- corpus ---------------------------------------------------------------------------

@dataclass
class Corpus:
    space: CompositionSpace
    seed: int
    image_size: int
    scenes: dict[str, list[SynthScene]]
    samples: list[LabeledSample]

    def scene_index(self) -> dict[str, SynthScene]:
        return {s.scene_id: s for split in self.scenes.values() for s in split}

    def split_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.scenes.items()}


def generate_corpus(space: CompositionSpace, n_train: int = 600, n_test_seen: int = 100,
                    n_test_unseen: int = 100, seed: int = 0, image_size: int = 64,
                    min_unseen_instances: int = 3) -> Corpus:
    check_space(space)
    renderer = Renderer(space, image_size)
    scenes: dict[str, list[SynthScene]] = {s: [] for s in SPLITS}
    counts = {"train": n_train, "test-seen": n_test_seen, "test-unseen": n_test_unseen}
    for split in SPLITS:
        for i in range(counts[split]):
            required = space.unseen[i % len(space.unseen)] if split == "test-unseen" else None
            scene_seed = derive_seed(seed, split, i)
            scenes[split].append(render_scene(space, split, scene_seed, image_size, required,
                                              scene_id=f"{split}-{i:05d}", renderer=renderer))
    if n_test_unseen:
        tally = {c: 0 for c in space.unseen}
        for sc in scenes["test-unseen"]:
            for inst in sc.instances:
                if inst.composition in tally:
                    tally[inst.composition] += 1
        short = [c for c, n in tally.items() if n < min_unseen_instances]
        if short:
            raise ConfigurationError(f"{len(short)} unseen compositions have < {min_unseen_instances} "
                                     f"test instances; raise the test-unseen scene count")
    samples = []
    for i, sc in enumerate(scenes["train"]):
        samples.extend(make_labels(sc, space, stream(seed, "tiers", i)))
    return Corpus(space, int(seed), image_size, scenes, samples)


# --- disk format --------------------------------------------------------------------------
#
# scenes/<scene_id>.bin, little-endian:
#   4s   magic "CSYN"
#   u32  format version (1)
#   u32  channels, u32 height, u32 width, u32 instance count
#   f32  image[channels * height * width], row-major (C, H, W)
#   per instance: ceil(H*W/8) bytes, mask bits packed LSB-first in row-major order

SCENE_MAGIC = b"CSYN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def encode_scene(scene: SynthScene) -> bytes:
    c, h, w = scene.image.shape
    parts = [_HEADER.pack(SCENE_MAGIC, FORMAT_VERSION, c, h, w, len(scene.instances)),
             scene.image.astype("<f4").tobytes()]
    for inst in scene.instances:
        parts.append(np.packbits(inst.mask.reshape(-1), bitorder="little").tobytes())
    return b"".join(parts)


def decode_scene(blob: bytes) -> tuple[np.ndarray, list[np.ndarray]]:
    if len(blob) < _HEADER.size:
        raise FormatError("scene blob shorter than header")
    magic, version, c, h, w, n = _HEADER.unpack_from(blob)
    if magic != SCENE_MAGIC or version != FORMAT_VERSION:
        raise FormatError(f"bad scene header {magic!r} v{version}")
    off = _HEADER.size
    size = c * h * w * 4
    image = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w).astype(np.float32)
    off += size
    nbytes = (h * w + 7) // 8
    masks = []
    for _ in range(n):
        bits = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off)
        masks.append(np.unpackbits(bits, bitorder="little")[: h * w].reshape(h, w).astype(bool))
        off += nbytes
    if off != len(blob):
        raise FormatError("trailing bytes in scene blob")
    return image, masks


def save_corpus(corpus: Corpus, root) -> Path:
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "compseg-dataset",
        "version": FORMAT_VERSION,
        "seed": corpus.seed,
        "image_size": corpus.image_size,
        "space": corpus.space.to_dict(),
        "splits": corpus.split_sizes(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(root / "scenes.jsonl", "w") as fh:
        for split in SPLITS:
            for sc in corpus.scenes[split]:
                rec = {"scene_id": sc.scene_id, "split": sc.split, "seed": sc.seed,
                       "instances": [{"category": i.category, "attributes": list(i.attributes)}
                                     for i in sc.instances]}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                (root / "scenes" / f"{sc.scene_id}.bin").write_bytes(encode_scene(sc))
    with open(root / "samples.jsonl", "w") as fh:
        for s in corpus.samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    return root


def load_corpus(root) -> Corpus:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"no manifest.json under {root}") from None
    if manifest.get("format") != "compseg-dataset":
        raise FormatError("manifest is not a compseg dataset")
    space = CompositionSpace.from_dict(manifest["space"])
    scenes: dict[str, list[SynthScene]] = {s: [] for s in SPLITS}
    with open(root / "scenes.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            image, masks = decode_scene((root / "scenes" / f"{rec['scene_id']}.bin").read_bytes())
            insts = [Instance(m["category"], tuple(m["attributes"]), mask)
                     for m, mask in zip(rec["instances"], masks)]
            scenes[rec["split"]].append(SynthScene(rec["scene_id"], rec["split"], rec["seed"], image, insts))
    samples = []
    with open(root / "samples.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            samples.append(LabeledSample(rec["scene_id"], rec["tier"], Prompt.from_dict(rec["prompt"], space),
                                         tuple(rec["targets"])))
    return Corpus(space, manifest["seed"], manifest["image_size"], scenes, samples)
