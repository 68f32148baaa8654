"""Desk-scale query-based segmenter with feature gating at three stages.

Pixel tokens come from a patch MLP. A first FGCA conditions the pixel tokens
on the prompt, each decoder layer lets the object queries read the pixels and
then applies its own FGCA, and a last FGCA gates the queries right before the
mask dot product. Scores come from the decomposed score head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .fgca import FGCA, FUSION_MODES, CrossAttention, GatedFeatures
from .nn import Module, glorot, ones, param, zeros
from .prompts import BundleBatch, EmbeddingTable, PromptBundle, Vocabulary, as_concat_bundle
from .rng import stream
from .scoring import LOG_CLAMP, AggregationMode, CompositionalScore, ScoreHead, compose_score

PROMPT_STRATEGIES = ("decomposed", "concat")


@dataclass(frozen=True)
class ModelConfig:
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

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigurationError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion {self.fusion!r}")
        if self.prompt_strategy not in PROMPT_STRATEGIES:
            raise ConfigurationError(f"unknown prompt strategy {self.prompt_strategy!r}")
        AggregationMode.parse(self.aggregation)
        for name in ("queries", "depth", "embed_dim", "pixel_dim", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.lr < 0:
            raise ConfigurationError("lr must be >= 0")

    @property
    def gating(self) -> bool:
        return self.fusion == "gate"

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """1-D bilinear interpolation weights (out, in), half-pixel centres, edge clamped."""
    a = np.zeros((out_size, in_size))
    src = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    a[np.arange(out_size), lo] += 1.0 - frac
    a[np.arange(out_size), hi] += frac
    return a


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, 3, H, W) -> (B, H/p * W/p, 3 p p) row-major over the patch grid."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.dim
        self.cross = CrossAttention(c, cfg.heads, rng)
        self.ln1_g, self.ln1_b = ones(c), zeros(c)
        self.ff_w1, self.ff_b1 = glorot(rng, c, 2 * c), zeros(2 * c)
        self.ff_w2, self.ff_b2 = glorot(rng, 2 * c, c), zeros(c)
        self.ln2_g, self.ln2_b = ones(c), zeros(c)
        self.fgca = FGCA(c, cfg.heads, rng, cfg.fusion, cfg.alpha, cfg.gate_bias)

    def __call__(self, q, pixels, pixel_valid, text) -> tuple[T.Tensor, GatedFeatures]:
        q = T.layernorm(q + self.cross(q, pixels, pixel_valid), self.ln1_g, self.ln1_b)
        ff = T.relu(q @ self.ff_w1 + self.ff_b1) @ self.ff_w2 + self.ff_b2
        q = T.layernorm(q + ff, self.ln2_g, self.ln2_b)
        gated = self.fgca(q, *text)
        return q + gated.f_out, gated


@dataclass
class ForwardOutput:
    score: CompositionalScore  # score.score: (B, N) log-probabilities
    mask_logits: T.Tensor  # (B, N, H*W)
    stages: dict  # stage name -> GatedFeatures

    @property
    def masks(self) -> np.ndarray:
        from scipy.special import expit
        return expit(self.mask_logits.data)


@dataclass(frozen=True)
class Detection:
    score: float  # exp(l)
    log_score: float
    mask: np.ndarray  # (H, W) bool
    query: int


class SegModel(Module):
    """All trainable state lives on this object; ``forward`` is a pure function of it."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        self.cfg = cfg
        self.vocab = vocab
        rng = stream(cfg.seed, "init")
        c, p = cfg.dim, cfg.patch
        g = cfg.grid
        self.patch_w1, self.patch_b1 = glorot(rng, 3 * p * p, c), zeros(c)
        self.patch_w2, self.patch_b2 = glorot(rng, c, c), zeros(c)
        self.pos = param(rng.normal(0.0, 0.1, size=(g * g, c)))
        self.enc_fgca = FGCA(c, cfg.heads, rng, cfg.fusion, cfg.alpha, cfg.gate_bias)
        self.query_embed = param(rng.normal(0.0, 1.0, size=(cfg.queries, c)))
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.depth)]
        self.mask_fgca = FGCA(c, cfg.heads, rng, cfg.fusion, cfg.alpha, cfg.gate_bias)
        self.pix_w, self.pix_b = glorot(rng, 3, cfg.pixel_dim), zeros(cfg.pixel_dim)
        self.mask_pix = glorot(rng, c, cfg.pixel_dim)
        self.score_head = ScoreHead(c, cfg.embed_dim, rng, cfg.temperature)
        self.table = EmbeddingTable(len(vocab), c, rng, std=1.0)
        a = bilinear_matrix(cfg.image_size, g)
        self._upsample = np.kron(a, a).T.copy()  # (G, H*W)

    @property
    def mode(self) -> AggregationMode:
        return AggregationMode(self.cfg.aggregation)

    def prepare(self, bundles: Sequence[PromptBundle]) -> BundleBatch:
        """Apply the prompt strategy and batch."""
        if self.cfg.prompt_strategy == "concat":
            bundles = [as_concat_bundle(b) for b in bundles]
        return BundleBatch.stack(list(bundles))

    def _text(self, batch: BundleBatch):
        t_c = self.table.lookup(batch.category_ids, batch.validity[0])
        t_a = self.table.lookup(batch.attribute_ids, batch.validity[1:])
        return t_c, t_a

    def forward(self, images, batch: BundleBatch) -> ForwardOutput:
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        b = images.shape[0]
        if images.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise DimensionError(f"expected images (B, 3, {cfg.image_size}, {cfg.image_size}), got {images.shape}")
        if batch.batch_size != b:
            raise DimensionError(f"{b} images but {batch.batch_size} prompts")
        if batch.num_groups != self.vocab.num_groups:
            raise DimensionError(f"prompt has {batch.num_groups} groups, vocabulary {self.vocab.num_groups}")

        t_c, t_a = self._text(batch)
        valid_c, valid_a = batch.validity[0], batch.validity[1:]
        present = batch.presence
        text = (t_c, valid_c, t_a, valid_a, present)

        # stage (i): prompt-conditioned pixel tokens
        x = T.relu(patchify(images, cfg.patch) @ self.patch_w1 + self.patch_b1)
        x = x @ self.patch_w2 + self.patch_b2 + self.pos
        enc = self.enc_fgca(x, *text)
        x = x + enc.f_out
        pixel_valid = np.ones((b, x.shape[1]), dtype=bool)

        # stage (ii): decoder
        stages = {"encode": enc}
        q = T.Tensor(np.broadcast_to(0.0, (b, cfg.queries, cfg.dim))) + self.query_embed
        for i, layer in enumerate(self.layers):
            q, stages[f"decode{i}"] = layer(q, x, pixel_valid, text)
        h = q

        # stage (iii): gated queries feed the mask head
        mg = self.mask_fgca(h, *text)
        stages["mask"] = mg
        m = h + mg.f_out
        coarse = T.scale(m @ x.transpose(), 1.0 / np.sqrt(cfg.dim)) @ self._upsample
        rgb = images.reshape(b, 3, -1).transpose(0, 2, 1)  # (B, P, 3)
        phi = T.relu(T.Tensor(rgb) @ self.pix_w + self.pix_b)
        fine = T.scale((m @ self.mask_pix) @ phi.transpose(), 1.0 / np.sqrt(cfg.dim))
        mask_logits = coarse + fine

        # scores
        pooled_c = T.mean_pool_masked(t_c, valid_c)
        # absent branches pool a dummy token; the aggregator ignores them
        va = np.array(valid_a, dtype=bool)
        va[..., 0] |= ~np.asarray(present, dtype=bool)
        pooled_a = T.mean_pool_masked(t_a, va)
        s_c = self.score_head.branch_logits(h, pooled_c)
        s_a = self.score_head.branch_logits(h, pooled_a) if batch.num_groups else None
        score = compose_score(self.mode, s_c, s_a, present)
        return ForwardOutput(score, mask_logits, stages)

    __call__ = forward

    def predict(self, image, bundle: PromptBundle, threshold: float = 0.3) -> list[Detection]:
        """Queries with ``exp(l) >= threshold``, masks binarised at 0.5, best first."""
        if not 0.0 < threshold <= 1.0:
            raise ConfigurationError("threshold must lie in (0, 1]")
        return self.predict_batch(np.asarray(image)[None], [bundle], threshold)[0]

    def predict_batch(self, images, bundles: Sequence[PromptBundle], threshold: float = 0.3) -> list[list[Detection]]:
        with T.no_grad():
            out = self.forward(images, self.prepare(bundles))
        # exp of the clamped score stays strictly below one
        ell = np.minimum(out.score.score.data, LOG_CLAMP)
        logits = out.mask_logits.data
        size = self.cfg.image_size
        results = []
        for i in range(ell.shape[0]):
            dets = []
            for n in np.argsort(-ell[i], kind="stable"):
                s = float(np.exp(ell[i, n]))
                if s >= threshold:
                    dets.append(Detection(s, float(ell[i, n]), (logits[i, n] > 0).reshape(size, size), int(n)))
            results.append(dets)
        return results
