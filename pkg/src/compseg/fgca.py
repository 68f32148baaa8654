"""Feature-Gated Cross-Attention.

The category phrase drives an ordinary cross-attention branch. Each
attribute phrase drives its own gate ``sigmoid(W . LN(CA(Q, T_a)))`` and the
gates are multiplied together, so a feature survives only where every
specified attribute agrees. Absent attributes are neutralised to a gate of
exactly one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DegenerateInputError
from .nn import Module, glorot, ones, param, zeros

FUSION_MODES = ("gate", "off", "add")


class CrossAttention(Module):
    """Multi-head scaled dot-product cross-attention with key masking.

    ``keys`` may carry extra leading dims in front of the batch dim; the
    query projections are then broadcast over them, which is how several
    attribute branches share one pass.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.wq, self.bq = glorot(rng, dim, dim), zeros(dim)
        self.wk, self.bk = glorot(rng, dim, dim), zeros(dim)
        self.wv, self.bv = glorot(rng, dim, dim), zeros(dim)
        self.wo, self.bo = glorot(rng, dim, dim), zeros(dim)

    def _split(self, x: T.Tensor) -> T.Tensor:
        *lead, n, c = x.shape
        x = x.reshape(*lead, n, self.heads, c // self.heads)
        r = len(lead)
        return x.transpose(*range(r), r + 1, r, r + 2)

    def attend(self, queries: T.Tensor, keys: T.Tensor, validity, active=None):
        """Return ``(output, weights)``; weights have shape (..., B, h, N, N_t)."""
        valid = np.asarray(validity, dtype=bool)
        if active is not None:
            act = np.broadcast_to(np.asarray(active, dtype=bool), valid.shape[:-1])
            if np.any(act & ~valid.any(axis=-1)):
                raise DegenerateInputError("active branch has no valid key tokens")
            # Inactive rows attend uniformly; their output is discarded by the caller.
            valid = valid | ~act[..., None]
        elif not np.all(valid.any(axis=-1)):
            raise DegenerateInputError("cross-attention row with no valid key tokens")

        q = self._split(queries @ self.wq + self.bq)
        k = self._split(keys @ self.wk + self.bk)
        v = self._split(keys @ self.wv + self.bv)
        d = self.dim // self.heads
        scores = T.scale(q @ k.transpose(), 1.0 / np.sqrt(d))
        weights = T.softmax(scores, mask=valid[..., None, None, :])
        ctx = weights @ v  # (..., B, h, N, d)
        r = ctx.ndim - 4
        *lead, b, h, n, _ = ctx.shape
        ctx = ctx.transpose(*range(r), r, r + 2, r + 1, r + 3).reshape(*lead, b, n, self.dim)
        return ctx @ self.wo + self.bo, weights

    def __call__(self, queries, keys, validity, active=None) -> T.Tensor:
        return self.attend(queries, keys, validity, active)[0]


def neutralize(gate: T.Tensor, present) -> T.Tensor:
    """``m * G + (1 - m)`` with ``m`` broadcast over the trailing (N, C) dims."""
    m = np.asarray(present, dtype=np.float64)[..., None, None]
    return gate * m + (1.0 - m)


@dataclass
class GatedFeatures:
    q_c: T.Tensor  # (B, N, C)
    gates: T.Tensor | None  # (K, B, N, C), neutralised
    g_total: T.Tensor | None  # (B, N, C)
    f_out: T.Tensor  # (B, N, C)
    category_attention: T.Tensor | None = None  # (B, h, N, N_t)


class FGCA(Module):
    """Category cross-attention modulated by per-attribute sigmoid gates.

    ``fusion`` selects how attribute branches enter the output:
    ``"gate"`` multiplies neutralised gates (the AND path), ``"off"`` ignores
    attributes, ``"add"`` sums normalised attribute features onto the
    category features.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, fusion: str = "gate",
                 alpha: float = 1.0, gate_bias: float = 2.0):
        if fusion not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion mode {fusion!r}")
        self.fusion = fusion
        self.alpha = float(alpha)
        self.cat_attn = CrossAttention(dim, heads, rng)
        self.cat_ln_g, self.cat_ln_b = ones(dim), zeros(dim)
        self.attr_attn = CrossAttention(dim, heads, rng)
        self.attr_ln_g, self.attr_ln_b = ones(dim), zeros(dim)
        self.gate_w = glorot(rng, dim, dim)
        self.gate_b = param(np.full(dim, float(gate_bias)))

    def category_branch(self, queries, t_c, valid_c):
        out, weights = self.cat_attn.attend(queries, t_c, valid_c)
        return T.layernorm(out, self.cat_ln_g, self.cat_ln_b), weights

    def attribute_features(self, queries, t_a, valid_a, present) -> T.Tensor:
        """``LN(CA(Q, T_a))`` for every branch at once: (K, B, N, C)."""
        out = self.attr_attn(queries, t_a, valid_a, active=present)
        return T.layernorm(out, self.attr_ln_g, self.attr_ln_b)

    def attribute_gate(self, queries, t_a, valid_a, present=None) -> T.Tensor:
        if present is None:
            present = np.ones(np.shape(valid_a)[:-1], dtype=bool)
        feats = self.attribute_features(queries, t_a, valid_a, present)
        return T.sigmoid(feats @ self.gate_w + self.gate_b)

    def __call__(self, queries, t_c, valid_c, t_a, valid_a, present) -> GatedFeatures:
        q_c, weights = self.category_branch(queries, t_c, valid_c)
        present = np.asarray(present)
        k = present.shape[0] if present.ndim else 0
        if self.fusion == "off" or k == 0 or not present.any():
            f_out = q_c if self.alpha == 1.0 else T.scale(q_c, self.alpha)
            return GatedFeatures(q_c, None, None, f_out, weights)

        if self.fusion == "add":
            feats = self.attribute_features(queries, t_a, valid_a, present)
            m = present.astype(np.float64)[..., None, None]
            f_out = q_c + (feats * m).sum(axis=0)
            if self.alpha != 1.0:
                f_out = T.scale(f_out, self.alpha)
            return GatedFeatures(q_c, None, None, f_out, weights)

        gates = neutralize(self.attribute_gate(queries, t_a, valid_a, present), present)
        g_total = gates[0]
        for i in range(1, k):
            g_total = g_total * gates[i]
        f_out = q_c * g_total
        if self.alpha != 1.0:
            f_out = T.scale(f_out, self.alpha)
        return GatedFeatures(q_c, gates, g_total, f_out, weights)
