"""Decomposed matching scores, AND aggregation in log space, the matching
losses, and the Hungarian query matcher."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .nn import Module, glorot

LOG_CLAMP = -1e-7
PROB_EPS = 1e-7


class AggregationMode(str, enum.Enum):
    LOG_AND = "log_and"
    PROB_PRODUCT = "prob_product"
    MEAN_LOGIT = "mean_logit"
    MAX_LOGIT = "max_logit"
    ADDITIVE = "additive"

    @classmethod
    def parse(cls, value) -> AggregationMode:
        try:
            return cls(value)
        except ValueError:
            raise ConfigurationError(f"unknown aggregation mode {value!r}") from None


class ScoreHead(Module):
    """Shared query/text projections into a ``d_e``-dimensional matching space."""

    def __init__(self, dim: int, embed_dim: int, rng: np.random.Generator, temperature: float = 1.0):
        if temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        self.temperature = float(temperature)
        self.embed_dim = embed_dim
        self.proj_q = glorot(rng, dim, embed_dim)
        self.proj_t = glorot(rng, dim, embed_dim)

    def branch_logits(self, h: T.Tensor, pooled_text: T.Tensor) -> T.Tensor:
        """``S[b, n] = <P_q H[b, n], P_t t[b]> / (tau * sqrt(d_e))``.

        ``pooled_text`` may carry leading branch dims: (..., B, C) -> (..., B, N).
        """
        qp = h @ self.proj_q  # (B, N, d_e)
        tp = pooled_text @ self.proj_t  # (..., B, d_e)
        tp = tp.reshape(*tp.shape, 1)  # (..., B, d_e, 1)
        s = (qp @ tp).reshape(*tp.shape[:-2], h.shape[1])
        return T.scale(s, 1.0 / (self.temperature * np.sqrt(self.embed_dim)))


def branch_logits(h, pooled_text, head: ScoreHead) -> T.Tensor:
    return head.branch_logits(h, pooled_text)


@dataclass
class CompositionalScore:
    s_c: T.Tensor  # (B, N)
    s_a: T.Tensor | None  # (K, B, N)
    l_c: T.Tensor
    l_a: T.Tensor | None
    score: T.Tensor  # (B, N): log-probability under the chosen mode
    active_count: np.ndarray  # (B,)
    mode: AggregationMode
    native: T.Tensor  # log-prob (LOG_AND), probability (PROB_PRODUCT) or logit

    def probabilities(self) -> np.ndarray:
        return np.exp(self.score.data)


def aggregate_log_and(s_c, s_a, present, normalize: bool = True) -> T.Tensor:
    """``(log sig S_c + sum_k m_k log sig S_ak) / (1 + sum_k m_k)``."""
    s_c = T.as_tensor(s_c)
    total = T.log_sigmoid(s_c)
    count = np.ones(s_c.shape[:1])
    if s_a is not None and np.size(present):
        m = np.asarray(present, dtype=np.float64)
        total = total + (T.log_sigmoid(s_a) * m[..., None]).sum(axis=0)
        count = count + m.sum(axis=0)
    if not normalize:
        return total
    return T.div(total, count[:, None])


def aggregate_variant(mode: AggregationMode, s_c, s_a, present) -> T.Tensor:
    """Per-mode aggregate: log-probability (LOG_AND), probability (PROB_PRODUCT), else a logit."""
    mode = AggregationMode(mode)
    s_c = T.as_tensor(s_c)
    has_attr = s_a is not None and np.size(present) > 0
    m = np.asarray(present, dtype=np.float64)[..., None] if has_attr else None
    if mode is AggregationMode.LOG_AND:
        return aggregate_log_and(s_c, s_a, present)
    if mode is AggregationMode.PROB_PRODUCT:
        p = T.sigmoid(s_c)
        if has_attr:
            factors = T.sigmoid(s_a) * m + (1.0 - m)
            for k in range(factors.shape[0]):
                p = p * factors[k]
        return p
    if mode is AggregationMode.MEAN_LOGIT:
        if not has_attr:
            return s_c
        count = 1.0 + m.sum(axis=0)
        return T.div(s_c + (s_a * m).sum(axis=0), count)
    if mode is AggregationMode.MAX_LOGIT:
        if not has_attr:
            return s_c
        # Inactive branches are replaced by S_c, which is always in the max.
        branches = T.where(np.broadcast_to(m > 0, s_a.shape), s_a, T.stack([s_c] * s_a.shape[0]))
        return T.max_(T.concat([s_c.reshape(1, *s_c.shape), branches], axis=0), axis=0)
    if mode is AggregationMode.ADDITIVE:
        if not has_attr:
            return s_c
        return s_c + (s_a * m).sum(axis=0)
    raise ConfigurationError(f"unhandled mode {mode}")


def compose_score(mode: AggregationMode, s_c: T.Tensor, s_a: T.Tensor | None, present) -> CompositionalScore:
    mode = AggregationMode(mode)
    present = np.asarray(present)
    count = 1.0 + (present.sum(axis=0) if present.size else np.zeros(s_c.shape[0]))
    l_c = T.log_sigmoid(s_c)
    l_a = T.log_sigmoid(s_a) if s_a is not None else None
    native = aggregate_variant(mode, s_c, s_a, present)
    if mode is AggregationMode.LOG_AND:
        score = native
    elif mode is AggregationMode.PROB_PRODUCT:
        score = T.log(T.clamp(native, PROB_EPS, None))
    else:
        score = T.log_sigmoid(native)
    return CompositionalScore(s_c, s_a, l_c, l_a, score, count, mode, native)


def log_space_bce(ell, y) -> T.Tensor:
    """Mean of ``-y ell - (1 - y) log(1 - exp(ell))`` with ``ell <= -1e-7`` on the negative term."""
    ell = T.as_tensor(ell)
    y = np.asarray(y, dtype=np.float64)
    if np.any(ell.data > 0):
        raise ContractError("log-probabilities must be <= 0")
    neg = T.log1mexp(T.clamp(ell, None, LOG_CLAMP))
    loss = -(ell * y) - neg * (1.0 - y)
    return loss.mean()


def prob_space_bce(p, y, eps: float = PROB_EPS) -> T.Tensor:
    """Plain BCE on a probability, with the probability clamped to [eps, 1 - eps]."""
    p = T.clamp(T.as_tensor(p), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    loss = -(T.log(p) * y) - T.log(1.0 - p) * (1.0 - y)
    return loss.mean()


def logit_bce(z, y) -> T.Tensor:
    """BCE on logits: ``softplus(z) - y z``."""
    z = T.as_tensor(z)
    y = np.asarray(y, dtype=np.float64)
    return (T.softplus(z) - z * y).mean()


def score_loss(score: CompositionalScore, y) -> T.Tensor:
    """Training loss matching the aggregation mode's native space."""
    if score.mode is AggregationMode.LOG_AND:
        return log_space_bce(score.score, y)
    if score.mode is AggregationMode.PROB_PRODUCT:
        return prob_space_bce(score.native, y)
    return logit_bce(score.native, y)


# --- matching ------------------------------------------------------------------

def dice(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0) -> np.ndarray:
    """Pairwise soft Dice between (Q, P) predictions and (G, P) targets -> (Q, G)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    inter = pred @ target.T
    return (2.0 * inter + smooth) / (pred.sum(1)[:, None] + target.sum(1)[None, :] + smooth)


@dataclass(frozen=True)
class Assignment:
    query_idx: np.ndarray
    target_idx: np.ndarray
    labels: np.ndarray  # (N,) 1 for matched queries
    cost: float


def solve_assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost matching of targets (columns) to queries (rows)."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols, kind="stable")
    return rows[order], cols[order]


def match_queries(scores: np.ndarray, masks: np.ndarray, targets: np.ndarray,
                  weight_score: float = 2.0, weight_mask: float = 5.0) -> Assignment:
    """Hungarian matching of queries to ground-truth instances.

    ``scores``: (N,) log-probabilities; ``masks``: (N, P) soft masks;
    ``targets``: (G, P) binary masks. Cost = ``ws * (-ell) + wm * (1 - Dice)``.
    """
    n = len(scores)
    labels = np.zeros(n, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.size == 0 or targets.shape[0] == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Assignment(empty, empty, labels, 0.0)
    cost = weight_score * (-np.asarray(scores, dtype=np.float64))[:, None] \
        + weight_mask * (1.0 - dice(masks, targets.reshape(targets.shape[0], -1)))
    rows, cols = solve_assignment(cost)
    labels[rows] = 1.0
    return Assignment(rows, cols, labels, float(cost[rows, cols].sum()))


def dump_scores(path, records: Iterable[dict]) -> None:
    """Write per-query score records as JSON lines."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def score_records(image_id, prompt: dict, score: CompositionalScore, b: int) -> list[dict]:
    out = []
    n = score.score.shape[1]
    for q in range(n):
        out.append({
            "image": image_id,
            "prompt": prompt,
            "query": q,
            "l_c": float(score.l_c.data[b, q]),
            "l_a": [] if score.l_a is None else [float(v) for v in score.l_a.data[:, b, q]],
            "l": float(score.score.data[b, q]),
        })
    return out
