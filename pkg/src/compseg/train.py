"""Set-prediction training: Hungarian matching, score loss and mask losses, Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, NonFiniteError
from .model import SegModel
from .nn import Adam
from .prompts import PromptBundle
from .rng import stream
from .scoring import match_queries, score_loss
from .synth import Corpus

WEIGHT_SCORE = 1.0
WEIGHT_DICE = 5.0
WEIGHT_BCE = 1.0


@dataclass(frozen=True)
class TrainItem:
    key: str
    image: np.ndarray  # (3, H, W)
    bundle: PromptBundle
    targets: np.ndarray  # (G, H*W) bool


class TrainingDiverged(NonFiniteError):
    def __init__(self, message: str, dump_path: Path | None):
        super().__init__(message)
        self.dump_path = dump_path


def items_from_corpus(corpus: Corpus) -> list[TrainItem]:
    vocab = corpus.space.vocab()
    scenes = corpus.scene_index()
    items = []
    for i, s in enumerate(corpus.samples):
        sc = scenes[s.scene_id]
        masks = sc.masks().reshape(len(sc.instances), -1)
        items.append(TrainItem(f"{s.scene_id}#{i}", sc.image, s.bundle(vocab), masks[list(s.targets)]))
    return items


def mask_losses(logits: T.Tensor, targets: np.ndarray, smooth: float = 1.0) -> tuple[T.Tensor, T.Tensor]:
    """Mean soft-Dice loss and mean per-pixel BCE for matched (M, P) logits."""
    t = np.asarray(targets, dtype=np.float64)
    p = T.sigmoid(logits)
    inter = (p * t).sum(axis=-1)
    dice = (inter * 2.0 + smooth) / (p.sum(axis=-1) + (t.sum(axis=-1) + smooth))
    dice_loss = (1.0 - dice).mean()
    bce = (T.softplus(logits) - logits * t).mean()
    return dice_loss, bce


def batch_loss(model: SegModel, items: Sequence[TrainItem]) -> tuple[T.Tensor, dict]:
    images = np.stack([it.image for it in items])
    out = model.forward(images, model.prepare([it.bundle for it in items]))
    ell = out.score.score.data
    masks = out.masks
    labels = np.zeros_like(ell)
    rows, cols, tgt = [], [], []
    for b, it in enumerate(items):
        a = match_queries(ell[b], masks[b], it.targets)
        labels[b] = a.labels
        rows.extend([b] * len(a.query_idx))
        cols.extend(a.query_idx.tolist())
        tgt.extend(it.targets[j] for j in a.target_idx)
    l_score = score_loss(out.score, labels)
    total = l_score * WEIGHT_SCORE
    stats = {"score": l_score.item(), "dice": 0.0, "bce": 0.0, "matched": len(rows)}
    if rows:
        matched = out.mask_logits[np.array(rows), np.array(cols)]
        l_dice, l_bce = mask_losses(matched, np.stack(tgt))
        total = total + l_dice * WEIGHT_DICE + l_bce * WEIGHT_BCE
        stats["dice"], stats["bce"] = l_dice.item(), l_bce.item()
    stats["total"] = total.item()
    return total, stats


class Trainer:
    """Owns the optimiser; the only writer of the model state."""

    def __init__(self, model: SegModel, dump_dir: Path | None = None):
        self.model = model
        self.opt = Adam(model.parameters(), lr=model.cfg.lr)
        self.epoch = 0
        self.step_count = 0
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None

    def step(self, items: Sequence[TrainItem]) -> dict:
        self.opt.zero_grad()
        try:
            loss, stats = batch_loss(self.model, items)
            if not np.isfinite(loss.data).all():
                raise NonFiniteError("loss")
            loss.backward()
        except TrainingDiverged:
            raise
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value ({exc}) at step {self.step_count}",
                                   self._dump(items, {})) from exc
        bad = [n for n, p in self.model.named_parameters() if p.grad is not None and not np.isfinite(p.grad).all()]
        if bad:
            raise TrainingDiverged(f"non-finite gradient in {bad[:3]} at step {self.step_count}",
                                   self._dump(items, stats, bad))
        self.opt.step()
        self.model.table.enforce_padding()
        self.step_count += 1
        return stats

    def _dump(self, items, stats, bad=()) -> Path | None:
        if self.dump_dir is None:
            return None
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        path = self.dump_dir / f"diverged-step{self.step_count}.json"
        norms = {n: float(np.linalg.norm(p.data)) for n, p in self.model.named_parameters()}
        path.write_text(json.dumps({
            "epoch": self.epoch, "step": self.step_count, "items": [it.key for it in items],
            "stats": {k: float(v) for k, v in stats.items()}, "bad_grads": list(bad),
            "param_norms": norms,
        }, indent=2, sort_keys=True))
        return path

    def train_epoch(self, items: Sequence[TrainItem], on_step: Callable[[dict], None] | None = None) -> dict:
        if not items:
            raise ContractError("empty training set")
        bs = self.model.cfg.batch_size
        order = stream(self.model.cfg.seed, "shuffle", self.epoch).permutation(len(items))
        sums: dict[str, float] = {}
        n = 0
        for start in range(0, len(order), bs):
            stats = self.step([items[i] for i in order[start:start + bs]])
            if on_step:
                on_step(stats)
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        self.epoch += 1
        return {k: v / n for k, v in sums.items()} | {"epoch": self.epoch}

    def fit(self, items: Sequence[TrainItem], epochs: int | None = None,
            on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
        history = []
        target = self.model.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            stats = self.train_epoch(items)
            history.append(stats)
            if on_epoch:
                on_epoch(stats)
        return history
