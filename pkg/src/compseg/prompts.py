"""Prompt decomposition: symbolic vocabulary, per-unit token sequences, and
the trainable embedding table that stands in for a text encoder."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .nn import Module
from .errors import ContractError, VocabularyError

PAD = "<pad>"
PAD_ID = 0
MAX_TOKENS = 4


@dataclass(frozen=True)
class Vocabulary:
    """Token/id map over category names and attribute values.

    ``groups`` fixes the global attribute group order; every attribute value
    belongs to exactly one group.
    """

    categories: tuple[str, ...]
    groups: tuple[tuple[str, tuple[str, ...]], ...]
    token_to_id: Mapping[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        tokens = [PAD, *self.categories]
        for _, values in self.groups:
            tokens.extend(values)
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate token names in vocabulary")
        object.__setattr__(self, "token_to_id", {tok: i for i, tok in enumerate(tokens)})

    @classmethod
    def build(cls, categories: Sequence[str], groups: Mapping[str, Sequence[str]] | Sequence) -> Vocabulary:
        items = groups.items() if isinstance(groups, Mapping) else groups
        return cls(tuple(categories), tuple((g, tuple(v)) for g, v in items))

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(g for g, _ in self.groups)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def id_of(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    @property
    def _id_to_token(self) -> list[str]:
        inv = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            inv[i] = tok
        return inv

    def to_json(self) -> str:
        return json.dumps(dict(self.token_to_id), sort_keys=False)

    def to_dict(self) -> dict:
        return {"categories": list(self.categories),
                "groups": [[g, list(v)] for g, v in self.groups]}

    @classmethod
    def from_dict(cls, d: Mapping) -> Vocabulary:
        return cls.build(d["categories"], [(g, v) for g, v in d["groups"]])


@dataclass(frozen=True)
class PromptBundle:
    """One decomposed query: category sequence, K category-conditioned
    attribute sequences, presence mask and token validity."""

    category_ids: np.ndarray  # (N_t,)
    attribute_ids: np.ndarray  # (K, N_t)
    presence: np.ndarray  # (K,)
    validity: np.ndarray  # (1 + K, N_t)

    @property
    def num_groups(self) -> int:
        return int(self.attribute_ids.shape[0])

    def key(self) -> tuple:
        return (tuple(self.category_ids.tolist()), tuple(map(tuple, self.attribute_ids.tolist())))


def _pad(ids: Sequence[int], n_t: int) -> np.ndarray:
    if len(ids) > n_t:
        raise ContractError(f"phrase of {len(ids)} tokens exceeds N_t={n_t}")
    out = np.full(n_t, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def decompose(category: str, attributes, vocab: Vocabulary, n_t: int = MAX_TOKENS) -> PromptBundle:
    """Split ``(category, {group: value or None})`` into per-unit sequences.

    Attribute phrase k is ``[value_k, category]`` so each attribute is read
    relative to its object class. Absent groups get presence 0 and a fully
    padded row. ``attributes`` may be a mapping or a list of (group, value)
    pairs; order is irrelevant, the vocabulary's group order is used.
    """
    if category not in vocab.categories:
        raise VocabularyError(f"unknown category {category!r}")
    pairs = list(attributes.items()) if isinstance(attributes, Mapping) else list(attributes)
    chosen: dict[str, str | None] = {}
    for group, value in pairs:
        if group in chosen:
            raise ContractError(f"attribute group {group!r} given twice")
        chosen[group] = value
    members = dict(vocab.groups)
    for group in chosen:
        if group not in members:
            raise VocabularyError(f"unknown attribute group {group!r}")

    cat_id = vocab.id_of(category)
    k = vocab.num_groups
    attr_ids = np.full((k, n_t), PAD_ID, dtype=np.int64)
    presence = np.zeros(k, dtype=np.int64)
    for gi, (group, values) in enumerate(vocab.groups):
        value = chosen.get(group)
        if value is None:
            continue
        if value not in values:
            raise VocabularyError(f"{value!r} is not a member of group {group!r}")
        attr_ids[gi] = _pad([vocab.id_of(value), cat_id], n_t)
        presence[gi] = 1
    cat_ids = _pad([cat_id], n_t)
    validity = np.concatenate([cat_ids[None], attr_ids], axis=0) != PAD_ID
    return PromptBundle(cat_ids, attr_ids, presence, validity.astype(np.int64))


def detokenize(bundle: PromptBundle, vocab: Vocabulary) -> tuple[str, dict[str, str | None]]:
    names = vocab._id_to_token
    category = names[int(bundle.category_ids[0])]
    attrs: dict[str, str | None] = {}
    for gi, group in enumerate(vocab.group_names):
        attrs[group] = names[int(bundle.attribute_ids[gi, 0])] if bundle.presence[gi] else None
    return category, attrs


def concat_prompt(bundle: PromptBundle) -> np.ndarray:
    """Single entangled sequence ``[attr_1 .. attr_K (present only), category]``."""
    n_t = bundle.category_ids.shape[0]
    ids = [int(bundle.attribute_ids[k, 0]) for k in range(bundle.num_groups) if bundle.presence[k]]
    ids.append(int(bundle.category_ids[0]))
    return _pad(ids, n_t)


def as_concat_bundle(bundle: PromptBundle) -> PromptBundle:
    """Recast a bundle so the concatenated sequence is the only active branch."""
    seq = concat_prompt(bundle)
    k, n_t = bundle.attribute_ids.shape
    attr_ids = np.zeros((k, n_t), dtype=np.int64)
    validity = np.zeros((1 + k, n_t), dtype=np.int64)
    validity[0] = seq != PAD_ID
    return PromptBundle(seq, attr_ids, np.zeros(k, dtype=np.int64), validity)


@dataclass(frozen=True)
class BundleBatch:
    category_ids: np.ndarray  # (B, N_t)
    attribute_ids: np.ndarray  # (K, B, N_t)
    presence: np.ndarray  # (K, B)
    validity: np.ndarray  # (1 + K, B, N_t)

    @property
    def batch_size(self) -> int:
        return int(self.category_ids.shape[0])

    @property
    def num_groups(self) -> int:
        return int(self.attribute_ids.shape[0])

    @classmethod
    def stack(cls, bundles: Sequence[PromptBundle]) -> BundleBatch:
        if not bundles:
            raise ContractError("cannot batch zero bundles")
        return cls(
            np.stack([b.category_ids for b in bundles]),
            np.stack([b.attribute_ids for b in bundles], axis=1),
            np.stack([b.presence for b in bundles], axis=1),
            np.stack([b.validity for b in bundles], axis=1),
        )


class EmbeddingTable(Module):
    """Trainable ``|V| x C`` token table; row 0 (padding) is pinned at zero."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator | None = None, std: float = 1.0):
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, std, size=(vocab_size, dim))
        w[PAD_ID] = 0.0
        self.weights = T.Tensor(w, requires_grad=True)

    def enforce_padding(self) -> None:
        self.weights.data[PAD_ID] = 0.0

    def lookup(self, ids: np.ndarray, validity: np.ndarray) -> T.Tensor:
        emb = T.embedding(self.weights, ids)
        return emb * np.asarray(validity, dtype=np.float64)[..., None]


def embed(bundle: PromptBundle | BundleBatch, table: EmbeddingTable) -> tuple[T.Tensor, T.Tensor]:
    """Token embeddings for the category branch and each attribute branch.

    Single bundle -> ``(N_t, C)`` and ``(K, N_t, C)``; batch -> ``(B, N_t, C)``
    and ``(K, B, N_t, C)``. Padding positions are exactly zero and receive no
    gradient.
    """
    t_c = table.lookup(bundle.category_ids, bundle.validity[0])
    t_a = table.lookup(bundle.attribute_ids, bundle.validity[1:])
    return t_c, t_a
