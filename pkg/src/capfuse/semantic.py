"""Attribute vocabulary, multi-label attribute classifier and the semantic stream."""
from __future__ import annotations

from collections import Counter
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def default_stopwords() -> frozenset[str]:
    text = resources.files("capfuse.resources").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.split() if w.strip())


class AttributeVocab:
    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate attribute tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, AttributeVocab) and self.tokens == other.tokens

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AttributeVocab":
        return cls([ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln])


def build_attribute_vocab(corpus: Iterable[Sequence[str]], k: int = 300,
                          stopwords: Iterable[str] | None = None) -> AttributeVocab:
    """The ``k`` most frequent non-stopword tokens (length >= 2), ties lexicographic."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("build_attribute_vocab: empty corpus")
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    counts = Counter(t for sent in corpus for t in sent if len(t) >= 2 and t not in stop)
    if len(counts) < k:
        raise ValueError(f"build_attribute_vocab: only {len(counts)} eligible tokens, "
                         f"{k} requested (short by {k - len(counts)})")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return AttributeVocab(ranked[:k])


def attribute_targets(references: Iterable[Sequence[str]], attrs: AttributeVocab) -> np.ndarray:
    """Binary vector: 1 where the attribute appears in any reference."""
    out = np.zeros(len(attrs), dtype=np.float32)
    for ref in references:
        for tok in ref:
            i = attrs.index.get(tok)
            if i is not None:
                out[i] = 1.0
    return out


def init_semantic(rng: np.random.Generator, in_dim: int, k: int, hidden: int = 256) -> dict[str, Tensor]:
    return {
        "W1": T.xavier_uniform(rng, in_dim, hidden),
        "b1": T.zeros(hidden),
        "W2": T.xavier_uniform(rng, hidden, k),
        "b2": T.zeros(k),
    }


def semantic_forward(pooled_visual: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """MLP (tanh hidden, sigmoid output) giving per-attribute probabilities."""
    if pooled_visual.shape[-1] != params["W1"].shape[0]:
        raise T.ShapeError(f"semantic_forward: input dim {pooled_visual.shape[-1]} "
                           f"!= expected {params['W1'].shape[0]}")
    hid = T.tanh(T.linear(pooled_visual, params["W1"], params["b1"]))
    return T.sigmoid(T.linear(hid, params["W2"], params["b2"]))


def bce_loss(probs: Tensor, targets, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    targets = np.asarray(targets, dtype=np.float32)
    if probs.shape != targets.shape:
        raise T.ShapeError(f"bce_loss: probs shape {probs.shape} != targets shape {targets.shape}")
    p = T.clamp(probs, eps, 1.0 - eps)
    ll = T.mul(T.log(p), Tensor(targets)) + T.mul(T.log(T.sub(1.0, p)), Tensor(1.0 - targets))
    return -T.mean(ll)


def assemble_semantic_feature(attr_probs: Tensor, aux_dists: Sequence[Tensor], n_frames: int) -> Tensor:
    """Concatenate attribute and auxiliary distributions, repeat over frames.

    Inputs are ``(k,)`` vectors or ``(B, k)`` batches; the result is
    ``(n_frames, total)`` or ``(B, n_frames, total)``.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    row = T.concat([attr_probs, *aux_dists], axis=-1) if aux_dists else attr_probs
    lead = row.shape[:-1]
    row = T.reshape(row, lead + (1, row.shape[-1]))
    return T.broadcast_to(row, lead + (n_frames, row.shape[-1]))
