"""Per-modality embedding and the step-wise modality attention that fuses them.

Shapes (batch-first):
    modality features   X_i   (B, N, D_i)
    embedded            V_i   (B, N, d)
    decoder hidden      h     (B, H)

For each step the attention scores every frame column with
``tanh(W_h h + sum_i W_v,i V_i)``, projects to one score per modality, averages
those scores over frames and normalises across modalities.  The fused feature
is the weighted sum of the V_i.
"""
from __future__ import annotations

from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class FusedStep(NamedTuple):
    weights: Tensor  # (B, n)
    fused: Tensor    # (B, N, d)


def init_fusion(rng: np.random.Generator, modality_dims: Mapping[str, int], d: int,
                h_dim: int, att_dim: int | None = None) -> dict[str, Tensor]:
    att_dim = att_dim or d
    n = len(modality_dims)
    if n < 1:
        raise ValueError("fusion needs at least one modality")
    p = {}
    for name, dim in modality_dims.items():
        p[f"embed.{name}.W"] = T.xavier_uniform(rng, dim, d)
        p[f"embed.{name}.b"] = T.zeros(d)
        p[f"W_v.{name}"] = T.xavier_uniform(rng, d, att_dim)
    p["W_h"] = T.xavier_uniform(rng, h_dim, att_dim)
    p["W_a"] = T.xavier_uniform(rng, att_dim, n)
    return p


def embed_modalities(features: Mapping[str, Tensor], params: Mapping[str, Tensor],
                     names: Sequence[str], activation: str = "relu") -> list[Tensor]:
    """``relu(X_i W_i + b_i)`` for each modality in ``names`` order."""
    out = []
    for name in names:
        if f"embed.{name}.W" not in params:
            raise KeyError(f"embed_modalities: unknown modality {name!r}")
        if name not in features:
            raise KeyError(f"embed_modalities: bundle lacks modality {name!r}")
        x = T.as_tensor(features[name])
        w = params[f"embed.{name}.W"]
        if x.shape[-1] != w.shape[0]:
            raise T.ShapeError(f"embed_modalities: {name!r} has dim {x.shape[-1]}, expected {w.shape[0]}")
        y = T.linear(x, w, params[f"embed.{name}.b"])
        out.append(T.relu(y) if activation == "relu" else y)
    return out


def stack_modalities(V: Sequence[Tensor]) -> Tensor:
    """List of n (..., N, d) tensors -> (..., n, N, d)."""
    ref = V[0].shape
    for v in V[1:]:
        if v.shape != ref:
            raise T.ShapeError(f"feature_attention: modality shapes differ: {ref} and {v.shape}")
    return T.concat([T.reshape(v, v.shape[:-2] + (1,) + v.shape[-2:]) for v in V], axis=-3)


def attention_keys(V: Sequence[Tensor], params: Mapping[str, Tensor], names: Sequence[str]) -> Tensor:
    """``sum_i V_i W_v,i`` -- independent of the decode step, so computed once."""
    acc = None
    for v, name in zip(V, names):
        k = T.matmul(v, params[f"W_v.{name}"])
        acc = k if acc is None else acc + k
    return acc


def feature_attention(h_prev: Tensor, V: Sequence[Tensor], params: Mapping[str, Tensor],
                      names: Sequence[str], keys: Tensor | None = None,
                      stacked: Tensor | None = None) -> FusedStep:
    """Modality weights ``a_t`` (softmax over modalities) and the fused ``V_t``.

    ``h_prev`` may be ``(H,)`` with unbatched ``(N, d)`` features or ``(B, H)``
    with ``(B, N, d)``.  ``keys``/``stacked`` are optional caches from
    :func:`attention_keys` and :func:`stack_modalities`.
    """
    if len(V) < 1:
        raise ValueError("feature_attention: no modalities")
    if stacked is None:
        stacked = stack_modalities(V)
    if keys is None:
        keys = attention_keys(V, params, names)
    hq = T.matmul(T.reshape(h_prev, h_prev.shape[:-1] + (1, h_prev.shape[-1])), params["W_h"])
    M = T.tanh(hq + keys)                       # (B, N, a): one column per frame
    S = T.matmul(M, params["W_a"])              # (B, N, n)
    scores = T.mean(S, axis=-2)                 # (B, n)
    a = T.softmax(scores, axis=-1)
    w = T.reshape(a, a.shape + (1, 1))
    fused = T.tsum(w * stacked, axis=-3)
    return FusedStep(a, fused)
