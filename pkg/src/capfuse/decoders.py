"""Recurrent cells, frame attention, the X-Linear style block and both decoders.

All step functions are batch-first: hidden states are ``(B, H)``, per-frame
features ``(B, N, d)`` and word ids ``(B,)``.  Weight matrices are stored
input-major (``x @ W``) so they can be applied to batched rows directly.
"""
from __future__ import annotations

from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .fusion import FusedStep, feature_attention
from .tensor import Tensor


def sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    pre = prefix + "."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def _check_in(op: str, x: Tensor, w: Tensor):
    if x.shape[-1] != w.shape[0]:
        raise T.ShapeError(f"{op}: input dim {x.shape[-1]} does not match weight rows {w.shape[0]}")


# --------------------------------------------------------------------- cells

def init_gru(rng, in_dim: int, hidden: int) -> dict[str, Tensor]:
    # gates packed as [z | r | candidate]
    return {
        "W": T.Tensor(np.concatenate([T.xavier_uniform(rng, in_dim, hidden).data for _ in range(3)], 1),
                      requires_grad=True),
        "U_zr": T.Tensor(np.concatenate([T.xavier_uniform(rng, hidden, hidden).data for _ in range(2)], 1),
                         requires_grad=True),
        "U_c": T.xavier_uniform(rng, hidden, hidden),
        "b": T.zeros(3 * hidden),
    }


def gru_cell(x: Tensor, h: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """z = sig(.), r = sig(.), c = tanh(W x + U (r*h) + b); h' = z*h + (1-z)*c."""
    _check_in("gru_cell", x, p["W"])
    _check_in("gru_cell", h, p["U_zr"])
    H = p["U_c"].shape[0]
    gx = T.linear(x, p["W"], p["b"])
    zr = T.sigmoid(gx[..., :2 * H] + T.matmul(h, p["U_zr"]))
    z, r = zr[..., :H], zr[..., H:]
    cand = T.tanh(gx[..., 2 * H:] + T.matmul(r * h, p["U_c"]))
    return z * h + (1.0 - z) * cand


def init_lstm(rng, in_dim: int, hidden: int) -> dict[str, Tensor]:
    # gates packed as [i | f | o | g]
    return {
        "W": T.Tensor(np.concatenate([T.xavier_uniform(rng, in_dim, hidden).data for _ in range(4)], 1),
                      requires_grad=True),
        "U": T.Tensor(np.concatenate([T.xavier_uniform(rng, hidden, hidden).data for _ in range(4)], 1),
                      requires_grad=True),
        "b": T.zeros(4 * hidden),
    }


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    _check_in("lstm_cell", x, p["W"])
    _check_in("lstm_cell", h, p["U"])
    H = p["U"].shape[0]
    gates = T.linear(x, p["W"], p["b"]) + T.matmul(h, p["U"])
    sig = T.sigmoid(gates[..., :3 * H])
    i, f, o = sig[..., :H], sig[..., H:2 * H], sig[..., 2 * H:]
    g = T.tanh(gates[..., 3 * H:])
    c2 = f * c + i * g
    return o * T.tanh(c2), c2


# ----------------------------------------------------------------- attention

def init_frame_attention(rng, q_dim: int, d: int, att_dim: int) -> dict[str, Tensor]:
    return {
        "W_q": T.xavier_uniform(rng, q_dim, att_dim),
        "W_k": T.xavier_uniform(rng, d, att_dim),
        "w_f": T.xavier_uniform(rng, att_dim, 1),
    }


def frame_attention(q: Tensor, V: Tensor, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Additive attention over frames. Returns (weights (B, N), context (B, d))."""
    if V.shape[-2] == 0:
        raise T.ShapeError("frame_attention: no frames")
    _check_in("frame_attention", q, p["W_q"])
    _check_in("frame_attention", V, p["W_k"])
    qa = T.matmul(T.reshape(q, q.shape[:-1] + (1, q.shape[-1])), p["W_q"])
    e = T.matmul(T.tanh(qa + T.matmul(V, p["W_k"])), p["w_f"])     # (B, N, 1)
    w = T.softmax(T.reshape(e, e.shape[:-1]), axis=-1)
    ctx = T.matmul(T.reshape(w, w.shape[:-1] + (1, w.shape[-1])), V)  # (B, 1, d)
    return w, T.reshape(ctx, ctx.shape[:-2] + (ctx.shape[-1],))


def init_xlinear(rng, q_dim: int, d: int, att_dim: int) -> dict[str, Tensor]:
    return {
        "W_k": T.xavier_uniform(rng, d, att_dim),
        "W_q": T.xavier_uniform(rng, q_dim, att_dim),
        "W_b": T.xavier_uniform(rng, att_dim, att_dim),
        "w_b": T.xavier_uniform(rng, att_dim, 1),
        "W_c": T.xavier_uniform(rng, att_dim, d),
        "W_v": T.xavier_uniform(rng, d, d),
    }


def xlinear_block(q: Tensor, V: Tensor, p: Mapping[str, Tensor], return_weights: bool = False):
    """Bilinear query/key interaction with spatial softmax and channel gating."""
    if V.shape[-2] == 0:
        raise T.ShapeError("xlinear_block: no frames")
    _check_in("xlinear_block", q, p["W_q"])
    _check_in("xlinear_block", V, p["W_k"])
    qe = T.elu(T.matmul(T.reshape(q, q.shape[:-1] + (1, q.shape[-1])), p["W_q"]))  # (B, 1, a)
    B = T.elu(T.matmul(V, p["W_k"])) * qe                                           # (B, N, a)
    s = T.matmul(T.relu(T.matmul(B, p["W_b"])), p["w_b"])                            # (B, N, 1)
    beta = T.softmax(T.reshape(s, s.shape[:-1]), axis=-1)                             # (B, N)
    gamma = T.sigmoid(T.matmul(T.mean(B, axis=-2), p["W_c"]))                         # (B, d)
    vals = T.matmul(V, p["W_v"])
    pooled = T.matmul(T.reshape(beta, beta.shape[:-1] + (1, beta.shape[-1])), vals)
    ctx = gamma * T.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))
    return (ctx, beta) if return_weights else ctx


# ------------------------------------------------------------------ decoders

class TopDownState(NamedTuple):
    h1: Tensor
    h2: Tensor


class XlanState(NamedTuple):
    h: Tensor
    c: Tensor
    m: Tensor


class Encoded(NamedTuple):
    """Per-video encoder outputs reused at every decode step."""
    V: list          # n tensors (B, N, d)
    stacked: Tensor  # (B, n, N, d)
    keys: Tensor     # (B, N, att)
    names: tuple


class StepOut(NamedTuple):
    logits: Tensor
    state: tuple
    fused: FusedStep


def init_topdown(rng, d: int, hidden: int, att_dim: int, vocab_size: int) -> dict[str, Tensor]:
    p = {"embed": T.Tensor(rng.uniform(-0.1, 0.1, size=(vocab_size, d)), requires_grad=True)}
    p.update({f"gru1.{k}": v for k, v in init_gru(rng, hidden + 2 * d, hidden).items()})
    p.update({f"att.{k}": v for k, v in init_frame_attention(rng, hidden, d, att_dim).items()})
    p.update({f"gru2.{k}": v for k, v in init_gru(rng, d + hidden, hidden).items()})
    p["W_o"] = T.xavier_uniform(rng, hidden, vocab_size)
    p["b_o"] = T.zeros(vocab_size)
    return p


def topdown_init_state(batch: int, hidden: int) -> TopDownState:
    z = T.Tensor(np.zeros((batch, hidden), dtype=np.float32))
    return TopDownState(z, z)


def topdown_step(state: TopDownState, prev_ids, enc: Encoded, fusion_p: Mapping[str, Tensor],
                 p: Mapping[str, Tensor]) -> StepOut:
    """Fuse with the attention-GRU state, attend frames, emit word logits."""
    fs = feature_attention(state.h1, enc.V, fusion_p, enc.names, keys=enc.keys, stacked=enc.stacked)
    w = T.embedding(p["embed"], prev_ids)
    x1 = T.concat([state.h2, T.mean(fs.fused, axis=-2), w], axis=-1)
    h1 = gru_cell(x1, state.h1, sub(p, "gru1"))
    _, v_hat = frame_attention(h1, fs.fused, sub(p, "att"))
    h2 = gru_cell(T.concat([v_hat, h1], axis=-1), state.h2, sub(p, "gru2"))
    logits = T.linear(h2, p["W_o"], p["b_o"])
    return StepOut(logits, TopDownState(h1, h2), fs)


def init_xlan(rng, d: int, hidden: int, att_dim: int, vocab_size: int) -> dict[str, Tensor]:
    p = {"embed": T.Tensor(rng.uniform(-0.1, 0.1, size=(vocab_size, d)), requires_grad=True)}
    p.update({f"xlin.{k}": v for k, v in init_xlinear(rng, hidden, d, att_dim).items()})
    p.update({f"lstm.{k}": v for k, v in init_lstm(rng, 3 * d, hidden).items()})
    p["W_o"] = T.xavier_uniform(rng, hidden, vocab_size)
    p["b_o"] = T.zeros(vocab_size)
    return p


def xlan_init_state(batch: int, hidden: int, d: int) -> XlanState:
    z = T.Tensor(np.zeros((batch, hidden), dtype=np.float32))
    return XlanState(z, z, T.Tensor(np.zeros((batch, d), dtype=np.float32)))


def xlan_step(state: XlanState, prev_ids, enc: Encoded, fusion_p: Mapping[str, Tensor],
              p: Mapping[str, Tensor]) -> StepOut:
    """Fuse with the language-LSTM state, X-Linear attend, LSTM update, logits."""
    fs = feature_attention(state.h, enc.V, fusion_p, enc.names, keys=enc.keys, stacked=enc.stacked)
    ctx = xlinear_block(state.h, fs.fused, sub(p, "xlin"))
    w = T.embedding(p["embed"], prev_ids)
    h, c = lstm_cell(T.concat([ctx, w, T.mean(fs.fused, axis=-2)], axis=-1), state.h, state.c, sub(p, "lstm"))
    logits = T.linear(h, p["W_o"], p["b_o"])
    return StepOut(logits, XlanState(h, c, ctx), fs)
