"""Finite-difference checks for every op and for the composite model pieces."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import decoders as D
from . import tensor as T
from .fusion import attention_keys, embed_modalities, feature_attention, init_fusion, stack_modalities
from .semantic import bce_loss, init_semantic, semantic_forward
from .tensor import Tensor

TOLERANCE = 1e-3


def _leaf(rng, *shape, scale=1.0, away_from_zero=False):
    x = rng.standard_normal(shape) * scale
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    return Tensor(x, requires_grad=True)


def _readout(rng, y: Tensor) -> Tensor:
    """Fixed random projection to a scalar, so every output entry matters."""
    return T.tsum(y * Tensor(rng.standard_normal(y.shape) * 0.5))


def _unary(op: Callable, **kw):
    def build(rng):
        x = _leaf(rng, 3, 4, **kw)
        r = np.random.default_rng(rng.integers(1 << 31))
        proj = Tensor(r.standard_normal((3, 4)) * 0.5)
        return (lambda: T.tsum(op(x) * proj)), [x]
    return build


def _binary(op: Callable, sa, sb):
    def build(rng):
        a, b = _leaf(rng, *sa), _leaf(rng, *sb)
        out_shape = op(a, b).shape
        proj = Tensor(rng.standard_normal(out_shape) * 0.5)
        return (lambda: T.tsum(op(a, b) * proj)), [a, b]
    return build


def _embedding(rng):
    table = _leaf(rng, 6, 4)
    ids = np.array([0, 3, 3, 5])
    proj = Tensor(rng.standard_normal((4, 4)))
    return (lambda: T.tsum(T.embedding(table, ids) * proj)), [table]


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    proj = Tensor(rng.standard_normal((2, 5)))
    return (lambda: T.tsum(T.concat([a, b], axis=1) * proj)), [a, b]


def _linear_softmax_nll(rng):
    x = _leaf(rng, 4, 5)
    w = _leaf(rng, 5, 6, scale=0.5)
    b = _leaf(rng, 6, scale=0.1)
    target = np.zeros((4, 6), dtype=np.float32)
    target[np.arange(4), rng.integers(0, 6, size=4)] = 1.0
    tgt = Tensor(target)
    return (lambda: -T.mean(T.tsum(T.log(T.softmax(T.linear(x, w, b), -1)) * tgt, axis=-1))), [x, w, b]


def _feature_attention(rng, n=3, N=4, d=5, H=6):
    names = [f"m{i}" for i in range(n)]
    p = init_fusion(rng, {k: 2 for k in names}, d, H, att_dim=4)
    p = {k: v for k, v in p.items() if not k.startswith("embed.")}
    V = [_leaf(rng, 2, N, d) for _ in names]
    h = _leaf(rng, 2, H)
    r = np.random.default_rng(rng.integers(1 << 31))

    def fn():
        fs = feature_attention(h, V, p, names)
        return _readout(np.random.default_rng(r.integers(0, 1) + 7), fs.fused) + \
            T.tsum(fs.weights * Tensor(np.arange(n, dtype=np.float32)))
    return fn, [h, *V, *p.values()]


def _embed(rng):
    names = ["a", "b"]
    p = init_fusion(rng, {"a": 3, "b": 2}, 4, 4)
    feats = {"a": Tensor(rng.uniform(-1, 1, (2, 3, 3))), "b": Tensor(rng.uniform(-1, 1, (2, 3, 2)))}
    emb = {k: v for k, v in p.items() if k.startswith("embed.")}
    # |x @ W| <= 0.3 < |b|: pre-activations stay clear of the relu kink, both branches used
    for k, t in emb.items():
        if k.endswith(".W"):
            t.data = rng.uniform(-0.1, 0.1, t.shape).astype(np.float32)
        else:
            t.data = (rng.choice([-1.0, 1.0], t.shape) * rng.uniform(0.5, 1.0, t.shape)).astype(np.float32)

    def fn():
        V = embed_modalities(feats, emb, names)
        return _readout(np.random.default_rng(5), T.concat(V, -1))
    return fn, list(emb.values())


def _semantic(rng):
    p = init_semantic(rng, 6, 4, hidden=5)
    x = _leaf(rng, 2, 6)
    targets = (rng.random((2, 4)) > 0.5).astype(np.float32)
    return (lambda: bce_loss(semantic_forward(x, p), targets)), [x, *p.values()]


def _cell(kind):
    def build(rng):
        if kind == "gru":
            p = D.init_gru(rng, 5, 4)
            x, h = _leaf(rng, 2, 5), _leaf(rng, 2, 4)
            return (lambda: _readout(np.random.default_rng(3), D.gru_cell(x, h, p))), [x, h, *p.values()]
        p = D.init_lstm(rng, 5, 4)
        x, h, c = _leaf(rng, 2, 5), _leaf(rng, 2, 4), _leaf(rng, 2, 4)

        def fn():
            h2, c2 = D.lstm_cell(x, h, c, p)
            return _readout(np.random.default_rng(3), T.concat([h2, c2], -1))
        return fn, [x, h, c, *p.values()]
    return build


def _frame_attention(rng):
    p = D.init_frame_attention(rng, 4, 5, 3)
    q, V = _leaf(rng, 2, 4), _leaf(rng, 2, 6, 5)

    def fn():
        w, ctx = D.frame_attention(q, V, p)
        return _readout(np.random.default_rng(4), ctx) + T.tsum(w * Tensor(np.linspace(0, 1, 6)))
    return fn, [q, V, *p.values()]


def _xlinear(rng):
    p = D.init_xlinear(rng, 4, 5, 3)
    q, V = _leaf(rng, 2, 4), _leaf(rng, 2, 6, 5)
    return (lambda: _readout(np.random.default_rng(4), D.xlinear_block(q, V, p))), [q, V, *p.values()]


def _decoder_step(kind):
    def build(rng, n=3, N=4, d=6, H=5, vocab=9, B=2):
        names = tuple(f"m{i}" for i in range(n))
        fp = init_fusion(rng, {k: 2 for k in names}, d, H, att_dim=4)
        fp = {k: v for k, v in fp.items() if not k.startswith("embed.")}
        init = D.init_topdown if kind == "topdown" else D.init_xlan
        dp = init(rng, d, H, 4, vocab)
        V = [_leaf(rng, B, N, d, scale=0.5) for _ in names]
        if kind == "topdown":
            state = D.TopDownState(_leaf(rng, B, H, scale=0.5), _leaf(rng, B, H, scale=0.5))
            step = D.topdown_step
        else:
            state = D.XlanState(_leaf(rng, B, H, scale=0.5), _leaf(rng, B, H, scale=0.5),
                                _leaf(rng, B, d, scale=0.5))
            step = D.xlan_step
        prev = rng.integers(0, vocab, size=B)
        target = np.zeros((B, vocab), dtype=np.float32)
        target[np.arange(B), rng.integers(0, vocab, size=B)] = 1.0

        def fn():
            enc = D.Encoded(V, stack_modalities(V), attention_keys(V, fp, names), names)
            out = step(state, prev, enc, fp, dp)
            nll = -T.tsum(T.log_softmax(out.logits, -1) * Tensor(target))
            return nll + _readout(np.random.default_rng(6), T.concat(list(out.state[:2]), -1))
        leaves = [*V, *state, *fp.values(), *dp.values()]
        return fn, leaves
    return build


def suite() -> dict[str, Callable]:
    return {
        "matmul": _binary(T.matmul, (3, 4), (4, 2)),
        "matmul_batched": _binary(T.matmul, (2, 3, 4), (4, 2)),
        "add_broadcast": _binary(T.add, (3, 4), (4,)),
        "add_column_broadcast": _binary(T.add, (3, 4), (3, 1)),
        "sub": _binary(T.sub, (3, 4), (3, 4)),
        "mul": _binary(T.mul, (3, 4), (1, 4)),
        "scale": _unary(lambda x: T.scale(x, -1.7)),
        "tanh": _unary(T.tanh),
        "sigmoid": _unary(T.sigmoid),
        "elu": _unary(T.elu, away_from_zero=True),
        "relu": _unary(T.relu, away_from_zero=True),
        "exp": _unary(T.exp, scale=0.5),
        "log": _unary(lambda x: T.log(T.exp(x) + 1.0)),
        "softmax_axis0": _unary(lambda x: T.softmax(x, axis=0)),
        "softmax_axis1": _unary(lambda x: T.softmax(x, axis=1)),
        "log_softmax": _unary(lambda x: T.log_softmax(x, axis=-1)),
        "mean_axis0": _unary(lambda x: T.broadcast_to(T.mean(x, axis=0), (3, 4))),
        "sum_axis1": _unary(lambda x: T.broadcast_to(T.tsum(x, axis=1, keepdims=True), (3, 4))),
        "concat": _concat,
        "slice": _unary(lambda x: T.concat([x[:, 1:3], x[:, :2]], axis=1)),
        "reshape_transpose": _unary(lambda x: T.reshape(T.transpose(x, (1, 0)), (3, 4))),
        "embedding": _embedding,
        "linear_softmax_nll": _linear_softmax_nll,
        "embed_modalities": _embed,
        "feature_attention": _feature_attention,
        "semantic_bce": _semantic,
        "gru_cell": _cell("gru"),
        "lstm_cell": _cell("lstm"),
        "frame_attention": _frame_attention,
        "xlinear_block": _xlinear,
        "topdown_step": _decoder_step("topdown"),
        "xlan_step": _decoder_step("xlan"),
    }


def run_suite(seeds=range(10), names=None, verbose: Callable | None = None) -> dict[str, float]:
    """Worst relative error per check over all ``seeds``."""
    results = {}
    for name, build in suite().items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        worst = max(T.grad_check(build, seed) for seed in seeds)
        results[name] = worst
        if verbose:
            verbose(f"{'PASS' if worst < TOLERANCE else 'FAIL'} {name:<22} max_rel_err={worst:.2e} "
                    f"({time.perf_counter() - t0:.1f}s)")
    return results
