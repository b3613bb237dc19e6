"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line (collected again in the terminal
summary) and then asserts at the stated tolerance.
"""
import dataclasses
import time

import numpy as np
import pytest

import oracles as O
from capfuse import gradcheck
from capfuse.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from capfuse.config import RunConfig, parse_dims
from capfuse.data import EOS, FeatureBundle, FormatError, gen_synthetic, read_features, write_features
from capfuse.fusion import feature_attention, init_fusion
from capfuse.inference import beam_search, decode_all, greedy_decode, greedy_decode_batch, load_model
from capfuse.metrics import bleu4, cider_d, meteor_exact, rouge_l
from capfuse.semantic import build_attribute_vocab
from capfuse.tensor import AdamState, Tensor
from capfuse.training import Dataset, run_stage_schedule, validation_scores
from conftest import tiny_model
from test_inference import brute_force_best

REPORT: list[str] = []


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    REPORT.append(line)
    print(line)
    return ok


def desk_corpus(n_videos: int):
    cfg = RunConfig()
    mods = parse_dims(cfg["data.modalities"])
    prob = parse_dims(cfg["data.prob_modalities"])
    bundles, records, vocab = gen_synthetic(42, n_videos, cfg["data.n_frames"], mods, cfg["data.vocab_size"],
                                            cfg["data.max_caption_len"], prob_dims=prob,
                                            noise=cfg["data.noise"])
    return cfg, bundles, records, vocab, {**mods, **prob}


def attributes(cfg, records, vocab):
    return build_attribute_vocab([vocab.decode(x) for rec in records for x in rec.references],
                                 k=cfg["model.semantic_k"])


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seeds=range(10))
    elapsed = time.perf_counter() - t0
    worst = max(results.values())
    required = {"feature_attention", "topdown_step", "xlan_step"}
    ok = worst < 1e-3 and required <= set(results) and elapsed < 120
    assert report(1, ok, f"{len(results)} checks x 10 seeds, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_feature_attention_oracle():
    rng = np.random.default_rng(2024)
    worst_err, worst_sum = 0.0, 0.0
    for _ in range(50):
        n, N, d = int(rng.integers(1, 6)), int(rng.integers(1, 9)), int(rng.integers(1, 17))
        H, att = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        names = [f"m{i}" for i in range(n)]
        p = init_fusion(rng, {k: 2 for k in names}, d, H, att)
        V = [Tensor(rng.standard_normal((N, d)).astype(np.float32)) for _ in names]
        h = Tensor(rng.standard_normal(H).astype(np.float32))
        a, fused = feature_attention(h, V, p, names)
        f64 = lambda t: t.data.astype(np.float64)  # noqa: E731
        ea, eV = O.feature_attention(f64(h), [f64(v) for v in V], f64(p["W_h"]),
                                     [f64(p[f"W_v.{k}"]) for k in names], f64(p["W_a"]))
        worst_err = max(worst_err, np.abs(a.data - ea).max(), np.abs(fused.data - eV).max())
        worst_sum = max(worst_sum, abs(float(a.data.astype(np.float64).sum()) - 1.0))
    ok = worst_err < 1e-5 and worst_sum < 1e-6
    assert report(2, ok, f"50 cases, max abs err {worst_err:.2e}, max |sum a - 1| {worst_sum:.2e}")


def test_criterion_3_overfit_witness():
    cfg, bundles, records, vocab, dims = desk_corpus(32)
    data = Dataset(bundles, records)
    attrs = attributes(cfg, records, vocab)
    sched = dataclasses.replace(cfg.schedule(), xe_epochs=300, last_stage="CrossEntropy", max_stage_epochs=0)
    refs = [[[t for t in ref if t != EOS] for ref in rec.references] for rec in records]
    lines, ok = [], True
    for decoder in ("topdown", "xlan"):
        t0 = time.perf_counter()
        mc = dataclasses.replace(cfg.model_config(dims, len(vocab)), decoder=decoder)
        rates = []
        for seed in range(5):
            res = run_stage_schedule(data, data, sched, mc, seed=seed, vocab=vocab, attrs=attrs)
            caps = greedy_decode_batch([res.model], bundles, cfg["decode.max_len"])
            rates.append(float(np.mean([c in r for c, r in zip(caps, refs)])))
        elapsed = time.perf_counter() - t0
        passed = sum(r >= 0.9 for r in rates)
        ok &= passed >= 4 and elapsed < 900
        lines.append(f"{decoder} exact-match {['%.3f' % r for r in rates]} ({passed}/5 >= 0.9, {elapsed:.0f}s)")
    assert report(3, ok, "32 videos, 300 XE epochs; " + "; ".join(lines))


def test_criterion_4_stage_schedule(tmp_path, tiny_data):
    from test_training import Counter
    bundles, records, _ = tiny_data
    tr, va = Dataset(bundles[:8], records[:8]), Dataset(bundles[8:], records[8:])
    sched = dataclasses.replace(RunConfig().schedule(), max_len=4, max_stage_epochs=0)
    run_stage_schedule(tr, va, sched, tiny_model().config, val_fn=Counter(), log_path=tmp_path / "log.jsonl")
    from capfuse.training import read_log
    rows = read_log(tmp_path / "log.jsonl")
    by_stage = {}
    for r in rows:
        by_stage.setdefault(r["stage"], []).append(r)
    xe = by_stage.get("CrossEntropy", [])
    oracle = by_stage.get("WordOracle", [])
    sc_rates = [r["lr"] for r in rows if r["stage"].startswith("SelfCritical")]
    ok = ([r["epoch"] for r in xe] == [1, 2, 3, 4, 5] and all(r["lr"] == 5e-4 for r in xe)
          and [r["epoch"] for r in oracle] == [6, 7] and all(r["lr"] == 5e-5 for r in oracle)
          and sc_rates == [5e-5, 5e-5, 5e-6, 5e-6]
          and [r["epoch"] for r in rows] == list(range(1, len(rows) + 1)))
    assert report(4, ok, f"XE {len(xe)} epochs, oracle {len(oracle)} epochs, self-critical rates {sc_rates}")


def test_criterion_5_scst_improvement():
    cfg, bundles, records, vocab, dims = desk_corpus(48)
    n_train = cfg["data.n_videos"]
    tr, va = Dataset(bundles[:n_train], records[:n_train]), Dataset(bundles[n_train:], records[n_train:])
    attrs = attributes(cfg, records[:n_train], vocab)
    mc = cfg.model_config(dims, len(vocab))
    sched = cfg.schedule()
    pre = dataclasses.replace(sched, xe_epochs=60, last_stage="WordOracle")
    t0 = time.perf_counter()
    pairs = []
    for seed in range(5):
        stage2 = run_stage_schedule(tr, va, pre, mc, seed=seed, vocab=vocab, attrs=attrs)
        start = validation_scores(stage2.model, va, sched.max_len)["reward"]
        final = run_stage_schedule(tr, va, sched, mc, seed=seed, vocab=vocab, attrs=attrs,
                                   resume=stage2.checkpoint)
        end = validation_scores(final.model, va, sched.max_len)["reward"]
        pairs.append((start, end))
    elapsed = time.perf_counter() - t0
    strict = sum(e > s for s, e in pairs)
    ok = all(e >= s - 1e-6 for s, e in pairs) and strict >= 3 and elapsed < 900
    detail = ", ".join(f"{s:.4f}->{e:.4f}" for s, e in pairs)
    assert report(5, ok, f"held-out reward {detail}; strictly better {strict}/5, {elapsed:.0f}s")


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    err = {"bleu4": 0.0, "rouge_l": 0.0, "cider_d": 0.0, "meteor_exact": 0.0}
    for _ in range(100):
        c, r = O.random_corpus(rng)
        err["bleu4"] = max(err["bleu4"], abs(bleu4(c, r) - O.bleu4(c, r)))
        for ci, ri in zip(c, r):
            err["rouge_l"] = max(err["rouge_l"], abs(rouge_l(ci, ri) - O.rouge_l(ci, ri)))
            err["meteor_exact"] = max(err["meteor_exact"], abs(meteor_exact(ci, ri) - O.meteor_exact(ci, ri)))
        err["cider_d"] = max(err["cider_d"], float(np.abs(cider_d(c, r)[0] - O.cider_d(c, r)[0]).max()))
    ident = [["a", "b", "c", "d"], ["e", "f", "g", "h", "i"], ["j", "k", "l", "m"]]
    refs = [[s] for s in ident]
    identity_ok = (bleu4(ident, refs) == 1.0 and np.mean([rouge_l(s, r) for s, r in zip(ident, refs)]) == 1.0
                   and np.allclose(cider_d(ident, refs)[0], 10.0, rtol=0, atol=1e-12))
    ok = err["bleu4"] < 1e-9 and max(err["rouge_l"], err["cider_d"], err["meteor_exact"]) < 1e-6 and identity_ok
    assert report(6, ok, "100 corpora, max errors " + ", ".join(f"{k} {v:.1e}" for k, v in err.items())
                  + f"; identity corpus {'ok' if identity_ok else 'wrong'}")


def test_criterion_7_decoding_laws(tmp_path, tiny_data):
    bundles = tiny_data[0]
    rng = np.random.default_rng(7)
    greedy_ok = 0
    for i in range(20):
        decoder = "topdown" if i % 2 == 0 else "xlan"
        m = tiny_model(decoder, seed=int(rng.integers(1 << 30)))
        save_checkpoint(tmp_path / "m.ckpt", Checkpoint(params=m.state_arrays(),
                                                        config={"model": m.config.to_dict()}))
        m = load_model(str(tmp_path / "m.ckpt"))
        b = bundles[int(rng.integers(len(bundles)))]
        greedy_ok += beam_search([m], b, beam=1, max_len=8)[0] == greedy_decode([m], b, 8)
    m = tiny_model("xlan", seed=3)
    single = decode_all([m], bundles, beam=3, max_len=6)
    ens_ok = all(decode_all([m] * k, bundles, beam=3, max_len=6) == single for k in (2, 3, 4))
    brute_ok = 0
    for seed in range(3):
        toy = tiny_model("topdown", seed=seed, vocab_size=8)
        best, hyps = beam_search([toy], bundles[seed], beam=8, max_len=2)
        lp, seq = brute_force_best([toy], bundles[seed], 8, 2)
        brute_ok += best == [t for t in seq if t != EOS] and abs(hyps[0].logprob - lp) < 1e-9
    ok = greedy_ok == 20 and ens_ok and brute_ok == 3
    assert report(7, ok, f"beam=1 vs greedy {greedy_ok}/20, self-ensemble k=2..4 "
                         f"{'identical' if ens_ok else 'differs'}, exhaustive beam vs brute force {brute_ok}/3")


def test_criterion_8_format_round_trips(tmp_path):
    rng = np.random.default_rng(8)
    bundles = [FeatureBundle(f"video{i}", {"motion": rng.standard_normal((5, 7)).astype(np.float32),
                                           "eco": rng.random((1, 3)).astype(np.float32)}) for i in range(4)]
    write_features(bundles, tmp_path / "f.mmfc")
    back = read_features(tmp_path / "f.mmfc")
    mmfc_ok = all(a.video_id == b.video_id and all(a.modalities[k].tobytes() == b.modalities[k].tobytes()
                                                   for k in a.modalities) for a, b in zip(bundles, back))
    params = {f"p{i}": rng.standard_normal((3, i + 1)).astype(np.float32) for i in range(3)}
    ck = Checkpoint(params=params, adam=AdamState(t=3, m={k: v * 2 for k, v in params.items()},
                                                  v={k: v * v for k, v in params.items()}))
    save_checkpoint(tmp_path / "c.ckpt", ck)
    got = load_checkpoint(tmp_path / "c.ckpt")
    ck_ok = all(got.params[k].tobytes() == v.tobytes() and got.adam.m[k].tobytes() == ck.adam.m[k].tobytes()
                and got.adam.v[k].tobytes() == ck.adam.v[k].tobytes() for k, v in params.items())
    detected = 0
    raw = (tmp_path / "f.mmfc").read_bytes()
    (tmp_path / "bad.mmfc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as e:
        read_features(tmp_path / "bad.mmfc")
    detected += e.value.offset == 0
    raw = bytearray((tmp_path / "c.ckpt").read_bytes())
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(tmp_path / "magic.ckpt")
    detected += e.value.offset == 0
    raw[-8] ^= 0x01
    (tmp_path / "crc.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="CRC32") as e:
        load_checkpoint(tmp_path / "crc.ckpt")
    detected += e.value.offset == len(raw) - 4
    ok = mmfc_ok and ck_ok and detected == 3
    assert report(8, ok, f"MMFC {'bit-exact' if mmfc_ok else 'differs'}, checkpoint "
                         f"{'bit-exact' if ck_ok else 'differs'}, corruptions detected {detected}/3")
