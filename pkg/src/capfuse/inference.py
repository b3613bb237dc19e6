"""Greedy and beam decoding over probability-averaged model ensembles."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, CaptionRecord, DataError, FeatureBundle, Vocab
from .checkpoint import Checkpoint, load_checkpoint
from .metrics import evaluate
from .model import CaptionModel, ModelConfig, select_rows


class VocabMismatch(ValueError):
    pass


def _check_models(models: Sequence[CaptionModel]) -> int:
    if not models:
        raise ValueError("need at least one model")
    sizes = {m.vocab_size for m in models}
    hashes = {getattr(m, "vocab_hash", None) for m in models} - {None, ""}
    if len(sizes) != 1 or len(hashes) > 1:
        raise VocabMismatch("ensemble members do not share a vocabulary")
    return sizes.pop()


def load_model(checkpoint: Checkpoint | str, expect_vocab_hash: str | None = None) -> CaptionModel:
    """Rebuild a CaptionModel from a checkpoint (object or path)."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint, expect_vocab_hash)
    if "model" not in ck.config:
        raise ValueError("checkpoint carries no model config")
    model = CaptionModel(ModelConfig.from_dict(ck.config["model"]))
    model.load_state(ck.params)
    model.vocab_hash = ck.vocab_hash
    return model


def ensemble_probs(step_logits: Sequence[T.Tensor]) -> np.ndarray:
    """Arithmetic mean of per-model softmax rows, in float64."""
    acc = None
    for lg in step_logits:
        x = lg.data.astype(np.float64)
        x = x - x.max(axis=-1, keepdims=True)
        p = np.exp(x)
        p /= p.sum(axis=-1, keepdims=True)
        acc = p if acc is None else acc + p
    return acc / len(step_logits)


def greedy_decode_batch(models: Sequence[CaptionModel], bundles: Sequence[FeatureBundle],
                        max_len: int = 30, return_weights: bool = False):
    """Greedy captions (eos stripped) for a batch of videos.

    With ``return_weights`` the first model's modality weights per step are
    returned as a ``(B, steps, n)`` array alongside the captions.
    """
    _check_models(models)
    B = len(bundles)
    with T.no_grad():
        encs = [m.encode(m.collate(bundles))[0] for m in models]
        states = [m.init_state(B) for m in models]
        prev = np.full(B, BOS, dtype=np.int64)
        out = np.zeros((B, 0), dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        weights = []
        for _ in range(max_len):
            steps = [m.step(s, prev, e) for m, s, e in zip(models, states, encs)]
            states = [s.state for s in steps]
            weights.append(steps[0].fused.weights.data.copy())
            probs = ensemble_probs([s.logits for s in steps])
            nxt = np.argmax(probs, axis=-1)
            nxt[done] = EOS
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= nxt == EOS
            prev = nxt
            if done.all():
                break
    caps = []
    for row in out:
        toks = []
        for t in row:
            if t == EOS:
                break
            toks.append(int(t))
        caps.append(toks)
    if return_weights:
        return caps, np.stack(weights, axis=1)
    return caps


def greedy_decode(models: Sequence[CaptionModel], bundle: FeatureBundle, max_len: int = 30) -> list[int]:
    return greedy_decode_batch(models, [bundle], max_len)[0]


@dataclass
class DecodeHypothesis:
    tokens: list        # starts with BOS
    logprob: float
    finished: bool = False
    row: int = -1       # row of the batched decoder state holding this hypothesis

    def score(self, length_alpha: float) -> float:
        n = len(self.tokens) - 1
        return self.logprob if length_alpha == 0 else self.logprob / max(n, 1) ** length_alpha


def beam_search(models: Sequence[CaptionModel], bundle: FeatureBundle, beam: int = 3,
                max_len: int = 30, length_alpha: float = 0.0):
    """Returns (best caption without bos/eos, finished hypotheses best-first)."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    _check_models(models)
    with T.no_grad():
        encs1 = [m.encode(m.collate([bundle]))[0] for m in models]
        states = [m.init_state(1) for m in models]
        alive = [DecodeHypothesis([BOS], 0.0, row=0)]
        finished: list[DecodeHypothesis] = []
        encs = encs1
        for t in range(max_len):
            prev = np.array([h.tokens[-1] for h in alive], dtype=np.int64)
            steps = [m.step(s, prev, e) for m, s, e in zip(models, states, encs)]
            with np.errstate(divide="ignore"):
                logp = np.log(ensemble_probs([s.logits for s in steps]))
            scores = np.array([h.logprob for h in alive])[:, None] + logp
            flat = scores.reshape(-1)
            V = logp.shape[1]
            window = min(flat.size, beam + 16)
            top = np.argsort(-flat, kind="stable")[:window]
            cands = sorted(((float(flat[i]), alive[i // V].tokens + [int(i % V)], i // V) for i in top),
                           key=lambda c: (-c[0], c[1]))[:beam]
            last = t == max_len - 1
            new_alive = []
            for sc, toks, src in cands:
                h = DecodeHypothesis(toks, sc, row=src)
                if toks[-1] == EOS or last:
                    h.finished = True
                    finished.append(h)
                else:
                    new_alive.append(h)
            if not new_alive:
                break
            idx = np.array([h.row for h in new_alive], dtype=np.int64)
            states = [select_rows(s.state, idx) for s in steps]
            encs = [select_rows(e, np.zeros(len(idx), dtype=np.int64)) for e in encs1]
            for r, h in enumerate(new_alive):
                h.row = r
            alive = new_alive
    finished.sort(key=lambda h: (-h.score(length_alpha), h.tokens))
    best = [t for t in finished[0].tokens[1:] if t != EOS]
    return best, finished


def decode_all(models, bundles, beam: int = 3, max_len: int = 30, length_alpha: float = 0.0,
               jobs: int = 1) -> list[list[int]]:
    if beam == 1:
        return greedy_decode_batch(models, bundles, max_len)
    if jobs > 1 and len(bundles) > 1:
        from concurrent.futures import ProcessPoolExecutor
        chunks = [bundles[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_decode_chunk, [(models, c, beam, max_len, length_alpha) for c in chunks]))
        out = [None] * len(bundles)
        for i, part in enumerate(parts):
            out[i::jobs] = part
        return out
    return [beam_search(models, b, beam, max_len, length_alpha)[0] for b in bundles]


def _decode_chunk(args):
    models, bundles, beam, max_len, alpha = args
    return [beam_search(models, b, beam, max_len, alpha)[0] for b in bundles]


def ensemble_eval(models: Sequence[CaptionModel], bundles: Sequence[FeatureBundle],
                  records: Sequence[CaptionRecord], vocab: Vocab, beam: int = 3,
                  max_len: int = 30, jobs: int = 1) -> tuple[dict, dict]:
    """Decode every video and score against its references.

    Returns ``(scores, captions)`` where ``captions`` maps video id to text.
    """
    refs_by_id = {r.video_id: r for r in records}
    missing = [b.video_id for b in bundles if b.video_id not in refs_by_id]
    if missing:
        raise DataError(f"no reference captions for videos: {', '.join(missing)}")
    decoded = decode_all(models, bundles, beam=beam, max_len=max_len, jobs=jobs)
    cands = [vocab.decode(c) for c in decoded]
    refs = [[vocab.decode(r) for r in refs_by_id[b.video_id].references] for b in bundles]
    scores = evaluate(cands, refs)
    captions = {b.video_id: " ".join(c) for b, c in zip(bundles, cands)}
    return scores, captions
