"""Three-stage training: cross-entropy, word-level oracle, self-critical.

Stage transitions follow a plateau rule on validation CIDEr-D: a stage after
the first ends once ``plateau_patience`` consecutive epochs fail to beat the
stage's best by more than ``min_improvement``.  The best-on-validation
weights of every stage are restored before the next stage starts.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import BOS, EOS, PAD, FeatureBundle, Vocab
from .inference import greedy_decode_batch
from .metrics import CiderD, bleu4, cider_d, sentence_bleu4
from .model import CaptionModel, ModelConfig
from .semantic import AttributeVocab, attribute_targets, bce_loss
from .tensor import NumericalError, Tensor

log = logging.getLogger(__name__)


class Stage(str, Enum):
    CROSS_ENTROPY = "CrossEntropy"
    WORD_ORACLE = "WordOracle"
    SELF_CRITICAL_1 = "SelfCritical1"
    SELF_CRITICAL_2 = "SelfCritical2"


STAGE_ORDER = (Stage.CROSS_ENTROPY, Stage.WORD_ORACLE, Stage.SELF_CRITICAL_1, Stage.SELF_CRITICAL_2)


@dataclass
class StageSchedule:
    xe_epochs: int = 5
    lr_xe: float = 5e-4
    lr_oracle: float = 5e-5
    plateau_patience: int = 2
    lr_sc1: float = 5e-5
    lr_sc2: float = 5e-6
    max_epochs: int = 500
    max_stage_epochs: int = 0       # 0: no per-stage cap
    min_improvement: float = 1e-4
    batch_size: int = 16
    clip_norm: float = 5.0
    oracle_mu: float = 12.0
    semantic_weight: float = 1.0
    max_len: int = 30
    last_stage: str = Stage.SELF_CRITICAL_2.value

    def __post_init__(self):
        for name in ("lr_xe", "lr_oracle", "lr_sc1", "lr_sc2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def lr(self, stage: Stage) -> float:
        return {Stage.CROSS_ENTROPY: self.lr_xe, Stage.WORD_ORACLE: self.lr_oracle,
                Stage.SELF_CRITICAL_1: self.lr_sc1, Stage.SELF_CRITICAL_2: self.lr_sc2}[stage]


@dataclass
class Dataset:
    bundles: list
    records: list

    def __post_init__(self):
        if not self.bundles:
            raise ValueError("empty dataset")
        by_id = {r.video_id: r for r in self.records}
        missing = [b.video_id for b in self.bundles if b.video_id not in by_id]
        if missing:
            raise ValueError(f"videos without references: {missing}")
        self.records = [by_id[b.video_id] for b in self.bundles]

    def __len__(self):
        return len(self.bundles)

    def refs(self, strip_eos: bool = True) -> list[list[list[int]]]:
        return [[[t for t in ref if t != EOS] if strip_eos else list(ref) for ref in r.references]
                for r in self.records]


# -------------------------------------------------------------------- losses

def xe_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token NLL over unmasked positions; ``logits`` is (..., T, V)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise T.ShapeError(f"xe_loss: logits {logits.shape} do not match targets {targets.shape}")
    mask = np.ones(targets.shape, dtype=np.float32) if mask is None else np.asarray(mask, dtype=np.float32)
    count = float(mask.sum())
    if count == 0:
        raise ValueError("xe_loss: every position is masked")
    pick = np.zeros(logits.shape, dtype=np.float32)
    np.put_along_axis(pick, targets[..., None], mask[..., None], axis=-1)
    return T.scale(T.tsum(T.log_softmax(logits, axis=-1) * Tensor(pick)), -1.0 / count)


def oracle_prob(epoch: int, mu: float = 12.0) -> float:
    """Probability of feeding the ground-truth word, decaying with the epoch."""
    return mu / (mu + math.exp(epoch / mu))


def oracle_next_input(gt_id, logits, epoch: int, mu: float = 12.0,
                      rng: np.random.Generator | None = None, noise: bool = True):
    """Ground truth with prob ``oracle_prob``, else argmax of Gumbel-perturbed logits.

    Works on a single id with a (V,) logit row, or on (B,) ids with (B, V).
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    rng = rng or np.random.default_rng()
    gt = np.asarray(gt_id)
    lg = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if noise:
        u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=lg.shape)
        lg = lg - np.log(-np.log(u))
    pred = np.argmax(lg, axis=-1)
    use_gt = rng.random(size=gt.shape) < oracle_prob(epoch, mu)
    out = np.where(use_gt, gt, pred)
    return int(out) if out.ndim == 0 else out.astype(np.int64)


def _stack_steps(steps: Sequence[Tensor]) -> Tensor:
    return T.concat([T.reshape(s, (s.shape[0], 1, s.shape[1])) for s in steps], axis=1)


def pad_batch(seqs: Sequence[Sequence[int]]):
    """Teacher-forcing inputs (bos-shifted), targets and mask, padded with PAD."""
    L = max(len(s) for s in seqs)
    tgt = np.full((len(seqs), L), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=np.float32)
    for i, s in enumerate(seqs):
        tgt[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    inp = np.concatenate([np.full((len(seqs), 1), BOS, dtype=np.int64), tgt[:, :-1]], axis=1)
    return inp, tgt, mask


def teacher_forced_logits(model: CaptionModel, enc, inputs: np.ndarray) -> Tensor:
    state = model.init_state(inputs.shape[0])
    steps = []
    for t in range(inputs.shape[1]):
        out = model.step(state, inputs[:, t], enc)
        state = out.state
        steps.append(out.logits)
    return _stack_steps(steps)


def oracle_logits(model: CaptionModel, enc, targets: np.ndarray, epoch: int, mu: float,
                  rng: np.random.Generator) -> Tensor:
    """Unroll with word-level-oracle inputs; targets stay ground truth."""
    B, L = targets.shape
    state = model.init_state(B)
    prev = np.full(B, BOS, dtype=np.int64)
    steps = []
    for t in range(L):
        out = model.step(state, prev, enc)
        state = out.state
        steps.append(out.logits)
        prev = oracle_next_input(targets[:, t], out.logits, epoch, mu, rng)
    return _stack_steps(steps)


def scst_reward_fn(cider: CiderD) -> Callable:
    """0.5 * CIDEr-D + 0.5 * add-one-smoothed sentence BLEU-4."""
    def reward(cand, refs):
        return 0.5 * cider.score(cand, refs) + 0.5 * sentence_bleu4(cand, refs, smooth=True)
    return reward


def sample_captions(model: CaptionModel, enc, batch: int, max_len: int, rng: np.random.Generator):
    """Multinomial sampling; returns (captions, summed log-prob Tensor (B,))."""
    state = model.init_state(batch)
    prev = np.full(batch, BOS, dtype=np.int64)
    alive = np.ones(batch, dtype=bool)
    caps = [[] for _ in range(batch)]
    logps = []
    for _ in range(max_len):
        out = model.step(state, prev, enc)
        state = out.state
        lp = T.log_softmax(out.logits, axis=-1)
        p = np.exp(lp.data.astype(np.float64))
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random(batch)
        nxt = np.minimum((np.cumsum(p, axis=-1) < u[:, None]).sum(axis=-1), p.shape[1] - 1)
        pick = np.zeros(p.shape, dtype=np.float32)
        pick[np.arange(batch), nxt] = alive.astype(np.float32)
        logps.append(T.tsum(lp * Tensor(pick), axis=-1))
        for i in np.flatnonzero(alive):
            if nxt[i] != EOS:
                caps[i].append(int(nxt[i]))
        alive &= nxt != EOS
        prev = np.where(alive, nxt, EOS)
        if not alive.any():
            break
    total = logps[0]
    for x in logps[1:]:
        total = total + x
    return caps, total


def scst_loss(model: CaptionModel, bundles: Sequence[FeatureBundle], refs: Sequence[Sequence[Sequence[int]]],
              reward_fn: Callable, rng: np.random.Generator, max_len: int = 30, feats=None):
    """Self-critical surrogate loss with the greedy decode as baseline.

    Returns ``(loss, sampled rewards, greedy rewards)``; the loss is the batch
    mean of ``-(r_sample - r_greedy) * sum_t log p(w_t)``.
    """
    B = len(bundles)
    greedy = greedy_decode_batch([model], bundles, max_len)
    feats = model.collate(bundles) if feats is None else feats
    enc, _ = model.encode(feats)
    sampled, logp = sample_captions(model, enc, B, max_len, rng)
    r_s = np.array([reward_fn(c, r) for c, r in zip(sampled, refs)])
    r_g = np.array([reward_fn(c, r) for c, r in zip(greedy, refs)])
    adv = (r_s - r_g).astype(np.float32)
    loss = T.scale(T.tsum(logp * Tensor(-adv)), 1.0 / B)
    return loss, r_s, r_g


# ------------------------------------------------------------- validation

def validation_scores(model: CaptionModel, val: Dataset, max_len: int = 30) -> dict:
    """Greedy-decode the validation set; CIDEr-D, BLEU-4 and their even mix."""
    caps = greedy_decode_batch([model], val.bundles, max_len)
    refs = val.refs()
    if len(val) >= 2:
        cider = cider_d(caps, refs)[1]
    else:
        cider = CiderD(refs + refs).score(caps[0], refs[0])
    bleu = bleu4(caps, refs)
    return {"cider": cider, "bleu4": bleu, "reward": 0.5 * cider + 0.5 * bleu}


# ----------------------------------------------------------------- trainer

@dataclass
class EpochRecord:
    stage: str
    epoch: int
    lr: float
    loss: float
    val_cider: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class RunResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)
    model: CaptionModel | None = None


class Trainer:
    def __init__(self, model: CaptionModel, train: Dataset, val: Dataset, schedule: StageSchedule,
                 seed: int = 0, attrs: AttributeVocab | None = None, vocab: Vocab | None = None,
                 val_fn: Callable | None = None):
        self.model = model
        self.train = train
        self.val = val
        self.sched = schedule
        self.seed = seed
        self.vocab = vocab
        self.vocab_hash = vocab.content_hash() if vocab is not None else ""
        self.model.vocab_hash = self.vocab_hash
        self.val_fn = val_fn or (lambda m: validation_scores(m, self.val, self.sched.max_len))
        self.adam = T.AdamState(lr=schedule.lr_xe)
        self.feats = model.collate(train.bundles)
        self.samples = [(i, ref) for i, rec in enumerate(train.records) for ref in rec.references]
        self.train_refs = train.refs()
        self.cider = CiderD(self.train_refs) if len(train) >= 2 else None
        self.attr_targets = None
        if model.config.semantic_k:
            if attrs is None or vocab is None:
                raise ValueError("semantic head enabled but no attribute vocabulary / vocab given")
            if len(attrs) != model.config.semantic_k:
                raise ValueError(f"attribute vocabulary has {len(attrs)} entries, model expects "
                                 f"{model.config.semantic_k}")
            self.attr_targets = np.stack([
                attribute_targets([vocab.decode(r) for r in rec.references], attrs)
                for rec in train.records])

    # -- one optimisation step
    def _apply(self, loss: Tensor, lr: float):
        if not np.all(np.isfinite(loss.data)):
            raise NumericalError("non-finite loss")
        params = self.model.params
        T.zero_grads(params)
        T.backward(loss)
        grads = T.collect_grads(params)
        T.clip_grad_norm(grads, self.sched.clip_norm)
        self.adam.lr = lr
        T.adam_step(params, grads, self.adam)
        T.zero_grads(params)

    def _batch_feats(self, idx):
        return {k: v[idx] for k, v in self.feats.items()}

    def run_epoch(self, stage: Stage, stage_epoch: int, lr: float, rng: np.random.Generator) -> float:
        bs = self.sched.batch_size
        losses = []
        if stage in (Stage.CROSS_ENTROPY, Stage.WORD_ORACLE):
            order = rng.permutation(len(self.samples))
            for s in range(0, len(order), bs):
                chunk = [self.samples[i] for i in order[s:s + bs]]
                vids = np.array([c[0] for c in chunk])
                inp, tgt, mask = pad_batch([c[1] for c in chunk])
                enc, probs = self.model.encode(self._batch_feats(vids))
                if stage is Stage.CROSS_ENTROPY:
                    logits = teacher_forced_logits(self.model, enc, inp)
                else:
                    logits = oracle_logits(self.model, enc, tgt, stage_epoch, self.sched.oracle_mu, rng)
                loss = xe_loss(logits, tgt, mask)
                if probs is not None and self.sched.semantic_weight > 0:
                    loss = loss + T.scale(bce_loss(probs, self.attr_targets[vids]), self.sched.semantic_weight)
                self._apply(loss, lr)
                losses.append(loss.item())
        else:
            if self.cider is None:
                raise ValueError("self-critical training needs at least 2 training videos")
            reward = scst_reward_fn(self.cider)
            order = rng.permutation(len(self.train))
            for s in range(0, len(order), bs):
                vids = order[s:s + bs]
                loss, _, _ = scst_loss(self.model, [self.train.bundles[i] for i in vids],
                                       [self.train_refs[i] for i in vids], reward, rng,
                                       self.sched.max_len, feats=self._batch_feats(vids))
                self._apply(loss, lr)
                losses.append(loss.item())
        return float(np.mean(losses))

    # -- checkpoint helpers
    def snapshot(self) -> tuple:
        return self.model.state_arrays(), self.adam.copy()

    def restore(self, snap: tuple):
        arrays, adam = snap
        self.model.load_state(arrays)
        self.adam = adam.copy()

    def make_checkpoint(self, stage: Stage, epoch: int, bk: dict, best_params=None) -> Checkpoint:
        return Checkpoint(params=self.model.state_arrays(), adam=self.adam.copy(),
                          config={"model": self.model.config.to_dict(), "schedule": asdict(self.sched),
                                  "seed": self.seed},
                          vocab_hash=self.vocab_hash, stage=stage.value, epoch=epoch,
                          best_val=bk.get("best_cider", float("-inf")), extra=dict(bk),
                          best_params=best_params or {})

    # -- the schedule
    def run(self, resume: Checkpoint | None = None, log_path=None, ckpt_dir=None) -> RunResult:
        sched = self.sched
        last_idx = STAGE_ORDER.index(Stage(sched.last_stage))
        records: list[EpochRecord] = []
        log_fh = open(log_path, "a" if resume else "w", encoding="utf-8") if log_path else None
        ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        if ckpt_dir:
            ckpt_dir.mkdir(parents=True, exist_ok=True)

        if resume is not None:
            self.model.load_state(resume.params)
            self.adam = resume.adam.copy()
            bk = dict(resume.extra)
            epoch = resume.epoch
            stage_idx = STAGE_ORDER.index(Stage(resume.stage))
            if bk.get("completed"):
                stage_idx += 1
                bk = self._enter_stage()
            best = (resume.best_params, self.adam.copy()) if resume.best_params else self.snapshot()
        else:
            epoch, stage_idx = 0, 0
            bk = self._enter_stage()
            best = self.snapshot()

        try:
            while stage_idx <= last_idx:
                stage = STAGE_ORDER[stage_idx]
                if epoch >= sched.max_epochs:
                    break
                epoch += 1
                bk["stage_epoch"] += 1
                lr = sched.lr(stage)
                rng = np.random.default_rng([self.seed, epoch])
                try:
                    loss = self.run_epoch(stage, bk["stage_epoch"] - 1, lr, rng)
                except NumericalError as e:
                    raise NumericalError(f"stage {stage.value}, epoch {epoch}: {e}") from None
                if not math.isfinite(loss):
                    raise NumericalError(f"stage {stage.value}, epoch {epoch}: non-finite loss")
                scores = self.val_fn(self.model)
                rec = EpochRecord(stage.value, epoch, lr, loss, float(scores["cider"]))
                records.append(rec)
                if log_fh:
                    log_fh.write(rec.to_json() + "\n")
                    log_fh.flush()
                log.info("%s epoch %d lr %.1e loss %.4f val_cider %.4f", stage.value, epoch, lr, loss,
                         scores["cider"])

                keep = scores["reward"] if stage in (Stage.SELF_CRITICAL_1, Stage.SELF_CRITICAL_2) \
                    else scores["cider"]
                if keep > bk["best_keep"]:
                    bk["best_keep"] = float(keep)
                    best = self.snapshot()
                if scores["cider"] > bk["best_cider"] + sched.min_improvement:
                    bk["best_cider"] = float(scores["cider"])
                    bk["bad"] = 0
                else:
                    bk["bad"] += 1

                if stage is Stage.CROSS_ENTROPY:
                    done = bk["stage_epoch"] >= sched.xe_epochs
                else:
                    done = bk["bad"] >= sched.plateau_patience
                if sched.max_stage_epochs and bk["stage_epoch"] >= sched.max_stage_epochs:
                    done = True

                if done:
                    self.restore(best)
                    bk["completed"] = True
                    final = self.make_checkpoint(stage, epoch, bk)
                    if ckpt_dir:
                        save_checkpoint(ckpt_dir / f"{stage.value}_best.ckpt", final)
                    stage_idx += 1
                    bk = self._enter_stage()
                    best = self.snapshot()
                elif ckpt_dir:
                    save_checkpoint(ckpt_dir / "last.ckpt",
                                    self.make_checkpoint(stage, epoch, bk, best_params=best[0]))
        finally:
            if log_fh:
                log_fh.close()

        if stage_idx <= last_idx:
            # stopped by the epoch cap: keep the best of the interrupted stage
            self.restore(best)
            stage = STAGE_ORDER[stage_idx]
        else:
            stage = STAGE_ORDER[last_idx]
            bk["completed"] = True
        final = self.make_checkpoint(stage, epoch, bk)
        if ckpt_dir:
            save_checkpoint(ckpt_dir / "final.ckpt", final)
        return RunResult(final, records, self.model)

    def _enter_stage(self) -> dict:
        scores = self.val_fn(self.model)
        return {"stage_epoch": 0, "bad": 0, "best_cider": float(scores["cider"]),
                "best_keep": float(scores["reward"]), "entry_cider": float(scores["cider"]),
                "entry_reward": float(scores["reward"]), "completed": False}


def run_stage_schedule(train: Dataset, val: Dataset, schedule: StageSchedule, model_config: ModelConfig,
                       seed: int = 0, vocab: Vocab | None = None, attrs: AttributeVocab | None = None,
                       val_fn: Callable | None = None, resume: Checkpoint | str | Path | None = None,
                       log_path=None, ckpt_dir=None) -> RunResult:
    """Run the staged schedule; returns the final checkpoint and epoch log."""
    model = CaptionModel(model_config, seed=seed)
    if isinstance(resume, (str, Path)):
        resume = load_checkpoint(resume, vocab.content_hash() if vocab else None)
    trainer = Trainer(model, train, val, schedule, seed=seed, attrs=attrs, vocab=vocab, val_fn=val_fn)
    return trainer.run(resume=resume, log_path=log_path, ckpt_dir=ckpt_dir)


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
