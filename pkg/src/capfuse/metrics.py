"""Caption metrics: corpus BLEU-4, ROUGE-L, CIDEr-D and exact-match METEOR.

Sentences are token sequences (any hashable tokens); no casefolding here.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from functools import lru_cache
from typing import Hashable, Sequence

import numpy as np

Sentence = Sequence[Hashable]


def ngram_counts(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------- BLEU

def _bleu_stats(cand: Sentence, refs: Sequence[Sentence], max_n: int = 4):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cc = ngram_counts(cand, n)
        best = Counter()
        for r in refs:
            for g, c in ngram_counts(r, n).items():
                if c > best[g]:
                    best[g] = c
        matches.append(sum(min(c, best[g]) for g, c in cc.items()))
        totals.append(max(len(cand) - n + 1, 0))
    # closest reference length, shorter wins ties
    ref_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    return matches, totals, ref_len


def bleu4(candidates: Sequence[Sentence], references: Sequence[Sequence[Sentence]]) -> float:
    """Corpus BLEU-4, unsmoothed, closest-reference brevity penalty."""
    if not candidates:
        raise ValueError("bleu4: empty candidate list")
    if len(candidates) != len(references):
        raise ValueError("bleu4: candidates and references differ in length")
    m_tot, t_tot = np.zeros(4), np.zeros(4)
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("bleu4: empty reference set")
        m, t, r = _bleu_stats(cand, refs)
        m_tot += m
        t_tot += t
        c_len += len(cand)
        r_len += r
    if np.any(m_tot == 0):
        return 0.0
    log_p = float(np.sum(np.log(m_tot / t_tot))) / 4.0
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def sentence_bleu4(candidate: Sentence, references: Sequence[Sentence], smooth: bool = True) -> float:
    """Sentence BLEU-4; ``smooth`` adds one to every n-gram match and total."""
    if not candidate:
        return 0.0
    m, t, r = _bleu_stats(candidate, references)
    if smooth:
        m = [x + 1 for x in m]
        t = [x + 1 for x in t]
    elif min(m) == 0:
        return 0.0
    log_p = sum(math.log(a / b) for a, b in zip(m, t)) / 4.0
    c = len(candidate)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


# ------------------------------------------------------------------- ROUGE-L

def lcs_length(a: Sentence, b: Sentence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sentence, references: Sequence[Sentence], beta: float = 1.2) -> float:
    if not references:
        raise ValueError("rouge_l: empty reference set")
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0 or not ref:
            continue
        r = lcs / len(ref)
        p = lcs / len(candidate)
        f = (1 + beta ** 2) * r * p / (r + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l_corpus(candidates, references, beta: float = 1.2) -> float:
    return float(np.mean([rouge_l(c, r, beta) for c, r in zip(candidates, references)]))


# ------------------------------------------------------------------- CIDEr-D

class CiderD:
    """CIDEr-D scorer with document frequencies fixed from a reference corpus."""

    def __init__(self, reference_corpus: Sequence[Sequence[Sentence]], n: int = 4, sigma: float = 6.0):
        if len(reference_corpus) < 2:
            raise ValueError("CIDEr-D needs a corpus of at least 2 reference sets")
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in reference_corpus:
            seen = set()
            for r in refs:
                for k in range(1, n + 1):
                    seen.update(ngram_counts(r, k))
            self.df.update(seen)
        self.log_n = math.log(float(len(reference_corpus)))

    def _vec(self, tokens: Sentence):
        vecs = [dict() for _ in range(self.n)]
        norms = [0.0] * self.n
        for k in range(1, self.n + 1):
            for g, tf in ngram_counts(tokens, k).items():
                w = tf * (self.log_n - math.log(max(1.0, self.df[g])))
                vecs[k - 1][g] = w
                norms[k - 1] += w * w
        return vecs, [math.sqrt(x) for x in norms], len(tokens)

    def score(self, candidate: Sentence, references: Sequence[Sentence]) -> float:
        if not references:
            raise ValueError("cider_d: empty reference set")
        cv, cn, cl = self._vec(candidate)
        total = np.zeros(self.n)
        for ref in references:
            rv, rn, rl = self._vec(ref)
            pen = math.exp(-((cl - rl) ** 2) / (2 * self.sigma ** 2))
            for k in range(self.n):
                num = sum(min(w, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, w in cv[k].items())
                if cn[k] != 0 and rn[k] != 0:
                    num /= cn[k] * rn[k]
                total[k] += num * pen
        return 10.0 * float(total.mean()) / len(references)


def cider_d(candidates: Sequence[Sentence], references: Sequence[Sequence[Sentence]],
            sigma: float = 6.0) -> tuple[np.ndarray, float]:
    """Per-sentence CIDEr-D scores and their mean; IDF from ``references``."""
    if len(candidates) != len(references):
        raise ValueError("cider_d: candidates and references differ in length")
    scorer = CiderD(references, sigma=sigma)
    scores = np.array([scorer.score(c, r) for c, r in zip(candidates, references)])
    return scores, float(scores.mean())


# ------------------------------------------------------------- METEOR (exact)

def _min_chunks(cand: Sentence, ref: Sentence) -> tuple[int, int]:
    """(matches, chunks) for a maximal exact alignment with the fewest chunks."""
    cc, rc = Counter(cand), Counter(ref)
    need = {w: min(cc[w], rc[w]) for w in cc if w in rc}
    m = sum(need.values())
    if m == 0:
        return 0, 0
    ref_pos = defaultdict(list)
    for j, w in enumerate(ref):
        if w in need:
            ref_pos[w].append(j)
    # occurrences of each word in cand[i:]
    tail = [Counter() for _ in range(len(cand) + 1)]
    for i in range(len(cand) - 1, -1, -1):
        tail[i] = tail[i + 1].copy()
        tail[i][cand[i]] += 1

    @lru_cache(maxsize=None)
    def links(i: int, prev: int, used: int) -> int:
        # max number of adjacent aligned pairs achievable from position i on
        if i == len(cand):
            return 0
        w = cand[i]
        if w not in need:
            return links(i + 1, -1, used)
        done = sum(1 for j in ref_pos[w] if used >> j & 1)
        best = -1
        if done < need[w]:
            for j in ref_pos[w]:
                if not used >> j & 1:
                    gain = 1 if prev >= 0 and j == prev + 1 else 0
                    r = links(i + 1, j, used | (1 << j))
                    if r >= 0:
                        best = max(best, gain + r)
        if tail[i + 1][w] >= need[w] - done:
            best = max(best, links(i + 1, -1, used))
        return best

    return m, m - links(0, -1, 0)


def meteor_exact(candidate: Sentence, references: Sequence[Sentence], alpha: float = 0.9,
                 beta_frag: float = 3.0, gamma: float = 0.5) -> float:
    if not references:
        raise ValueError("meteor_exact: empty reference set")
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        m, chunks = _min_chunks(candidate, ref)
        if m == 0:
            continue
        p, r = m / len(candidate), m / len(ref)
        f = p * r / (alpha * p + (1 - alpha) * r)
        pen = gamma * (chunks / m) ** beta_frag
        best = max(best, f * (1 - pen))
    return best


def meteor_exact_corpus(candidates, references, **kw) -> float:
    return float(np.mean([meteor_exact(c, r, **kw) for c, r in zip(candidates, references)]))


def evaluate(candidates: Sequence[Sentence], references: Sequence[Sequence[Sentence]]) -> dict:
    """All four corpus scores in one dict (the evaluation report payload)."""
    return {
        "bleu4": bleu4(candidates, references),
        "rouge_l": rouge_l_corpus(candidates, references),
        "cider_d": cider_d(candidates, references)[1],
        "meteor_exact": meteor_exact_corpus(candidates, references),
    }
