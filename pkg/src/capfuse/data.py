"""Feature containers, caption corpora, vocabulary and the synthetic generator."""
from __future__ import annotations

import hashlib
import json
import struct
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

MAGIC = b"MMFC"
VERSION = 1


class DataError(Exception):
    """Malformed or missing input data."""


class FormatError(DataError):
    """A binary container failed to parse; ``offset`` is the failing byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------- tokenizing

def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (0x4E00 <= cp <= 0x9FFF or 0x3400 <= cp <= 0x4DBF or 0x20000 <= cp <= 0x2A6DF
            or 0xF900 <= cp <= 0xFAFF or 0x3000 <= cp <= 0x303F or 0xFF00 <= cp <= 0xFFEF)


def _split_cjk(word: str) -> list[str]:
    out, run = [], []
    for ch in word:
        if _is_cjk(ch):
            if run:
                out.append("".join(run))
                run = []
            out.append(ch)
        else:
            run.append(ch)
    if run:
        out.append("".join(run))
    return out


def tokenize(text: str, max_len: int = 30) -> list[str]:
    """Lowercase, split on whitespace, clip to ``max_len`` tokens.

    CJK codepoints become single-character tokens (no word segmenter).
    """
    text = unicodedata.normalize("NFC", text).lower()
    tokens: list[str] = []
    for word in text.split():
        tokens.extend(_split_cjk(word))
    return tokens[:max_len]


# ---------------------------------------------------------------- vocabulary

class Vocab:
    """Token/id mapping with ids 0..3 reserved for pad, bos, eos and unk."""

    def __init__(self, words: Sequence[str] = ()):
        self.itos: list[str] = list(SPECIALS) + list(words)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] >= 4

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def words(self) -> list[str]:
        return self.itos[4:]

    def encode(self, tokens: Iterable[str], add_eos: bool = True) -> list[int]:
        ids = [self.stoi.get(t, UNK) if t not in SPECIALS else UNK for t in tokens]
        return ids + [EOS] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        p = Path(path)
        if not p.exists():
            raise DataError(f"vocabulary file not found: {p}")
        return cls([ln for ln in p.read_text(encoding="utf-8").split("\n") if ln])


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 5) -> Vocab:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(t for sent in corpus for t in sent)
    kept = [t for t, c in counts.items() if c >= min_count and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


# ---------------------------------------------------------------- captions

@dataclass
class CaptionRecord:
    video_id: str
    references: list[list[int]]


def read_captions(path) -> dict[str, list[str]]:
    """JSON-lines ``{"video_id": ..., "captions": [...]}`` into an ordered dict."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"captions file not found: {p}")
    out: dict[str, list[str]] = {}
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["video_id"])] = [str(c) for c in rec["captions"]]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{p}:{lineno}: bad caption record ({e})") from None
    return out


def write_captions(path, captions: dict[str, list[str]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for vid, caps in captions.items():
            fh.write(json.dumps({"video_id": vid, "captions": list(caps)}, ensure_ascii=False) + "\n")


def encode_captions(captions: dict[str, list[str]], vocab: Vocab, max_len: int = 30) -> list[CaptionRecord]:
    return [CaptionRecord(vid, [vocab.encode(tokenize(c, max_len)) for c in caps])
            for vid, caps in captions.items()]


# ---------------------------------------------------------------- features

@dataclass
class FeatureBundle:
    video_id: str
    modalities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, m in self.modalities.items():
            m = np.asarray(m, dtype=np.float32)
            if m.ndim != 2:
                raise DataError(f"modality {name!r} of {self.video_id!r} must be 2-D, got shape {m.shape}")
            self.modalities[name] = m

    @property
    def n_frames(self) -> int:
        return max(m.shape[0] for m in self.modalities.values())


def write_features(bundles: Sequence[FeatureBundle], path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<HI", VERSION, len(bundles))
    for b in bundles:
        vid = b.video_id.encode("utf-8")
        buf += struct.pack("<H", len(vid)) + vid
        buf += struct.pack("<H", len(b.modalities))
        for name, mat in b.modalities.items():
            nm = name.encode("utf-8")
            mat = np.ascontiguousarray(mat, dtype="<f4")
            buf += struct.pack("<H", len(nm)) + nm
            buf += struct.pack("<II", *mat.shape)
            buf += mat.tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (n,) = self.unpack("<H", what + " length")
        at = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid UTF-8 in {what}", at) from None


def read_features(path) -> list[FeatureBundle]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"feature file not found: {p}")
    r = _Reader(p.read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'MMFC'", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (count,) = r.unpack("<I", "bundle count")
    bundles = []
    for _ in range(count):
        vid = r.text("video id")
        (n_mod,) = r.unpack("<H", "modality count")
        mods = {}
        for _ in range(n_mod):
            name = r.text("modality name")
            n, d = r.unpack("<II", f"shape of {name!r}")
            raw = r.take(4 * n * d, f"matrix {name!r}")
            mods[name] = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float32)
        bundles.append(FeatureBundle(vid, mods))
    if r.pos != len(r.raw):
        raise FormatError("trailing bytes after last bundle", r.pos)
    return bundles


def align_frames(bundle: FeatureBundle, n_frames: int = 32) -> FeatureBundle:
    """Resample every modality to ``n_frames`` rows by uniform index sampling."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    out = {}
    for name, mat in bundle.modalities.items():
        n = mat.shape[0]
        if n == 0:
            raise DataError(f"modality {name!r} of {bundle.video_id!r} is empty")
        if n == n_frames:
            out[name] = mat
            continue
        if n == 1 or n_frames == 1:
            idx = np.zeros(n_frames, dtype=np.int64)
        else:
            idx = np.rint(np.arange(n_frames) * (n - 1) / (n_frames - 1)).astype(np.int64)
        out[name] = mat[idx]
    return FeatureBundle(bundle.video_id, out)


# ---------------------------------------------------------------- synthetic

_WORDS = (
    "man woman dog cat boy girl plays guitar runs jumps ball water table kitchen "
    "cooks food rides bike horse street sings dances room talks phone reads book "
    "paints wall throws catches swims pool climbs rock drives car walks park eats "
    "apple cuts paper opens door washes dishes kicks skates ice holds baby"
).split()


@dataclass
class SyntheticSpec:
    """Hidden generator state, kept for probe tests."""
    latents: list[list[int]]
    projections: dict[str, np.ndarray]


def gen_synthetic(seed: int, n_videos: int = 32, n_frames: int = 8,
                  modality_dims: dict[str, int] | None = None, vocab_size: int = 24,
                  max_caption_len: int = 8, prob_dims: dict[str, int] | None = None,
                  noise: float = 0.1, dropout: float = 0.1, n_paraphrases: int = 2,
                  return_spec: bool = False):
    """Deterministic toy corpus whose captions are recoverable from the features.

    Frame ``j`` of every per-frame modality carries the projected one-hot code
    of latent token ``j`` (the eos code past the caption end).  Modalities in
    ``prob_dims`` are single-row probability vectors derived from the bag of
    latent tokens, standing in for classifier-backbone distributions.
    """
    if vocab_size < 8:
        raise ValueError("vocab_size must be >= 8")
    modality_dims = dict(modality_dims or {"motion": 32, "appearance": 48, "audio": 16})
    prob_dims = dict(prob_dims or {})
    rng = np.random.default_rng(seed)
    n_words = vocab_size - 4
    words = [_WORDS[i] if i < len(_WORDS) else f"word{i}" for i in range(n_words)]
    vocab = Vocab(words)
    max_caption_len = max(1, min(max_caption_len, n_frames))
    min_len = max(1, (max_caption_len + 1) // 2)

    proj = {name: rng.standard_normal((vocab_size, d)).astype(np.float32)
            for name, d in modality_dims.items()}
    prob_proj = {name: rng.standard_normal((vocab_size, d)).astype(np.float32)
                 for name, d in prob_dims.items()}

    bundles, records, latents = [], [], []
    for v in range(n_videos):
        length = int(rng.integers(min_len, max_caption_len + 1))
        latent = [int(t) for t in rng.integers(4, vocab_size, size=length)]
        latents.append(latent)
        codes = np.full(n_frames, EOS, dtype=np.int64)
        codes[:length] = latent
        onehot = np.eye(vocab_size, dtype=np.float32)[codes]
        mods = {}
        for name in modality_dims:
            clean = onehot @ proj[name]
            mods[name] = (clean + noise * rng.standard_normal(clean.shape)).astype(np.float32)
        bag = np.bincount(latent, minlength=vocab_size).astype(np.float32)
        for name in prob_dims:
            z = bag @ prob_proj[name]
            z = np.exp(z - z.max())
            mods[name] = (z / z.sum()).astype(np.float32)[None, :]
        vid = f"video{v:04d}"
        bundles.append(FeatureBundle(vid, mods))
        refs = [latent + [EOS]]
        for _ in range(n_paraphrases):
            keep = rng.random(length) >= dropout
            para = [t for t, k in zip(latent, keep) if k] or latent[:1]
            refs.append(para + [EOS])
        records.append(CaptionRecord(vid, refs))
    if return_spec:
        return bundles, records, vocab, SyntheticSpec(latents, proj)
    return bundles, records, vocab


def records_to_captions(records: Sequence[CaptionRecord], vocab: Vocab) -> dict[str, list[str]]:
    return {r.video_id: [" ".join(vocab.decode(ref)) for ref in r.references] for r in records}
