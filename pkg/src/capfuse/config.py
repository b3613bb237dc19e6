"""Flat ``key=value`` run configuration with two built-in profiles."""
from __future__ import annotations

import os
from pathlib import Path

from .model import DECODERS, ModelConfig
from .training import STAGE_ORDER, StageSchedule


class ConfigError(ValueError):
    pass


DESK = {
    "profile": "desk",
    "seed": 42,
    "paths.features": "data/features.mmfc",
    "paths.captions": "data/captions.jsonl",
    "paths.vocab": "data/vocab.txt",
    "paths.attributes": "data/attributes.txt",
    "paths.checkpoints": "runs/checkpoints",
    "paths.figures": "runs/figures",
    "paths.report": "runs/eval_report.json",
    "paths.captions_out": "runs/captions_out.jsonl",
    "data.n_videos": 32,
    "data.n_val": 16,
    "data.n_frames": 8,
    "data.vocab_size": 24,
    "data.max_caption_len": 8,
    "data.modalities": "motion:32,appearance:48,audio:16",
    "data.prob_modalities": "eco:10",
    "data.noise": 0.1,
    "data.min_count": 5,
    "data.max_words": 30,
    "model.decoder": "topdown",
    "model.dim": 64,
    "model.hidden": 64,
    "model.att_dim": 64,
    "model.n_frames": 8,
    "model.aux_modalities": "eco",
    "model.semantic_k": 12,
    "model.semantic_hidden": 64,
    "model.embed_activation": "relu",
    "train.xe_epochs": 5,
    "train.lr_xe": 5e-4,
    "train.lr_oracle": 5e-5,
    "train.plateau_patience": 2,
    "train.lr_sc1": 5e-5,
    "train.lr_sc2": 5e-6,
    "train.max_epochs": 500,
    "train.max_stage_epochs": 40,
    "train.min_improvement": 1e-4,
    "train.batch_size": 16,
    "train.clip_norm": 5.0,
    "train.oracle_mu": 12.0,
    "train.semantic_weight": 1.0,
    "train.max_len": 12,
    "train.last_stage": "SelfCritical2",
    "decode.beam": 3,
    "decode.max_len": 12,
    "decode.length_alpha": 0.0,
    "eval.jobs": 1,
}

PAPER = dict(DESK, **{
    "profile": "paper",
    "data.n_frames": 32,
    "data.max_caption_len": 30,
    "model.dim": 512,
    "model.hidden": 512,
    "model.att_dim": 512,
    "model.n_frames": 32,
    "model.semantic_k": 300,
    "model.semantic_hidden": 256,
    "train.max_stage_epochs": 0,
    "train.max_len": 30,
    "decode.max_len": 30,
})

PROFILES = {"desk": DESK, "paper": PAPER}


def _coerce(key: str, raw, like):
    if isinstance(like, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(like).__name__}, got {raw!r}") from None
    return str(raw)


def parse_dims(spec: str) -> dict[str, int]:
    """``"motion:32,audio:16"`` -> ``{"motion": 32, "audio": 16}``."""
    out = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        name, _, dim = part.partition(":")
        try:
            out[name.strip()] = int(dim)
        except ValueError:
            raise ConfigError(f"bad modality spec {part!r}; expected name:dim") from None
    return out


class RunConfig:
    def __init__(self, values: dict | None = None, profile: str = "desk"):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
        self.values = dict(PROFILES[profile])
        if values:
            self.update(values)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def update(self, pairs: dict) -> "RunConfig":
        if "profile" in pairs and pairs["profile"] != self.values["profile"]:
            base = RunConfig(profile=str(pairs["profile"]))
            base_vals = {k: v for k, v in self.values.items() if v != PROFILES[self.values["profile"]][k]}
            self.values = dict(base.values, **base_vals)
        for key, raw in pairs.items():
            if key not in self.values:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, raw, PROFILES["desk"][key])
        return self

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            pairs[key.strip()] = value.strip()
        profile = pairs.pop("profile", "desk")
        return cls(pairs, profile=profile)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.parse(p.read_text(encoding="utf-8"))

    def dumps(self) -> str:
        return "".join(f"{k}={self.values[k]!r}\n" if isinstance(self.values[k], float)
                       else f"{k}={self.values[k]}\n" for k in sorted(self.values))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def apply_env(self, environ=None) -> "RunConfig":
        env = os.environ if environ is None else environ
        if env.get("CAPFUSE_SEED"):
            self.update({"seed": env["CAPFUSE_SEED"]})
        return self

    def validate(self) -> "RunConfig":
        v = self.values
        if v["model.decoder"] not in DECODERS:
            raise ConfigError(f"model.decoder must be one of {DECODERS}, got {v['model.decoder']!r}")
        for k in ("model.dim", "model.hidden", "model.att_dim", "model.n_frames", "data.n_frames",
                  "data.vocab_size", "train.batch_size", "decode.beam", "decode.max_len", "train.max_len"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be positive, got {v[k]}")
        if v["train.last_stage"] not in [s.value for s in STAGE_ORDER]:
            raise ConfigError(f"train.last_stage must be one of {[s.value for s in STAGE_ORDER]}")
        parse_dims(v["data.modalities"])
        parse_dims(v["data.prob_modalities"])
        return self

    def schedule(self) -> StageSchedule:
        fields = StageSchedule.__dataclass_fields__
        try:
            return StageSchedule(**{k: self.values[f"train.{k}"] for k in fields})
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def model_config(self, modality_dims: dict[str, int], vocab_size: int) -> ModelConfig:
        aux_names = [s.strip() for s in self.values["model.aux_modalities"].split(",") if s.strip()]
        aux = {k: modality_dims[k] for k in aux_names if k in modality_dims}
        frames = {k: d for k, d in modality_dims.items() if k not in aux}
        try:
            return ModelConfig(vocab_size=vocab_size, modalities=frames, aux_modalities=aux,
                               decoder=self.values["model.decoder"], dim=self.values["model.dim"],
                               hidden=self.values["model.hidden"], att_dim=self.values["model.att_dim"],
                               n_frames=self.values["model.n_frames"],
                               semantic_k=self.values["model.semantic_k"],
                               semantic_hidden=self.values["model.semantic_hidden"],
                               embed_activation=self.values["model.embed_activation"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
