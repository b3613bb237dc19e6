"""Captioning model: modality embeddings, optional semantic head, one decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import decoders as D
from . import tensor as T
from .data import FeatureBundle, align_frames
from .fusion import attention_keys, embed_modalities, init_fusion, stack_modalities
from .semantic import assemble_semantic_feature, init_semantic, semantic_forward
from .tensor import Tensor

DECODERS = ("topdown", "xlan")
SEMANTIC = "semantic"


@dataclass
class ModelConfig:
    vocab_size: int
    modalities: dict = field(default_factory=dict)      # per-frame streams, name -> dim
    aux_modalities: dict = field(default_factory=dict)  # single-row distributions, name -> dim
    decoder: str = "topdown"
    dim: int = 64
    hidden: int = 64
    att_dim: int = 0          # 0 means "same as dim"
    n_frames: int = 8
    semantic_k: int = 0       # attribute count; 0 disables the semantic head
    semantic_hidden: int = 256
    embed_activation: str = "relu"

    def __post_init__(self):
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}; expected one of {DECODERS}")
        if not self.modalities:
            raise ValueError("model needs at least one per-frame modality")
        if min(self.dim, self.hidden, self.n_frames, self.vocab_size) < 1:
            raise ValueError("model dimensions must be positive")
        self.att_dim = self.att_dim or self.dim

    @property
    def fused_names(self) -> tuple:
        names = list(self.modalities)
        if self.semantic_k:
            names.append(SEMANTIC)
        else:
            names.extend(self.aux_modalities)
        return tuple(names)

    @property
    def fused_dims(self) -> dict:
        dims = dict(self.modalities)
        if self.semantic_k:
            dims[SEMANTIC] = self.semantic_k + sum(self.aux_modalities.values())
        else:
            dims.update(self.aux_modalities)
        return dims

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CaptionModel:
    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        if params is None:
            params = self.init_params(config, np.random.default_rng(seed))
        self.params: dict[str, Tensor] = params
        self._views()

    @staticmethod
    def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
        p = {}
        for k, v in init_fusion(rng, cfg.fused_dims, cfg.dim, cfg.hidden, cfg.att_dim).items():
            p[f"fusion.{k}"] = v
        if cfg.semantic_k:
            pooled_in = cfg.dim * len(cfg.modalities)
            for k, v in init_semantic(rng, pooled_in, cfg.semantic_k, cfg.semantic_hidden).items():
                p[f"semantic.{k}"] = v
        init = D.init_topdown if cfg.decoder == "topdown" else D.init_xlan
        for k, v in init(rng, cfg.dim, cfg.hidden, cfg.att_dim, cfg.vocab_size).items():
            p[f"{cfg.decoder}.{k}"] = v
        return p

    def _views(self):
        self.fusion_p = D.sub(self.params, "fusion")
        self.semantic_p = D.sub(self.params, "semantic")
        self.decoder_p = D.sub(self.params, self.config.decoder)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"parameter {k!r}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float32)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # ------------------------------------------------------------- encoding

    def collate(self, bundles: Sequence[FeatureBundle]) -> dict[str, np.ndarray]:
        """Stack aligned bundles into per-modality arrays (B, N, D) / (B, D) for aux."""
        cfg = self.config
        out = {}
        aligned = [align_frames(b, cfg.n_frames) for b in bundles]
        for name, dim in cfg.modalities.items():
            mats = []
            for b in aligned:
                if name not in b.modalities:
                    raise KeyError(f"video {b.video_id!r} lacks modality {name!r}")
                m = b.modalities[name]
                if m.shape[1] != dim:
                    raise ValueError(f"video {b.video_id!r}: modality {name!r} has dim {m.shape[1]}, expected {dim}")
                mats.append(m)
            out[name] = np.stack(mats)
        for name, dim in cfg.aux_modalities.items():
            rows = []
            for b in bundles:
                if name not in b.modalities:
                    raise KeyError(f"video {b.video_id!r} lacks modality {name!r}")
                rows.append(b.modalities[name][0])
            arr = np.stack(rows)
            out[name] = arr if cfg.semantic_k else np.repeat(arr[:, None, :], cfg.n_frames, axis=1)
        return out

    def encode(self, feats: dict[str, np.ndarray]) -> tuple[D.Encoded, Tensor | None]:
        cfg = self.config
        names = list(cfg.modalities) if cfg.semantic_k else list(cfg.fused_names)
        V = embed_modalities({n: Tensor(feats[n]) for n in names}, self.fusion_p, names,
                             cfg.embed_activation)
        attr_probs = None
        if cfg.semantic_k:
            pooled = T.mean(T.concat(V, axis=-1), axis=-2)
            attr_probs = semantic_forward(pooled, self.semantic_p)
            aux = [Tensor(feats[n]) for n in cfg.aux_modalities]
            sem = assemble_semantic_feature(attr_probs, aux, cfg.n_frames)
            V = V + embed_modalities({SEMANTIC: sem}, self.fusion_p, [SEMANTIC], cfg.embed_activation)
        fused_names = cfg.fused_names
        enc = D.Encoded(V, stack_modalities(V), attention_keys(V, self.fusion_p, fused_names), fused_names)
        return enc, attr_probs

    def init_state(self, batch: int):
        cfg = self.config
        if cfg.decoder == "topdown":
            return D.topdown_init_state(batch, cfg.hidden)
        return D.xlan_init_state(batch, cfg.hidden, cfg.dim)

    def step(self, state, prev_ids, enc: D.Encoded) -> D.StepOut:
        fn = D.topdown_step if self.config.decoder == "topdown" else D.xlan_step
        return fn(state, np.asarray(prev_ids, dtype=np.int64), enc, self.fusion_p, self.decoder_p)


def select_rows(obj, idx):
    """Gather batch rows of a state tuple or Encoded (used by beam search)."""
    if isinstance(obj, Tensor):
        return T.getitem(obj, idx)
    if isinstance(obj, D.Encoded):
        return D.Encoded([T.getitem(v, idx) for v in obj.V], T.getitem(obj.stacked, idx),
                         T.getitem(obj.keys, idx), obj.names)
    return type(obj)(*(select_rows(x, idx) for x in obj))
