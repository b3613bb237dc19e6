import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from capfuse.data import gen_synthetic  # noqa: E402
from capfuse.model import CaptionModel, ModelConfig  # noqa: E402

MODS = {"motion": 6, "appearance": 5, "audio": 4}


@pytest.fixture(scope="session")
def tiny_data():
    """12 short synthetic videos with one aux probability stream."""
    return gen_synthetic(3, n_videos=12, n_frames=4, modality_dims=MODS, vocab_size=10,
                         max_caption_len=4, prob_dims={"eco": 5})


def tiny_model(decoder="topdown", seed=0, vocab_size=10, semantic_k=0, aux=True):
    cfg = ModelConfig(vocab_size=vocab_size, modalities=dict(MODS),
                      aux_modalities={"eco": 5} if aux else {}, decoder=decoder,
                      dim=8, hidden=8, att_dim=6, n_frames=4, semantic_k=semantic_k, semantic_hidden=6)
    return CaptionModel(cfg, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
