import numpy as np

from capfuse.plots import attention_heatmap, metric_bars, training_curve

LOG = [{"stage": s, "epoch": e, "lr": 1e-4, "loss": 3.0 / e, "val_cider": 0.1 * e}
       for e, s in enumerate(["CrossEntropy"] * 3 + ["WordOracle"] * 2 + ["SelfCritical1"] * 2, 1)]
BLOCKS = {"ensemble": {"bleu4": 0.3, "rouge_l": 0.5, "cider_d": 1.2, "meteor_exact": 0.4},
          "0:topdown/final": {"bleu4": 0.2, "rouge_l": 0.4, "cider_d": 0.9, "meteor_exact": 0.3}}


class TestPlots:
    def test_training_curve_deterministic(self, tmp_path):
        a = training_curve(LOG, tmp_path / "a" / "t.png")
        b = training_curve(LOG, tmp_path / "b" / "t.png")
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_metric_bars_deterministic(self, tmp_path):
        a = metric_bars(BLOCKS, tmp_path / "a.png")
        b = metric_bars(BLOCKS, tmp_path / "b.png")
        assert a.read_bytes() == b.read_bytes()

    def test_heatmap_pads_labels(self, tmp_path):
        w = np.full((4, 3), 1 / 3)
        out = attention_heatmap(w, ["motion", "appearance", "semantic"], ["a", "dog"], tmp_path / "h.png")
        assert out.exists() and out.stat().st_size > 0
