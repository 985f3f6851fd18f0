"""Figure rendering writes valid PNG files for every report shape."""

import math

import numpy as np

from seqrec.figures import (
    save_attention_heatmap,
    save_metric_bars,
    save_sweep_curves,
    save_training_curves,
)
from seqrec.trainer import EpochLog

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    return path.read_bytes()[:8] == PNG_MAGIC


def test_attention_heatmap(tmp_path):
    path = tmp_path / "attn.png"
    save_attention_heatmap(np.eye(6) * 0.5 + 0.1, str(path), "layer 1, head 1")
    assert is_png(path)


def test_training_curves_with_validation(tmp_path):
    rows = [
        EpochLog(epoch=1, loss=3.2, val_hr10=0.1, val_ndcg10=0.05, lr=1e-4,
                 wallclock_s=1.0),
        EpochLog(epoch=2, loss=2.8, val_hr10=0.2, val_ndcg10=0.12, lr=9e-5,
                 wallclock_s=1.1),
    ]
    path = tmp_path / "curves.png"
    save_training_curves(rows, str(path))
    assert is_png(path)


def test_training_curves_without_validation(tmp_path):
    rows = [
        EpochLog(epoch=1, loss=3.2, val_hr10=math.nan, val_ndcg10=math.nan,
                 lr=1e-4, wallclock_s=1.0),
    ]
    path = tmp_path / "curves.png"
    save_training_curves(rows, str(path))
    assert is_png(path)


def test_sweep_curves(tmp_path):
    path = tmp_path / "sweep.png"
    save_sweep_curves([0.2, 0.4, 0.6],
                      {"HR@10": [0.5, 0.6, 0.55], "MRR": [0.3, 0.35, 0.33]},
                      str(path), xlabel="mask-proportion")
    assert is_png(path)


def test_metric_bars(tmp_path):
    path = tmp_path / "metrics.png"
    save_metric_bars({"HR@10": 0.61, "NDCG@10": 0.44, "MRR": 0.39},
                     str(path), "test metrics")
    assert is_png(path)
