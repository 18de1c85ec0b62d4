import pytest

from aggseg.data import SynthConfig
from aggseg.experiment import median_by_variant, run_ablation
from aggseg.model import ArchConfig
from aggseg.trainer import TrainConfig

from conftest import SMALL_DEPTHS


def test_tiny_ablation_rows_and_csv(tmp_path):
    synth = SynthConfig(tile_size=32, num_labelled=4, num_unlabelled=4, tiles_per_pipe=2,
                        particle_diameter_range=(4.0, 10.0))
    path = tmp_path / "m.csv"
    rows = run_ablation(synth, TrainConfig(epochs=1), seeds=(0, 1), k=1,
                        arch=ArchConfig(input_size=32, block_depths=SMALL_DEPTHS), csv_path=path)
    assert [(r["setup"], r["variant"]) for r in rows] == [(s, v) for s in "01" for v in ("base", "cons", "full")]
    assert len(path.read_text().strip().split("\n")) == 7


def test_median_by_variant():
    rows = [{"variant": "base", "MF1": v} for v in (1.0, 5.0, 3.0)] + [{"variant": "full", "MF1": 2.0}]
    assert median_by_variant(rows, "MF1") == pytest.approx({"base": 3.0, "full": 2.0})
