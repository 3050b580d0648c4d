import csv
import hashlib
import io
from fractions import Fraction

import numpy as np
import pytest

from trackforge.config import TrackerConfig
from trackforge.formats import SequenceDir, write_masks, write_sequence
from trackforge.maskcore import Bitmask, iou
from trackforge.membank import simulate_schedule
from trackforge.pipeline import (
    InputError,
    OracleNoise,
    ablate_gap,
    ablate_tau,
    evaluate,
    oracle_mode_predict,
    plot_data,
    rows_to_csv,
    strip_timing,
    track,
)
from trackforge.refiner import DilateRefiner, OracleSnapRefiner
from trackforge.synth import SceneSpec, generate

SMALL = TrackerConfig(vis_channels=6, id_channels=4, memory_gap=3, memory_capacity=2)


def _scene_spec():
    return SceneSpec.from_dict(
        {
            "width": 48,
            "height": 48,
            "length": 10,
            "seed": 4,
            "objects": [
                {"shape": "rect", "gray": 0.8, "depth": 0, "size": [[0, 12, 12]], "position": [[0, 14, 20], [9, 32, 20]]},
                {"shape": "disk", "gray": 0.5, "depth": 1, "size": [[0, 10, 10]], "position": [[0, 30, 34]],
                 "visible": [[0, 4], [7, 10]]},
            ],
        }
    )


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    root = tmp_path_factory.mktemp("seq")
    spec = _scene_spec()
    write_sequence(root, generate(spec), spec.num_objects)
    return root


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.rle")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_oracle_erosion_square():
    square = np.zeros((20, 20), dtype=bool)
    square[5:15, 5:15] = True
    (out,) = oracle_mode_predict([Bitmask(square)], OracleNoise(erosion=1), 3)
    assert out.area() == 64
    assert iou(out, Bitmask(square)) == 0.64


def test_oracle_miss_is_seeded():
    gt = [Bitmask.full(4, 4)] * 6
    a = oracle_mode_predict(gt, OracleNoise(miss_prob=0.5, seed=2), 7)
    b = oracle_mode_predict(gt, OracleNoise(miss_prob=0.5, seed=2), 7)
    assert a == b
    assert all(m.is_empty() for m in oracle_mode_predict(gt, OracleNoise(miss_prob=1.0), 1))
    assert oracle_mode_predict(gt, OracleNoise(), 1) == gt


def test_oracle_zero_noise_all_ones(seq, tmp_path):
    track(seq, SMALL, tmp_path, oracle=True, oracle_noise=OracleNoise())
    m = evaluate(tmp_path / "masks", seq)
    assert all(m[k] == 1.0 for k in ("auc", "accuracy", "robustness", "adq", "quality"))
    assert m["nre"] == m["dre"] == 0.0


def test_oracle_always_miss(seq, tmp_path):
    track(seq, SMALL, tmp_path, oracle=True, oracle_noise=OracleNoise(miss_prob=1.0))
    m = evaluate(tmp_path / "masks", seq)
    assert m["nre"] == 1.0 and m["adq"] == 1.0
    assert m["robustness"] == 0.0 and m["accuracy"] == 0.0


def test_oracle_needs_flag(seq, tmp_path):
    with pytest.raises(InputError):
        track(seq, SMALL, tmp_path, oracle_noise=OracleNoise())
    with pytest.raises(InputError):
        track(seq, SMALL, tmp_path, refiner=OracleSnapRefiner(0.5, 0.2))


def test_no_gt_past_first_frame(seq, tmp_path, monkeypatch):
    seen = []
    original = SequenceDir.gt_masks

    def spy(self, t):
        seen.append(t)
        return original(self, t)

    monkeypatch.setattr(SequenceDir, "gt_masks", spy)
    track(seq, SMALL, tmp_path, refiner=DilateRefiner(1))
    assert set(seen) == {0}


def test_tau_one_matches_baseline(seq, tmp_path):
    track(seq, SMALL, tmp_path / "base")
    track(seq, SMALL, tmp_path / "gated", refiner=DilateRefiner(2), tau=1.0)
    assert _tree_digest(tmp_path / "base") == _tree_digest(tmp_path / "gated")


def test_deterministic_rerun(seq, tmp_path):
    a = track(seq, SMALL, tmp_path / "a", refiner=DilateRefiner(1), tau=0.5)
    b = track(seq, SMALL, tmp_path / "b", refiner=DilateRefiner(1), tau=0.5)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert strip_timing(a) == strip_timing(b)


def test_report_contents(seq, tmp_path):
    report = track(seq, SMALL, tmp_path, refiner=DilateRefiner(1), tau=0.2)
    assert report["refiner"] == "dilate:1"
    assert report["oracle"] is False
    assert report["gpm_calls"] == {"16": 3 * 9, "8": 9}
    assert len(report["frames"]) == 10
    assert report["frames"][0]["sources"] == ["init", "init"]
    assert (tmp_path / "report.json").is_file()
    assert len(list((tmp_path / "masks").glob("*.rle"))) == 10


def test_memory_log_follows_schedule(seq, tmp_path):
    report = track(seq, SMALL, tmp_path, oracle=True, oracle_noise=OracleNoise())
    *_, (_, bank) = simulate_schedule(10, SMALL.memory_gap, SMALL.memory_capacity)
    assert report["memory"]["retained"] == list(bank.frame_indices())
    assert report["memory"]["stored"] == bank.stored
    assert report["memory"]["evicted"] == bank.evicted


def _write_series(root, frames):
    for t, masks in enumerate(frames):
        write_masks(root / f"{t:06d}.rle", masks)


def _row_mask(k, width=10):
    bits = np.zeros((2, width), dtype=bool)
    bits[0, :k] = True
    return Bitmask(bits)


def test_golden_eval(tmp_path):
    gt_full, empty = _row_mask(10), Bitmask.empty(10, 2)
    disjoint = Bitmask(np.pad(np.ones((1, 10), dtype=bool), ((1, 0), (0, 0))))
    gt = [gt_full] * 7 + [empty] * 4
    pred = [gt_full, _row_mask(9), _row_mask(8), disjoint, empty, _row_mask(7), _row_mask(6)] + [empty] * 4
    _write_series(tmp_path / "gt", [[m] for m in gt])
    _write_series(tmp_path / "pred", [[m] for m in pred])
    m = evaluate(tmp_path / "pred", tmp_path / "gt")
    assert (m["accuracy"], m["robustness"], m["nre"], m["dre"], m["adq"], m["quality"]) == (
        0.6, 4 / 6, 1 / 6, 1 / 6, 1.0, 0.7,
    )
    obj = m["objects"][0]
    assert Fraction(obj["counts"]["tracked"], obj["counts"]["visible"]) == Fraction(2, 3)
    assert m["trace"] == [0.9, 0.8, 0.0, 0.0, 0.7, 0.6, 1.0, 1.0, 1.0, 1.0]


def test_eval_identical_all_ones(seq):
    m = evaluate(seq, seq)
    assert m["quality"] == m["auc"] == m["accuracy"] == 1.0


def test_eval_mismatches(tmp_path):
    _write_series(tmp_path / "a", [[_row_mask(3)]] * 3)
    _write_series(tmp_path / "b", [[_row_mask(3)]] * 2)
    _write_series(tmp_path / "c", [[_row_mask(3), _row_mask(2)]] * 3)
    _write_series(tmp_path / "d", [[_row_mask(3, width=12)]] * 3)
    for other in ("b", "c", "d"):
        with pytest.raises(InputError):
            evaluate(tmp_path / "a", tmp_path / other)
    with pytest.raises(InputError):
        evaluate(tmp_path / "a", tmp_path / "missing")


def test_ablate_gap_order(seq, monkeypatch):
    monkeypatch.setenv("TRACKFORGE_THREADS", "3")
    rows = ablate_gap(seq, SMALL, [1, 2, 5], oracle=True, oracle_noise=OracleNoise(erosion=1))
    assert [r["gap"] for r in rows] == [1, 2, 5]
    perm = ablate_gap(seq, SMALL, [5, 1, 2], oracle=True, oracle_noise=OracleNoise(erosion=1))
    assert perm == [rows[2], rows[0], rows[1]]
    header = rows_to_csv(rows, "gap").splitlines()[0]
    assert header == "gap,AUC,A,R,NRE,DRE,ADQ"


def test_ablate_tau_rows(seq, tmp_path):
    rows = ablate_tau(seq, SMALL, [0.0, 1.0], DilateRefiner(1), include_refine_all=True)
    assert [r["tau"] for r in rows] == [0.0, 1.0, "refine-all"]
    track(seq, SMALL, tmp_path)
    base = evaluate(tmp_path / "masks", seq)
    assert rows[1]["Q"] == base["quality"]
    assert rows[1]["A"] == base["accuracy"]


def test_plot_data(seq, tmp_path):
    report = track(seq, SMALL, tmp_path, refiner=DilateRefiner(1), tau=0.5)
    report["metrics"] = evaluate(tmp_path / "masks", seq)
    rows = list(csv.DictReader(io.StringIO(plot_data(report))))
    assert len(rows) == 2 * 9
    assert rows[0]["frame"] == "1" and rows[0]["object"] == "1"
    assert {r["chosen_source"] for r in rows} <= {"vmos", "refined", "none"}
    with pytest.raises(InputError):
        plot_data({**report, "metrics": None})
