import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from distillvol import losses as L
from distillvol.tensor import Tensor

from oracles import bce_loops, dice_loss_loops, dice_sets, percentile_sorted


def _pair(rng, shape=(3, 4, 4, 4)):
    p = rng.uniform(0, 1, shape)
    g = (rng.uniform(0, 1, shape) > 0.6).astype(np.float64)
    return p, g


def test_dice_loss_matches_loop_reference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, g = _pair(rng)
        got = L.soft_dice_loss(Tensor(p), g).item()
        assert abs(got - dice_loss_loops(p, g)) < 1e-6


def test_bce_matches_loop_reference():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p, g = _pair(rng)
        assert abs(L.bce_loss(Tensor(p), g).item() - bce_loops(p, g)) < 1e-6


def test_dice_loss_hand_example():
    p = np.array([0.5, 0.5]).reshape(1, 1, 1, 2)
    g = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
    assert L.soft_dice_loss(Tensor(p), g).item() == pytest.approx(1 / 3, abs=1e-4)


def test_dice_loss_edge_cases():
    g = np.zeros((3, 2, 2, 2))
    g[:, 0] = 1
    assert L.soft_dice_loss(Tensor(g.copy()), g).item() == pytest.approx(0.0, abs=1e-6)
    zeros = np.zeros((3, 2, 2, 2))
    assert L.soft_dice_loss(Tensor(zeros), zeros).item() == pytest.approx(0.0, abs=1e-6)


def test_bce_hand_examples():
    assert L.bce_loss(Tensor(np.full((3, 2, 2, 2), 0.5)), np.ones((3, 2, 2, 2))).item() == pytest.approx(math.log(2), abs=1e-4)
    one = np.ones((1, 1, 1, 1))
    assert L.bce_loss(Tensor(one), np.zeros_like(one)).item() == pytest.approx(-math.log(1e-7), abs=1e-3)
    g = (np.arange(24).reshape(3, 2, 2, 2) % 2).astype(np.float64)
    assert L.bce_loss(Tensor(g.copy()), g).item() < 1e-6


def test_batched_losses_pool_over_samples():
    rng = np.random.default_rng(2)
    p, g = _pair(rng, (2, 3, 2, 2, 2))
    pooled = L.soft_dice_loss(Tensor(p), g).item()
    ref = dice_loss_loops(p.transpose(1, 0, 2, 3, 4), g.transpose(1, 0, 2, 3, 4))
    assert pooled == pytest.approx(ref, abs=1e-9)


def test_combined_loss_is_sum_and_differentiable():
    rng = np.random.default_rng(3)
    p, g = _pair(rng)
    tp = Tensor(p, requires_grad=True)
    lv = L.combined_loss(tp, g)
    assert lv.total_value == pytest.approx(lv.dice_part + lv.bce_part)
    assert lv.K == 3 and lv.N == 64
    lv.total.backward()
    assert tp.grad.shape == p.shape and np.any(tp.grad != 0)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        L.soft_dice_loss(Tensor(np.zeros((3, 2, 2, 2))), np.zeros((3, 2, 2, 1)))


# -- region mapping -------------------------------------------------------------


@pytest.mark.parametrize(
    "label,expected", [(0, (0, 0, 0)), (1, (1, 1, 0)), (2, (1, 0, 0)), (4, (1, 1, 1))]
)
def test_label_region_table(label, expected):
    regions = L.labels_to_regions(np.full((1, 1, 1), label))
    assert tuple(regions[:, 0, 0, 0]) == expected
    assert L.regions_to_labels(regions.astype(float))[0, 0, 0] == label


def test_invalid_label_rejected():
    with pytest.raises(ValueError, match="invalid label"):
        L.labels_to_regions(np.array([[[3]]]))


def test_region_priority():
    probs = np.array([0.9, 0.9, 0.9]).reshape(3, 1, 1, 1)
    assert L.regions_to_labels(probs)[0, 0, 0] == 4
    probs = np.array([0.9, 0.1, 0.1]).reshape(3, 1, 1, 1)
    assert L.regions_to_labels(probs)[0, 0, 0] == 2


@given(hnp.arrays(np.uint8, (3, 3, 3), elements=st.sampled_from(L.LABEL_VALUES)))
def test_round_trip_and_nesting(labels):
    regions = L.labels_to_regions(labels)
    wt, tc, et = regions.astype(bool)
    assert np.all(et <= tc) and np.all(tc <= wt)
    np.testing.assert_array_equal(L.regions_to_labels(regions.astype(np.float32)), labels)


# -- hard dice ---------------------------------------------------------------------


def test_dice_hand_examples():
    assert L.dice_score(np.array([1, 1, 0, 0]), np.array([0, 1, 1, 0])) == 0.5
    assert L.dice_score(np.zeros(4), np.zeros(4)) == 1.0
    assert L.dice_score(np.zeros(4), np.array([0, 1, 0, 0])) == 0.0
    assert L.dice_score(np.array([1, 0, 1]), np.array([1, 0, 1])) == 1.0


def test_dice_rejects_non_binary():
    with pytest.raises(ValueError):
        L.dice_score(np.array([0, 2]), np.array([0, 1]))


@given(
    hnp.arrays(np.uint8, (2, 3, 3), elements=st.integers(0, 1)),
    hnp.arrays(np.uint8, (2, 3, 3), elements=st.integers(0, 1)),
)
def test_dice_matches_set_oracle(a, b):
    assert L.dice_score(a, b) == pytest.approx(dice_sets(a, b), abs=1e-12)


# -- summaries and exports ----------------------------------------------------------


def test_summary_examples():
    s = L.summarize_metrics([{"WT": 0.8, "TC": 0.5, "ET": 0.1}])
    assert s["WT"].mean == s["WT"].median == 0.8
    s = L.summarize_metrics([{"WT": 0.8, "TC": 1, "ET": 0}, {"WT": 0.9, "TC": 1, "ET": 0}])
    assert s["WT"].mean == pytest.approx(0.85)
    with pytest.raises(ValueError):
        L.summarize_metrics([])


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=30))
def test_quartiles_match_sorted_oracle(values):
    s = L.summarize_metrics([{"WT": v, "TC": v, "ET": v} for v in values])["WT"]
    assert s.q1 == pytest.approx(percentile_sorted(values, 25), abs=1e-12)
    assert s.median == pytest.approx(percentile_sorted(values, 50), abs=1e-12)
    assert s.q3 == pytest.approx(percentile_sorted(values, 75), abs=1e-12)
    assert s.min == min(values) and s.max == max(values)


def test_csv_round_trip_and_layout(tmp_path):
    rows = [("a", {"WT": 0.9, "TC": 0.8, "ET": 0.7}), ("b", {"WT": 1.0, "TC": 0.0, "ET": 0.5})]
    L.write_case_csv(tmp_path / "c.csv", rows)
    assert (tmp_path / "c.csv").read_text(encoding="utf-8").splitlines()[0] == "case_id,dice_wt,dice_tc,dice_et"
    assert L.read_case_csv(tmp_path / "c.csv") == rows
    L.write_boxplot_csv(tmp_path / "b.csv", L.summarize_metrics([d for _, d in rows]))
    lines = (tmp_path / "b.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "region,min,q1,median,q3,max"
    assert [l.split(",")[0] for l in lines[1:]] == ["ET", "WT", "TC"]
    assert L.format_table([("m", rows[0][1])]).splitlines()[0] == "Method\tDice ET\tDice WT\tDice TC"
