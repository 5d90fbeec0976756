import logging
import math

import numpy as np
import pytest

from distillvol import data as D, nn
from distillvol.distill import (
    PseudoLabeledCase,
    distill,
    ensemble_predict,
    load_pseudo_store,
    predict_member,
    pseudo_label,
    save_pseudo_label,
)
from distillvol.optim import LrSchedule
from distillvol.report import evaluate_cases, write_report
from distillvol.losses import labels_to_regions, read_case_csv, summarize_metrics
from distillvol.tensor import Tensor
from distillvol.train import TrainConfig


class ConstantModel:
    """Emits the same probability everywhere."""

    def __init__(self, prob):
        self.logit = math.log(prob / (1 - prob))

    def __call__(self, x):
        return Tensor(np.full((x.shape[0], 3) + x.shape[2:], self.logit, np.float32))


class OracleModel:
    """Returns +/-20 logits from fixed region masks."""

    def __init__(self, regions):
        self.regions = regions

    def __call__(self, x):
        return Tensor((self.regions[None].astype(np.float32) * 40 - 20)[..., : x.shape[2], : x.shape[3], : x.shape[4]])


IMAGE = np.ones((4, 8, 8, 8), np.float32)


def test_ensemble_examples():
    np.testing.assert_allclose(ensemble_predict([ConstantModel(0.2), ConstantModel(0.6)], IMAGE), 0.4, atol=1e-6)
    one = ConstantModel(0.3)
    np.testing.assert_array_equal(ensemble_predict([one], IMAGE), predict_member(one, IMAGE))
    with pytest.raises(ValueError):
        ensemble_predict([], IMAGE)


def test_ensemble_of_identical_real_models_is_bit_exact():
    net = nn.build_unet(nn.default_config("unet", 4, levels=3))
    image = np.random.default_rng(0).standard_normal((4, 8, 8, 8)).astype(np.float32)
    single = predict_member(net, image)
    np.testing.assert_array_equal(ensemble_predict([net, net, net], image), single)


def test_ensemble_order_invariant():
    models = [ConstantModel(p) for p in (0.1, 0.35, 0.8)]
    a = ensemble_predict(models, IMAGE)
    b = ensemble_predict(models[::-1], IMAGE)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_member_with_fixed_input_extent_resamples_back():
    net = nn.build_cascaded_unet(nn.default_config("cascaded_unet", 4, levels=2))
    net.input_extent = (8, 8, 8)
    probs = predict_member(net, np.ones((4, 6, 10, 12), np.float32))
    assert probs.shape == (3, 6, 10, 12)


# -- pseudo-labels ---------------------------------------------------------------------


def test_pseudo_label_store_round_trip(tmp_path, caplog):
    scans = [D.generate_synthetic_case(s, (16, 16, 16), labeled=False) for s in (1, 2)]
    labeled = D.generate_synthetic_case(3, (16, 16, 16))
    for s in scans:
        D.save_scan(s, tmp_path / "unl")
    models = [ConstantModel(0.25), nn.build_unet(nn.default_config("unet", 4, levels=3))]
    with caplog.at_level(logging.WARNING):
        cases = pseudo_label(models, scans + [labeled], tmp_path / "store")
    assert "already has labels" in caplog.text
    assert [c.case_id for c in cases] == [s.case_id for s in scans]
    assert all(c.provenance == "ensemble" for c in cases)
    back = load_pseudo_store(tmp_path / "store", tmp_path / "unl")
    for a, b in zip(cases, back):
        np.testing.assert_array_equal(a.probs, b.probs)
        assert b.scan is not None and b.provenance == "ensemble"
    assert pseudo_label(models, []) == []


def test_pseudo_label_validates_probabilities():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        PseudoLabeledCase("x", np.full((3, 2, 2, 2), 1.5, np.float32))


def test_store_rejects_foreign_provenance(tmp_path):
    save_pseudo_label(PseudoLabeledCase("x", np.zeros((3, 2, 2, 2), np.float32), provenance="manual"), tmp_path)
    with pytest.raises(ValueError, match="provenance"):
        load_pseudo_store(tmp_path)


# -- student --------------------------------------------------------------------------


def _student_cfg(iterations=2):
    return TrainConfig("res_unet", (16, 16, 16), 1, LrSchedule("constant", 1e-3), iterations=iterations, augment=None)


def test_distill_refuses_eval_overlap():
    lab = D.generate_synthetic_case(1, (16, 16, 16))
    with pytest.raises(ValueError, match="overlaps"):
        distill([lab], [], nn.default_config("res_unet", 8), _student_cfg(), eval_ids={lab.case_id})


def test_distill_without_pseudo_is_supervised():
    lab = D.generate_synthetic_case(1, (16, 16, 16))
    student, result = distill([lab], [], nn.default_config("res_unet", 8), _student_cfg())
    assert student.arch == "res_unet" and len(result.history) == 2


def test_distill_mixes_sources():
    lab = D.generate_synthetic_case(1, (16, 16, 16))
    unl = D.generate_synthetic_case(2, (16, 16, 16), labeled=False)
    pseudo = pseudo_label([ConstantModel(0.7)], [unl])
    _, result = distill([lab], pseudo, nn.default_config("res_unet", 8), _student_cfg(4), eval_ids={"held"})
    assert len(result.history) == 4


# -- evaluation reports ----------------------------------------------------------------


def test_perfect_and_empty_predictions(tmp_path):
    scan = D.generate_synthetic_case(4, (16, 16, 16))
    regions = labels_to_regions(scan.labels)
    perfect = evaluate_cases(lambda im: predict_member(OracleModel(regions), im), [scan], "oracle")
    assert perfect.rows[0][1] == {"WT": 1.0, "TC": 1.0, "ET": 1.0}
    empty = evaluate_cases(lambda im: np.zeros((3,) + im.shape[1:], np.float32), [scan], "empty")
    assert empty.rows[0][1] == {"WT": 0.0, "TC": 0.0, "ET": 0.0}
    paths = write_report(perfect, tmp_path)
    assert summarize_metrics([d for _, d in read_case_csv(paths["per_case"])]) == perfect.summary
    assert paths["summary"].read_text(encoding="utf-8").startswith("Method\tDice ET\tDice WT\tDice TC\n")


def test_evaluation_requires_labels():
    with pytest.raises(ValueError, match="no manual labels"):
        evaluate_cases(lambda im: im[:3], [D.generate_synthetic_case(1, (16, 16, 16), labeled=False)])
