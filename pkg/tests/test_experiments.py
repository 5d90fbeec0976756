from distillvol.experiments import DistillSetup, distillation_checks, outcome_table, run_distillation, run_overfit


def test_student_budget_matches_teacher_epochs():
    assert DistillSetup().student_budget() == 1800
    assert DistillSetup(iterations=10, n_labeled=5, n_unlabeled=5).student_budget() == 20
    assert DistillSetup(student_iterations=7).student_budget() == 7


def test_tiny_distillation_runs_end_to_end():
    setup = DistillSetup(n_labeled=2, n_unlabeled=2, n_eval=2, extent=16, iterations=2)
    outcome = run_distillation(setup)
    assert [m for m, _ in outcome_table(outcome)] == ["unet", "res_unet", "cascaded_unet", "Ensemble", "Distilled"]
    assert all(0.0 <= outcome.wt(m) <= 1.0 for m in outcome.reports)
    assert len(distillation_checks(outcome)) == 4


def test_overfit_result_ratio():
    res = run_overfit("unet", iterations=20)
    assert res.initial_mean > 0 and res.ratio_at(20) > 0
    assert set(res.dice) == {"WT", "TC", "ET"}
