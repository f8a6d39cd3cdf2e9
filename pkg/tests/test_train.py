import numpy as np
import pytest

from pir.model import PirModel, load_model, save_model
from pir.pipeline import (backbone_forecasts, build_db, default_config, fit_pir, revise, run_ablation,
                          split_inputs)
from pir.train import TrainingDiverged, evaluate_split, train


def quick_config(data, **kw):
    base = dict(epochs=4, patience=2, k=5, d_model=16, d_ff=32, ue_hidden=32, d_embed=8, beta_hidden=8)
    base.update(kw)
    return default_config(data, **base)


@pytest.fixture(scope="module")
def trained(small_data, small_run):
    cfg = quick_config(small_data)
    return fit_pir(small_data, small_run, cfg)


def test_fixed_seed_runs_are_bitwise_identical(small_data, small_run, trained, tmp_path):
    cfg = quick_config(small_data)
    model2, hist2, db2 = fit_pir(small_data, small_run, cfg)
    model1, hist1, db1 = trained
    save_model(model1, tmp_path / "a.json", db1.fingerprint())
    save_model(model2, tmp_path / "b.json", db2.fingerprint())
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert hist1.to_dict() == hist2.to_dict()


def test_validation_mse_never_worse_than_backbone(trained):
    _, hist, _ = trained
    best = hist.initial_val_mse if hist.best_epoch < 0 else hist.val_mse[hist.best_epoch]
    assert best <= hist.initial_val_mse


def test_chosen_epoch_is_argmin_validation_mse(trained):
    _, hist, _ = trained
    candidates = [hist.initial_val_mse] + hist.val_mse
    assert hist.best_epoch == int(np.argmin(candidates)) - 1


def test_restored_model_reproduces_best_validation(small_data, small_run, trained):
    model, hist, db = trained
    val = split_inputs(small_data, small_run.forecasts, db, model.config, "val")
    mse, _ = evaluate_split(model, val)
    expect = hist.initial_val_mse if hist.best_epoch < 0 else hist.val_mse[hist.best_epoch]
    assert mse == expect


def test_uncertainty_loss_falls_during_training(trained):
    _, hist, _ = trained
    assert hist.val_l_ue[-1] < hist.initial_val_l_ue
    assert hist.train_l_ue[-1] < hist.train_l_ue[0]


def test_divergence_reports_location(small_data, small_run):
    cfg = quick_config(small_data, epochs=1)
    db = build_db(small_data, cfg)
    tr = split_inputs(small_data, small_run.forecasts, db, cfg, "train")
    va = split_inputs(small_data, small_run.forecasts, db, cfg, "val")
    y = tr.y.copy()
    y[40] = np.nan
    bad = type(tr)(tr.ids, tr.x, tr.ybar, tr.exo, tr.y_global, tr.w, y)
    with pytest.raises(TrainingDiverged, match=r"epoch 0, batch \d+"):
        train(PirModel(cfg), bad, va)


def test_untrained_variant_reproduces_backbone(small_data, small_run):
    cfg = quick_config(small_data, variant="none")
    model, hist, db = fit_pir(small_data, small_run, cfg)
    out = revise(model, split_inputs(small_data, small_run.forecasts, db, cfg, "test"))
    assert out["y_pred"].tobytes() == small_run.forecasts["test"].tobytes()
    assert hist.best_epoch == -1


def test_ablation_lists_every_variant(small_data, small_run):
    rows = run_ablation(small_data, small_run, quick_config(small_data, epochs=1))
    assert [r["variant"] for r in rows] == ["full", "no_local", "no_global", "none"]
    base = ((small_run.forecasts["test"] - small_data.batches["test"].y) ** 2).mean()
    assert rows[-1]["mse"] == base


def test_checkpoint_records_zero_lambda(small_data, small_run, tmp_path):
    cfg = quick_config(small_data, lam=0.0, epochs=1)
    model, _, db = fit_pir(small_data, small_run, cfg)
    save_model(model, tmp_path / "m.json", db.fingerprint())
    back, _ = load_model(tmp_path / "m.json", db.fingerprint())
    assert back.config.lam == 0.0


def test_joint_backbone_mode_trains(small_data):
    run = backbone_forecasts(small_data, "linear", holdout_refit=True)
    cfg = quick_config(small_data, joint_backbone=True, epochs=1)
    model, hist, db = fit_pir(small_data, run, cfg)
    assert "backbone.weight" in model.parameters()
    assert len(hist.val_mse) == 1


def test_holdout_refit_trains_on_remaining_rows(small_data):
    run = backbone_forecasts(small_data, "linear", holdout_refit=True)
    n = len(small_data.windows["train"])
    assert run.train_rows[0] == int(0.8 * n) and run.train_rows[-1] == n - 1
