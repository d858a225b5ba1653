import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

import ssam_lab.runner as runner
from ssam_lab.errors import ConfigurationError, LabError, NumericalOverflowError, UnsupportedOperationError
from ssam_lab.masks import DropCriterion, InitialMask, MaskKind
from ssam_lab.records import read_record
from ssam_lab.runner import apply_cell, run_ablation, run_training, train

QUADRATIC = {"family": "noisy-quadratic", "dimension": 10, "sigma": 0.1}
BLOBS = {"family": "mlp-classifier", "n_samples": 120, "n_features": 4, "n_hidden": 6, "n_classes": 2}


def _payload(optimizer, objective=QUADRATIC, **extra):
    return {"objective": objective, "optimizer": optimizer, "epochs": 5, "steps_per_epoch": 20, **extra}


def test_sgd_reduces_quadratic_loss(make_config):
    record = train(make_config(_payload({"kind": "sgd", "eta0": 0.1, "momentum": 0.0})))
    assert record.status == "completed"
    assert len(record.rows) == 100
    assert [r.step for r in record.rows] == list(range(100))
    assert record.metrics["final_loss"] < record.rows[0].loss
    assert record.metrics["train_accuracy"] is None
    assert all(r.sparsity == 0.0 and r.rho_t == 0.0 for r in record.rows)


def test_fixed_mask_is_generated_once(make_config):
    cfg = make_config(
        _payload({"kind": "ssam", "rho0": 0.05}, objective=BLOBS, mask={"kind": "fixed", "sparsity": 0.8})
    )
    result = run_training(cfg)
    regen = [r.mask_regen for r in result.record.rows]
    assert regen[0] and not any(regen[1:])
    assert all(r.sparsity == 0.8 for r in result.record.rows)
    assert result.mask.popcount == round(0.2 * result.objective.dimension)
    assert 0.0 <= result.record.metrics["test_accuracy"] <= 1.0


def test_random_mask_regenerates_every_epoch(make_config):
    cfg = make_config(_payload({"kind": "ssam", "rho0": 0.05}, mask={"kind": "random", "sparsity": 0.5}))
    rows = run_training(cfg).record.rows
    flagged = [r.step for r in rows if r.mask_regen]
    assert flagged == [0, 20, 40, 60, 80]


def test_runs_are_reproducible(make_config, tmp_path):
    payload = _payload({"kind": "ssam", "rho0": 0.05}, objective=BLOBS, mask={"kind": "dynamic", "sparsity": 0.5})
    cfg = make_config(payload)
    a = run_training(cfg.with_overrides(output_dir=str(tmp_path / "a")))
    b = run_training(cfg.with_overrides(output_dir=str(tmp_path / "b")))

    def strip(rows):
        return [(r.step, r.loss, r.grad_norm_sq, r.mask_regen) for r in rows]

    assert strip(a.record.rows) == strip(b.record.rows)
    assert (tmp_path / "a" / "mask.bin").read_bytes() == (tmp_path / "b" / "mask.bin").read_bytes()
    assert strip(read_record(tmp_path / "a").rows) == strip(a.record.rows)


@pytest.mark.parametrize("kind, rho0, per_step", [("sgd", 0.0, 1), ("sam", 0.05, 2), ("ssam", 0.05, 2)])
def test_gradient_evaluations_per_step(make_config, kind, rho0, per_step):
    cfg = make_config(_payload({"kind": kind, "rho0": rho0}, mask={"kind": "random"}))
    record = train(cfg)
    assert record.metrics["gradient_evaluations"] == per_step * len(record.rows)


def test_overflow_marks_record_failed(make_config, tmp_path):
    cfg = make_config(_payload({"kind": "sgd", "eta0": 1e200, "momentum": 0.0}, output_dir=str(tmp_path / "run")))
    with pytest.raises(NumericalOverflowError):
        run_training(cfg)
    record = read_record(tmp_path / "run")
    assert record.status == "failed"
    assert "Non-finite" in record.error
    assert 0 < len(record.rows) < 100


def test_ablation_over_rho(make_config, tmp_path):
    cfg = make_config(
        _payload({"kind": "sam", "rho0": 0.05}, ablation={"rho0": [0.01, 0.05, 0.1]}, output_dir=str(tmp_path / "grid"))
    )
    result = run_ablation(cfg)
    assert [row["rho0"] for row in result.rows] == [0.01, 0.05, 0.1]
    assert [row["seed"] for row in result.rows] == [0, 1, 2]
    assert all(row["status"] == "completed" for row in result.rows)
    assert len(result.records) == 3
    for i, rho in enumerate((0.01, 0.05, 0.1)):
        assert read_record(tmp_path / "grid" / f"cell-{i:03d}").rows[0].rho_t == rho
    with (tmp_path / "grid" / "summary.csv").open(newline="") as fh:
        summary = list(csv.DictReader(fh))
    assert len(summary) == 3
    assert summary[0]["cell"] == "0"


def test_threaded_ablation_matches_serial(make_config):
    payload = _payload({"kind": "sam", "rho0": 0.05}, ablation={"rho0": [0.01, 0.1]})
    serial = run_ablation(make_config(payload))
    threaded = run_ablation(make_config({**payload, "threads": 2}))
    assert [r["final_loss"] for r in serial.rows] == [r["final_loss"] for r in threaded.rows]


def test_failed_cell_does_not_stop_the_grid(make_config):
    cfg = make_config(
        _payload({"kind": "ssam", "rho0": 0.05}, mask={"kind": "random"}, ablation={"strategy": ["fisher", "random"]})
    )
    result = run_ablation(cfg)
    assert [r["status"] for r in result.rows] == ["failed", "completed"]
    assert result.records[0] is None
    assert result.rows[0]["error"]


def test_ablation_needs_grid(make_config):
    with pytest.raises(LabError):
        run_ablation(make_config(_payload({"kind": "sgd"})))


def test_cell_strategy_mapping(make_config):
    cfg = make_config(_payload({"kind": "ssam", "rho0": 0.05}, objective=BLOBS, ablation={"strategy": ["fixed"]}))
    cell = apply_cell(cfg, {"strategy": "dynamic-sharpest", "sparsity": 0.9}, seed=7, output_dir=None)
    assert cell.mask.kind == MaskKind.DYNAMIC
    assert cell.mask.drop_criterion == DropCriterion.SHARPEST
    assert cell.mask.sparsity == 0.9
    assert (cell.seed, cell.ablation) == (7, None)

    fixed = apply_cell(cfg, {"strategy": "fixed", "rho0": 0.2}, seed=0, output_dir="x")
    assert fixed.mask.kind == MaskKind.FIXED
    assert fixed.mask.initial == InitialMask.FISHER
    assert fixed.optimizer.rho0 == 0.2
    assert fixed.output_dir == "x"


def test_fisher_cell_on_synthetic_family_fails_with_field(make_config):
    cfg = make_config(_payload({"kind": "ssam", "rho0": 0.05}, mask={"kind": "dynamic"}, ablation={"strategy": ["fixed"]}))
    with pytest.raises(ConfigurationError) as excinfo:
        apply_cell(cfg, {"strategy": "fixed"}, seed=0, output_dir=None)
    assert excinfo.value.field == "mask.initial"


def test_any_lab_error_persists_failed_record(make_config, tmp_path, monkeypatch):
    def broken(epoch, policy, context):
        raise UnsupportedOperationError(f"cannot regenerate at epoch {epoch}")

    monkeypatch.setattr(runner, "maybe_regenerate", broken)
    cfg = make_config(
        _payload({"kind": "ssam", "rho0": 0.05}, mask={"kind": "random"}, output_dir=str(tmp_path / "run"))
    )
    with pytest.raises(UnsupportedOperationError):
        run_training(cfg)
    record = read_record(tmp_path / "run")
    assert record.status == "failed"
    assert "epoch 1" in record.error
    assert len(record.rows) == 20
    assert record.metrics["gradient_evaluations"] == 40
    assert (tmp_path / "run" / "mask.bin").exists()


def test_degenerate_gradients_warn_once_per_run(make_config, monkeypatch, caplog):
    real_step = runner.step

    def flagged(state, obj, batch, config):
        stepped = real_step(state, obj, batch, config)
        return replace(stepped, info=replace(stepped.info, degenerate=True))

    monkeypatch.setattr(runner, "step", flagged)
    record = train(make_config(_payload({"kind": "sam", "rho0": 0.05})))
    warnings = [rec for rec in caplog.records if "Degenerate gradient" in rec.message]
    assert len(warnings) == 1
    assert "step 0" in warnings[0].message
    assert record.metrics["degenerate_steps"] == 100


def test_sam_is_no_worse_than_sgd_on_trig_nonconvex(make_config):
    trig = {"family": "trig-nonconvex", "dimension": 10, "sigma": 0.1, "beta": 0.5, "omega": 2.0}
    floor = 10 * minimize_scalar(lambda x: 0.5 * x * x + 0.5 * math.cos(2 * x), bounds=(0.5, 1.5), method="bounded").fun
    final = {}
    for kind, rho0 in (("sgd", 0.0), ("sam", 0.05)):
        optimizer = {"kind": kind, "eta0": 0.1, "rho0": rho0, "momentum": 0.0, "weight_decay": 0.0}
        losses = [
            train(make_config({**_payload(optimizer, objective=trig), "steps_per_epoch": 200, "seed": seed}))
            .metrics["final_loss"]
            for seed in range(5)
        ]
        final[kind] = float(np.median(losses))
    assert final["sgd"] == pytest.approx(floor, abs=0.01)
    assert final["sam"] <= final["sgd"] + 0.01
    assert final["sam"] >= floor - 1e-6
