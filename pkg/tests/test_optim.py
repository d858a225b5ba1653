import math

import numpy as np
import pytest

from ssam_lab.errors import ConfigurationError, InvalidArgumentError, PreconditionError
from ssam_lab.masks import SparseMask, random_mask
from ssam_lab.numcore import Batch, CountingObjective, MlpClassifier, NoisyQuadratic, ParamVector, true_grad
from ssam_lab.optim import (
    OptimizerConfig,
    OptimizerKind,
    Schedule,
    ScheduleRule,
    compute_perturbation,
    init_state,
    sam_step,
    schedule_at,
    sgd_step,
    ssam_step,
    step,
)


def _pv(*values):
    return ParamVector.from_array(np.array(values, dtype=float))


def _same_state(a, b):
    return a.t == b.t and np.array_equal(a.w.values, b.w.values) and np.array_equal(a.velocity.values, b.velocity.values)


def test_perturbation_examples():
    np.testing.assert_allclose(compute_perturbation(_pv(3.0, 4.0), 1.0).values, [0.6, 0.8])
    assert np.all(compute_perturbation(_pv(3.0, 4.0), 0.0).values == 0.0)
    np.testing.assert_allclose(compute_perturbation(_pv(1.0, 0.0, 0.0, 0.0), 0.05).values, [0.05, 0, 0, 0])


def test_perturbation_of_degenerate_gradient_is_zero():
    assert np.all(compute_perturbation(_pv(0.0, 1e-14), 0.1).values == 0.0)


def test_perturbation_norm_equals_rho():
    g = ParamVector.from_array(np.random.default_rng(0).standard_normal(50))
    assert compute_perturbation(g, 0.3).norm() == pytest.approx(0.3, rel=1e-12)


@pytest.mark.parametrize("c", [0.25, 2.0, 1024.0])
def test_perturbation_is_scale_equivariant(c):
    g = ParamVector.from_array(np.random.default_rng(1).standard_normal(20))
    assert np.array_equal(compute_perturbation(g * c, 0.05).values, compute_perturbation(g, 0.05).values)


def test_negative_rho_is_rejected():
    with pytest.raises(InvalidArgumentError):
        compute_perturbation(_pv(1.0), -0.1)


@pytest.mark.parametrize(
    "schedule, t, expected",
    [
        (Schedule(0.5, ScheduleRule.INVERSE_SQRT), 4, 0.25),
        (Schedule(0.5, ScheduleRule.INVERSE_SQRT), 1, 0.5),
        (Schedule(0.1, ScheduleRule.CONSTANT), 1, 0.1),
        (Schedule(0.1, ScheduleRule.CONSTANT), 977, 0.1),
    ],
)
def test_schedule_values(schedule, t, expected):
    assert schedule_at(schedule, t) == pytest.approx(expected)


def test_schedule_at_zero_is_invalid():
    with pytest.raises(InvalidArgumentError):
        schedule_at(Schedule(0.1), 0)


def test_sgd_config_rejects_rho():
    with pytest.raises(ConfigurationError) as excinfo:
        OptimizerConfig(kind="sgd", rho0=0.05)
    assert excinfo.value.field == "rho0"


def test_sam_config_without_rho_is_silent(caplog):
    OptimizerConfig(kind="sam", rho0=0.0)
    assert not [rec for rec in caplog.records if rec.levelname == "WARNING"]


def test_degenerate_step_is_flagged_without_warning(caplog):
    obj = NoisyQuadratic(np.ones(2))
    config = OptimizerConfig(kind="sam", eta0=0.1, rho0=0.05)
    state = init_state(_pv(0.0, 0.0))
    for _ in range(50):
        state = sam_step(state, obj, obj.noiseless_batch(), config)
        assert state.info.degenerate
    assert np.all(state.w.values == 0.0)
    assert not [rec for rec in caplog.records if rec.levelname == "WARNING"]



def test_unknown_kind_names_field():
    with pytest.raises(ConfigurationError) as excinfo:
        OptimizerConfig(kind="adam")
    assert excinfo.value.field == "kind"


def test_theory_constraint_is_halved_for_ssam():
    OptimizerConfig(kind="sam", eta0=0.5, rho0=4.0).check_theory_constraint(G=10.0)
    with pytest.raises(PreconditionError):
        OptimizerConfig(kind="ssam", eta0=0.5, rho0=4.0).check_theory_constraint(G=10.0)


def test_sgd_step_on_identity_quadratic():
    obj = NoisyQuadratic(np.ones(2))
    state = sgd_step(init_state(_pv(1.0, 0.0)), obj, obj.noiseless_batch(), OptimizerConfig(eta0=0.5))
    np.testing.assert_allclose(state.w.values, [0.5, 0.0])
    assert state.t == 2
    assert state.info.gradient_evaluations == 1


def test_sgd_momentum_follows_heavy_ball_recursion():
    obj = NoisyQuadratic([1.0, 0.5])
    config = OptimizerConfig(eta0=0.1, momentum=0.9)
    batch = obj.noiseless_batch()
    s0 = init_state(_pv(1.0, -2.0))
    s1 = sgd_step(s0, obj, batch, config)
    s2 = sgd_step(s1, obj, batch, config)
    g0, g1 = true_grad(obj, s0.w).values, true_grad(obj, s1.w).values
    np.testing.assert_allclose(s1.w.values - s0.w.values, -0.1 * g0)
    np.testing.assert_allclose(s2.w.values - s1.w.values, -0.1 * (0.9 * g0 + g1))


def test_weight_decay_with_zero_gradient():
    obj = NoisyQuadratic([1.0, 0.0])
    w = _pv(0.0, 2.0)
    state = sgd_step(init_state(w), obj, obj.noiseless_batch(), OptimizerConfig(eta0=1.0, weight_decay=0.1))
    np.testing.assert_allclose(state.w.values, 0.9 * w.values)


def test_sam_step_on_identity_quadratic():
    obj = NoisyQuadratic(np.ones(2))
    config = OptimizerConfig(kind="sam", eta0=1.0, rho0=0.5)
    state = sam_step(init_state(_pv(1.0, 0.0)), obj, obj.noiseless_batch(), config)
    np.testing.assert_allclose(state.w.values, [-0.5, 0.0])
    assert state.info.gradient_evaluations == 2


def test_ssam_step_with_half_mask():
    obj = NoisyQuadratic(np.ones(2))
    mask = SparseMask.from_indices(2, [0], 0.5)
    config = OptimizerConfig(kind="ssam", eta0=1.0, rho0=math.sqrt(2))
    state = ssam_step(init_state(_pv(1.0, 1.0), mask), obj, obj.noiseless_batch(), config)
    np.testing.assert_allclose(state.w.values, [-1.0, 0.0])
    assert state.info.e_norm_sq == pytest.approx(1.0)


def test_masked_perturbation_uses_the_full_gradient_norm():
    obj = NoisyQuadratic(np.ones(8))
    w = _pv(*np.random.default_rng(6).standard_normal(8))
    mask = random_mask(8, 0.5, 1)
    config = OptimizerConfig(kind="ssam", eta0=0.5, rho0=0.1)
    state = ssam_step(init_state(w, mask), obj, obj.noiseless_batch(), config)
    # identity Hessian: w1 = w - eta (w + eps)
    eps = (w.values - state.w.values) / 0.5 - w.values
    np.testing.assert_allclose(eps, 0.1 * w.values / np.linalg.norm(w.values) * mask.bits, atol=1e-12)
    assert state.mask is mask


def test_kernel_rejects_other_kind():
    obj = NoisyQuadratic(np.ones(2))
    with pytest.raises(ConfigurationError):
        sam_step(init_state(_pv(1.0, 0.0)), obj, obj.noiseless_batch(), OptimizerConfig())


def test_mask_length_must_match_weights():
    with pytest.raises(ConfigurationError):
        init_state(_pv(1.0, 0.0), SparseMask.ones(3))


def _classifier_stream(seed, n_steps):
    rng = np.random.default_rng(seed)
    obj = MlpClassifier(n_features=5, n_hidden=6, n_classes=3)
    X = rng.standard_normal((64, 5))
    y = rng.integers(0, 3, 64)
    batches = []
    for _ in range(n_steps):
        idx = rng.choice(64, size=8, replace=False)
        batches.append(Batch(X[idx], y[idx], 3))
    return obj, obj.initial_weights(rng), batches


def test_ssam_with_all_ones_mask_is_sam():
    obj, w0, batches = _classifier_stream(0, 100)
    sam = OptimizerConfig(kind="sam", eta0=0.1, rho0=0.05, momentum=0.9, weight_decay=1e-3)
    ssam = OptimizerConfig(kind="ssam", eta0=0.1, rho0=0.05, momentum=0.9, weight_decay=1e-3)
    a, b = init_state(w0), init_state(w0, SparseMask.ones(w0.size))
    for batch in batches:
        a, b = sam_step(a, obj, batch, sam), ssam_step(b, obj, batch, ssam)
        assert _same_state(a, b)


def test_sam_without_rho_is_sgd():
    obj, w0, batches = _classifier_stream(1, 100)
    sam = OptimizerConfig(kind="sam", eta0=0.1, rho0=0.0, momentum=0.9)
    sgd = OptimizerConfig(kind="sgd", eta0=0.1, momentum=0.9)
    a, b = init_state(w0), init_state(w0)
    for batch in batches:
        a, b = sam_step(a, obj, batch, sam), sgd_step(b, obj, batch, sgd)
        assert _same_state(a, b)


def test_ssam_with_empty_mask_is_sgd():
    obj, w0, batches = _classifier_stream(2, 20)
    empty = SparseMask(np.zeros(w0.size, dtype=bool), 0.999)
    ssam = OptimizerConfig(kind="ssam", eta0=0.1, rho0=0.05)
    sgd = OptimizerConfig(kind="sgd", eta0=0.1)
    a, b = init_state(w0, empty), init_state(w0)
    for batch in batches:
        a, b = ssam_step(a, obj, batch, ssam), sgd_step(b, obj, batch, sgd)
        assert _same_state(a, b)
        assert a.info.e_norm_sq == pytest.approx(0.05 ** 2)


def test_masked_perturbation_never_exceeds_rho():
    obj, w0, batches = _classifier_stream(3, 20)
    config = OptimizerConfig(kind="ssam", eta0=0.1, rho0=0.05)
    state = init_state(w0, random_mask(w0.size, 0.8, 0))
    for batch in batches:
        state = ssam_step(state, obj, batch, config)
        assert state.info.e_norm_sq <= 0.05 ** 2 + 1e-15


@pytest.mark.parametrize("kind, per_step", [("sgd", 1), ("sam", 2), ("ssam", 2)])
def test_gradient_evaluations_per_step(kind, per_step):
    obj, w0, batches = _classifier_stream(4, 10)
    counted = CountingObjective(obj)
    config = OptimizerConfig(kind=kind, eta0=0.1, rho0=0.0 if kind == "sgd" else 0.05)
    state = init_state(w0, random_mask(w0.size, 0.5, 0) if kind == "ssam" else None)
    for batch in batches:
        state = step(state, counted, batch, config)
    assert counted.gradient_evaluations == per_step * len(batches)


@pytest.mark.parametrize("kind", list(OptimizerKind))
def test_noiseless_strongly_convex_quadratic_converges(kind):
    obj = NoisyQuadratic(np.linspace(0.5, 1.0, 5))
    config = OptimizerConfig(
        kind=kind, eta0=1.0, rho0=0.0 if kind == OptimizerKind.SGD else 0.05, schedule=ScheduleRule.INVERSE_SQRT
    )
    mask = random_mask(5, 0.6, 0) if kind == OptimizerKind.SSAM else None
    state = init_state(_pv(2.0, -1.0, 0.5, 3.0, -2.5), mask)
    batch = obj.noiseless_batch()
    for _ in range(1000):
        state = step(state, obj, batch, config)
    assert true_grad(obj, state.w).norm() < 1e-3


def test_identical_streams_give_identical_trajectories():
    runs = []
    for _ in range(2):
        obj, w0, batches = _classifier_stream(5, 30)
        state = init_state(w0, random_mask(w0.size, 0.5, 9))
        config = OptimizerConfig(kind="ssam", eta0=0.05, rho0=0.05, momentum=0.9)
        for batch in batches:
            state = ssam_step(state, obj, batch, config)
        runs.append(state.w.values)
    assert np.array_equal(runs[0], runs[1])
