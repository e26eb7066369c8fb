import numpy as np
import pytest

from structureflow.nets import NgmParams, ScoreParams, init_ngm, init_score
from structureflow.numerics import Prng
from structureflow.rollout import RolloutConfig, rollout, rollout_ode, rollout_sde
from structureflow.trainer import TrainedModel


def linear_ngm(slope):
    """Scalar NGM computing v(x) = slope * x exactly."""
    # relu(x) - relu(-x) = x
    ngm = NgmParams(1, (2,), activation="relu")
    ngm["graph_w"][0, 0] = [1.0, -1.0]
    ngm["out_w"][0] = [slope, -slope]
    return ngm


def test_zero_drift_is_identity():
    x0 = Prng(0).normal((5, 3))
    out = rollout_ode(NgmParams(3, (4,)), ScoreParams(3, (4,)), x0, 0, RolloutConfig())
    assert np.array_equal(out, x0)


def test_linear_decay_matches_euler_closed_form():
    x0 = np.array([[1.0], [-2.0]])
    out = rollout_ode(linear_ngm(-1.0), None, x0, 0, RolloutConfig(steps=100))
    assert np.allclose(out, x0 * 0.99 ** 100, rtol=1e-12)
    assert 0.99 ** 100 == pytest.approx(0.36603, abs=1e-5)


def test_score_term_enters_with_half_variance():
    # constant score 2 with sigma 1 shifts the drift by -1 per unit time
    score = ScoreParams(1, (2,))
    score[f"b{score.n_layers - 1}"][:] = 2.0
    out = rollout_ode(NgmParams(1, (2,)), score, np.zeros((1, 1)), 0, RolloutConfig(sigma=1.0))
    assert out[0, 0] == pytest.approx(-1.0)


def test_partial_horizon():
    out = rollout_ode(linear_ngm(-1.0), None, np.ones((1, 1)), 0, RolloutConfig(steps=100), t_end=0.5)
    assert out[0, 0] == pytest.approx(0.99 ** 50)


def test_ode_deterministic():
    prng = Prng(1)
    ngm, score = init_ngm(3, (5,), prng), init_score(3, (5,), prng)
    x0 = prng.normal((4, 3))
    cfg = RolloutConfig()
    assert np.array_equal(rollout_ode(ngm, score, x0, 1, cfg), rollout_ode(ngm, score, x0, 1, cfg))


def test_sde_zero_sigma_equals_euler():
    x0 = np.ones((3, 1))
    a = rollout_sde(linear_ngm(-1.0), x0, 0, RolloutConfig(sigma=0.0, mode="sde"), Prng(0))
    assert np.allclose(a, 0.99 ** 100)


def test_sde_brownian_increment_variance():
    n, sigma = 20_000, 0.7
    out = rollout_sde(NgmParams(2, (2,)), np.zeros((n, 2)), 0, RolloutConfig(sigma=sigma, mode="sde"), Prng(2))
    var = out.var(0)
    se = sigma ** 2 * np.sqrt(2 / n)
    assert np.all(np.abs(var - sigma ** 2) < 3 * se)


def test_sde_seed_reproducible():
    cfg = RolloutConfig(sigma=0.5, mode="sde")
    a = rollout_sde(NgmParams(2, (2,)), np.zeros((4, 2)), 0, cfg, Prng(9))
    assert np.array_equal(a, rollout_sde(NgmParams(2, (2,)), np.zeros((4, 2)), 0, cfg, Prng(9)))


def test_knockout_coordinate_clamped():
    prng = Prng(3)
    ngm, score = init_ngm(3, (6,), prng, weight_std=1.0), init_score(3, (6,), prng, weight_std=1.0)
    model = TrainedModel(ngm, score, 0.5, False)
    x0 = prng.normal((10, 3))
    for mode in ("ode", "sde"):
        out = rollout(model, x0, 0, RolloutConfig(mode=mode, sigma=0.5, condition=1), Prng(0))
        assert np.all(out[:, 1] == 0.0)


def test_non_finite_state_reports_step():
    ngm = linear_ngm(1e300)
    with pytest.raises(FloatingPointError, match="rollout step"):
        with np.errstate(over="ignore", invalid="ignore"):
            rollout_ode(ngm, None, np.ones((1, 1)), 0, RolloutConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        RolloutConfig(steps=0)
    with pytest.raises(ValueError):
        RolloutConfig(mode="rk4")


def test_ode_commutes_with_batch_permutation():
    prng = Prng(4)
    ngm, score = init_ngm(3, (5,), prng), init_score(3, (5,), prng)
    x0 = prng.normal((8, 3))
    perm = prng.gen.permutation(8)
    cfg = RolloutConfig()
    a = rollout_ode(ngm, score, x0, 0, cfg)[perm]
    b = rollout_ode(ngm, score, x0[perm], 0, cfg)
    assert np.allclose(a, b, atol=1e-13)


def test_step_halving_is_first_order():
    x0 = np.ones((1, 1))
    exact = np.exp(-1.0)
    e100 = abs(rollout_ode(linear_ngm(-1.0), None, x0, 0, RolloutConfig(steps=100))[0, 0] - exact)
    e200 = abs(rollout_ode(linear_ngm(-1.0), None, x0, 0, RolloutConfig(steps=200))[0, 0] - exact)
    assert e200 / e100 == pytest.approx(0.5, abs=0.02)
