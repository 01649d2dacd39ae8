import math
import sys
from decimal import Decimal, localcontext
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[2]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.schemas.config import NoiseMechanism, PrivacyBudget  # noqa: E402
from app.services.exceptions import (  # noqa: E402
    InvalidDimensionError,
    InvalidPrivacyParameterError,
    ShapeMismatchError,
)
from app.services.privacy_accounting import (  # noqa: E402
    NOISE_GENERATOR_TAG,
    NoiseCalibration,
    calibrate_correlated,
    calibrate_independent_zcdp,
    calibrate_none,
    check_sensitivity,
    derive_child_seed,
    resolve_sensitivity_scale,
    sample_noise_matrix,
    zcdp_rho,
)
from app.services.property_suite import ZCDP_VARIANCE_EPS5  # noqa: E402

BUDGET = PrivacyBudget(epsilon=5.0, delta=1e-3)


def test_correlated_golden_values():
    assert calibrate_correlated(BUDGET, 1.0, 1.0).variance == pytest.approx(3.010482, abs=1e-5)
    assert calibrate_correlated(BUDGET, 2.0, 1.0).variance == pytest.approx(12.041928, abs=1e-5)
    loose = PrivacyBudget(epsilon=1000.0, delta=1e-3)
    assert calibrate_correlated(loose, 1.0, 1.0).variance == pytest.approx(0.004055, abs=1e-6)


def test_correlated_scales_with_gamma_squared():
    base = calibrate_correlated(BUDGET, 1.0, 1.0).variance
    assert calibrate_correlated(BUDGET, 1.0, 3.0).variance == pytest.approx(9.0 * base, rel=1e-12)


def _zcdp_variance_reference(epsilon: float, delta: float, clip: float) -> float:
    # 50 位十进制精度下的 2B_g²/ρ
    with localcontext() as ctx:
        ctx.prec = 50
        log_term = (1 / Decimal(str(delta))).ln()
        rho = ((Decimal(str(epsilon)) + log_term).sqrt() - log_term.sqrt()) ** 2
        return float(2 * Decimal(str(clip)) ** 2 / rho)


def test_independent_zcdp_golden_values():
    assert zcdp_rho(BUDGET) == pytest.approx(0.676510, abs=1e-5)
    variance = calibrate_independent_zcdp(BUDGET, 1.0).variance
    assert variance == pytest.approx(ZCDP_VARIANCE_EPS5, abs=1e-9)
    assert variance == pytest.approx(_zcdp_variance_reference(5.0, 1e-3, 1.0), rel=1e-12)
    # 按四舍五入后的 ρ=0.676510 手算得到 2.956345，差值超出 1e−5
    assert abs(variance - 2.956345) > 1e-5
    strict = PrivacyBudget(epsilon=1.0, delta=1e-3)
    assert zcdp_rho(strict) == pytest.approx(0.033787, abs=1e-5)
    assert calibrate_independent_zcdp(strict, 1.0).variance == pytest.approx(59.194, abs=0.01)
    assert calibrate_independent_zcdp(strict, 2.5).variance == pytest.approx(
        _zcdp_variance_reference(1.0, 1e-3, 2.5), rel=1e-12
    )


def test_independent_quadruples_with_double_clip():
    single = calibrate_independent_zcdp(BUDGET, 1.0).variance
    assert calibrate_independent_zcdp(BUDGET, 2.0).variance == pytest.approx(4.0 * single, rel=1e-12)


def test_closed_forms_on_random_tuples():
    rng = np.random.default_rng(7)
    for _ in range(20):
        eps = float(rng.uniform(0.1, 20.0))
        delta = float(10 ** rng.uniform(-9, -1))
        clip = float(rng.uniform(0.1, 5.0))
        gamma = float(rng.uniform(0.5, 2.0))
        budget = PrivacyBudget(epsilon=eps, delta=delta)
        log_term = math.log(1.0 / delta)
        expected = 4.0 * gamma**2 * clip**2 * (2.0 * log_term + eps) / eps**2
        assert calibrate_correlated(budget, clip, gamma).variance == pytest.approx(expected, rel=1e-12)
        rho = (math.sqrt(eps + log_term) - math.sqrt(log_term)) ** 2
        assert calibrate_independent_zcdp(budget, clip).variance == pytest.approx(2.0 * clip**2 / rho, rel=1e-9)


def test_variance_monotone_in_budget():
    for calibrate in (
        lambda b: calibrate_correlated(b, 1.0, 1.0).variance,
        lambda b: calibrate_independent_zcdp(b, 1.0).variance,
    ):
        by_eps = [calibrate(PrivacyBudget(epsilon=eps, delta=1e-3)) for eps in (0.5, 1.0, 5.0, 50.0)]
        assert all(later < earlier for earlier, later in zip(by_eps, by_eps[1:]))
        by_delta = [calibrate(PrivacyBudget(epsilon=1.0, delta=delta)) for delta in (1e-2, 1e-4, 1e-8)]
        assert all(later > earlier for earlier, later in zip(by_delta, by_delta[1:]))


def test_std_matches_variance_and_metadata():
    calib = calibrate_correlated(BUDGET, 1.0, 1.0, sensitivity_scale=0.1)
    assert calib.std**2 == pytest.approx(calib.variance, rel=1e-12)
    assert calib.variance == pytest.approx(0.03010482, abs=1e-7)
    meta = calib.as_metadata()
    assert meta["mechanism"] == "correlated_mf"
    assert meta["noise_generator"] == NOISE_GENERATOR_TAG
    assert meta["sensitivity_scale"] == 0.1


def test_none_mechanism_has_zero_variance():
    calib = calibrate_none()
    assert calib.variance == 0.0
    assert calib.mechanism is NoiseMechanism.NONE
    assert np.array_equal(sample_noise_matrix(4, 3, calib, seed=11), np.zeros((4, 3)))


@pytest.mark.parametrize(
    "clip, gamma",
    [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (float("nan"), 1.0)],
)
def test_rejects_nonpositive_parameters(clip, gamma):
    with pytest.raises(InvalidPrivacyParameterError):
        calibrate_correlated(BUDGET, clip, gamma)


def test_rejects_unvalidated_budget():
    bad = PrivacyBudget.model_construct(epsilon=1.0, delta=1.5)
    with pytest.raises(InvalidPrivacyParameterError):
        calibrate_independent_zcdp(bad, 1.0)


def test_sensitivity_scale_readings():
    assert resolve_sensitivity_scale("literal", "correlated_mf", n=10, tau=4) == 1.0
    assert resolve_sensitivity_scale("averaged", "correlated_mf", n=10, tau=4) == pytest.approx(1 / 40)
    assert resolve_sensitivity_scale("averaged", "independent_zcdp", n=10, tau=4) == pytest.approx(1 / 10)
    assert resolve_sensitivity_scale(0.25, NoiseMechanism.CORRELATED_MF, n=10, tau=4) == 0.25
    with pytest.raises(InvalidPrivacyParameterError):
        resolve_sensitivity_scale("bogus", "correlated_mf", n=1, tau=1)


def test_noise_statistics_and_determinism():
    calib = NoiseCalibration(variance=4.0, std=2.0, mechanism=NoiseMechanism.CORRELATED_MF, clip_bound=1.0, gamma=1.0)
    noise = sample_noise_matrix(2000, 5, calib, seed=123)
    assert noise.shape == (2000, 5)
    assert abs(float(noise.mean())) <= 0.08
    assert abs(float(noise.var()) - 4.0) <= 0.4
    assert np.array_equal(noise, sample_noise_matrix(2000, 5, calib, seed=123))
    assert not np.array_equal(noise, sample_noise_matrix(2000, 5, calib, seed=124))


def test_noise_rejects_empty_shape():
    with pytest.raises(InvalidDimensionError):
        sample_noise_matrix(0, 3, calibrate_correlated(BUDGET, 1.0, 1.0), seed=1)


def test_child_seeds_are_stable_and_distinct():
    first = derive_child_seed(42, "trial-0")
    assert first == derive_child_seed(42, "trial-0")
    assert 0 <= first < 2**64
    seeds = {derive_child_seed(42, f"trial-{k}") for k in range(200)}
    assert len(seeds) == 200
    assert derive_child_seed(43, "trial-0") != first


def test_sensitivity_identical_stacks():
    G = np.ones((4, 3))
    result = check_sensitivity(np.eye(4), G, G.copy(), 1.0, 1.0)
    assert result.lhs == 0.0
    assert result.ok
    assert result.changed_rows == ()


def test_sensitivity_extremal_single_row():
    G = np.zeros((5, 2))
    G_prime = G.copy()
    G_prime[2] = [2.0, 0.0]
    result = check_sensitivity(np.eye(5), G, G_prime, 1.0, 1.0, changed_row=2)
    assert result.lhs == pytest.approx(2.0)
    assert result.bound == 2.0
    assert result.ok
    assert result.ratio == pytest.approx(1.0)


def test_sensitivity_flags_wrong_row_and_excess():
    G = np.zeros((3, 2))
    G_prime = G.copy()
    G_prime[1] = [0.5, 0.0]
    assert not check_sensitivity(np.eye(3), G, G_prime, 1.0, 1.0, changed_row=0).ok

    G_prime[1] = [3.0, 0.0]
    assert not check_sensitivity(np.eye(3), G, G_prime, 1.0, 1.0).ok


def test_sensitivity_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        check_sensitivity(np.eye(3), np.zeros((3, 2)), np.zeros((2, 2)), 1.0, 1.0)
    with pytest.raises(ShapeMismatchError):
        check_sensitivity(np.eye(4), np.zeros((3, 2)), np.zeros((3, 2)), 1.0, 1.0)
