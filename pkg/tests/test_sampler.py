import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hjsampler.analytic import AnalyticCase, AnalyticControl
from hjsampler.metrics import w1_1d
from hjsampler.models import SdeModel, SimulationError
from hjsampler.priors import GaussianComponent
from hjsampler.riccati import solve_riccati
from hjsampler.sampler import (FunctionControl, ObservationSpec, posterior_slice, sample_posterior,
                               slice_to_csv)

BM = SdeModel.brownian(1, 1.0, 1.0)
STD = GaussianComponent([0.0], [[1.0]])


def gaussian_w1(samples, mean, var, seed=99):
    ref = np.random.default_rng(seed).normal(mean, np.sqrt(var), samples.shape[0])
    return w1_1d(samples[:, 0], ref)


def test_zero_control_without_noise_stays_put():
    ctl = FunctionControl(lambda x, tau: 0.0, 1.0)
    ens = sample_posterior(SdeModel.brownian(2, 1.0, 1.0), ctl, ObservationSpec([1.5, -2.0], 1.0),
                           0.1, 7, seed=0, deterministic=True)
    np.testing.assert_array_equal(ens.values, np.tile([1.5, -2.0], (7, 2, 1)))


def test_one_explicit_step():
    ctl = FunctionControl(lambda x, tau: 1.0, 1.0)
    ens = sample_posterior(BM, ctl, ObservationSpec([0.0], 1.0, [0.99]), 0.01, 3, 0,
                           deterministic=True)
    np.testing.assert_allclose(posterior_slice(ens, 0.99), 0.01, rtol=1e-15)


def test_drift_enters_with_a_minus_sign_at_forward_time():
    # b(x, t) = t; the first reverse step evaluates b at t = s
    model = SdeModel.linear([[0.0]], 1.0, 1.0, beta=lambda t: np.array([t]))
    ctl = FunctionControl(lambda x, tau: 0.0, 1.0)
    ens = sample_posterior(model, ctl, ObservationSpec([0.0], 0.5, [0.4]), 0.1, 2, 0,
                           deterministic=True)
    np.testing.assert_allclose(posterior_slice(ens, 0.4), -0.05, rtol=1e-12)


def test_slices_and_their_layout(tmp_path):
    ctl = AnalyticControl(AnalyticCase(BM, STD))
    obs = ObservationSpec([2.0], 1.0, [0.9, 0.0, 0.5])
    ens = sample_posterior(BM, ctl, obs, 0.1, 11, seed=3)
    np.testing.assert_allclose(ens.times, [1.0, 0.9, 0.5, 0.0])
    np.testing.assert_array_equal(posterior_slice(ens, 1.0), 2.0)
    assert posterior_slice(ens, 0.0).shape == (11, 1)
    np.testing.assert_array_equal(posterior_slice(ens, 0.0), ens.values[:, -1])
    with pytest.raises(KeyError):
        posterior_slice(ens, 0.3)
    slice_to_csv(posterior_slice(ens, 0.5), tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "path,x1" and len(lines) == 12


def test_preconditions():
    ctl = FunctionControl(lambda x, tau: 0.0, 0.5)
    with pytest.raises(ValueError, match="horizon"):
        sample_posterior(BM, ctl, ObservationSpec([0.0], 1.0), 0.1, 3, 0)
    ctl = FunctionControl(lambda x, tau: 0.0, 1.0)
    with pytest.raises(ValueError, match="node"):
        sample_posterior(BM, ctl, ObservationSpec([0.0], 1.0, [0.55]), 0.1, 3, 0)
    with pytest.raises(ValueError):
        ObservationSpec([0.0], 1.0, [1.0])
    with pytest.raises(ValueError):
        sample_posterior(BM, ctl, ObservationSpec([0.0, 1.0], 1.0), 0.1, 3, 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_is_located():
    ctl = FunctionControl(lambda x, tau: x * x * 1e3, 1.0)
    with pytest.raises(SimulationError) as info:
        sample_posterior(BM, ctl, ObservationSpec([5.0], 1.0), 0.1, 4, 0, deterministic=True)
    assert info.value.path == 0 and info.value.step >= 1


def test_determinism_and_block_independence():
    ctl = AnalyticControl(AnalyticCase(BM, STD))
    obs = ObservationSpec([1.0], 1.0)
    a = sample_posterior(BM, ctl, obs, 0.05, 9000, seed=12)
    b = sample_posterior(BM, ctl, obs, 0.05, 9000, seed=12)
    np.testing.assert_array_equal(a.values, b.values)
    small = sample_posterior(BM, ctl, obs, 0.05, 100, seed=12)
    np.testing.assert_array_equal(small.values, a.values[:100])
    other = sample_posterior(BM, ctl, obs, 0.05, 100, seed=13)
    assert not np.array_equal(other.values, small.values)


def test_time_shifted_observation_matches_conjugate_posterior():
    ctl = AnalyticControl(AnalyticCase(BM, STD))
    ens = sample_posterior(BM, ctl, ObservationSpec([1.0], 0.5), 0.005, 100_000, seed=4)
    # Y0 | Y_0.5 = 1 with Y0 ~ N(0, 1) is N(2/3, 1/3)
    assert gaussian_w1(posterior_slice(ens, 0.0), 2 / 3, 1 / 3) <= 0.01


def test_shifted_observation_with_time_dependent_drift():
    # b(x, t) = 2t, so Y_s = Y_0 + s^2 + sqrt(eps) W_s and the drift clock matters
    eps, T, s, y = 0.8, 1.0, 0.6, 1.2
    model = SdeModel.linear([[0.0]], eps, T, beta=lambda t: np.array([2.0 * t]))
    ctl = solve_riccati(model, STD, 1e-4)
    ens = sample_posterior(model, ctl, ObservationSpec([y], s), 0.005, 100_000, seed=8)
    mean = (y - s * s) / (1 + eps * s)
    var = eps * s / (1 + eps * s)
    assert gaussian_w1(posterior_slice(ens, 0.0), mean, var) <= 0.01


@pytest.mark.slow
def test_brownian_gaussian_posterior_at_a_million_paths():
    ctl = AnalyticControl(AnalyticCase(BM, STD))
    ens = sample_posterior(BM, ctl, ObservationSpec([2.0], 1.0), 0.01, 1_000_000, seed=1)
    assert gaussian_w1(posterior_slice(ens, 0.0), 1.0, 0.5) <= 0.004


@settings(max_examples=20, deadline=None)
@given(shift=st.floats(-5, 5), y=st.floats(-3, 3))
def test_constant_control_translates_paths(shift, y):
    # with a state-independent control, moving y_obs moves every path by the same amount
    ctl = FunctionControl(lambda x, tau: np.sin(3 * tau), 1.0)
    a = sample_posterior(BM, ctl, ObservationSpec([y], 1.0, [0.5]), 0.1, 50, seed=2)
    b = sample_posterior(BM, ctl, ObservationSpec([y + shift], 1.0, [0.5]), 0.1, 50, seed=2)
    np.testing.assert_allclose(b.values - a.values, shift, atol=1e-9)
