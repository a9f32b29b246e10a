import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hjsampler.analytic import AnalyticCase, control as analytic_control
from hjsampler.models import SdeModel, TimeGrid
from hjsampler.priors import GaussianComponent, GaussianMixturePrior
from hjsampler.riccati import RiccatiError, control, solve_riccati

STD = GaussianComponent([0.0], [[1.0]])
THREE = GaussianMixturePrior.from_arrays([0.0, -2.0, 2.0], [0.25, 0.64, 0.36])
OU = SdeModel.linear([[-3.0]], 1.5, 1.0)
OU2 = SdeModel.linear([[0.0, 1.0], [-1.0, -1.0]], 5.0, 1.0)
OU2_PRIOR = GaussianMixturePrior.from_arrays(
    [[-0.7, 0.0], [0.7, 0.0]], [[[0.25, 0.1], [0.1, 0.16]], [[0.25, -0.1], [-0.1, 0.16]]])


def test_brownian_q_is_exact_for_euler():
    sol = solve_riccati(SdeModel.brownian(1, 1.0, 1.0), STD, 1e-3, TimeGrid.covering(1.0, 0.01))
    np.testing.assert_allclose(sol.Q[:, 0, 0, 0], 1.0 + sol.grid.times, rtol=1e-12)
    np.testing.assert_array_equal(sol.q, 0.0)


def test_initial_conditions():
    sol = solve_riccati(OU2, OU2_PRIOR, 1e-3)
    np.testing.assert_allclose(sol.Q[0], OU2_PRIOR.covs / 5.0, rtol=1e-15)
    np.testing.assert_allclose(sol.q[0], OU2_PRIOR.means, rtol=1e-15)
    logdet = np.linalg.slogdet(OU2_PRIOR.covs)[1]
    np.testing.assert_allclose(sol.r[0], 5.0 * np.log(2 * np.pi) + 2.5 * logdet, rtol=1e-14)


def test_ou_q_matches_closed_form():
    sol = solve_riccati(OU, STD, 1e-4)
    t = sol.grid.times
    exact = 1.0 / 6.0 + 0.5 * np.exp(-6.0 * t)
    np.testing.assert_allclose(sol.Q[:, 0, 0, 0], exact, rtol=1e-3)
    assert sol.Q[-1, 0, 0, 0] == pytest.approx(0.1679060427549998, rel=1e-3)


def test_ou_r_matches_closed_form():
    # for OU the closed form is r(t) = (eps / 2) log((2 pi eps)^n det Q(t))
    sol = solve_riccati(OU, STD, 1e-4)
    expected = 0.75 * np.log(2 * np.pi * 1.5 * sol.Q[:, 0, 0, 0])
    np.testing.assert_allclose(sol.r[:, 0], expected, rtol=1e-3, atol=1e-4)


def test_control_examples():
    sol = solve_riccati(SdeModel.brownian(1, 1.0, 1.0), STD, 1e-3)
    assert control(sol, [2.0], 0.0)[0, 0] == pytest.approx(-1.0, rel=1e-12)
    two = GaussianMixturePrior.from_arrays([0.0, 0.0], [1.0, 1.0], [0.3, 0.7])
    sol2 = solve_riccati(SdeModel.brownian(1, 1.0, 1.0), two, 1e-3)
    x = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(control(sol2, x, 0.4), control(sol, x, 0.4), rtol=1e-12, atol=1e-15)
    sym = GaussianMixturePrior.from_arrays([-1.5, 1.5], [0.4, 0.4])
    sol3 = solve_riccati(SdeModel.brownian(1, 1.0, 1.0), sym, 1e-3)
    assert control(sol3, [0.0], 0.3)[0, 0] == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("model, prior", [(OU, STD), (SdeModel.brownian(1, 1.0, 1.0), THREE)])
def test_agrees_with_analytic_control(model, prior):
    sol = solve_riccati(model, prior, 1e-4)
    case = AnalyticCase(model, prior)
    x = np.linspace(-4, 4, 100)
    worst = 0.0
    for tau in np.linspace(0.0, 0.99, 10):
        worst = max(worst, np.max(np.abs(control(sol, x, tau) - analytic_control(case, x, tau))))
    assert worst <= 1e-3


def test_symmetry_and_spd_at_every_node():
    sol = solve_riccati(OU2, OU2_PRIOR, 1e-4)
    assert np.max(np.abs(sol.Q - np.swapaxes(sol.Q, -1, -2))) <= 1e-10
    np.linalg.cholesky(sol.Q.reshape(-1, 2, 2))


def test_mixture_weights_are_a_partition_of_unity():
    sol = solve_riccati(OU2, OU2_PRIOR, 1e-4)
    x = np.random.default_rng(0).normal(0, 3, (500, 2))
    for tau in (0.0, 0.5, 0.999):
        p = sol.mixture_weights(x, tau)
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)


def test_spd_loss_is_fatal():
    # D = 0 and an expanding A drives Q towards zero along one direction
    model = SdeModel.linear([[-30.0]], 1.0, 1.0, sigma=[[0.0]])
    with pytest.raises(RiccatiError, match="component 0"):
        solve_riccati(model, STD, 0.05, TimeGrid.covering(1.0, 0.05))


def test_coverage_and_step_preconditions():
    sol = solve_riccati(OU, STD, 1e-3)
    with pytest.raises(ValueError):
        control(sol, [0.0], 1.5)
    with pytest.raises(ValueError):
        solve_riccati(OU, STD, 0.1, TimeGrid.covering(1.0, 0.01))
    with pytest.raises(ValueError):
        solve_riccati(SdeModel.general(lambda x, t: x, 1, 1.0, 1.0), STD, 1e-3)


def test_csv_dump(tmp_path):
    sol = solve_riccati(OU2, OU2_PRIOR, 1e-2, TimeGrid.covering(1.0, 0.1))
    path = tmp_path / "riccati.csv"
    sol.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,component,Q11,Q12,Q21,Q22,q1,q2,r"
    assert len(lines) == 1 + 11 * 2


def test_ou_agreement_converges_at_first_order():
    case = AnalyticCase(OU, STD)
    x = np.linspace(-4, 4, 100)
    errs = []
    for h in (1e-3, 1e-4, 1e-5):
        sol = solve_riccati(OU, STD, h)
        errs.append(max(np.max(np.abs(control(sol, x, tau) - analytic_control(case, x, tau)))
                        for tau in (0.0, 0.25, 0.5, 0.75, 0.99)))
    assert errs[2] <= 1e-3
    np.testing.assert_allclose(errs[0] / errs[1], 10.0, rtol=0.1)
    np.testing.assert_allclose(errs[1] / errs[2], 10.0, rtol=0.1)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-4.0, -0.1), var=st.floats(0.1, 3.0), eps=st.floats(0.2, 3.0))
def test_scalar_q_follows_euler_recurrence(a, var, eps):
    # explicit Euler on Q' = 1 + 2aQ has the closed form Q* + (Q0 - Q*)(1 + 2ah)^k
    model = SdeModel.linear([[a]], eps, 1.0)
    sol = solve_riccati(model, GaussianComponent([0.0], [[var]]), 1e-3, TimeGrid.covering(1.0, 0.1))
    k = np.arange(11) * 100
    star = -1.0 / (2 * a)
    expected = star + (var / eps - star) * (1 + 2 * a * 1e-3) ** k
    np.testing.assert_allclose(sol.Q[:, 0, 0, 0], expected, rtol=1e-10)
