import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from conftest import ball
from singular_heat.evolution import TimeGrid, Trajectory, adjoint_collocation
from singular_heat.fields import gaussian_blob
from singular_heat.grid import CoefficientSpec, MuOutOfRange, OmegaSpec, make_coefficient, make_masks
from singular_heat.hum import (HUM_COLUMNS, CgStall, GramOperator, OriginOutsideOmega, _cg, cutoff_radius,
                               cutoff_stabilizer, evaluate_J, gram_apply, smooth_cutoff, synthesize_control,
                               write_hum_csv)
from singular_heat.operators import build_operator, laplacian
from singular_heat.spectral import smallest_eigenpair


@pytest.fixture(scope="module")
def small():
    g = ball(8)
    coeff = make_coefficient(g, CoefficientSpec("bump"))
    masks = make_masks(g, OmegaSpec("ball", radius=0.3))
    L = build_operator(g, coeff, 0.1)
    return g, coeff, masks, L


def test_gram_of_zero(small):
    g, _, masks, L = small
    assert not gram_apply(L, masks, TimeGrid(1.0, 5), np.zeros(g.size)).any()


@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_gram_matches_dense_oracle(small, theta):
    g, _, masks, L = small
    tg = TimeGrid(0.5, 6, theta)
    G = oracles.dense_gram(L.matrix.toarray(), masks.omega, tg.T, tg.N, theta)
    rng = np.random.default_rng(2)
    gram = GramOperator(L, masks, tg)
    for _ in range(3):
        v = rng.standard_normal(g.size)
        np.testing.assert_allclose(gram(v), G @ v, atol=1e-9 * np.linalg.norm(G @ v))


@given(seed=st.integers(0, 2**32 - 1))
def test_gram_symmetric_and_psd(small, seed):
    g, _, masks, L = small
    tg = TimeGrid(0.5, 6)
    gram = GramOperator(L, masks, tg)
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, g.size))
    Ga, Gb = gram(a), gram(b)
    assert abs(Ga @ b - a @ Gb) <= 1e-8 * np.linalg.norm(a) * np.linalg.norm(b)
    # <G a, a> equals the observed adjoint energy
    z = adjoint_collocation(gram.adjoint(a)) * masks.omega
    energy = tg.dt * float(np.sum(z * z))
    assert Ga @ a == pytest.approx(energy, rel=1e-8)
    assert energy >= 0


def test_zero_initial_state(small):
    g, coeff, masks, L = small
    res = synthesize_control(L, masks, TimeGrid(1.0, 10), np.zeros(g.size), g)
    assert res.cost == 0.0 and res.terminal_norm == 0.0 and res.cg_iterations == 0
    assert not res.control.frames.any()


@pytest.fixture(scope="module")
def controlled(small):
    g, coeff, masks, L = small
    tg = TimeGrid(1.0, 20)
    u0 = gaussian_blob(g)
    one = synthesize_control(L, masks, tg, u0, g, 1e-6, 1e-10, coeff=coeff, mu=0.1)
    two = synthesize_control(L, masks, tg, 2 * u0, g, 1e-6, 1e-10, coeff=coeff, mu=0.1)
    return one, two


def test_control_support_and_duality(small, controlled):
    _, _, masks, _ = small
    one, _ = controlled
    assert np.abs(one.control.frames[:, ~masks.omega]).max() == 0.0
    assert np.abs(one.control_steps[:, ~masks.omega]).max() == 0.0
    assert one.duality_residual <= 1e-8
    assert one.terminal_norm < one.free_terminal_norm
    assert one.in_range


def test_control_is_linear_in_initial_state(controlled):
    one, two = controlled
    np.testing.assert_allclose(two.control.frames, 2 * one.control.frames,
                               atol=1e-7 * np.abs(one.control.frames).max())
    assert two.cost == pytest.approx(2 * one.cost, rel=1e-7)
    assert two.u0_norm == pytest.approx(2 * one.u0_norm)


def test_penalty_sweep_reduces_terminal_state(small):
    g, _, masks, L = small
    tg = TimeGrid(1.0, 20)
    u0 = gaussian_blob(g)
    terms = [synthesize_control(L, masks, tg, u0, g, d, 1e-10).terminal_norm for d in (1e-2, 1e-4, 1e-6)]
    assert terms[0] > terms[1] > terms[2]


def test_mu_range_gate(small):
    g, coeff, masks, _ = small
    mu = coeff.p1**2 / coeff.p2 * 0.25 * 1.01
    L = build_operator(g, coeff, mu)
    tg = TimeGrid(0.5, 5)
    with pytest.raises(MuOutOfRange):
        synthesize_control(L, masks, tg, gaussian_blob(g), g, coeff=coeff, mu=mu)
    res = synthesize_control(L, masks, tg, gaussian_blob(g), g, 1e-3, coeff=coeff, mu=mu, allow_out_of_range=True)
    assert not res.in_range


def test_cg_stall_on_indefinite():
    with pytest.raises(CgStall):
        _cg(lambda v: -v, np.ones(3), 1e-10, 10)


def test_hum_csv(tmp_path, controlled):
    one, two = controlled
    write_hum_csv(tmp_path / "h.csv", [one, two], extra=[{"T": 1.0}, {"T": 1.0}])
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0].split(",") == ["T"] + HUM_COLUMNS
    assert len(lines) == 3


# --- functional ---------------------------------------------------------------------------


def test_evaluate_J_examples():
    g = ball(8)
    tg = TimeGrid(1.0, 4)
    zero = Trajectory(tg, np.zeros((5, g.size)))
    assert evaluate_J(g, zero, zero) == 0.0
    # unit spatial mass at every time on a unit time interval
    unit = Trajectory(tg, np.full((5, g.size), 1.0 / math.sqrt(g.size * g.cell_volume)))
    assert evaluate_J(g, unit, zero) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        evaluate_J(g, unit, zero, norm="h1")


@given(seed=st.integers(0, 2**32 - 1), c=st.floats(-5, 5))
def test_evaluate_J_quadratic(seed, c):
    g = ball(8)
    tg = TimeGrid(1.0, 3)
    rng = np.random.default_rng(seed)
    u, f = (Trajectory(tg, rng.standard_normal((4, g.size))) for _ in range(2))
    cu, cf = Trajectory(tg, c * u.frames), Trajectory(tg, c * f.frames)
    assert evaluate_J(g, cu, cf) == pytest.approx(c * c * evaluate_J(g, u, f), rel=1e-12, abs=1e-300)


def test_dual_norm_below_poincare_bound():
    g = ball(8)
    tg = TimeGrid(1.0, 2)
    f = Trajectory(tg, np.random.default_rng(0).standard_normal((3, g.size)))
    zero = Trajectory(tg, np.zeros((3, g.size)))
    lam1 = smallest_eigenpair(laplacian(g)).lambda0
    l2, hm1 = evaluate_J(g, zero, f), evaluate_J(g, zero, f, norm="h-1")
    assert 0 < hm1 <= l2 / lam1 * (1 + 1e-9)


# --- cutoff -------------------------------------------------------------------------------


@given(rho_chi=st.floats(0.05, 1.0))
def test_smooth_cutoff_shape(rho_chi):
    r = np.linspace(0, 1.2, 241)
    chi = smooth_cutoff(r, rho_chi)
    assert np.all((chi >= 0) & (chi <= 1))
    assert np.all(chi[r <= rho_chi / 2] == 1.0)
    assert np.all(chi[r >= rho_chi] == 0.0)
    assert np.all(np.diff(chi) <= 0)


@pytest.fixture(scope="module")
def origin_setting():
    g = ball(16)
    coeff = make_coefficient(g, CoefficientSpec("bump"))
    masks = make_masks(g, OmegaSpec("ball", center=(0.0, 0.0, 0.0), radius=0.6), require_origin_outside=False)
    return g, coeff, masks


def test_cutoff_radius_has_collar(origin_setting):
    g, _, masks = origin_setting
    assert cutoff_radius(masks, g.h) == pytest.approx(0.6 - 2 * g.h)


def test_stabilizer_without_potential(origin_setting):
    g, coeff, masks = origin_setting
    out = cutoff_stabilizer(g, coeff, 0.0, masks, gaussian_blob(g, (0.1, 0, 0)), TimeGrid(0.5, 10))
    assert not out.control.frames.any()
    assert out.max_norm_ratio <= 1.0


def test_stabilizer_supercritical(origin_setting):
    g, coeff, masks = origin_setting
    mu = 2 * coeff.p2 * 0.25
    out = cutoff_stabilizer(g, coeff, mu, masks, gaussian_blob(g, (0.1, 0, 0)), TimeGrid(0.5, 10))
    assert out.max_residual <= 1e-8
    assert out.leak == 0.0
    assert out.control.frames.any()
    assert math.isfinite(out.j_value) and out.max_norm_ratio <= 1.0 + 1e-12


def test_stabilizer_needs_origin_in_omega(g16):
    masks = make_masks(g16, OmegaSpec("ball"))
    coeff = make_coefficient(g16, CoefficientSpec())
    with pytest.raises(OriginOutsideOmega):
        cutoff_stabilizer(g16, coeff, 0.5, masks, np.zeros(g16.size), TimeGrid(1.0, 2))
