import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

import oracles
from conftest import ball, box
from singular_heat.grid import CoefficientSpec, make_coefficient
from singular_heat.linalg import IndefiniteOperator, pcg
from singular_heat.operators import (DimensionMismatch, PotentialSpec, assemble_L, assemble_diffusion,
                                     assemble_potential, build_operator, diagonal_operator, h1_norm, l2_inner,
                                     l2_norm, laplacian, potential_values, restricted_h1_norm)
from singular_heat.spectral import smallest_eigenpair


def test_box_laplacian_stencil():
    g = box(8)
    A = laplacian(g).matrix
    h2 = g.h**2
    assert np.allclose(A.diagonal(), 6 / h2)
    off = A - sp.diags(A.diagonal())
    assert set(np.round(off.data * h2, 12)) == {-1.0}


@pytest.mark.parametrize("shape,spec", [("box", CoefficientSpec("constant")),
                                        ("ball", CoefficientSpec("constant")),
                                        ("ball", CoefficientSpec("bump"))])
def test_assembly_matches_loop_oracle(shape, spec):
    g = ball(8) if shape == "ball" else box(8)
    A = assemble_diffusion(g, make_coefficient(g, spec)).matrix.toarray()
    ref, pts = oracles.loop_diffusion_matrix(1.0, 8, lambda x: float(spec.evaluate(x[None])[0]), shape)
    order = np.lexsort(np.round(pts / g.h, 6).T[::-1])
    mine = np.lexsort(np.round(g.points / g.h, 6).T[::-1])
    np.testing.assert_allclose(A[np.ix_(mine, mine)], ref[np.ix_(order, order)], rtol=1e-13, atol=1e-10)


def test_linear_in_p():
    g = ball(12)
    A1 = assemble_diffusion(g, make_coefficient(g, CoefficientSpec("constant", 1.0))).matrix
    A2 = assemble_diffusion(g, make_coefficient(g, CoefficientSpec("constant", 2.0))).matrix
    assert abs(A2 - 2 * A1).max() == 0.0


@given(amp=st.floats(0.0, 2.0), width=st.floats(0.2, 1.5), mu=st.floats(-1.0, 1.0), eps=st.floats(0.0, 0.5))
def test_exact_symmetry(amp, width, mu, eps):
    g = ball(8)
    L = build_operator(g, make_coefficient(g, CoefficientSpec("bump", 1.0, amp, width)), mu, eps)
    assert L.asymmetry() == 0.0


@given(amp=st.floats(0.0, 2.0), width=st.floats(0.2, 1.5))
def test_diffusion_positive_definite(amp, width):
    g = ball(8)
    A = assemble_diffusion(g, make_coefficient(g, CoefficientSpec("bump", 1.0, amp, width))).matrix.toarray()
    assert np.linalg.eigvalsh(A)[0] > 0


def test_bump_diffusion_bottom_eigenvalue_positive(bump16, g16):
    assert smallest_eigenpair(assemble_diffusion(g16, bump16)).lambda0 > 0


def test_potential_formula():
    g = ball(12)
    assert np.all(assemble_potential(g, PotentialSpec(0.0)).diagonal() == 0)
    vals = potential_values(g, PotentialSpec(1.0, 1.0))
    assert vals.max() == pytest.approx(1 / (3 * g.h**2 / 4 + 1))
    # mu = 1/4 at |x| = 1/2 gives 1
    x = np.array([[0.5, 0.0, 0.0]])
    assert 0.25 / np.sum(x**2) == 1.0


def test_potential_cutoff():
    g = ball(12)
    chi = (g.radius < 0.3).astype(float)
    v = potential_values(g, PotentialSpec(0.5, 0.0, chi))
    assert np.all(v[g.radius < 0.3] == 0)
    np.testing.assert_allclose(v[g.radius >= 0.3], 0.5 / g.radius[g.radius >= 0.3] ** 2)
    with pytest.raises(ValueError):
        PotentialSpec(1.0, 0.0, chi * 2)
    with pytest.raises(ValueError):
        PotentialSpec(1.0, -0.1)


def test_assemble_L_identity_and_linearity():
    g = ball(8)
    A = laplacian(g)
    zero = assemble_potential(g, PotentialSpec(0.0))
    assert abs(assemble_L(A, zero).matrix - A.matrix).max() == 0.0
    B1 = assemble_potential(g, PotentialSpec(0.1, 0.2))
    B2 = diagonal_operator(np.linspace(0, 1, g.size))
    both = diagonal_operator(B1.diagonal() + B2.diagonal())
    lhs = assemble_L(A, both).matrix
    rhs = assemble_L(assemble_L(A, B1), B2).matrix
    assert abs(lhs - rhs).max() < 1e-12
    with pytest.raises(DimensionMismatch):
        assemble_L(A, diagonal_operator(np.ones(3)))


def test_subcritical_operator_positive():
    g = ball(24)
    assert smallest_eigenpair(build_operator(g, make_coefficient(g, CoefficientSpec()), 0.2)).lambda0 > 0


def test_box_eigenvalue_exact_and_second_order():
    errs = []
    for m in (8, 16):
        g = box(m)
        lam = smallest_eigenpair(laplacian(g)).lambda0
        assert lam == pytest.approx(oracles.box_discrete_lambda1(m), rel=1e-9)
        errs.append(abs(lam - 3 * math.pi**2 / 4))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_norms(g12):
    u = np.ones(g12.size)
    assert l2_norm(g12, u) ** 2 == pytest.approx(g12.size * g12.h**3)
    assert l2_inner(g12, u, 2 * u) == pytest.approx(2 * l2_norm(g12, u) ** 2)
    v = np.random.default_rng(0).standard_normal(g12.size)
    assert restricted_h1_norm(g12, v, np.zeros(g12.size, dtype=bool)) == 0.0


def test_restricted_norm_over_whole_box_is_h1():
    # on the box every boundary link has full length, so both forms coincide
    g = box(10)
    v = np.random.default_rng(1).standard_normal(g.size)
    assert restricted_h1_norm(g, v, np.ones(g.size, dtype=bool)) == pytest.approx(h1_norm(g, v), rel=1e-12)


def test_export_coo(tmp_path):
    g = box(8)
    A = laplacian(g)
    A.export_coo(tmp_path / "a.txt")
    data = np.loadtxt(tmp_path / "a.txt")
    M = sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=A.matrix.shape)
    assert abs(M - A.matrix).max() == 0.0


@given(seed=st.integers(0, 10**6), n=st.integers(2, 40))
def test_pcg_solves_spd(seed, n):
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((n, n))
    A = sp.csr_matrix(Q @ Q.T + n * np.eye(n))
    b = rng.standard_normal(n)
    x, _ = pcg(A, b, tol=1e-12, maxiter=10 * n)
    np.testing.assert_allclose(A @ x, b, atol=1e-9 * np.linalg.norm(b))


def test_pcg_detects_indefinite():
    with pytest.raises(IndefiniteOperator):
        pcg(sp.csr_matrix(np.diag([1.0, -1.0])), np.ones(2))
    # positive diagonal, eigenvalues 3 and -1
    with pytest.raises(IndefiniteOperator):
        pcg(sp.csr_matrix([[1.0, 2.0], [2.0, 1.0]]), np.array([1.0, -1.0]))


def test_pcg_zero_rhs():
    x, its = pcg(sp.identity(4, format="csr"), np.zeros(4))
    assert its == 0 and not x.any()
