import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ball, box
from singular_heat.grid import (Coefficient, CoefficientSpec, EmptyRegion, GridError, MuOutOfRange,
                                NonPositiveCoefficient, OmegaSpec, SeparationViolation, admissible_r,
                                build_grid, dump_grid, geometry_cap, hardy_mu_star, load_grid_dump,
                                make_coefficient, make_masks)

# node counts of the unit ball, enumerated by the loop oracle in tests/oracles.py
BALL_NODES = {8: 280, 12: 912, 16: 2176}


def test_mu_star_three_dimensions():
    assert hardy_mu_star(3) == 0.25


def test_mesh_size_and_staggering():
    g = build_grid(1.0, 32, "ball")
    assert g.h == pytest.approx(0.0625)
    assert g.node_offset == g.h / 2
    g = ball(16)
    assert np.all(g.radius < 1.0)
    assert g.radius.min() == pytest.approx(math.sqrt(3) / 2 * g.h, rel=1e-14)


def test_box_node_count():
    assert box(24).size == 23**3 == 12167
    assert box(24).radius.min() == pytest.approx(math.sqrt(3) / 2 * box(24).h, rel=1e-14)


@pytest.mark.parametrize("m", sorted(BALL_NODES))
def test_ball_node_count_frozen(m):
    assert ball(m).size == BALL_NODES[m]


def test_ball_node_count_matches_loop_oracle():
    import oracles

    _, pts = oracles.loop_diffusion_matrix(1.0, 12, lambda x: 1.0)
    g = ball(12)
    a = np.array(sorted(map(tuple, np.round(pts / g.h, 6))))
    b = np.array(sorted(map(tuple, np.round(g.points / g.h, 6))))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kwargs", [dict(L=1.0, m=7), dict(L=0.0, m=16), dict(L=1.0, m=16, shape="torus")])
def test_build_grid_rejects(kwargs):
    with pytest.raises(GridError):
        build_grid(**kwargs)


@given(st.integers(8, 20), st.sampled_from(["ball", "box"]))
def test_lookup_inverts_index(m, shape):
    g = ball(m) if shape == "ball" else box(m)
    np.testing.assert_array_equal(g.lookup(g.lattice), np.arange(g.size))
    far = g.lattice.max(axis=0) + 5
    assert g.lookup(far[None, :])[0] == -1


def test_every_neighbour_is_interior_or_outside():
    g = ball(16)
    for ax in range(3):
        e = np.zeros(3, dtype=np.int64)
        e[ax] = 1
        nb = g.lookup(g.lattice + e)
        outside = nb < 0
        assert not np.any(g.inside(g.coords(g.lattice[outside] + e)))


def test_ball_omega_masks_are_separated():
    g = ball(16)
    masks = make_masks(g, OmegaSpec("ball"), 0.3)
    assert not np.any(masks.ball_r & masks.omega)
    assert masks.separation >= 0.15
    assert masks.separation >= 2 * g.h
    assert np.all(masks.omega[masks.omega0])
    assert masks.omega0.sum() < masks.omega.sum()


def test_annulus_mask_is_radial():
    g = ball(24)
    masks = make_masks(g, OmegaSpec("annulus"), 0.3)
    rho = g.radius
    np.testing.assert_array_equal(masks.omega, (rho > 0.55) & (rho < 0.75))
    # symmetric under coordinate permutations and reflections of the lattice
    flipped = g.lookup(-g.lattice - 1)
    np.testing.assert_array_equal(masks.omega[flipped], masks.omega)


def test_omega_containing_origin_is_rejected():
    with pytest.raises(SeparationViolation):
        make_masks(ball(16), OmegaSpec("ball", center=(0.0, 0.0, 0.0), radius=0.2), 0.3)


def test_singular_ball_too_close_is_rejected():
    # omega starts at 0.45; at h = 1/16 the node sets of B(0, 0.44) and omega are one h apart
    with pytest.raises(SeparationViolation):
        make_masks(ball(32), OmegaSpec("ball"), 0.44)


def test_empty_region():
    with pytest.raises(EmptyRegion):
        make_masks(ball(8), OmegaSpec("ball", center=(0.6, 0.0, 0.0), radius=0.01))


def test_masks_refine_consistently():
    coarse, fine = ball(12), ball(24)
    spec = OmegaSpec("ball")
    mc = make_masks(coarse, spec, 0.3)
    # every coarse omega node lies in the continuous region the fine mask samples
    assert np.all(spec.contains(coarse.points[mc.omega]))
    assert make_masks(fine, spec, 0.3).omega.sum() > mc.omega.sum()


def test_constant_coefficient():
    for v in (1.0, 2.0):
        c = make_coefficient(ball(12), CoefficientSpec("constant", v))
        assert (c.p1, c.p2, c.p3) == (v, v, 0.0)


def test_bump_coefficient_bounds():
    g = ball(16)
    c = make_coefficient(g, CoefficientSpec("bump"))
    p = 1 + 0.2 * np.exp(-g.radius**2 / 0.25)
    assert c.p1 == pytest.approx(p.min())
    assert c.p2 == pytest.approx(1 + 0.2 * np.exp(-(math.sqrt(3) / 2 * g.h) ** 2 / 0.25))
    assert c.p3 > 0
    # the exact gradient norm is 0.2 * 2 rho / w^2 * exp(-rho^2 / w^2), maximal at rho = w / sqrt 2
    exact_max = 0.2 * 2 * (0.5 / math.sqrt(2)) / 0.25 * math.exp(-0.5)
    assert c.p3 == pytest.approx(exact_max, rel=0.1)
    fine = make_coefficient(ball(32), CoefficientSpec("bump"))
    assert abs(fine.p3 - exact_max) < abs(c.p3 - exact_max)
    assert fine.p3 == pytest.approx(exact_max, rel=0.02)


def test_nonpositive_coefficient():
    with pytest.raises(NonPositiveCoefficient):
        make_coefficient(ball(8), CoefficientSpec("bump", value=-0.1, amplitude=0.05))


def _coeff(p1, p2, p3):
    return Coefficient(np.array([p1, p2]), p1, p2, p3, CoefficientSpec(), lambda x: x)


def test_admissible_r_examples():
    assert admissible_r(_coeff(1, 1, 0), 0.0, cap=0.5) == pytest.approx(0.99 * 0.5)
    assert admissible_r(_coeff(1, 1, 0.5), 0.0) == 0.99
    # (2 - 2 * 1.2 * 0.8) / 3 = 0.01333..., times 0.9
    assert admissible_r(_coeff(1, 1.2, 1), 0.2) == pytest.approx(0.9 * (2 - 1.92) / 3)


def test_admissible_r_out_of_range():
    with pytest.raises(MuOutOfRange):
        admissible_r(_coeff(1, 1.2, 1), 0.25 / 1.2)


@given(p1=st.floats(0.2, 2), ratio=st.floats(1, 3), p3=st.floats(0.01, 5), frac=st.floats(0, 0.99))
def test_admissible_r_satisfies_condition(p1, ratio, p3, frac):
    p2 = p1 * ratio
    mu = frac * p1**2 / p2 * 0.25
    r = admissible_r(_coeff(p1, p2, p3), mu)
    assert 0 < r < 1
    assert 2 * p1**2 - 2 * p2 * mu / 0.25 > 3 * p1 * p3 * r


def test_geometry_cap():
    assert geometry_cap(OmegaSpec("ball"), 0.1) == pytest.approx(0.45 - 0.2)
    assert geometry_cap(OmegaSpec("annulus"), 0.1) == pytest.approx(0.35)


def test_dump_round_trip(tmp_path):
    g = ball(12)
    masks = make_masks(g, OmegaSpec("ball"), 0.3)
    dump_grid(tmp_path / "g.bin", g, masks)
    header, arrays = load_grid_dump(tmp_path / "g.bin")
    assert (header["n"], header["m"], header["L"], header["offset"]) == (3, 12, 1.0, g.h / 2)
    np.testing.assert_array_equal(arrays["lattice"], g.lattice)
    np.testing.assert_array_equal(arrays["omega"].astype(bool), masks.omega)
    np.testing.assert_array_equal(arrays["ball_r"].astype(bool), masks.ball_r)


def test_dump_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(GridError):
        load_grid_dump(tmp_path / "x")
