import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpat.acoustic import DetectorGeometry
from qpat.experiment import (
    Phantom,
    Scenario,
    StageError,
    add_noise,
    build_illuminations,
    build_model,
    build_phantom,
    noise_deltas,
    noise_sigma,
    run_scenario,
    simulate,
    simulate_data,
)
from qpat.grid import SIDES, build_angles, build_mesh
from qpat.optim_standard import OptimConfig
from qpat.trace import IterateTrace, relative_error


def small_scenario(**kw):
    base = dict(sides=("top", "left"), h_data=2 / 10, n_theta_data=8, h_rec=2 / 8, n_theta_rec=8, n_det=16, dt=0.1)
    base.update(kw)
    return Scenario(**base)


def y_rel(a, b, yw):
    return float(np.sqrt(np.sum(yw * (a - b) ** 2) / np.sum(yw * a**2)))


def smooth_phantom(mesh):
    x, y = mesh.nodes.T
    return Phantom(0.3 + 1.2 * np.exp(-((x + 0.2) ** 2 + (y - 0.3) ** 2) / 0.08), np.full(mesh.n_nodes, 3.0))


# -- phantom -----------------------------------------------------------------


def test_phantom_values():
    mesh = build_mesh(2 / 40)
    p = build_phantom(mesh)
    at = lambda x, y: p.mu_a[np.argmin(np.sum((mesh.nodes - [x, y]) ** 2, axis=1))]
    assert at(1.0, 1.0) == 0.3 and at(-1.0, -1.0) == 0.3
    assert at(0.0, 0.45) == 2.0
    assert at(-0.45, -0.35) == 1.0 and at(0.45, -0.35) == 1.0
    assert at(0.0, 0.35) == 0.5
    assert np.all(p.mu_s == 3.0)
    assert set(np.unique(p.mu_a)) == {0.3, 0.5, 1.0, 2.0}


@pytest.mark.parametrize("cells", [8, 25, 50])
def test_phantom_value_set_on_any_grid(cells):
    p = build_phantom(build_mesh(2 / cells))
    assert set(np.unique(p.mu_a)) <= {0.3, 0.5, 1.0, 2.0}
    assert p.params.mu_a is not p.mu_a


def test_phantom_boundary_is_background():
    mesh = build_mesh(2 / 20)
    p = build_phantom(mesh)
    assert np.all(p.mu_a[mesh.boundary_nodes] == 0.3)


# -- illuminations -----------------------------------------------------------


def test_four_illuminations_with_disjoint_opposite_arcs():
    mesh, angles = build_mesh(2 / 4), build_angles(16)
    g = DetectorGeometry()
    ils = build_illuminations(SIDES, mesh, angles, g)
    assert [il.side for il in ils] == list(SIDES)
    arcs = {il.side: set(il.arc.tolist()) for il in ils}
    assert not arcs["top"] & arcs["bottom"] and not arcs["left"] & arcs["right"]
    assert all(len(a) == g.n_det // 2 for a in arcs.values())


@pytest.mark.parametrize("n_theta", [8, 16, 32])
def test_top_beam_points_down_and_injected_mass_is_fixed(n_theta):
    mesh, angles = build_mesh(2 / 4), build_angles(n_theta)
    (top,) = build_illuminations(["top"], mesh, angles, DetectorGeometry())
    j = np.flatnonzero(top.source.q_o.any(axis=0))
    assert j.size == 1 and np.allclose(angles.directions[j[0]], [0.0, -1.0], atol=1e-15)
    # angular integral of the boundary source is the side indicator
    per_node = top.source.q_o @ angles.weights
    assert np.allclose(per_node, mesh.side_tags[:, 0].astype(float), rtol=1e-14)


def test_illumination_input_checked():
    mesh, angles, g = build_mesh(1.0), build_angles(4), DetectorGeometry()
    with pytest.raises(ValueError, match="at least one"):
        build_illuminations([], mesh, angles, g)
    with pytest.raises(ValueError, match="unknown sides"):
        build_illuminations(["front"], mesh, angles, g)


# -- scenario --------------------------------------------------------------


def test_scenario_guards_against_inverse_crime_and_bad_names():
    with pytest.raises(ValueError, match="finer"):
        Scenario(h_data=2 / 40, h_rec=2 / 40)
    with pytest.raises(ValueError, match="algorithm"):
        Scenario(algorithm="newton")
    assert Scenario().geometry().dt == pytest.approx(2 / 80)


def test_stage_errors_are_labelled():
    with pytest.raises(StageError, match=r"\[simulate\]") as info:
        simulate(small_scenario(sides=("top", "front")))
    assert info.value.stage == "simulate"


# -- data ------------------------------------------------------------------


def test_zero_absorption_gives_zero_data():
    sc = small_scenario()
    zero = lambda mesh: Phantom(np.zeros(mesh.n_nodes), np.full(mesh.n_nodes, 3.0))
    assert all(not np.any(v) for v in simulate_data(zero, sc))


def test_data_causal_and_masked():
    sc = small_scenario()
    model = build_model(sc.h_data, sc.n_theta_data, sc)
    data = simulate_data(build_phantom, sc, model)
    g = sc.geometry()
    # nothing reaches a detector before the closest point of the square
    early = g.times < g.R - np.sqrt(2) - 2 * sc.h_data
    for v, il in zip(data, model.illuminations):
        assert not np.any(v[:, early])
        assert not np.any(v[~il.mask])
        assert np.any(v)


def test_grid_refinement_consistency_smooth_coefficients():
    sc = Scenario(sides=("top", "left"), h_data=0.01, h_rec=1.0, n_det=32, dt=0.1)
    yw = sc.geometry().y_weights()
    runs = {c: simulate_data(smooth_phantom, sc, build_model(2 / c, t, sc)) for c, t in ((10, 8), (20, 8), (40, 16))}
    coarse = [y_rel(a, b, yw) for a, b in zip(runs[20], runs[10])]
    fine = [y_rel(a, b, yw) for a, b in zip(runs[40], runs[20])]
    # measured about 7.5% and 2.9%
    assert max(fine) <= 0.05
    assert max(fine) < max(coarse)


@pytest.mark.xfail(strict=True, reason="nodal sampling of the piecewise constant phantom converges slowly; see ledger")
def test_grid_refinement_consistency_desk_phantom():
    sc = Scenario(sides=("top",), h_data=0.01, h_rec=1.0, dt=0.05)
    yw = sc.geometry().y_weights()
    fine = simulate_data(build_phantom, sc, build_model(2 / 40, 32, sc))[0]
    coarse = simulate_data(build_phantom, sc, build_model(2 / 20, 16, sc))[0]
    assert y_rel(fine, coarse, yw) <= 0.05


# -- noise -----------------------------------------------------------------


def test_noise_level_zero_is_identity():
    v = [np.arange(6.0).reshape(2, 3)]
    out = add_noise(v, 0.0, 1)
    assert np.array_equal(out[0], v[0]) and out[0] is not v[0]
    with pytest.raises(ValueError):
        add_noise(v, -0.1, 1)


def test_noise_statistics_and_seed():
    rng = np.random.default_rng(0)
    data = [rng.uniform(-1, 1, (64, 100)), rng.uniform(-3, 2, (64, 100))]
    noisy = add_noise(data, 0.005, seed=11)
    assert noise_sigma(data, 0.005) == pytest.approx(0.005 * max(np.abs(d).max() for d in data))
    z = np.concatenate([(n - d).ravel() for n, d in zip(noisy, data)])
    assert z.size >= 10_000
    assert np.std(z) == pytest.approx(noise_sigma(data, 0.005), rel=0.03)
    again = add_noise(data, 0.005, seed=11)
    assert all(np.array_equal(a, b) for a, b in zip(noisy, again))
    other = add_noise(data, 0.005, seed=12)
    assert not np.array_equal(noisy[0], other[0])


def test_noise_only_on_measured_samples():
    data = [np.ones((4, 5))]
    mask = np.zeros((4, 5), dtype=bool)
    mask[:2] = True
    out = add_noise(data, 0.1, seed=0, masks=[mask])
    assert np.array_equal(out[0][~mask], data[0][~mask])
    assert np.all(out[0][mask] != 1.0)


def test_noise_deltas_scale_with_sigma():
    sc = small_scenario()
    model = build_model(sc.h_rec, sc.n_theta_rec, sc)
    d1, d2 = noise_deltas(model, 1.0), noise_deltas(model, 2.0)
    assert np.allclose(np.array(d2), 2 * np.array(d1))
    yw = model.wave.geometry.y_weights()
    assert d1[0] == pytest.approx(np.sqrt(yw[model.illuminations[0].mask].sum()))


# -- relative error ----------------------------------------------------------


def test_relative_error_examples():
    t = np.array([1.0, 2.0, 3.0])
    assert relative_error(t, t) == 0.0
    assert relative_error(np.zeros(3), t) == 1.0
    assert np.isnan(relative_error(t, np.zeros(3)))
    m = np.array([1.0, 0.0, 1.0])
    assert relative_error(np.array([1.0, 9.0, 3.0]), t, m) == 0.0


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_relative_error_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    a, b, m = rng.standard_normal(8), rng.standard_normal(8), rng.uniform(0.1, 1, 8)
    assert relative_error(c * a, c * b, m) == pytest.approx(relative_error(a, b, m), rel=1e-12)


# -- trace -----------------------------------------------------------------


def test_trace_rejects_unknown_columns_and_round_trips(tmp_path):
    tr = IterateTrace()
    tr.append(iter=0, objective=1.5)
    tr.append(iter=1, picked_i="0;1", objective=0.25, rte_solves=4)
    with pytest.raises(KeyError):
        tr.append(iter=2, speed=3)
    tr.to_csv(tmp_path / "t.csv")
    back = IterateTrace.from_csv(tmp_path / "t.csv")
    assert back.column("objective").tolist() == [1.5, 0.25]
    assert back.rows[1]["picked_i"] == "0;1"
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="columns"):
        IterateTrace.from_csv(tmp_path / "bad.csv")


# -- end to end ----------------------------------------------------------------


def test_run_scenario_small_and_deterministic():
    sc = small_scenario(optim=OptimConfig(max_iter=2))
    a = run_scenario(sc)
    b = run_scenario(sc)
    assert a.final_error < a.initial_error
    assert np.array_equal(a.mu.mu_a, b.mu.mu_a)
    assert a.counts["rte_solves"] == 2 * 2 and a.counts["adjoint_solves"] == 2 * 2
    assert set(a.timings) == {"simulate_s", "setup_s", "reconstruct_s"}


def test_run_scenario_noisy_data_differs_by_seed():
    sc = small_scenario(noise_level=0.01, optim=OptimConfig(max_iter=1))
    clean = simulate(small_scenario()).data
    a = run_scenario(sc, data=clean)
    b = run_scenario(Scenario(**{**sc.__dict__, "noise_seed": 5}), data=clean)
    assert not np.array_equal(a.data[0], b.data[0])
    assert not np.array_equal(a.data[0], clean[0])
