"""End-to-end acceptance runs. Slow; deselect with ``pytest -m "not slow"``."""

import numpy as np
import pytest

from adaptive_driver import AdaptiveParams, element_depths, plan_refinement
from bezier_extract import operators_for
from geometry import flat_sheet, open_uniform_knots, sphere_octant
from lr_kernel import LRMesh, check_linear_independence, has_minimal_support, load_mesh, refine_uniform
from membrane_fem import MembraneModel, state_from_mesh
from sim_cli import ScenarioConfig, ScenarioRunner, analytic_pressure, compare_runs
from test_membrane_fem import fd_tangent_check
from writers.tables import read_csv

pytestmark = pytest.mark.slow


# ----------------------------------------------------------------------
# kernel and extraction
# ----------------------------------------------------------------------


def cubic_rational_patch(seed=0):
    rng = np.random.default_rng(seed)
    knots = open_uniform_knots(3, 3)
    grid = np.linspace(0.0, 1.0, 6)
    X, Y = np.meshgrid(grid, grid, indexing="ij")
    points = np.stack([X, Y, 0.2 * rng.standard_normal(X.shape)], axis=-1)
    weights = rng.uniform(0.5, 1.5, X.shape)
    cp_hom = np.concatenate([points * weights[..., None], weights[..., None]], axis=-1)
    return LRMesh.from_tensor(knots, knots, 3, 3, cp_hom)


def random_insertions(mesh, count, seed):
    """Insert ``count`` primitive lines, each bisecting a randomly chosen element."""
    rng = np.random.default_rng(seed)
    params = AdaptiveParams(max_depth=12, base_lengths=(1.0, 1.0), d_ref=0.0)
    inserted = 0
    while inserted < count:
        ids = mesh.element_ids()
        el = mesh.elements[ids[rng.integers(len(ids))]]
        depth = element_depths(mesh, params)[el.id] + 1
        if depth > params.max_depth:
            continue
        lines = plan_refinement(mesh, [el.bounds], params, depth)
        for line in lines[: count - inserted]:
            mesh.insert_meshline(line)
            inserted += 1
    return mesh


@pytest.fixture(params=["octant", "cubic"], scope="module")
def refined_patch(request):
    if request.param == "octant":
        mesh = refine_uniform(sphere_octant(1.0), 1)
    else:
        mesh = cubic_rational_patch()
    rng = np.random.default_rng(11)
    xi, eta = rng.random((2, 200))
    before = np.array([mesh.surface_point(u, v) for u, v in zip(xi, eta)])
    random_insertions(mesh, 50, seed=3)
    return mesh, xi, eta, before


def test_random_refinement_keeps_basis_properties(refined_patch):
    mesh, xi, eta, before = refined_patch
    after = np.array([mesh.surface_point(u, v) for u, v in zip(xi, eta)])
    np.testing.assert_allclose(after, before, atol=1e-12)
    rng = np.random.default_rng(12)
    for u, v in rng.random((1000, 2)):
        _, values = mesh.basis(u, v)
        assert abs(values.sum() - 1.0) < 1e-12
    assert all(has_minimal_support(fn, mesh) for fn in mesh.functions.values())
    assert check_linear_independence(mesh)


def test_extraction_matches_direct_evaluation(refined_patch):
    mesh = refined_patch[0]
    for op in operators_for(mesh, (3, 3)):
        for k, (xi, eta) in enumerate(op.points):
            ids, values, dxi, deta = mesh.basis(xi, eta, derivatives=True)
            position = {int(f): j for j, f in enumerate(ids)}
            order = [position[f] for f in op.function_ids]
            np.testing.assert_allclose(op.values[k] * op.gammas, values[order], atol=1e-12)
            scale = max(1.0, np.abs(dxi).max(), np.abs(deta).max())
            np.testing.assert_allclose(op.d_xi[k] * op.gammas, dxi[order], atol=1e-12 * scale)
            np.testing.assert_allclose(op.d_eta[k] * op.gammas, deta[order], atol=1e-12 * scale)


# ----------------------------------------------------------------------
# inflation
# ----------------------------------------------------------------------


def test_inflation_follows_analytic_law(tmp_path):
    errors = []
    for depth in (0, 1, 2):
        cfg = ScenarioConfig(scenario="inflate", uniform_depth=depth or None)
        report = ScenarioRunner(cfg, tmp_path / f"depth{depth}").run()
        assert not report.failed, report.message
        errors.append(report.metrics["max_rel_pressure_error"])
        if depth == 0:
            at_eight = next(row for row in report.rows if row.load == pytest.approx(8.0))
            assert at_eight.f_n == pytest.approx(analytic_pressure(8.0), rel=1e-2)
    assert errors[0] < 1e-2
    assert errors[0] > errors[1] > errors[2]


# ----------------------------------------------------------------------
# contact scenarios
# ----------------------------------------------------------------------


def test_lr_indentation_matches_uniform_refinement(tmp_path):
    for depth in (1, 2):
        adaptive = ScenarioConfig(scenario="indent", adaptive={"max_depth": depth})
        uniform = ScenarioConfig(scenario="indent", uniform_depth=depth)
        lr = ScenarioRunner(adaptive, tmp_path / f"lr{depth}").run()
        reference = ScenarioRunner(uniform, tmp_path / f"uniform{depth}").run()
        assert not lr.failed and not reference.failed
        table = compare_runs(lr, reference)
        assert table.max_e_n < 5e-3
        assert table.final_dof_ratio <= 0.5


def test_indentation_penetration_halves_with_doubled_penalty(tmp_path):
    depths = []
    for penalty in (30.0, 60.0):
        cfg = ScenarioConfig(
            scenario="indent", uniform_depth=0, steps=[3], material={"penalty": penalty}
        )
        report = ScenarioRunner(cfg, tmp_path / f"penalty{penalty:g}").run()
        assert not report.failed
        depths.append(report.metrics["max_penetration"])
    assert 0.35 < depths[1] / depths[0] < 0.65


def test_adaptive_slide(tmp_path):
    cfg = ScenarioConfig(scenario="slide", adaptive={"max_depth": 2})
    lr = ScenarioRunner(cfg, tmp_path / "lr").run()
    reference = ScenarioRunner(ScenarioConfig(scenario="slide", uniform_depth=2), tmp_path / "uniform").run()
    coarse = ScenarioRunner(ScenarioConfig(scenario="slide", uniform_depth=0), tmp_path / "coarse").run()
    for report in (lr, reference, coarse):
        assert not report.failed, report.message

    for row in lr.rows:
        if row.f_n > 0.0:
            assert abs(row.f_t) / row.f_n < 0.05

    coarsened = {row.step for row in lr.rows if "coarsen" in row.events}
    table = compare_runs(lr, reference)
    for row in table.rows:
        if not any(abs(row.step - s) <= 1 for s in coarsened):
            assert row.e_n < 1e-2

    # refinement leaves the force unchanged and happens at most once per safety band
    after = {row.step: row.f_n for row in lr.rows}
    refines = [row for row in read_csv(tmp_path / "lr" / "events.csv") if row["event"] == "refine"]
    sliding = [row for row in refines if int(row["step"]) > cfg.steps[0]]
    for row in sliding:
        assert after[int(row["step"])] == pytest.approx(float(row["f_n"]), rel=1e-2)
    safety_width = 2.0 * (1.0 / 16) / 2
    assert len(sliding) <= 1 + int(np.ceil(0.75 / safety_width))

    # refined region sits at the sphere's final position (x = 7/8 of the sheet)
    final = load_mesh(tmp_path / "lr" / f"mesh_{lr.rows[-1].step}.json")
    params = AdaptiveParams(max_depth=2, base_lengths=(1.0 / 16, 1.0 / 4))
    depths = element_depths(final, params)
    deepest = [final.elements[e].center[0] for e, d in depths.items() if d == 2]
    assert deepest
    assert abs(np.mean(deepest) - 0.875) < 0.1
    assert depths.max_depth <= 2

    # sliding force oscillates less on the adaptive mesh than on the coarse one
    lateral = slice(cfg.steps[0] + 2, None)
    spread = [np.std([row.f_n for row in report.rows][lateral]) for report in (lr, coarse)]
    assert spread[0] < spread[1]


# ----------------------------------------------------------------------
# tangent consistency
# ----------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_tangent_consistency_at_random_states(seed):
    from contact import ContactParams, SphereContact

    model = MembraneModel(1.0, flat_sheet(1.0, 1.0, 3, 3), n_quad=(4, 4), closure_planes=[(0, 0, 1)])
    rng = np.random.default_rng(seed)
    state = state_from_mesh(model, volume_target=0.0, sphere_center=(0.5, 0.5, 0.9))
    state = state.with_points(state.points + 0.02 * rng.standard_normal(state.points.shape), pressure=rng.uniform(0.1, 1.0))
    contact = SphereContact(1.0, ContactParams(50.0, 2, (1.0 / 3, 1.0 / 3)))
    fd_tangent_check(model, state, contact=contact, seed=seed)
