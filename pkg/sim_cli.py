"""Scenario runner for the membrane studies: inflation, indentation and sliding.

A scenario is a JSON file validated by ``ScenarioConfig``. Each run writes its
tables, mesh snapshots and a ``report.json`` into one output directory;
``compare_runs`` turns two reports into per-step relative errors.
"""

import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from adaptive_driver import AdaptiveDriver, AdaptiveParams, element_depths
from config import config
from contact import ContactParams, SphereContact, SpherePath, active_elements, max_penetration
from errors import ComparisonError, ConfigurationError, LoadStepError
from geometry import flat_sheet, hemisphere
from lr_kernel import LRMesh, mesh_to_json, refine_to_counts, refine_uniform
from membrane_fem import (
    EDGES,
    EdgeCollapse,
    EdgeConstraint,
    EdgeTie,
    MembraneModel,
    SimState,
    StepControls,
    enclosed_volume,
    solve_load_step,
    state_from_mesh,
    write_step_csv,
)
from writers.tables import CONTACT_HEADER, EVENTS_HEADER, FORCES_HEADER, write_csv
from writers.vtk import write_mesh_vtk

logger = logging.getLogger(__name__)

Scenario = Literal["inflate", "indent", "slide"]

# Per-scenario defaults applied to unset fields.
SCENARIO_DEFAULTS: Dict[str, dict] = {
    "inflate": {
        "elements": (8, 8), "degree": 2, "quadrature": 3, "prestretch": 1.0, "steps": [9],
        "d_ref": 3.0, "d_safe": 2.0,
    },
    "indent": {
        "elements": (4, 4), "degree": 3, "quadrature": 5, "prestretch": 1.1, "steps": [10],
        "d_ref": 0.0, "d_safe": 0.0,
    },
    "slide": {
        "elements": (16, 4), "degree": 2, "quadrature": 5, "prestretch": 1.25, "steps": [4, 24],
        "d_ref": 3.0, "d_safe": 2.0,
    },
}
LEGS = {"inflate": 1, "indent": 1, "slide": 2}

INFLATE_CONSTRAINTS = (
    EdgeConstraint("eta0", ("z", "tangential")),
    EdgeTie("xi0", "xi1"),
    EdgeCollapse("eta1"),
)
INDENT_CONSTRAINTS = (
    EdgeConstraint("xi0", ("x",)),
    EdgeConstraint("eta0", ("y",)),
    EdgeConstraint("xi1"),
    EdgeConstraint("eta1"),
)
SLIDE_CONSTRAINTS = tuple(EdgeConstraint(edge) for edge in EDGES)


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MaterialConfig(_Strict):
    mu: PositiveFloat = 1.0
    penalty_factor: PositiveFloat = 10.0
    # explicit eps_n0, overrides penalty_factor
    penalty: Optional[PositiveFloat] = None

    @property
    def youngs_modulus(self) -> float:
        return 3.0 * self.mu

    def base_penalty(self, length: float) -> float:
        """eps_n0 = penalty_factor * E0 / L0 unless given explicitly."""
        if self.penalty is not None:
            return self.penalty
        return self.penalty_factor * self.youngs_modulus / length


class MeshConfig(_Strict):
    degree: Optional[int] = Field(default=None, ge=1, le=4)
    elements: Optional[Tuple[PositiveInt, PositiveInt]] = None
    quadrature: Optional[PositiveInt] = None


class AdaptiveConfig(_Strict):
    enabled: bool = True
    max_depth: int = Field(default=2, ge=0)
    d_ref: Optional[float] = Field(default=None, ge=0)
    d_safe: Optional[float] = Field(default=None, ge=0)
    d_crs: float = Field(default=4.0, gt=0)


class SolverConfig(_Strict):
    max_iterations: int = Field(default_factory=lambda: config.newton_max_iterations, ge=1)
    max_halvings: int = Field(default_factory=lambda: config.newton_max_halvings, ge=0)
    residual_tolerance: PositiveFloat = Field(default_factory=lambda: config.residual_tolerance)
    volume_tolerance: PositiveFloat = Field(default_factory=lambda: config.volume_tolerance)

    def controls(self) -> StepControls:
        return StepControls(self.max_iterations, self.max_halvings, self.residual_tolerance, self.volume_tolerance)


class ScenarioConfig(_Strict):
    """
    One scenario run.

    ``length`` is L0. ``radius`` is the hemisphere radius for inflation; the
    indenting and sliding sphere has radius ``sphere_radius_scale`` times L0.
    ``steps`` holds the load-step count per path leg (one leg for inflate and
    indent, down and across for slide).
    """

    scenario: Scenario
    length: PositiveFloat = 1.0
    radius: Optional[PositiveFloat] = None
    prestretch: Optional[PositiveFloat] = None
    sphere_radius_scale: PositiveFloat = 1.0
    max_volume_ratio: float = Field(default=10.0, gt=1.0)
    steps: Optional[List[PositiveInt]] = None
    uniform_depth: Optional[int] = Field(default=None, ge=0)
    material: MaterialConfig = Field(default_factory=MaterialConfig)
    mesh: MeshConfig = Field(default_factory=MeshConfig)
    adaptive: AdaptiveConfig = Field(default_factory=AdaptiveConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    output_dir: Optional[str] = None
    seed: int = Field(default=0, ge=0, le=2 ** 64 - 1)

    @model_validator(mode="after")
    def _fill_defaults(self) -> "ScenarioConfig":
        defaults = SCENARIO_DEFAULTS[self.scenario]
        if self.mesh.degree is None:
            self.mesh.degree = defaults["degree"]
        if self.mesh.elements is None:
            self.mesh.elements = defaults["elements"]
        if self.mesh.quadrature is None:
            self.mesh.quadrature = defaults["quadrature"]
        if self.prestretch is None:
            self.prestretch = defaults["prestretch"]
        if self.steps is None:
            self.steps = list(defaults["steps"])
        if self.adaptive.d_ref is None:
            self.adaptive.d_ref = defaults["d_ref"]
        if self.adaptive.d_safe is None:
            self.adaptive.d_safe = defaults["d_safe"]
        if self.radius is None:
            self.radius = self.length

        if self.scenario == "inflate" and self.mesh.degree != 2:
            raise ValueError("the hemisphere patch is biquadratic, mesh.degree must be 2")
        if len(self.steps) != LEGS[self.scenario]:
            raise ValueError(f"{self.scenario} needs {LEGS[self.scenario]} step count(s), got {self.steps}")
        if not self.adaptive.d_crs > self.adaptive.d_safe:
            raise ValueError("adaptive.d_crs must exceed adaptive.d_safe")
        if self.uniform_depth is not None:
            self.adaptive.enabled = False
        return self

    @property
    def total_steps(self) -> int:
        return sum(self.steps)


def echo_config(scenario: ScenarioConfig, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / "config.resolved.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(scenario.model_dump_json(indent=2))
    return path


def load_config(path: Union[str, Path], out_dir: Optional[Union[str, Path]] = None) -> ScenarioConfig:
    """
    Read and validate a scenario file.

    Args:
        path: JSON scenario file
        out_dir: If given (or set in the file), the resolved config is echoed there

    Raises:
        ConfigurationError: missing file, bad JSON, unknown keys or invalid values
    """
    path = Path(path)
    if not path.exists():
        logger.error(f"Scenario file not found: {path}")
        raise ConfigurationError(f"scenario file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        logger.error(f"Scenario file {path} is not valid JSON: {exc}")
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    try:
        scenario = ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        logger.error(f"Invalid scenario file {path}: {exc}")
        raise ConfigurationError(f"{path}: {exc}") from exc
    target = out_dir or scenario.output_dir
    if target is not None:
        echo_config(scenario, target)
    return scenario


def with_overrides(scenario: ScenarioConfig, **overrides) -> ScenarioConfig:
    """Re-validated copy with command-line overrides (None values are ignored)."""
    data = scenario.model_dump()
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------


class StepRow(BaseModel):
    step: int
    load: float
    f_n: float
    f_t: float
    dofs: int
    events: str = ""

    def csv(self) -> list:
        return [self.step, self.load, self.f_n, self.f_t, self.dofs, self.events]


class RunReport(BaseModel):
    scenario: Scenario
    seed: int = 0
    failed: bool = False
    message: Optional[str] = None
    rows: List[StepRow] = Field(default_factory=list)
    final_dofs: int = 0
    final_elements: int = 0
    metrics: Dict[str, float] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunReport":
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        if not path.exists():
            raise ConfigurationError(f"report not found: {path}")
        return cls.model_validate_json(path.read_text())


class ComparisonRow(BaseModel):
    step: int
    load: float
    e_n: float
    e_t: float
    dof_ratio: float


class ComparisonTable(BaseModel):
    rows: List[ComparisonRow]
    max_e_n: float
    max_e_t: float
    max_dof_ratio: float
    final_dof_ratio: float


def analytic_pressure(volume_ratio: float) -> float:
    """p*R/mu of an inflated incompressible Neo-Hookean sphere at V/V0."""
    s = 1.0 / volume_ratio
    return 2.0 * (s ** (1.0 / 3.0) - s ** (7.0 / 3.0))


def compare_runs(report: RunReport, reference: RunReport, load_tolerance: float = 1e-9) -> ComparisonTable:
    """
    Per-step errors of ``report`` against ``reference``.

    e_n = |f_n_ref - f_n| / |f_n_ref|; steps where the reference force vanishes
    are normalized by the largest reference |f_n| instead. e_t is normalized by
    the largest reference |f_n|.

    Raises:
        ComparisonError: the two runs do not share a step schedule
    """
    if len(report.rows) != len(reference.rows):
        logger.error(f"Cannot compare {len(report.rows)} steps against {len(reference.rows)} reference steps")
        raise ComparisonError(f"step counts differ: {len(report.rows)} vs {len(reference.rows)}")
    if not report.rows:
        raise ComparisonError("nothing to compare, both reports are empty")
    scale = max(abs(r.f_n) for r in reference.rows)
    rows = []
    for own, ref in zip(report.rows, reference.rows):
        if own.step != ref.step or abs(own.load - ref.load) > load_tolerance * max(1.0, abs(ref.load)):
            raise ComparisonError(f"schedules differ at step {ref.step}: load {own.load} vs {ref.load}")
        diff_n = abs(ref.f_n - own.f_n)
        if abs(ref.f_n) > 0.0:
            e_n = diff_n / abs(ref.f_n)
        else:
            e_n = diff_n / scale if scale > 0.0 else 0.0
        e_t = abs(ref.f_t - own.f_t) / scale if scale > 0.0 else 0.0
        rows.append(ComparisonRow(step=ref.step, load=ref.load, e_n=e_n, e_t=e_t, dof_ratio=own.dofs / ref.dofs))
    return ComparisonTable(
        rows=rows,
        max_e_n=max(r.e_n for r in rows),
        max_e_t=max(r.e_t for r in rows),
        max_dof_ratio=max(r.dof_ratio for r in rows),
        final_dof_ratio=rows[-1].dof_ratio,
    )


def slide_path(cfg: ScenarioConfig) -> Tuple[float, SpherePath]:
    """
    Sphere radius and path of the sliding run: start above lam*(L0, L0), press
    down to half the start height, then move to x = 7 lam L0.
    """
    lam, length = cfg.prestretch, cfg.length
    radius = length * cfg.sphere_radius_scale
    top, bottom = lam * radius, 0.5 * lam * radius
    waypoints = [
        (lam * length, lam * length, top),
        (lam * length, lam * length, bottom),
        (7.0 * lam * length, lam * length, bottom),
    ]
    return radius, SpherePath(waypoints, cfg.steps)


# ----------------------------------------------------------------------
# runner
# ----------------------------------------------------------------------


class ScenarioRunner:
    """Builds, runs and records one scenario."""

    def __init__(self, scenario: ScenarioConfig, out_dir: Optional[Union[str, Path]] = None):
        self.config = scenario
        self.out_dir = Path(out_dir or scenario.output_dir or Path(config.output_root) / scenario.scenario)
        self.timings: Dict[str, float] = {"setup": 0.0, "solve": 0.0, "adapt": 0.0, "output": 0.0}

    def _lap(self, phase: str, started: float) -> float:
        now = time.perf_counter()
        self.timings[phase] += now - started
        return now

    def run(self) -> RunReport:
        """Run the configured scenario and write report.json."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        echo_config(self.config, self.out_dir)
        logger.info(f"Running scenario '{self.config.scenario}' into {self.out_dir}")
        runners = {"inflate": self.run_inflate, "indent": self.run_indent, "slide": self.run_slide}
        report = runners[self.config.scenario]()
        report.timings = {k: round(v, 6) for k, v in self.timings.items()}
        (self.out_dir / "report.json").write_text(report.model_dump_json(indent=2))
        status = "FAILED" if report.failed else "done"
        logger.info(f"Scenario '{self.config.scenario}' {status}: {len(report.rows)} steps, {report.final_dofs} dofs")
        return report

    # ------------------------------------------------------------------
    # outputs

    def _snapshot(self, model: MembraneModel, state: SimState, driver: Optional[AdaptiveDriver] = None) -> None:
        """mesh_<step>.json (reference mesh with the current configuration as field) and mesh_<step>.vtk."""
        mesh = model.mesh.copy()
        mesh.set_fields({fid: cp[None, :] for fid, cp in state.by_function().items()})
        json_path = self.out_dir / f"mesh_{state.step}.json"
        json_path.write_text(mesh_to_json(mesh, include_fields=True))
        cell_data = None
        if driver is not None:
            depths = element_depths(model.mesh, driver.params)
            touching = active_elements(model, state, driver.contact.sphere(state))
            cell_data = {eid: {"depth": float(d), "contact": float(eid in touching)} for eid, d in depths.items()}
        write_mesh_vtk(model.mesh, self.out_dir / f"mesh_{state.step}.vtk", cp_hom=state.by_function(), cell_data=cell_data)
        logger.info(f"Snapshot of step {state.step} written to {json_path.parent}")

    def _write_tables(self, report: RunReport, events: list) -> None:
        write_csv(self.out_dir / "forces.csv", FORCES_HEADER, [row.csv() for row in report.rows])
        write_csv(self.out_dir / "events.csv", EVENTS_HEADER, events)

    def _base_report(self, model: MembraneModel) -> RunReport:
        return RunReport(scenario=self.config.scenario, seed=self.config.seed, final_dofs=model.n_dofs)

    # ------------------------------------------------------------------
    # inflation

    def build_inflation(self) -> Tuple[MembraneModel, SimState]:
        cfg = self.config
        mesh = hemisphere(cfg.radius)
        nx, ny = cfg.mesh.elements
        refine_to_counts(mesh, nx, ny)
        if cfg.uniform_depth:
            refine_uniform(mesh, cfg.uniform_depth)
        q = cfg.mesh.quadrature
        model = MembraneModel(
            cfg.material.mu, mesh, INFLATE_CONSTRAINTS, n_quad=(q, q), prestretch=cfg.prestretch,
            closure_planes=[(0.0, 0.0, 1.0)], length_scale=cfg.radius,
        )
        state = state_from_mesh(model)
        v0, _ = enclosed_volume(model, state)
        return model, replace(state, volume_target=v0)

    def run_inflate(self) -> RunReport:
        """Step V/V0 up to ``max_volume_ratio`` and track p*R/mu against the analytic relation."""
        cfg = self.config
        started = time.perf_counter()
        model, state = self.build_inflation()
        v0 = state.volume_target
        report = self._base_report(model)
        controls = cfg.solver.controls()
        ratios = np.linspace(1.0, cfg.max_volume_ratio, cfg.total_steps + 1)[1:]
        logger.info(f"Inflation: V0 = {v0:.6g}, {model.n_dofs} dofs, {len(ratios)} steps to V/V0 = {ratios[-1]:g}")
        started = self._lap("setup", started)

        pressure_rows = []
        errors = []
        for ratio in ratios:
            try:
                state = solve_load_step(model, state, volume_target=float(ratio) * v0, controls=controls)
            except LoadStepError as exc:
                report.failed, report.message = True, str(exc)
                break
            pressure = state.pressure * cfg.radius / cfg.material.mu
            exact = analytic_pressure(float(ratio))
            errors.append(abs(pressure - exact) / abs(exact))
            report.rows.append(StepRow(step=state.step, load=float(ratio), f_n=pressure, f_t=0.0, dofs=model.n_dofs))
            pressure_rows.append([state.step, float(ratio), pressure, exact, state.residual_norm, state.iterations])
            logger.info(f"Step {state.step}: V/V0 = {ratio:.4g}, pR/mu = {pressure:.6f} (analytic {exact:.6f})")
        started = self._lap("solve", started)

        if errors:
            report.metrics["max_rel_pressure_error"] = max(errors)
            report.metrics["final_rel_pressure_error"] = errors[-1]
        report.final_dofs = model.n_dofs
        report.final_elements = len(model.mesh.elements)
        self._write_tables(report, [])
        write_step_csv(self.out_dir / "pressure.csv", pressure_rows)
        self._snapshot(model, state)
        self._lap("output", started)
        return report

    # ------------------------------------------------------------------
    # contact scenarios

    def _contact_setup(
        self, mesh: LRMesh, constraints, path: SpherePath, radius: float, closed: bool
    ) -> Tuple[MembraneModel, SimState, AdaptiveDriver]:
        cfg = self.config
        nx, ny = cfg.mesh.elements
        base = mesh.copy()
        if cfg.uniform_depth:
            refine_uniform(mesh, cfg.uniform_depth)
            base = mesh.copy()
        q = cfg.mesh.quadrature
        model = MembraneModel(
            cfg.material.mu, mesh, constraints, n_quad=(q, q), prestretch=cfg.prestretch,
            closure_planes=[(0.0, 0.0, 1.0)] if closed else (), length_scale=cfg.length,
        )
        state = state_from_mesh(model, sphere_center=path.start)
        if closed:
            v0, _ = enclosed_volume(model, state)
            state = replace(state, volume_target=v0)
        base_lengths = (1.0 / nx, 1.0 / ny)
        contact = SphereContact(
            radius, ContactParams(cfg.material.base_penalty(cfg.length), cfg.mesh.degree, base_lengths)
        )
        params = AdaptiveParams(
            cfg.adaptive.max_depth, base_lengths, cfg.adaptive.d_ref, cfg.adaptive.d_safe, cfg.adaptive.d_crs,
        )
        driver = AdaptiveDriver(base, params, contact, cfg.solver.controls(), adaptive=cfg.adaptive.enabled)
        return model, state, driver

    def _run_path(self, model: MembraneModel, state: SimState, driver: AdaptiveDriver, path: SpherePath) -> RunReport:
        started = time.perf_counter()
        report = self._base_report(model)
        contact_rows = []
        previous = path.start
        travelled = 0.0
        deepest = 0.0
        for center in path.centers():
            adapt_before = driver.adapt_seconds
            try:
                result = driver.adaptive_step(model, state, center)
            except LoadStepError as exc:
                report.failed, report.message = True, str(exc)
                started = self._lap("solve", started)
                break
            model, state = result.model, result.state
            travelled += float(np.linalg.norm(center - previous))
            previous = center
            report.rows.append(
                StepRow(
                    step=state.step, load=travelled, f_n=result.f_n, f_t=result.f_t,
                    dofs=model.n_dofs, events="+".join(result.events),
                )
            )
            contact_rows.append([state.step, *(float(c) for c in center), result.f_n, result.f_t, result.active])
            sphere = driver.contact.sphere(state)
            deepest = max(deepest, max_penetration(model, state, sphere))
            logger.info(
                f"Step {state.step}: center z = {center[2]:.4g}, f_n = {result.f_n:.6g}, "
                f"f_t = {result.f_t:.6g}, {model.n_dofs} dofs, {result.active} contact elements"
            )
            adapt = driver.adapt_seconds - adapt_before
            self.timings["adapt"] += adapt
            now = time.perf_counter()
            self.timings["solve"] += now - started - adapt
            started = now
            if result.events and config.snapshot_meshes:
                self._snapshot(model, state, driver)
                started = self._lap("output", started)

        forces = [abs(r.f_n) for r in report.rows]
        report.metrics["max_f_n"] = max(forces, default=0.0)
        report.metrics["max_abs_f_t"] = max((abs(r.f_t) for r in report.rows), default=0.0)
        report.metrics["max_penetration"] = deepest
        report.metrics["events"] = float(len(driver.events))
        report.final_dofs = model.n_dofs
        report.final_elements = len(model.mesh.elements)
        self._write_tables(report, [e.row() for e in driver.events])
        write_csv(self.out_dir / "contact.csv", CONTACT_HEADER, contact_rows)
        self._snapshot(model, state, driver)
        self._lap("output", started)
        return report

    def run_indent(self) -> RunReport:
        """Quarter sheet [0, 2L0]^2 indented by a sphere lowered until its bottom reaches z = -R/2."""
        cfg = self.config
        started = time.perf_counter()
        nx, ny = cfg.mesh.elements
        p = cfg.mesh.degree
        radius = cfg.length * cfg.sphere_radius_scale
        path = SpherePath([(0.0, 0.0, radius), (0.0, 0.0, 0.5 * radius)], cfg.steps)
        mesh = flat_sheet(2.0 * cfg.length, 2.0 * cfg.length, nx, ny, p, p)
        model, state, driver = self._contact_setup(mesh, INDENT_CONSTRAINTS, path, radius, closed=False)
        logger.info(f"Indentation: R = {radius:g}, {model.n_dofs} dofs, {len(path)} steps")
        self._lap("setup", started)
        return self._run_path(model, state, driver, path)

    def run_slide(self) -> RunReport:
        """Cushion sheet [0, 8 lam L0] x [0, 2 lam L0]: the sphere presses down, then slides along x."""
        cfg = self.config
        started = time.perf_counter()
        nx, ny = cfg.mesh.elements
        p = cfg.mesh.degree
        lam, length = cfg.prestretch, cfg.length
        radius, path = slide_path(cfg)
        mesh = flat_sheet(8.0 * lam * length, 2.0 * lam * length, nx, ny, p, p)
        model, state, driver = self._contact_setup(mesh, SLIDE_CONSTRAINTS, path, radius, closed=True)
        logger.info(f"Sliding: R = {radius:g}, {model.n_dofs} dofs, {len(path)} steps")
        self._lap("setup", started)
        return self._run_path(model, state, driver, path)


def run_scenario(scenario: ScenarioConfig, out_dir: Optional[Union[str, Path]] = None) -> RunReport:
    return ScenarioRunner(scenario, out_dir).run()


def write_comparison(table: ComparisonTable, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table.model_dump_json(indent=2))
    return path
