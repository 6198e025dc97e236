"""Legacy ASCII VTK snapshots of LR surfaces (sampled quads per element)."""

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
from jinja2 import Environment, FileSystemLoader

from bezier_extract import operators_for
from config import config
from lr_kernel import LRMesh

logger = logging.getLogger(__name__)

_env = Environment(
    loader=FileSystemLoader(str(Path(__file__).parent / "templates")),
    keep_trailing_newline=True,
    autoescape=False,
)


def sample_surface(
    mesh: LRMesh,
    cp_hom: Optional[Dict[int, np.ndarray]] = None,
    samples: Optional[int] = None,
):
    """
    Sample every element on a ``samples`` x ``samples`` grid.

    Args:
        mesh: Mesh providing the basis and reference weights
        cp_hom: Homogeneous control points per function id (default: the mesh's own)
        samples: Points per element edge

    Returns:
        (points (n, 3), quad cells (m, 4), element id per cell)
    """
    samples = samples or config.vtk_samples
    t = np.linspace(0.0, 1.0, samples)
    TX, TY = np.meshgrid(t, t, indexing="ij")
    points, cells, owners = [], [], []
    offset = 0
    for op in operators_for(mesh):
        values, _, _ = op.evaluate(TX.ravel(), TY.ravel())
        ids = op.function_ids
        if cp_hom is None:
            controls = np.array([mesh.functions[f].cp_hom for f in ids])
        else:
            controls = np.array([cp_hom[f] for f in ids])
        hom = (values * op.gammas) @ controls
        points.append(hom[:, :3] / hom[:, 3:4])
        for i in range(samples - 1):
            for j in range(samples - 1):
                a = offset + i * samples + j
                cells.append((a, a + samples, a + samples + 1, a + 1))
                owners.append(op.element_id)
        offset += samples * samples
    return np.vstack(points), np.array(cells, dtype=int), np.array(owners, dtype=int)


def render_vtk(
    points: np.ndarray,
    cells: np.ndarray,
    cell_data: Optional[Dict[str, Sequence[float]]] = None,
    title: str = "LR membrane surface",
) -> str:
    template = _env.get_template("mesh.vtk.j2")
    return template.render(
        title=title,
        points=np.asarray(points).tolist(),
        cells=np.asarray(cells).tolist(),
        cell_data={k: [float(v) for v in vals] for k, vals in (cell_data or {}).items()},
    )


def write_mesh_vtk(
    mesh: LRMesh,
    path: Union[str, Path],
    cp_hom: Optional[Dict[int, np.ndarray]] = None,
    cell_data: Optional[Dict[int, Dict[str, float]]] = None,
    samples: Optional[int] = None,
) -> Path:
    """Write the (deformed) surface as a legacy VTK unstructured grid of quads.

    ``cell_data`` maps element ids to named scalars, repeated on every sampled quad.
    """
    points, cells, owners = sample_surface(mesh, cp_hom, samples)
    data = {}
    if cell_data:
        names = sorted({name for values in cell_data.values() for name in values})
        data = {name: [cell_data.get(int(e), {}).get(name, 0.0) for e in owners] for name in names}
    data["element"] = owners.astype(float)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_vtk(points, cells, data, title=f"LR membrane surface, revision {mesh.revision}"))
    logger.debug(f"VTK snapshot written: {path} ({len(cells)} quads)")
    return path
