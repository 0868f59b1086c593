"""Trajectory files: CSV ``t,node_id,x,y,vx,vy`` plus a JSON metadata file."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import ChannelMesh, write_vtk
from .operators import Trajectory

__all__ = ["write_trajectory", "read_trajectory", "write_trajectory_vtk", "meta_path"]

_HEADER = ["t", "node_id", "x", "y", "vx", "vy"]


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _g(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory(path, traj: Trajectory, mesh: ChannelMesh, meta: Optional[dict] = None,
                     t_max: Optional[float] = None) -> Path:
    """Write nodal samples (17 significant digits) and the companion metadata.

    ``t_max`` drops time nodes beyond it. Returns the CSV path.
    """
    path = Path(path)
    times, V = traj.times, traj.values
    if t_max is not None:
        keep = times <= t_max + 1e-12
        times, V = times[keep], V[keep]
    X = mesh.nodes
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(_HEADER)
        for t, Vk in zip(times, V):
            ts = _g(t)
            for i in range(mesh.n_nodes):
                wr.writerow([ts, i, _g(X[i, 0]), _g(X[i, 1]), _g(Vk[i, 0]), _g(Vk[i, 1])])
    info = {
        "nx": mesh.nx, "ny": mesh.ny, "length": mesh.length, "height": mesh.height,
        "layout": mesh.layout, "n_nodes": mesh.n_nodes, "n_times": int(len(times)),
    }
    info.update(meta or {})
    meta_path(path).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return path


def read_trajectory(path):
    """Read a trajectory CSV.

    Returns
    -------
    traj : Trajectory
    nodes : ndarray (N, 2)
    meta : dict
        Contents of the metadata file (empty if absent).
    """
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header != _HEADER:
        raise ValueError(f"{path}: expected header {','.join(_HEADER)}")
    times = np.unique(data[:, 0])
    N = int(data[:, 1].max()) + 1
    if data.shape[0] != len(times) * N:
        raise ValueError(f"{path}: ragged trajectory (rows != times x nodes)")
    order = np.lexsort((data[:, 1], data[:, 0]))
    data = data[order]
    V = data[:, 4:6].reshape(len(times), N, 2)
    nodes = data[:N, 2:4]
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    return Trajectory(times, V), nodes, meta


def write_trajectory_vtk(prefix, traj: Trajectory, mesh: ChannelMesh,
                         t_max: Optional[float] = None) -> list:
    """One legacy VTK file per time node: ``<prefix>_<k>.vtk``."""
    out = []
    for k, (t, Vk) in enumerate(zip(traj.times, traj.values)):
        if t_max is not None and t > t_max + 1e-12:
            break
        p = Path(f"{prefix}_{k:05d}.vtk")
        write_vtk(mesh, p, point_data={"velocity": Vk})
        out.append(p)
    return out
