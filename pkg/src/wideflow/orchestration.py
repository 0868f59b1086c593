"""Scenario assembly and the ``run`` / ``validate`` / ``diagnose`` / ``compare`` pipelines."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import constitutive as cv
from .config import RunConfig
from .diagnostics import (boundary_report, default_psis, energy_report, estimate_korn_constant,
                          reconstruct_pressure, reports_to_csv, reports_to_table)
from .geometry import (ChannelMesh, ExtensionField, build_extension_field, build_rect_channel,
                       parabolic_profile)
from .minimizer import MinimizeOptions, Problem, epsilon_continuation, horizon_grid, l2_distance
from .operators import Space, Trajectory
from .reference import solve as reference_solve
from .trajectory_io import read_trajectory, write_trajectory, write_trajectory_vtk

__all__ = ["Scenario", "RunOutcome", "build_scenario", "validate_scenario", "run_scenario",
           "diagnose_trajectory", "compare_trajectories", "space_from_nodes"]

log = logging.getLogger("wideflow.run")


def _g(v) -> str:
    return format(float(v), ".17g")


@dataclass
class Scenario:
    config: RunConfig
    mesh: ChannelMesh
    space: Space
    extension: ExtensionField
    params: cv.ConstitutiveParams
    forcing: Optional[object]

    def problem(self) -> Problem:
        s = self.config.solver
        return Problem(mesh=self.mesh, extension=self.extension, params=self.params,
                       T_obs=s.T_obs, h_t=s.time_step, kappa=s.kappa, forcing=self.forcing,
                       form=self.config.physics.form, space=self.space)


@dataclass
class RunOutcome:
    exit_code: int
    summary: dict = field(default_factory=dict)


def _constant_forcing(fx: float, fy: float):
    def f(t, pts):
        pts = np.asarray(pts, dtype=float)
        out = np.empty(pts.shape[:-1] + (2,))
        out[..., 0], out[..., 1] = fx, fy
        return out
    return f


def build_scenario(cfg: RunConfig) -> Scenario:
    """Mesh, extension and laws from a validated config.

    Raises ``FluxMismatchError`` for incompatible outlet fluxes and
    ``ParameterError`` for unsupported laws.
    """
    g, d, ph = cfg.geometry, cfg.data, cfg.physics
    n_out = 2 if g.layout == "two_outlets" else 1
    profile = parabolic_profile(d.inlet_peak, g.height) if d.inlet == "parabolic" else None
    q_in = 2.0 * d.inlet_peak * g.height / 3.0 if d.inlet == "parabolic" else 0.0
    if d.fluxes:
        fluxes = tuple(d.fluxes)
    else:
        fluxes = tuple([q_in / n_out] * n_out)
    mesh = build_rect_channel(g.nx, g.ny, g.length, g.height, g.layout, fluxes=fluxes)
    stream = None
    if d.u0 == "vortex":
        L, H, a = g.length, g.height, d.u0_amplitude
        stream = lambda x, y: a * (np.sin(np.pi * x / L) * np.sin(np.pi * y / H)) ** 4  # noqa: E731
    ext = build_extension_field(mesh, profile, fluxes=fluxes, initial_stream=stream)
    fv = ph.forcing_vector()
    forcing = _constant_forcing(*fv) if fv is not None else None
    params = ph.params(min(cfg.solver.eps_ladder))
    return Scenario(config=cfg, mesh=mesh, space=Space(mesh), extension=ext, params=params,
                    forcing=forcing)


def validate_scenario(cfg: RunConfig, korn: bool = True) -> dict:
    """Parameter flags, optional Korn estimate and the built scenario sizes."""
    sc = build_scenario(cfg)
    c4 = None
    if korn and cfg.solver.korn_starts > 0:
        c4 = estimate_korn_constant(sc.space, p=4.0, n_starts=cfg.solver.korn_starts,
                                    seed=cfg.solver.seed, max_iter=100).value
    rep = cv.validate_params(sc.params, korn_c4=c4)
    s = cfg.solver
    times = horizon_grid(s.T_obs, s.time_step, max(s.eps_ladder))
    return {
        "in_window": bool(rep.in_window),
        "flags": list(rep.flags),
        "korn_c4_lower_bound": c4,
        "n_nodes": int(sc.mesh.n_nodes),
        "n_time_slabs": int(len(times) - 1),
        "fluxes": [float(f) for f in sc.extension.fluxes],
    }


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _boundary_rows(source: str, rep) -> list:
    rows = []
    for j in range(len(rep.psis)):
        rows.append([source, j, "", "wall_residual", _g(rep.wall_residual[j])])
        for i in range(rep.constants.shape[1]):
            rows.append([source, j, i, "outlet_residual", _g(rep.outlet_residual[j, i])])
            for l in range(rep.constants.shape[2]):
                rows.append([source, j, i, f"constant_eta{l}", _g(rep.constants[j, i, l])])
    return rows


def _pressure_rows(pf, t_max) -> list:
    rows = []
    for k, t in enumerate(pf.times):
        if t > t_max + 1e-12:
            break
        for n, val in enumerate(pf.P[k]):
            rows.append([_g(t), n, _g(val)])
    return rows


def run_scenario(cfg: RunConfig, outdir) -> RunOutcome:
    """Ladder run, reference run and diagnostics; writes all artifacts to ``outdir``.

    Exit code 0 if every rung converged, 2 otherwise (artifacts still written).
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    sc = build_scenario(cfg)
    s = cfg.solver
    T_obs = s.T_obs
    opts = MinimizeOptions(grad_tol=s.grad_tol, step_tol=s.step_tol, max_iter=s.max_iter,
                           memory=s.memory)
    prob = sc.problem()
    report = epsilon_continuation(prob, s.eps_ladder, opts=opts)
    times = report.times
    fmt = set(cfg.output.formats)
    files = []
    summary = {"status": "ok", "ladder": list(s.eps_ladder), "rungs": []}

    ref = None
    if s.reference:
        n_ref = int(round(T_obs / s.time_step))
        ref = reference_solve(sc.space, sc.extension, sc.params, T_obs, s.time_step,
                              kappa=s.kappa, forcing=sc.forcing, times=times[: n_ref + 1])
        summary["reference_max_energy_violation"] = float(ref.max_violation)
        if "csv" in fmt:
            files.append(write_trajectory(out / "trajectory_reference.csv", ref.trajectory, sc.mesh,
                                          meta={"source": "reference", "h_t": s.time_step}).name)
        if "vtk" in fmt:
            write_trajectory_vtk(out / "reference", ref.trajectory, sc.mesh)

    window = T_obs - 5.0 * min(s.eps_ladder)
    if window < 2.0 * s.time_step:
        window = T_obs
    dist_rows = []
    prev = None
    ref_norm = math.nan
    if ref is not None:
        nr = len(ref.trajectory.times)
        ref_norm = l2_distance(sc.space, times[:nr], ref.trajectory.values,
                               0.0 * ref.trajectory.values, t_max=window)
    for i, (eps, res) in enumerate(zip(s.eps_ladder, report.results)):
        info = {"eps": eps, "status": "failed" if res is None else res.status}
        if res is None:
            summary["status"] = "error"
            summary["rungs"].append(info)
            dist_rows.append([_g(eps), "failed", "", "", "", "", "", _g(ref_norm)])
            continue
        if res.status != "converged":
            summary["status"] = "error"
        info.update(iterations=res.iterations, value=res.value, gnorm=res.gnorm)
        summary["rungs"].append(info)
        V = res.trajectory.values
        d_ref = math.nan
        if ref is not None:
            nr = len(ref.trajectory.times)
            d_ref = l2_distance(sc.space, times[:nr], V[:nr], ref.trajectory.values, t_max=window)
        d_prev = (l2_distance(sc.space, times, V, prev, t_max=window)
                  if prev is not None else math.nan)
        prev = V
        dist_rows.append([_g(eps), res.status, res.iterations, _g(res.value), _g(res.gnorm),
                          _g(d_ref), _g(d_prev), _g(ref_norm)])
        if "csv" in fmt:
            files.append(write_trajectory(out / f"trajectory_wide_{i}.csv", res.trajectory,
                                          sc.mesh, meta={"source": "wide", "eps": eps},
                                          t_max=T_obs).name)
        if "vtk" in fmt:
            write_trajectory_vtk(out / f"wide_{i}", res.trajectory, sc.mesh, t_max=T_obs)
    _write_csv(out / "eps_distance.csv",
               ["eps", "status", "iterations", "value", "gnorm", "distance_to_reference",
                "distance_to_previous", "reference_norm"], dist_rows)
    files.append("eps_distance.csv")

    diags = [d for d in report.diagnostics if d is not None]
    (out / "energy.csv").write_text(reports_to_csv(diags))
    (out / "energy.txt").write_text(reports_to_table(diags))
    files += ["energy.csv", "energy.txt"]

    psis = default_psis(T_obs)
    brows = []
    sources = []
    if ref is not None:
        sources.append(("reference", ref.trajectory))
    last = next((r for r in reversed(report.results) if r is not None), None)
    if last is not None:
        keep = times <= T_obs + 1e-12
        sources.append(("wide", Trajectory(times[keep], last.trajectory.values[keep])))
    for name, traj in sources:
        pf = reconstruct_pressure(traj, sc.space, sc.extension, sc.params, D=cfg.data.D,
                                  forcing=sc.forcing)
        _write_csv(out / f"pressure_{name}.csv", ["t", "node_id", "P"], _pressure_rows(pf, T_obs))
        files.append(f"pressure_{name}.csv")
        rep = boundary_report(traj, sc.space, sc.params, pf, psis, T_obs, forcing=sc.forcing)
        brows += _boundary_rows(name, rep)
    _write_csv(out / "boundary.csv", ["source", "psi", "outlet", "quantity", "value"], brows)
    files.append("boundary.csv")

    summary["files"] = sorted(files)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunOutcome(exit_code=0 if summary["status"] == "ok" else 2, summary=summary)


# ------------------------------------------------------------ diagnose / compare

def space_from_nodes(nodes) -> Space:
    """Rebuild the structured channel space from node coordinates."""
    nodes = np.asarray(nodes, dtype=float)
    xs, ys = np.unique(nodes[:, 0]), np.unique(nodes[:, 1])
    mesh = build_rect_channel(len(xs) - 1, len(ys) - 1, float(xs[-1] - xs[0]),
                              float(ys[-1] - ys[0]))
    if mesh.n_nodes != len(nodes) or not np.allclose(mesh.nodes, nodes + [-xs[0], -ys[0]]):
        raise ValueError("node layout is not a structured channel grid")
    return Space(mesh)


def diagnose_trajectory(path, cfg: RunConfig, outdir) -> dict:
    """Energy, pressure and boundary diagnostics of a stored trajectory."""
    traj, nodes, meta = read_trajectory(path)
    sc = build_scenario(cfg)
    if sc.mesh.n_nodes != len(nodes) or not np.allclose(sc.mesh.nodes, nodes):
        raise ValueError("trajectory nodes do not match the configured mesh")
    eps = float(meta.get("eps", min(cfg.solver.eps_ladder)))
    params = sc.params.with_eps(eps)
    T_obs = min(cfg.solver.T_obs, float(traj.times[-1]))
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    er = energy_report(traj, params, sc.space, t_max=T_obs)
    (out / "diagnose_energy.csv").write_text(reports_to_csv([er]))
    pf = reconstruct_pressure(traj, sc.space, sc.extension, params, D=cfg.data.D,
                              forcing=sc.forcing)
    rep = boundary_report(traj, sc.space, params, pf, default_psis(T_obs), T_obs,
                          forcing=sc.forcing)
    _write_csv(out / "diagnose_boundary.csv", ["source", "psi", "outlet", "quantity", "value"],
               _boundary_rows(Path(path).stem, rep))
    return {"energy": er.values, "wall_residual": rep.wall_residual.tolist(),
            "outlet_residual": rep.outlet_residual.tolist(),
            "max_abs_mean_error": float(np.max(np.abs(pf.integral() - pf.D)))}


def compare_trajectories(path_a, path_b) -> dict:
    """Space-time L2 distance and max difference on the common time nodes."""
    ta, na, _ = read_trajectory(path_a)
    tb, nb, _ = read_trajectory(path_b)
    if na.shape != nb.shape or not np.allclose(na, nb):
        raise ValueError("trajectories live on different meshes")
    common, ia, ib = np.intersect1d(np.round(ta.times, 12), np.round(tb.times, 12),
                                    return_indices=True)
    if len(common) < 2:
        raise ValueError("fewer than two common time nodes")
    space = space_from_nodes(na)
    A, B = ta.values[ia], tb.values[ib]
    d = l2_distance(space, common, A, B)
    nrm = l2_distance(space, common, B, 0.0 * B)
    return {"n_times": int(len(common)), "l2_distance": d,
            "relative_distance": d / nrm if nrm > 0 else (0.0 if d == 0 else math.inf),
            "max_abs_difference": float(np.max(np.abs(A - B)))}
