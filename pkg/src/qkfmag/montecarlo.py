"""Parallel trajectory ensembles and the spin-scaling study.

Trajectories are processed in fixed blocks of 1024, vectorized across
the block; per-block partial sums are reduced in block order with
``math.fsum``.  Block boundaries depend only on the trajectory index,
so results are byte-identical for any worker count or scheduling.

Both estimators consume the identical record per trajectory (paired
design), and the per-trajectory noise comes from counter-based
substreams of the master seed, making ``run_ensemble`` a pure function
of its spec.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import PhysicalParams, TimeGrid, make_grid, validate_params, with_spin
from .dynamics import step_coefficients
from .estimators import (
    KalmanSchedule,
    bin_edge_indices,
    kalman_schedule,
    riccati_integrate,
    shotnoise_limit,
)
from .rng import substream

BLOCK_SIZE = 1024
ESTIMATOR_NAMES = ("qkf", "regression")


@dataclass(frozen=True)
class EnsembleSpec:
    """One ensemble run: parameters, grid, size, seed, and checkpoints.

    ``checkpoints`` are grid-point indices at which estimator errors are
    recorded.
    """

    params: PhysicalParams
    grid: TimeGrid
    n_traj: int
    master_seed: int
    estimators: tuple = ESTIMATOR_NAMES
    checkpoints: tuple = ()

    def __post_init__(self):
        validate_params(self.params)
        if self.n_traj < 2:
            raise ValueError("n_traj must be >= 2")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")
        n_pts = len(self.grid.times)
        if any(not (0 < c < n_pts) for c in self.checkpoints):
            raise ValueError("checkpoints must be grid indices in (0, n_points)")
        if list(self.checkpoints) != sorted(set(self.checkpoints)):
            raise ValueError("checkpoints must be strictly increasing")


@dataclass(frozen=True)
class EnsembleStats:
    """Per-checkpoint empirical error statistics, plus the Riccati prediction."""

    times: np.ndarray                  # checkpoint times
    estimators: tuple
    mse: dict                          # name -> array over checkpoints, G^2
    stderr: dict                       # name -> standard error of the mse
    mean_b: dict                       # name -> ensemble mean estimate, G
    predicted_v22: np.ndarray          # Riccati v22 at the checkpoints, G^2
    n_traj: int
    master_seed: int

    def to_csv(self, fobj) -> None:
        w = csv.writer(fobj)
        w.writerow(["t", "estimator", "mse", "stderr", "mean_b", "predicted_v22"])
        for name in self.estimators:
            for i, t in enumerate(self.times):
                w.writerow([repr(float(t)), name, repr(float(self.mse[name][i])),
                            repr(float(self.stderr[name][i])), repr(float(self.mean_b[name][i])),
                            repr(float(self.predicted_v22[i]))])

    def summary_dict(self) -> dict:
        return {
            "n_traj": self.n_traj,
            "master_seed": self.master_seed,
            "checkpoint_times": [float(t) for t in self.times],
            "estimators": list(self.estimators),
            "mse": {k: [float(x) for x in v] for k, v in self.mse.items()},
            "stderr": {k: [float(x) for x in v] for k, v in self.stderr.items()},
            "mean_b": {k: [float(x) for x in v] for k, v in self.mean_b.items()},
            "predicted_v22": [float(x) for x in self.predicted_v22],
        }


_STORE_RECORDS_MAX_STEPS = 20_000


@dataclass(frozen=True)
class _EnginePlan:
    """Precomputed per-step coefficients shared by every trajectory."""

    times: np.ndarray
    dts: np.ndarray
    drift: np.ndarray        # deterministic mean increment per step
    g_sqdt: np.ndarray       # diffusion amplitude per unit normal
    d_sqdt: np.ndarray       # record noise amplitude per unit normal
    schedule: KalmanSchedule
    checkpoints: np.ndarray  # grid indices
    # streaming regression bookkeeping (single shared binning)
    edge_at_step: np.ndarray  # bool per step: step k closes a bin ending at point k+1
    bin_mid: np.ndarray       # midpoint per bin (in closure order)
    bin_width: np.ndarray
    bin_of_checkpoint: np.ndarray  # number of closed bins at each checkpoint
    # stored-record regression (per-checkpoint binning, short grids only)
    store_records: bool
    cp_edges: tuple           # per checkpoint: grid indices of its bin edges
    b_true: float
    gamma_j: float
    want_qkf: bool
    want_reg: bool


def _build_plan(spec: EnsembleSpec) -> _EnginePlan:
    p = spec.params
    times = spec.grid.times
    dts = np.diff(times)
    drift, g = step_coefficients(p, times)
    sq = np.sqrt(dts)
    d = 1.0 / (2.0 * math.sqrt(p.meas_strength * p.efficiency))
    schedule = kalman_schedule(p, spec.grid)
    checkpoints = np.asarray(spec.checkpoints, dtype=int)
    want_reg = "regression" in spec.estimators

    n_steps = len(dts)
    edges = bin_edge_indices(times, n_steps)
    # streaming mode needs every checkpoint on the shared bin-edge set;
    # otherwise (e.g. checkpoints inside the log prefix) store the records
    # and bin each checkpoint window exactly as regression_estimate does
    store_records = want_reg and any(int(c) not in set(edges.tolist()) for c in checkpoints)
    if store_records and n_steps > _STORE_RECORDS_MAX_STEPS:
        raise ValueError(
            "off-edge regression checkpoints require storing records; grid too long "
            f"({n_steps} > {_STORE_RECORDS_MAX_STEPS} steps). Snap checkpoints to "
            "uniform-region bin edges or shorten the grid.")
    cp_edges = ()
    if store_records:
        cp_edges = tuple(bin_edge_indices(times, int(c)) for c in checkpoints)
        thin = [int(c) for c, e in zip(checkpoints, cp_edges) if len(e) < 4]
        if thin:
            raise ValueError(f"checkpoints {thin} leave fewer than 3 regression bins")

    te = times[edges]
    bin_mid = 0.5 * (te[:-1] + te[1:])
    bin_width = np.diff(te)
    edge_at_step = np.zeros(n_steps, dtype=bool)
    edge_at_step[edges[1:] - 1] = True
    bins_before = np.searchsorted(edges, checkpoints, side="left")
    return _EnginePlan(
        times=times, dts=dts, drift=drift, g_sqdt=g * sq, d_sqdt=d * sq,
        schedule=schedule, checkpoints=checkpoints,
        edge_at_step=edge_at_step, bin_mid=bin_mid, bin_width=bin_width,
        bin_of_checkpoint=bins_before,
        store_records=store_records, cp_edges=cp_edges,
        b_true=p.b_true,
        gamma_j=p.gamma * p.j_total,
        want_qkf="qkf" in spec.estimators,
        want_reg=want_reg,
    )


def _run_block(spec: EnsembleSpec, plan: _EnginePlan, i0: int, i1: int,
               noise_chunk: int = 8192) -> dict:
    """Simulate trajectories [i0, i1) and accumulate checkpoint statistics."""
    nb = i1 - i0
    gens = [substream(spec.master_seed, i).generator() for i in range(i0, i1)]
    n_steps = len(plan.dts)
    sched = plan.schedule
    n_cp = len(plan.checkpoints)
    cp_set = {int(c): idx for idx, c in enumerate(plan.checkpoints)}

    m = np.zeros(nb)
    jz = np.zeros(nb)
    b = np.zeros(nb)
    xi_cum = np.zeros(nb)
    xi_edge = np.zeros(nb)
    # running OLS sums over closed bins (shared x-geometry)
    s_r = np.zeros(nb)
    s_xr = np.zeros(nb)
    n_bins_closed = 0

    out = {
        "qkf_e2": np.zeros(n_cp), "qkf_e4": np.zeros(n_cp), "qkf_b": np.zeros(n_cp),
        "reg_e2": np.zeros(n_cp), "reg_e4": np.zeros(n_cp), "reg_b": np.zeros(n_cp),
    }
    stream_reg = plan.want_reg and not plan.store_records
    d_xi_store = np.empty((nb, n_steps)) if plan.store_records else None
    z_buf = None
    for k in range(n_steps):
        off = k % noise_chunk
        if off == 0:
            width = min(noise_chunk, n_steps - k)
            z_buf = np.empty((nb, width))
            for i, gen in enumerate(gens):
                z_buf[i] = gen.standard_normal(width)
        z = z_buf[:, off]
        d_xi = m * plan.dts[k] + plan.d_sqdt[k] * z
        if d_xi_store is not None:
            d_xi_store[:, k] = d_xi
        if plan.want_qkf:
            inn = d_xi - jz * plan.dts[k]
            jz = jz + sched.phi12[k] * b + sched.k1[k] * inn
            b = b + sched.k2[k] * inn
        m = m + plan.drift[k] + plan.g_sqdt[k] * z
        xi_cum = xi_cum + d_xi
        if stream_reg and plan.edge_at_step[k]:
            rate = (xi_cum - xi_edge) / plan.bin_width[n_bins_closed]
            s_r += rate
            s_xr += plan.bin_mid[n_bins_closed] * rate
            xi_edge = xi_cum.copy()
            n_bins_closed += 1
        idx = cp_set.get(k + 1)
        if idx is None:
            continue
        if plan.want_qkf:
            if sched.info_form:
                s = sched.shrink[k + 1]
                b_hat = b / s if s > 0.0 else np.zeros(nb)
            else:
                b_hat = b
            err = b_hat - plan.b_true
            e2 = err * err
            out["qkf_e2"][idx] = e2.sum()
            out["qkf_e4"][idx] = (e2 * e2).sum()
            out["qkf_b"][idx] = b_hat.sum()
        if stream_reg:
            nb_bins = plan.bin_of_checkpoint[idx]
            x = plan.bin_mid[:nb_bins]
            sx, sxx = x.sum(), (x * x).sum()
            denom = sxx - sx * sx / nb_bins
            slope = (s_xr - sx * s_r / nb_bins) / denom
            b_hat = slope / plan.gamma_j
            err = b_hat - plan.b_true
            e2 = err * err
            out["reg_e2"][idx] = e2.sum()
            out["reg_e4"][idx] = (e2 * e2).sum()
            out["reg_b"][idx] = b_hat.sum()
    if plan.store_records and plan.want_reg:
        xi = np.concatenate([np.zeros((nb, 1)), np.cumsum(d_xi_store, axis=1)], axis=1)
        for idx in range(n_cp):
            edges = plan.cp_edges[idx]
            te = plan.times[edges]
            rates = np.diff(xi[:, edges], axis=1) / np.diff(te)
            x = 0.5 * (te[:-1] + te[1:])
            xc = x - x.mean()
            slope = (rates @ xc) / np.dot(xc, xc)
            b_hat = slope / plan.gamma_j
            err = b_hat - plan.b_true
            e2 = err * err
            out["reg_e2"][idx] = e2.sum()
            out["reg_e4"][idx] = (e2 * e2).sum()
            out["reg_b"][idx] = b_hat.sum()
    return out


def run_ensemble(spec: EnsembleSpec, workers: int = 1) -> EnsembleStats:
    """Paired-estimator ensemble statistics at the spec's checkpoints.

    Deterministic in ``spec``; independent of ``workers``.
    """
    if len(spec.checkpoints) == 0:
        raise ValueError("spec.checkpoints must be non-empty")
    plan = _build_plan(spec)
    blocks = [(i, min(i + BLOCK_SIZE, spec.n_traj)) for i in range(0, spec.n_traj, BLOCK_SIZE)]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(_run_block_star, [(spec, plan, a, b) for a, b in blocks]))
    else:
        partials = [_run_block(spec, plan, a, b) for a, b in blocks]

    n = spec.n_traj
    n_cp = len(spec.checkpoints)
    times = plan.times[plan.checkpoints]
    mse, stderr, mean_b = {}, {}, {}
    for name, key in (("qkf", "qkf"), ("regression", "reg")):
        if name not in spec.estimators:
            continue
        e2 = np.array([math.fsum(pt[f"{key}_e2"][i] for pt in partials) for i in range(n_cp)])
        e4 = np.array([math.fsum(pt[f"{key}_e4"][i] for pt in partials) for i in range(n_cp)])
        bs = np.array([math.fsum(pt[f"{key}_b"][i] for pt in partials) for i in range(n_cp)])
        mse[name] = e2 / n
        var_e2 = np.maximum(e4 / n - (e2 / n) ** 2, 0.0)
        stderr[name] = np.sqrt(var_e2 / (n - 1))
        mean_b[name] = bs / n
    predicted = riccati_integrate(spec.params, times).v22
    return EnsembleStats(times=times, estimators=tuple(spec.estimators), mse=mse,
                         stderr=stderr, mean_b=mean_b, predicted_v22=predicted,
                         n_traj=n, master_seed=spec.master_seed)


def _run_block_star(args):
    return _run_block(*args)


def checkpoints_for_times(grid: TimeGrid, wanted_times, require_bin_edges: bool = True):
    """Grid indices nearest to the wanted times, snapped to regression bin edges."""
    times = grid.times
    n_steps = len(times) - 1
    edges = bin_edge_indices(times, n_steps) if require_bin_edges else np.arange(1, n_steps + 1)
    edges = edges[edges > 0]
    out = []
    for t in wanted_times:
        i = edges[np.argmin(np.abs(times[edges] - t))]
        out.append(int(i))
    return tuple(sorted(set(out)))


def log_checkpoints(grid: TimeGrid, t_first: float, per_decade: int = 30):
    """Log-spaced checkpoints from t_first to the end of the grid."""
    t_last = grid.t_total
    n = max(2, int(math.ceil(per_decade * math.log10(t_last / t_first))) + 1)
    wanted = np.geomspace(t_first, t_last, n)
    return checkpoints_for_times(grid, wanted)


# ---------------------------------------------------------------------------
# scaling study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingResult:
    """Log-log slope of RMS error vs J, per estimator, at a fixed time."""

    j_values: np.ndarray
    t_check: float
    rms: dict          # estimator -> array over J
    slopes: dict       # estimator -> fitted slope
    shotnoise_rms: np.ndarray
    shotnoise_slope: float

    def to_csv(self, fobj) -> None:
        w = csv.writer(fobj)
        w.writerow(["j_total", "estimator", "rms_error"])
        for name, arr in self.rms.items():
            for j, r in zip(self.j_values, arr):
                w.writerow([repr(float(j)), name, repr(float(r))])
        for j, r in zip(self.j_values, self.shotnoise_rms):
            w.writerow([repr(float(j)), "shotnoise", repr(float(r))])

    def summary_dict(self) -> dict:
        return {
            "t_check": self.t_check,
            "j_values": [float(j) for j in self.j_values],
            "slopes": {k: float(v) for k, v in self.slopes.items()},
            "shotnoise_slope": float(self.shotnoise_slope),
            "rms": {k: [float(x) for x in v] for k, v in self.rms.items()},
            "shotnoise_rms": [float(x) for x in self.shotnoise_rms],
        }


def _loglog_slope(x: np.ndarray, y: np.ndarray) -> float:
    lx = np.log10(x)
    ly = np.log10(y)
    lxc = lx - lx.mean()
    return float(np.dot(lxc, ly) / np.dot(lxc, lxc))


def scaling_study(base: EnsembleSpec, j_values, t_check: float | None = None,
                  workers: int = 1) -> ScalingResult:
    """RMS-error-vs-J slopes for each estimator at a fixed readout time.

    Requires >= 4 values of J spanning >= 2 decades.  Each J reuses the
    master seed (paired noise across J reduces slope variance).
    """
    j_values = np.asarray(sorted(float(j) for j in j_values))
    if len(j_values) < 4:
        raise ValueError("need at least 4 j_values")
    if j_values[-1] / j_values[0] < 100.0:
        raise ValueError("j_values must span at least two decades")
    if t_check is None:
        t_check = base.params.t_total
    rms = {name: [] for name in base.estimators}
    shot = []
    for j in j_values:
        p = with_spin(base.params, j)
        p = replace(p, t_total=t_check)
        grid = make_grid(p)
        cps = checkpoints_for_times(grid, [t_check])
        spec = EnsembleSpec(params=p, grid=grid, n_traj=base.n_traj,
                            master_seed=base.master_seed, estimators=base.estimators,
                            checkpoints=cps)
        stats = run_ensemble(spec, workers=workers)
        for name in base.estimators:
            rms[name].append(math.sqrt(stats.mse[name][-1]))
        shot.append(shotnoise_limit(p, t_check))
    rms = {k: np.array(v) for k, v in rms.items()}
    shot = np.array(shot)
    slopes = {k: _loglog_slope(j_values, v) for k, v in rms.items()}
    return ScalingResult(j_values=j_values, t_check=float(t_check), rms=rms, slopes=slopes,
                         shotnoise_rms=shot, shotnoise_slope=_loglog_slope(j_values, shot))
