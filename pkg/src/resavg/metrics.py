"""Distances between action laws and the convergence experiments using them.

The workhorse is a capped transport distance between empirical samples of the
action vector: per-pair cost min(sum_k (lambda_k^s + 1) |I_k - I'_k|, cap)
with an exact minimum-cost matching.  Matching two equal-size empirical
measures realizes the transport optimum, so the estimate is an upper bound
for the distance between the underlying laws up to sampling error (dual
bounded-Lipschitz test functions are 1-Lipschitz for this cost and bounded
by the cap).

Estimator conventions, fixed so results are reproducible bit for bit:

* arguments are put in a canonical order (hash of the raw bytes) before any
  seeded draw, which makes the estimate exactly symmetric;
* both samples are cut to a common size (at most ``max_n``) by a seeded
  subsample of the larger side;
* the standard error is a paired bootstrap: both sides are resampled with
  replacement and the assignment is re-solved on the resampled cost matrix,
  so the stderr prices the sampling noise of the transport estimate itself,
  not merely the mean of one realized matching.

The sliced variant averages exact one-dimensional matchings over random
directions and rescales by 1 / E|u_1| (u uniform on the sphere), which makes
it exact for point masses separated along a coordinate axis; it is a cheap
proxy, not a replacement, for the assignment estimate.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import gammaln

from .dynamics import STREAM_METRIC, NonlinearitySpec
from .ensemble import EnsembleResult, run_ensemble
from .spectral import SpectralModel

__all__ = [
    "action_cost_weights",
    "bl_upper_distance",
    "sliced_distance",
    "MixingResult",
    "mixing_curve",
    "fit_decay_rate",
    "ConvergenceResult",
    "uniform_convergence_experiment",
    "WindowResult",
    "window_restart_check",
    "save_table_csv",
    "save_distance_surface_csv",
    "save_sup_decay_csv",
    "save_mixing_csv",
    "save_nlw_average_csv",
]

DEFAULT_CAP = 2.0
DEFAULT_MAX_N = 2000
DEFAULT_BOOT = 50

# spawn-key purposes under STREAM_METRIC
_SUB_A, _SUB_B, _BOOT, _DIRS, _REPLICA, _WINDOW, _GCURVE = 0, 1, 2, 3, 4, 5, 6


def _metric_rng(seed: int, purpose: int, index: int = 0) -> Generator:
    return Generator(Philox(SeedSequence(seed, spawn_key=(STREAM_METRIC, purpose, index))))


def action_cost_weights(lam: np.ndarray, s: float = 1.0) -> np.ndarray:
    """Per-mode weights lambda_k^s + 1 of the action cost."""
    return np.asarray(lam, dtype=float) ** s + 1.0


def _canonical(wa: np.ndarray, wb: np.ndarray):
    ka = hashlib.sha256(np.ascontiguousarray(wa).tobytes()).digest()
    kb = hashlib.sha256(np.ascontiguousarray(wb).tobytes()).digest()
    return (wb, wa) if kb < ka else (wa, wb)


def _common_size(xa: np.ndarray, xb: np.ndarray, max_n: int, seed: int):
    n = min(xa.shape[0], xb.shape[0], max_n)
    out = []
    for purpose, x in ((_SUB_A, xa), (_SUB_B, xb)):
        if x.shape[0] > n:
            idx = np.sort(_metric_rng(seed, purpose).choice(x.shape[0], size=n, replace=False))
            x = x[idx]
        out.append(x)
    return out


def bl_upper_distance(
    Ia: np.ndarray,
    Ib: np.ndarray,
    lam: np.ndarray,
    s: float = 1.0,
    cap: float = DEFAULT_CAP,
    max_n: int = DEFAULT_MAX_N,
    seed: int = 0,
    n_boot: int = DEFAULT_BOOT,
):
    """Capped transport distance between two action samples (rows = samples).

    Returns (distance, stderr).  Exactly symmetric in its arguments; the
    stderr is a paired bootstrap that re-solves the assignment on resampled
    cost matrices (``n_boot = 0`` skips it and reports 0).
    """
    Ia = np.asarray(Ia, dtype=float)
    Ib = np.asarray(Ib, dtype=float)
    if Ia.ndim != 2 or Ib.ndim != 2 or Ia.shape[1] != Ib.shape[1]:
        raise ValueError("samples must be 2-d with a common mode axis")
    if Ia.shape[0] == 0 or Ib.shape[0] == 0:
        raise ValueError("empty sample")
    w = action_cost_weights(lam, s)
    xa, xb = _canonical(Ia * w, Ib * w)
    xa, xb = _common_size(xa, xb, max_n, seed)
    if xa.shape == xb.shape and np.array_equal(xa, xb):
        # identical samples match row for row: the estimate is exactly zero
        # for every realization, so it carries no sampling noise either
        return 0.0, 0.0
    cost = np.minimum(cdist(xa, xb, "cityblock"), cap)
    rows, cols = linear_sum_assignment(cost)
    dist = float(np.mean(cost[rows, cols]))
    n = cost.shape[0]
    if n_boot > 0 and n > 1:
        rng = _metric_rng(seed, _BOOT)
        reps = np.empty(n_boot)
        for b in range(n_boot):
            sub = cost[np.ix_(rng.integers(0, n, size=n),
                              rng.integers(0, cost.shape[1], size=cost.shape[1]))]
            r, c = linear_sum_assignment(sub)
            reps[b] = np.mean(sub[r, c])
        stderr = float(np.std(reps, ddof=1))
    else:
        stderr = 0.0
    return dist, stderr


def _mean_abs_coordinate(M: int) -> float:
    # E|u_1| for u uniform on the unit sphere in R^M
    return float(np.exp(gammaln(M / 2.0) - gammaln((M + 1) / 2.0)) / np.sqrt(np.pi))


def sliced_distance(
    Ia: np.ndarray,
    Ib: np.ndarray,
    lam: np.ndarray,
    s: float = 1.0,
    cap: float = DEFAULT_CAP,
    n_dirs: int = 64,
    max_n: int = DEFAULT_MAX_N,
    seed: int = 0,
) -> float:
    """Sliced proxy: average over random directions of the exact 1-d matching
    of projected weighted actions, rescaled by 1 / E|u_1|."""
    Ia = np.asarray(Ia, dtype=float)
    Ib = np.asarray(Ib, dtype=float)
    w = action_cost_weights(lam, s)
    xa, xb = _canonical(Ia * w, Ib * w)
    xa, xb = _common_size(xa, xb, max_n, seed)
    M = xa.shape[1]
    dirs = _metric_rng(seed, _DIRS).standard_normal((n_dirs, M))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(xa @ dirs.T, axis=0)
    pb = np.sort(xb @ dirs.T, axis=0)
    costs = np.minimum(np.abs(pa - pb) / _mean_abs_coordinate(M), cap)
    return float(np.mean(costs))


# ---------------------------------------------------------------------------
# mixing of an effective system


@dataclass
class MixingResult:
    taus: np.ndarray
    per_initial: np.ndarray      # (n_initial, n_grid) distances to stationarity
    ghat: np.ndarray             # max over initial conditions
    floor: float                 # distance between independent replica pools
    floor_stderr: float
    half_split: float            # within-pool half vs half distance
    replica_ok: bool
    rate: float                  # fitted exponential decay rate (nan if few points)
    meta: dict = field(default_factory=dict)


def _derived_seed(master_seed: int, purpose: int, index: int) -> int:
    return int(SeedSequence(master_seed, spawn_key=(STREAM_METRIC, purpose, index))
               .generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def stationary_pool(model, eff, n_pool: int, master_seed: int, dtau: float,
                    burn: float, thin: float, n_chains: int = 4,
                    workers: int = 1) -> np.ndarray:
    """Action samples from the long-run law of the effective system: n_chains
    chains, burn-in discarded, thinned at ``thin``."""
    per_chain = -(-n_pool // n_chains)
    thin = max(1, round(thin / dtau)) * dtau
    burn = max(1, round(burn / thin)) * thin
    T = burn + thin * (per_chain - 1)
    res = run_ensemble(model, n_chains, T, dtau, thin, master_seed,
                       init={"kind": "gaussian", "scale": 0.1}, eff=eff,
                       workers=workers)
    skip = round(burn / thin)
    pool = res.actions[skip:].reshape(-1, res.M)
    return pool[:n_pool]


def fit_decay_rate(taus: np.ndarray, ghat: np.ndarray, floor: float,
                   cutoff: float = 2.0):
    """Exponential rate of ghat's decay to the floor: slope of
    log(ghat - floor) over the points still above cutoff * floor.  tau = 0 is
    excluded because the initial distance often saturates the cap, which
    breaks the log linearity.  Returns (rate, n_points); nan rate when fewer
    than three points qualify."""
    taus = np.asarray(taus, dtype=float)
    ghat = np.asarray(ghat, dtype=float)
    mask = (ghat > cutoff * max(floor, 1e-12)) & (taus > 0)
    if np.count_nonzero(mask) < 3:
        return float("nan"), int(np.count_nonzero(mask))
    y = np.log(ghat[mask] - floor)
    slope = np.polyfit(taus[mask], y, 1)[0]
    return float(-slope), int(np.count_nonzero(mask))


def mixing_curve(
    model: SpectralModel,
    eff,
    initials,
    T: float,
    dtau: float,
    grid_step: float,
    n_traj: int,
    master_seed: int,
    n_pool: int = 1000,
    s: float = 1.0,
    max_n: int = DEFAULT_MAX_N,
    workers: int = 1,
) -> MixingResult:
    """ghat(tau) = max over initial states of the capped transport distance
    between the time-tau action law and the long-run pool.

    Empirical same-law distances scale with sample size, so the resolution
    floor is measured in the exact geometry of the curve points: an
    independent replica sample of size n_traj against the pool.  Replica
    consistency separately compares cross-replica to within-pool half-split
    distances at matched sizes; a cross distance above 1.5x the half-split
    means the two pools disagree beyond sampling noise and the burn-in or
    pool length is too short.
    """
    d_min = float(np.min(eff.d))
    if d_min <= 0:
        raise ValueError("mixing requires positive dissipation")
    burn, thin = 10.0 / d_min, 2.0 / d_min
    pools = [
        stationary_pool(model, eff, n_pool, _derived_seed(master_seed, _REPLICA, r),
                        dtau, burn, thin, workers=workers)
        for r in (0, 1)
    ]
    floor, floor_se = bl_upper_distance(pools[1][:n_traj], pools[0], eff.lam,
                                        s=s, max_n=max_n, seed=master_seed)
    h = min(n_pool // 2, max_n)
    half_split, _ = bl_upper_distance(pools[0][:h], pools[0][h : 2 * h],
                                      eff.lam, s=s, max_n=max_n,
                                      seed=master_seed, n_boot=0)
    cross, _ = bl_upper_distance(pools[1][:h], pools[0][:h], eff.lam, s=s,
                                 max_n=max_n, seed=master_seed, n_boot=0)
    replica_ok = cross <= 1.5 * half_split

    initials = list(initials)
    if not initials:
        raise ValueError("need at least one initial state")
    per = []
    for i, v0 in enumerate(initials):
        res = run_ensemble(model, n_traj, T, dtau, grid_step,
                           _derived_seed(master_seed, _GCURVE, i),
                           init=np.asarray(v0, dtype=complex), eff=eff,
                           workers=workers)
        per.append([
            bl_upper_distance(res.actions[g], pools[0], eff.lam, s=s,
                              max_n=max_n, seed=master_seed, n_boot=0)[0]
            for g in range(res.taus.size)
        ])
        taus = res.taus
    per = np.asarray(per)
    ghat = np.max(per, axis=0)
    rate, _n = fit_decay_rate(taus, ghat, floor)
    return MixingResult(taus=taus, per_initial=per, ghat=ghat, floor=floor,
                        floor_stderr=floor_se, half_split=half_split,
                        replica_ok=replica_ok, rate=rate,
                        meta={"burn": burn, "thin": thin, "n_pool": n_pool,
                              "cross_replica": cross})


# ---------------------------------------------------------------------------
# uniform-in-time convergence of the perturbed system to the effective law


@dataclass
class ConvergenceResult:
    eps: np.ndarray
    taus: np.ndarray
    distance: np.ndarray         # (n_eps, n_grid)
    stderr: np.ndarray
    sup: np.ndarray              # (n_eps,) max over the grid
    sup_tau: np.ndarray
    stabilized: np.ndarray       # tail flatness flag per eps
    meta: dict = field(default_factory=dict)


def uniform_convergence_experiment(
    model: SpectralModel,
    spec: NonlinearitySpec,
    eff,
    eps_list,
    n_traj: int,
    T: float,
    dtau: float,
    grid_step: float,
    master_seed: int,
    init,
    s: float = 1.0,
    max_n: int = DEFAULT_MAX_N,
    workers: int = 1,
    n_boot: int = 16,
) -> ConvergenceResult:
    """Distance between perturbed and effective action laws on a shared time
    grid, one perturbed ensemble per eps against a single effective ensemble.

    All ensembles share the master seed, so initial draws coincide and the
    comparison is common-random-numbers across eps.

    ``n_boot`` is the per-grid-point bootstrap count.  The default is coarse
    because each assignment re-solve is expensive at full ensemble size and
    the downstream sup/tail statistics aggregate over many grid points;
    raise it for publication-grade per-point error bars.
    """
    eff_res = run_ensemble(model, n_traj, T, dtau, grid_step, master_seed,
                           init=init, eff=eff, workers=workers)
    taus = eff_res.taus
    eps_arr = np.asarray(list(eps_list), dtype=float)
    D = np.empty((eps_arr.size, taus.size))
    SE = np.empty_like(D)
    for e, eps in enumerate(eps_arr):
        pert = run_ensemble(model, n_traj, T, dtau, grid_step, master_seed,
                            init=init, eps=float(eps), spec=spec, workers=workers)
        for g in range(taus.size):
            D[e, g], SE[e, g] = bl_upper_distance(
                pert.actions[g], eff_res.actions[g], model.lam, s=s,
                max_n=max_n, seed=master_seed, n_boot=n_boot,
            )
    sup_idx = np.argmax(D, axis=1)
    tail = D[:, -3:]
    tail_se = np.max(SE[:, -3:], axis=1)
    stabilized = (np.max(tail, axis=1) - np.min(tail, axis=1)) <= 3.0 * tail_se
    return ConvergenceResult(
        eps=eps_arr, taus=taus, distance=D, stderr=SE,
        sup=D[np.arange(eps_arr.size), sup_idx], sup_tau=taus[sup_idx],
        stabilized=stabilized,
        meta={"n_traj": n_traj, "dtau": dtau, "s": s, "max_n": max_n,
              "master_seed": master_seed},
    )


# ---------------------------------------------------------------------------
# windowed restarts: the effective law tracks the perturbed one from any
# late starting time, not only from tau = 0


@dataclass
class WindowResult:
    eps: np.ndarray
    starts: np.ndarray
    window_taus: np.ndarray
    distance: np.ndarray         # (n_eps, n_starts, n_window)
    window_max: np.ndarray       # (n_eps, n_starts)
    meta: dict = field(default_factory=dict)


def window_restart_check(
    model: SpectralModel,
    spec: NonlinearitySpec,
    eff,
    eps_list,
    starts,
    window_len: float,
    n_traj: int,
    dtau: float,
    grid_step: float,
    master_seed: int,
    init,
    s: float = 1.0,
    max_n: int = DEFAULT_MAX_N,
    workers: int = 1,
) -> WindowResult:
    """For each start time T', restart the effective system from the
    perturbed ensemble's interaction-frame states at T' and compare action
    laws along the window [T', T' + window_len]."""
    starts = np.asarray(sorted(starts), dtype=float)
    eps_arr = np.asarray(list(eps_list), dtype=float)
    T_total = float(starts[-1]) + window_len
    n_win = round(window_len / grid_step)
    window_taus = np.arange(n_win + 1) * grid_step
    D = np.empty((eps_arr.size, starts.size, n_win + 1))
    for e, eps in enumerate(eps_arr):
        pert = run_ensemble(model, n_traj, T_total, dtau, grid_step, master_seed,
                            init=init, eps=float(eps), spec=spec,
                            keep_states=True, workers=workers)
        for si, t0 in enumerate(starts):
            g0 = round(t0 / grid_step)
            states0 = pert.states[g0]
            win = run_ensemble(model, states0.shape[0], window_len, dtau,
                               grid_step, _derived_seed(master_seed, _WINDOW, 100 + si),
                               init={"kind": "ensemble", "value": states0},
                               eff=eff, workers=workers)
            for g in range(n_win + 1):
                D[e, si, g], _ = bl_upper_distance(
                    pert.actions[g0 + g], win.actions[g], model.lam, s=s,
                    max_n=max_n, seed=master_seed, n_boot=0,
                )
    return WindowResult(
        eps=eps_arr, starts=starts, window_taus=window_taus, distance=D,
        window_max=np.max(D, axis=2),
        meta={"window_len": window_len, "n_traj": n_traj, "master_seed": master_seed},
    )


# ---------------------------------------------------------------------------
# CSV output (plain tables, shortest round-trip float text)


def save_table_csv(path, columns, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(
                repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)
                for x in row
            ) + "\n")


def save_distance_surface_csv(conv: ConvergenceResult, path) -> None:
    rows = [
        (float(conv.eps[e]), float(conv.taus[g]), float(conv.distance[e, g]),
         float(conv.stderr[e, g]))
        for e in range(conv.eps.size)
        for g in range(conv.taus.size)
    ]
    save_table_csv(path, ("eps", "tau", "distance", "stderr"), rows)


def save_sup_decay_csv(conv: ConvergenceResult, path) -> None:
    rows = [
        (float(conv.eps[e]), float(conv.sup[e]),
         float(conv.stderr[e, int(np.argmax(conv.distance[e]))]))
        for e in range(conv.eps.size)
    ]
    save_table_csv(path, ("eps", "sup_distance", "stderr"), rows)


def save_mixing_csv(mix: MixingResult, path) -> None:
    rows = [
        (float(mix.taus[g]), float(mix.ghat[g]), float(mix.floor))
        for g in range(mix.taus.size)
    ]
    save_table_csv(path, ("tau", "ghat", "floor"), rows)


def save_nlw_average_csv(path, gammas, horizons, deviations) -> None:
    rows = [
        (float(g), float(t), float(d))
        for g, t, d in zip(gammas, horizons, deviations)
    ]
    save_table_csv(path, ("gamma", "horizon", "deviation"), rows)
