"""Monte Carlo ensembles of the perturbed, effective, and wave systems.

Trajectories are integrated in fixed-size chunks vectorized across the
ensemble axis.  Every random draw is keyed by (master_seed, trajectory
index): initial data come from stream 1, driving noise from stream 0 in
fixed blocks.  The realized noise bytes therefore do not depend on chunking
or worker count, and two ensembles launched with the same master seed are
driven by identical noise paths, which is what pathwise coupling experiments
rely on.

Reproducibility of the trajectories themselves is keyed by (master_seed,
chunk): for a fixed chunk size the results are byte identical for any worker
count (workers split at chunk boundaries).  Changing the chunk size reorders
the BLAS summations inside the collocation products and can flip last bits.

Blow-up policy: a trajectory whose L2 norm leaves the guard is frozen and
marked dead.  If more than ``max_blowup_frac`` of the ensemble dies the run
raises; otherwise dead trajectories are dropped from every snapshot and
reported in ``dropped``, so the surviving sample stays a fixed set of paths
across the whole grid.
"""

from __future__ import annotations

import hashlib
import json
import pickle
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from .dynamics import (
    BLOW_UP_NORM,
    NOISE_BLOCK,
    STREAM_INIT,
    BlowUpError,
    NoisePath,
    NonlinearitySpec,
    _grid_layout,
    step_effective,
    step_nlw,
    step_perturbed,
)
from .spectral import SpectralModel, actions, sobolev_norm

__all__ = [
    "EnsembleResult",
    "hash_config",
    "digest_path",
    "sample_initial",
    "run_ensemble",
    "run_ensemble_nlw",
    "save_actions_jsonl",
    "load_actions_jsonl",
    "save_actions_csv",
    "load_actions_csv",
]

_FORMAT = "resavg-actions"
_VERSION = 1

DEFAULT_CHUNK = 256


def hash_config(cfg) -> str:
    """sha256 of the canonical JSON encoding (sorted keys, no whitespace)."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def digest_path(directory, stem: str, digest: str, suffix: str):
    """Content-tagged output path <directory>/<stem>-<digest12><suffix>."""
    import os

    return os.path.join(str(directory), f"{stem}-{digest[:12]}{suffix}")


def _normalize_init(init, M: int) -> dict:
    if isinstance(init, dict):
        kind = init.get("kind")
        if kind == "gaussian":
            scale = np.broadcast_to(np.asarray(init.get("scale", 1.0), dtype=float), (M,))
            if np.any(scale < 0):
                raise ValueError("gaussian init scale must be nonnegative")
            return {"kind": "gaussian", "scale": scale.copy()}
        if kind == "fixed":
            value = np.asarray(init["value"], dtype=complex)
            if value.shape != (M,):
                raise ValueError(f"fixed init must have shape ({M},)")
            return {"kind": "fixed", "value": value}
        if kind == "ensemble":
            value = np.asarray(init["value"], dtype=complex)
            if value.ndim != 2 or value.shape[1] != M:
                raise ValueError(f"ensemble init must have shape (n_traj, {M})")
            return {"kind": "ensemble", "value": value}
        raise ValueError(f"unknown init kind {kind!r}")
    value = np.asarray(init, dtype=complex)
    if value.shape != (M,):
        raise ValueError(f"fixed init must have shape ({M},)")
    return {"kind": "fixed", "value": value}


def sample_initial(master_seed: int, lo: int, hi: int, M: int, init) -> np.ndarray:
    """Initial states for trajectories lo..hi-1, keyed per trajectory so any
    sub-range draws the same values as the full ensemble."""
    init = _normalize_init(init, M)
    if init["kind"] == "fixed":
        return np.broadcast_to(init["value"], (hi - lo, M)).copy()
    if init["kind"] == "ensemble":
        return init["value"][lo:hi].copy()
    out = np.empty((hi - lo, M), dtype=complex)
    scale = init["scale"]
    for j in range(lo, hi):
        rng = Generator(Philox(SeedSequence(master_seed, spawn_key=(STREAM_INIT, j, 0))))
        z = rng.standard_normal((M, 2))
        out[j - lo] = scale * (z[:, 0] + 1j * z[:, 1]) / np.sqrt(2.0)
    return out


@dataclass
class EnsembleResult:
    """Action samples on the output grid: actions[g, c, k] is trajectory
    traj_ids[c] at time taus[g].  ``states`` (same layout, complex) is kept
    only on request."""

    system: str
    taus: np.ndarray
    actions: np.ndarray
    traj_ids: np.ndarray
    master_seed: int
    n_requested: int
    dropped: tuple = ()
    states: np.ndarray | None = None
    config_digest: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.actions.shape[1]

    @property
    def M(self) -> int:
        return self.actions.shape[2]


def _integrate_chunk(model, kind, params, lo, hi, master_seed, init, T, dtau,
                     grid_step, keep_states):
    per, n_grid = _grid_layout(T, dtau, grid_step)
    n_steps = per * n_grid
    M = model.truncation
    c = hi - lo
    state = sample_initial(master_seed, lo, hi, M, init)
    acts = np.empty((n_grid + 1, c, M))
    acts[0] = actions(state)
    states = np.empty((n_grid + 1, c, M), dtype=complex) if keep_states else None
    if keep_states:
        states[0] = state
    alive = np.ones(c, dtype=bool)
    death_tau = np.full(c, np.inf)
    complex_noise = kind != "nlw"
    paths = [NoisePath(master_seed, j, M) for j in range(lo, hi)]
    with np.errstate(over="ignore", invalid="ignore"):
        for blk_lo in range(0, n_steps, NOISE_BLOCK):
            blk_hi = min(blk_lo + NOISE_BLOCK, n_steps)
            if complex_noise:
                dW = np.stack([p.complex_increments(blk_lo, blk_hi, dtau) for p in paths], axis=1)
            else:
                dW = np.stack([p.real_increments(blk_lo, blk_hi, dtau) for p in paths], axis=1)
            for p in paths:
                p.drop_cache()
            for n in range(blk_lo, blk_hi):
                tau = n * dtau
                w = dW[n - blk_lo]
                if kind == "perturbed":
                    state = step_perturbed(model, params["spec"], state, tau,
                                           params["eps"], dtau, w)
                elif kind == "effective":
                    state = step_effective(params["eff"], state, dtau, w)
                else:
                    state = step_nlw(model, params["f"], state, tau,
                                     params["gamma"], dtau, w)
                nrm = sobolev_norm(model, state, 0.0)
                bad = ~(nrm <= BLOW_UP_NORM)  # also catches NaN
                if np.any(bad & alive):
                    newly = bad & alive
                    death_tau[newly] = (n + 1) * dtau
                    alive &= ~newly
                if not np.all(alive):
                    state = np.where(alive[:, None], state, 0.0)
                if (n + 1) % per == 0:
                    g = (n + 1) // per
                    acts[g] = actions(state)
                    if keep_states:
                        states[g] = state
    return acts, states, alive, death_tau


def _chunk_task(payload):
    return _integrate_chunk(*payload)


def _run(model, kind, params, n_traj, T, dtau, grid_step, master_seed, init,
         keep_states, workers, chunk, max_blowup_frac, config_digest, meta):
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    init = _normalize_init(init, model.truncation)
    if init["kind"] == "ensemble" and init["value"].shape[0] != n_traj:
        raise ValueError(
            f"ensemble init supplies {init['value'].shape[0]} states for {n_traj} trajectories"
        )
    _, n_grid = _grid_layout(T, dtau, grid_step)
    ranges = [(lo, min(lo + chunk, n_traj)) for lo in range(0, n_traj, chunk)]
    payloads = [(model, kind, params, lo, hi, master_seed, init, T, dtau,
                 grid_step, keep_states) for lo, hi in ranges]
    if workers > 1 and len(payloads) > 1:
        try:
            pickle.dumps(payloads[0])
        except Exception:
            warnings.warn("payload not picklable; falling back to a single worker")
            workers = 1
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_task, payloads))
    else:
        parts = [_chunk_task(p) for p in payloads]

    acts = np.concatenate([p[0] for p in parts], axis=1)
    states = np.concatenate([p[1] for p in parts], axis=1) if keep_states else None
    alive = np.concatenate([p[2] for p in parts])
    death_tau = np.concatenate([p[3] for p in parts])

    dead = np.flatnonzero(~alive)
    if dead.size > max_blowup_frac * n_traj:
        first = int(dead[np.argmin(death_tau[dead])])
        raise BlowUpError(float(death_tau[first]), float("inf"), traj_index=first)
    keep = np.flatnonzero(alive)
    taus = np.arange(n_grid + 1) * grid_step
    return EnsembleResult(
        system=kind,
        taus=taus,
        actions=acts[:, keep, :],
        traj_ids=keep,
        master_seed=master_seed,
        n_requested=n_traj,
        dropped=tuple(int(i) for i in dead),
        states=states[:, keep, :] if keep_states else None,
        config_digest=config_digest,
        meta=meta,
    )


def run_ensemble(
    model: SpectralModel,
    n_traj: int,
    T: float,
    dtau: float,
    grid_step: float,
    master_seed: int,
    init,
    eps: float | None = None,
    spec: NonlinearitySpec | None = None,
    eff=None,
    keep_states: bool = False,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
    max_blowup_frac: float = 1e-3,
    config_digest: str | None = None,
) -> EnsembleResult:
    """Ensemble of the perturbed system (pass eps and spec) or an effective
    system (pass eff), recording interaction-frame actions on the grid."""
    perturbed = eff is None
    if perturbed and (eps is None or spec is None):
        raise ValueError("perturbed ensemble needs eps and a nonlinearity spec")
    if not perturbed and (eps is not None or spec is not None):
        raise ValueError("pass either (eps, spec) or eff, not both")
    if perturbed:
        if not (0.0 < eps <= 1.0):
            raise ValueError("eps must lie in (0, 1]")
        max_phase = float(np.max(model.lam)) * dtau / eps
        if max_phase >= 2.0 * np.pi:
            warnings.warn(
                f"fastest interaction phase advances {max_phase:.2f} >= 2 pi per "
                "step; decrease dtau or increase eps to resolve the oscillation"
            )
        kind, params = "perturbed", {"eps": eps, "spec": spec}
        meta = {"eps": eps, "dtau": dtau, "grid_step": grid_step, "T": T}
    else:
        kind, params = "effective", {"eff": eff}
        meta = {"dtau": dtau, "grid_step": grid_step, "T": T}
    return _run(model, kind, params, n_traj, T, dtau, grid_step, master_seed,
                init, keep_states, workers, chunk, max_blowup_frac,
                config_digest, meta)


def run_ensemble_nlw(
    model: SpectralModel,
    f,
    gamma: float,
    n_traj: int,
    T: float,
    dtau: float,
    grid_step: float,
    master_seed: int,
    init,
    keep_states: bool = False,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
    max_blowup_frac: float = 1e-3,
    config_digest: str | None = None,
) -> EnsembleResult:
    """Ensemble of the complexified wave system (real noise, physical frame);
    actions |xi_k|^2 / 2 are frame independent."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    meta = {"gamma": gamma, "dtau": dtau, "grid_step": grid_step, "T": T}
    return _run(model, "nlw", {"f": f, "gamma": gamma}, n_traj, T, dtau,
                grid_step, master_seed, init, keep_states, workers, chunk,
                max_blowup_frac, config_digest, meta)


# ---------------------------------------------------------------------------
# persistence: JSON lines (header record, then one record per grid time and
# trajectory) and flat CSV


def save_actions_jsonl(result: EnsembleResult, path) -> None:
    header = {
        "format": _FORMAT,
        "version": _VERSION,
        "system": result.system,
        "master_seed": result.master_seed,
        "config_digest": result.config_digest,
        "n_requested": result.n_requested,
        "dropped": list(result.dropped),
        "taus": result.taus.tolist(),
        "traj_ids": result.traj_ids.tolist(),
        "M": result.M,
        "meta": result.meta,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for g in range(result.taus.size):
            for c in range(result.n):
                rec = {"g": g, "j": int(result.traj_ids[c]),
                       "I": result.actions[g, c].tolist()}
                fh.write(json.dumps(rec) + "\n")


def load_actions_jsonl(path, expect_digest: str | None = None) -> EnsembleResult:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != _FORMAT or header.get("version") != _VERSION:
            raise ValueError(f"not a version {_VERSION} {_FORMAT} file")
        if expect_digest is not None and header.get("config_digest") != expect_digest:
            raise ValueError(
                f"config digest mismatch: file has {header.get('config_digest')!r}, "
                f"expected {expect_digest!r}"
            )
        taus = np.asarray(header["taus"], dtype=float)
        traj_ids = np.asarray(header["traj_ids"], dtype=int)
        M = header["M"]
        col = {j: c for c, j in enumerate(traj_ids)}
        acts = np.full((taus.size, traj_ids.size, M), np.nan)
        count = 0
        for line in fh:
            rec = json.loads(line)
            acts[rec["g"], col[rec["j"]]] = rec["I"]
            count += 1
    if count != taus.size * traj_ids.size or np.any(np.isnan(acts)):
        raise ValueError("action records are incomplete")
    return EnsembleResult(
        system=header["system"], taus=taus, actions=acts, traj_ids=traj_ids,
        master_seed=header["master_seed"], n_requested=header["n_requested"],
        dropped=tuple(header["dropped"]), config_digest=header["config_digest"],
        meta=header.get("meta", {}),
    )


def save_actions_csv(result: EnsembleResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("tau,traj,k,action\n")
        for g, tau in enumerate(result.taus):
            for c in range(result.n):
                j = int(result.traj_ids[c])
                for k in range(result.M):
                    fh.write(f"{float(tau)!r},{j},{k},{float(result.actions[g, c, k])!r}\n")


def load_actions_csv(path):
    """(taus, traj_ids, actions) from the flat CSV layout."""
    rows = np.genfromtxt(path, delimiter=",", names=True)
    taus = np.unique(rows["tau"])
    trajs = np.unique(rows["traj"]).astype(int)
    ks = np.unique(rows["k"]).astype(int)
    acts = np.full((taus.size, trajs.size, ks.size), np.nan)
    ti = {t: i for i, t in enumerate(taus)}
    ci = {j: c for c, j in enumerate(trajs)}
    for r in rows:
        acts[ti[float(r["tau"])], ci[int(r["traj"])], int(r["k"])] = r["action"]
    if np.any(np.isnan(acts)):
        raise ValueError("action records are incomplete")
    return taus, trajs, acts
