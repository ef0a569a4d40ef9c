"""Time stepping in the interaction frame.

Perturbed system (slow time tau, interaction coordinates a_k):

    da_k = [-lambda_k a_k + e^{i lambda_k tau / eps} P_k(Phi_{-Lambda tau/eps} a)] dtau
           + e^{i lambda_k tau / eps} sum_l Psi_kl b_l dW_l,

with P(v) = Psi(V(x) u + script_P(u)), u = sum_k v_k phi_k, and complex
Brownian increments dW_l (independent N(0, dtau) real and imaginary parts).
The stiff rotation enters only through bounded phase factors, so an
exponential Euler step with the integrating factor e^{-lambda_k dtau} on the
dissipative part carries no dtau <~ eps stability constraint:

    a+ = e^{-L dtau} a + e^{-L dtau} [e^{i phi} P(e^{-i phi} a)] dtau
         + e^{i phi} Psi (b * dW),        phi = Lambda tau / eps  (left endpoint).

Effective systems step the same way with phases dropped and a supplied drift
and dispersion matrix.  The wave system is handled in its complexified form
xi = u + i L^{-1} u_t (coefficients against the Dirichlet sine eigenbasis),
slow time tau = gamma t:

    d xi = [gamma^{-1} i LAM^{1/2} xi - i Im xi - i LAM^{-1/2} fhat(Re xi)] dtau
           - i LAM^{-1/2}-weighted real noise,

integrated in its own interaction frame a_k = e^{-i lambda_k^{1/2} tau/gamma} xi_k,
where the damped term splits exactly into -a_k/2 plus a fast phase.

Noise streams are counter addressable: trajectory t, block j of 256 steps is
generated by a Philox generator keyed by SeedSequence(master_seed,
spawn_key=(stream, t, j)), so any (seed, trajectory, step) increment is
reproducible in isolation and independent of worker scheduling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .spectral import SpectralModel, sobolev_norm

__all__ = [
    "BlowUpError",
    "NoisePath",
    "NonlinearitySpec",
    "Trajectory",
    "eval_nonlinearity",
    "step_perturbed",
    "step_effective",
    "simulate",
    "nlw_complexify",
    "nlw_decomplexify",
    "nlw_actions",
    "step_nlw",
    "save_trajectory_csv",
    "load_trajectory_csv",
    "save_trajectory_bin",
    "load_trajectory_bin",
]

BLOW_UP_NORM = 1.0e6

# Steps per noise block; fixed so the (seed, traj, step) -> increment map does
# not depend on how a run is chunked.
NOISE_BLOCK = 256

# spawn_key stream tags (trajectory noise / initial data / metric subsampling)
STREAM_NOISE = 0
STREAM_INIT = 1
STREAM_METRIC = 2

_TRAJ_MAGIC = b"SGT1"
_TRAJ_VERSION = 1


class BlowUpError(RuntimeError):
    """Raised when a trajectory leaves the guarded ball |a|_0 <= 1e6."""

    def __init__(self, tau: float, norm: float, traj_index=None):
        self.tau = tau
        self.norm = norm
        self.traj_index = traj_index
        where = "" if traj_index is None else f" (trajectory {traj_index})"
        super().__init__(f"blow-up at tau={tau:.6g}: |a|_0={norm:.3g}{where}")


class NoisePath:
    """Counter-addressable Gaussian increment stream for one trajectory.

    ``unit_block(j)`` returns standard normals of shape (NOISE_BLOCK, M, 2);
    complex increments use both components, real increments component 0.
    Blocks are generated independently from (master_seed, traj_index, j).
    """

    def __init__(self, master_seed: int, traj_index: int, n_modes: int):
        self.master_seed = int(master_seed)
        self.traj_index = int(traj_index)
        self.n_modes = int(n_modes)
        self._blocks: dict[int, np.ndarray] = {}

    def unit_block(self, j: int) -> np.ndarray:
        blk = self._blocks.get(j)
        if blk is None:
            seq = np.random.SeedSequence(
                self.master_seed, spawn_key=(STREAM_NOISE, self.traj_index, j)
            )
            gen = np.random.Generator(np.random.Philox(seq))
            blk = gen.standard_normal((NOISE_BLOCK, self.n_modes, 2))
            self._blocks[j] = blk
        return blk

    def _units(self, lo: int, hi: int) -> np.ndarray:
        out = np.empty((hi - lo, self.n_modes, 2))
        pos = lo
        while pos < hi:
            j, off = divmod(pos, NOISE_BLOCK)
            take = min(NOISE_BLOCK - off, hi - pos)
            out[pos - lo : pos - lo + take] = self.unit_block(j)[off : off + take]
            pos += take
        return out

    def complex_increments(self, lo: int, hi: int, dtau: float) -> np.ndarray:
        """Increments dW for steps lo..hi-1, shape (hi-lo, M) complex,
        independent N(0, dtau) real and imaginary parts."""
        u = self._units(lo, hi)
        return np.sqrt(dtau) * (u[..., 0] + 1j * u[..., 1])

    def real_increments(self, lo: int, hi: int, dtau: float) -> np.ndarray:
        """Real increments for steps lo..hi-1, shape (hi-lo, M), N(0, dtau)."""
        return np.sqrt(dtau) * self._units(lo, hi)[..., 0]

    def drop_cache(self) -> None:
        self._blocks.clear()


def _p_blend(r: np.ndarray, p: int) -> np.ndarray:
    """Nondecreasing C^1 profile equal to r^p for r >= 1 (cubic Hermite blend
    below 1; exact identity for the default p = 1)."""
    if p == 1:
        return r
    out = np.where(r >= 1.0, r ** p, r * r * ((p - 2.0) * r - (p - 3.0)))
    return out


@dataclass(frozen=True)
class NonlinearitySpec:
    """Pointwise nonlinearity W(u) = V(x) u + lin_coeff * u + z f_p(|u|^2) u.

    kind 'cubic_cgl' is the default instantiation (p = 1, lin_coeff = -1,
    |z| = 1 with Re z <= 0 and Im z <= 0).  kind 'custom_pointwise' applies a
    caller-supplied complex map after the V(x) u term; growth and smoothness
    of custom maps are the caller's responsibility and such specs do not
    serialize.
    """

    kind: str = "cubic_cgl"
    z: complex = -1.0 + 0.0j
    lin_coeff: float = -1.0
    p: int = 1
    grid_size: int | None = None
    func: object = None

    def __post_init__(self):
        if self.kind not in ("cubic_cgl", "custom_pointwise"):
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        if self.kind == "cubic_cgl":
            z = complex(self.z)
            if abs(abs(z) - 1.0) > 1e-12:
                raise ValueError("coupling z must lie on the unit circle")
            if z.real > 1e-12 or z.imag > 1e-12:
                raise ValueError("coupling z must satisfy Re z <= 0 and Im z <= 0")
            if int(self.p) < 1:
                raise ValueError("degree p must be >= 1")
        if self.kind == "custom_pointwise" and self.func is None:
            raise ValueError("custom_pointwise requires a callable func")

    def to_dict(self) -> dict:
        if self.kind != "cubic_cgl":
            raise ValueError("only cubic_cgl nonlinearities serialize")
        return {
            "kind": self.kind,
            "z": [self.z.real, self.z.imag],
            "lin_coeff": self.lin_coeff,
            "p": self.p,
        }

    @staticmethod
    def from_dict(d: dict) -> "NonlinearitySpec":
        zr, zi = d.get("z", [-1.0, 0.0])
        return NonlinearitySpec(
            kind=d.get("kind", "cubic_cgl"),
            z=complex(zr, zi),
            lin_coeff=float(d.get("lin_coeff", -1.0)),
            p=int(d.get("p", 1)),
        )


def _collocation(model: SpectralModel, spec: NonlinearitySpec):
    """(phi values, projection matrix, V values) on the dealiased grid."""
    if spec.grid_size is None:
        return model.phi_grid, model.phi_grid.T * model.quad_weight, model.potential_grid
    n_c = int(spec.grid_size)
    if n_c < 4 * model.truncation:
        raise ValueError(
            f"collocation grid {n_c} is below the dealiasing bound "
            f"4*M = {4 * model.truncation}"
        )
    length = model.lengths[0]
    if model.geometry == "torus":
        x = np.arange(n_c) * (length / n_c)
    else:
        x = (np.arange(n_c) + 0.5) * (length / n_c)
    phi = model.eigenfunction_values(x)
    w = length / n_c
    return phi, phi.T * w, model.potential.values(x, length, model.geometry)


def eval_nonlinearity(model: SpectralModel, spec: NonlinearitySpec, v: np.ndarray) -> np.ndarray:
    """P(v) = Psi(V(x) u + script_P(u)) with u = sum_k v_k phi_k, evaluated by
    collocation on a grid that integrates the cubic terms exactly.

    Batched over leading axes of ``v``.
    """
    phi, proj, vvals = _collocation(model, spec)
    # two real gemms beat complex-casting the basis matrices in the hot loop
    u = v.real @ phi + 1j * (v.imag @ phi)
    if spec.kind == "cubic_cgl":
        w = vvals * u + spec.lin_coeff * u + spec.z * _p_blend(np.abs(u) ** 2, spec.p) * u
    else:
        w = vvals * u + spec.func(u)
    return w.real @ proj + 1j * (w.imag @ proj)


def step_perturbed(
    model: SpectralModel,
    spec: NonlinearitySpec,
    a: np.ndarray,
    tau: float,
    eps: float,
    dtau: float,
    dW: np.ndarray,
) -> np.ndarray:
    """One exponential Euler step of the perturbed system in the interaction
    frame, phases frozen at the left endpoint (Ito convention)."""
    phase = np.exp(1j * model.lam * (tau / eps))
    v = a * phase.conj()
    p = eval_nonlinearity(model, spec, v)
    decay = np.exp(-model.lam * dtau)
    noise_mat = model.psi[:, : model.truncation] * model.b
    return decay * (a + phase * p * dtau) + phase * (dW @ noise_mat.T)


def step_effective(eff, a: np.ndarray, dtau: float, dW: np.ndarray) -> np.ndarray:
    """One exponential Euler step of an effective (autonomous) system."""
    decay = np.exp(-eff.d * dtau)
    return decay * (a + eff.drift(a) * dtau) + dW @ eff.B.T


@dataclass
class Trajectory:
    """States sampled on the output grid.  ``frame`` records whether the
    stored states are interaction-frame or physical coordinates."""

    taus: np.ndarray
    states: np.ndarray
    frame: str
    meta: dict = field(default_factory=dict)


def _grid_layout(T: float, dtau: float, grid_step: float):
    ratio = grid_step / dtau
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
        raise ValueError(
            f"grid step {grid_step} must be an integer multiple of dtau {dtau}"
        )
    per = int(round(ratio))
    n_grid = int(round(T / grid_step))
    if abs(n_grid * grid_step - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"horizon {T} must be an integer multiple of grid step {grid_step}")
    return per, n_grid


def simulate(
    model: SpectralModel,
    v0: np.ndarray,
    T: float,
    dtau: float,
    grid_step: float,
    noise: NoisePath,
    eps: float | None = None,
    spec: NonlinearitySpec | None = None,
    eff=None,
) -> Trajectory:
    """Integrate one trajectory and record interaction-frame states on the
    output grid (tau = 0, grid_step, ..., T).

    Exactly one of (eps, spec) for the perturbed system or ``eff`` for an
    effective system must be supplied.
    """
    perturbed = eff is None
    if perturbed and (eps is None or spec is None):
        raise ValueError("perturbed simulation needs eps and a nonlinearity spec")
    if not perturbed and (eps is not None or spec is not None):
        raise ValueError("pass either (eps, spec) or eff, not both")
    if perturbed and not (0.0 < eps <= 1.0):
        raise ValueError("eps must lie in (0, 1]")
    per, n_grid = _grid_layout(T, dtau, grid_step)
    n_steps = per * n_grid
    a = np.asarray(v0, dtype=complex).copy()
    M = model.truncation
    taus = np.arange(n_grid + 1) * grid_step
    states = np.empty((n_grid + 1, M), dtype=complex)
    states[0] = a
    guard = BLOW_UP_NORM
    for n in range(n_steps):
        if n % NOISE_BLOCK == 0:
            dWs = noise.complex_increments(n, min(n + NOISE_BLOCK, n_steps), dtau)
        tau = n * dtau
        dW = dWs[n % NOISE_BLOCK]
        if perturbed:
            a = step_perturbed(model, spec, a, tau, eps, dtau, dW)
        else:
            a = step_effective(eff, a, dtau, dW)
        nrm = float(sobolev_norm(model, a, 0.0))
        if not nrm <= guard:  # also catches NaN
            raise BlowUpError((n + 1) * dtau, nrm)
        if (n + 1) % per == 0:
            states[(n + 1) // per] = a
    return Trajectory(
        taus=taus,
        states=states,
        frame="interaction",
        meta={
            "eps": eps,
            "dtau": dtau,
            "system": "perturbed" if perturbed else "effective",
            "master_seed": noise.master_seed,
            "traj_index": noise.traj_index,
        },
    )


# ---------------------------------------------------------------------------
# damped wave system in complexified form


def nlw_complexify(u: np.ndarray, u_t: np.ndarray, model: SpectralModel) -> np.ndarray:
    """xi_j = <u, e_j> + i lambda_j^{-1/2} <u_t, e_j> from coefficient vectors.

    The action of the pair is then I_k = |xi_k|^2 / 2
    = (<u, e_k>^2 + lambda_k^{-1} <u_t, e_k>^2) / 2.
    """
    return np.asarray(u, dtype=float) + 1j * np.asarray(u_t, dtype=float) / np.sqrt(model.lam)


def nlw_decomplexify(xi: np.ndarray, model: SpectralModel):
    return xi.real.copy(), xi.imag * np.sqrt(model.lam)


def nlw_actions(xi: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(xi) ** 2


def nlw_noise_amplitudes(model: SpectralModel) -> np.ndarray:
    """btilde_j = b_j lambda_j^{-1/2}; reports the truncation value of
    sum lambda_j b_j^2 so the scaling assumption is visible."""
    return model.b / np.sqrt(model.lam)


def nlw_forcing_projection(model: SpectralModel, f, xi: np.ndarray) -> np.ndarray:
    """Phat(xi) = Psi(L^{-1} f(Re xi)) by collocation, batched."""
    phi = model.phi_grid
    re_u = xi.real @ phi
    fvals = f(re_u)
    fhat = fvals @ (phi.T * model.quad_weight)
    return fhat / np.sqrt(model.lam)


def step_nlw(
    model: SpectralModel,
    f,
    xi: np.ndarray,
    tau: float,
    gamma: float,
    dtau: float,
    dW_real: np.ndarray,
    include_damping: bool = True,
) -> np.ndarray:
    """One step of the slow-time complexified wave system.

    The stiff rotation gamma^{-1} i LAM^{1/2} is removed exactly by passing to
    a_k = e^{-i theta_k} xi_k with theta_k = lambda_k^{1/2} tau / gamma.  The
    damped term -i Im xi splits as -a/2 + e^{-2 i theta} conj(a)/2; the -a/2
    half is integrated by its factor e^{-dtau/2}, the oscillatory half and the
    forcing are explicit at the left endpoint.  ``include_damping=False`` is a
    diagnostic switch that drops the -i Im xi term (pure rotation + forcing).
    """
    lam_half = np.sqrt(model.lam)
    theta0 = lam_half * (tau / gamma)
    theta1 = lam_half * ((tau + dtau) / gamma)
    a = xi * np.exp(-1j * theta0)
    drift = np.zeros_like(a)
    if f is not None:
        phat = nlw_forcing_projection(model, f, xi)
        drift = drift - 1j * np.exp(-1j * theta0) * phat
    btilde = nlw_noise_amplitudes(model)
    noise = -1j * np.exp(-1j * theta0) * (btilde * dW_real)
    if include_damping:
        drift = drift + 0.5 * np.exp(-2j * theta0) * np.conj(a)
        a_new = np.exp(-0.5 * dtau) * (a + drift * dtau) + noise
    else:
        a_new = a + drift * dtau + noise
    return a_new * np.exp(1j * theta1)


def simulate_nlw(
    model: SpectralModel,
    f,
    xi0: np.ndarray,
    gamma: float,
    T: float,
    dtau: float,
    grid_step: float,
    noise: NoisePath,
    include_damping: bool = True,
) -> Trajectory:
    """Integrate the complexified wave system; records physical-frame xi."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    per, n_grid = _grid_layout(T, dtau, grid_step)
    n_steps = per * n_grid
    xi = np.asarray(xi0, dtype=complex).copy()
    taus = np.arange(n_grid + 1) * grid_step
    states = np.empty((n_grid + 1, model.truncation), dtype=complex)
    states[0] = xi
    for n in range(n_steps):
        if n % NOISE_BLOCK == 0:
            dWs = noise.real_increments(n, min(n + NOISE_BLOCK, n_steps), dtau)
        xi = step_nlw(model, f, xi, n * dtau, gamma, dtau, dWs[n % NOISE_BLOCK],
                      include_damping=include_damping)
        nrm = float(sobolev_norm(model, xi, 0.0))
        if not nrm <= BLOW_UP_NORM:
            raise BlowUpError((n + 1) * dtau, nrm)
        if (n + 1) % per == 0:
            states[(n + 1) // per] = xi
    return Trajectory(
        taus=taus, states=states, frame="physical",
        meta={"gamma": gamma, "dtau": dtau, "system": "nlw",
              "master_seed": noise.master_seed, "traj_index": noise.traj_index},
    )


# ---------------------------------------------------------------------------
# trajectory persistence: CSV and a compact binary format
#
# binary layout: magic 'SGT1' (4 bytes), version uint32, M uint32, N uint32
# (little endian), then N float64 grid times, then the states as N x M x 2
# float64 (re, im) row-major.


def save_trajectory_csv(traj: Trajectory, path, traj_id: int = 0) -> None:
    with open(path, "w") as fh:
        fh.write("traj_id,tau,k,re,im\n")
        for i, tau in enumerate(traj.taus):
            for k in range(traj.states.shape[1]):
                z = traj.states[i, k]
                fh.write(
                    f"{traj_id},{float(tau)!r},{k},{float(z.real)!r},{float(z.imag)!r}\n"
                )


def load_trajectory_csv(path) -> Trajectory:
    rows = np.genfromtxt(path, delimiter=",", names=True)
    taus = np.unique(rows["tau"])
    ks = np.unique(rows["k"]).astype(int)
    states = np.zeros((taus.size, ks.size), dtype=complex)
    tau_index = {t: i for i, t in enumerate(taus)}
    for r in rows:
        states[tau_index[float(r["tau"])], int(r["k"])] = complex(r["re"], r["im"])
    return Trajectory(taus=taus, states=states, frame="unknown", meta={})


def save_trajectory_bin(traj: Trajectory, path) -> None:
    n, m = traj.states.shape
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(struct.pack("<III", _TRAJ_VERSION, m, n))
        fh.write(np.ascontiguousarray(traj.taus, dtype="<f8").tobytes())
        inter = np.empty((n, m, 2))
        inter[..., 0] = traj.states.real
        inter[..., 1] = traj.states.imag
        fh.write(np.ascontiguousarray(inter, dtype="<f8").tobytes())


def load_trajectory_bin(path) -> Trajectory:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _TRAJ_MAGIC:
            raise ValueError(f"not a trajectory file (magic {magic!r})")
        version, m, n = struct.unpack("<III", fh.read(12))
        if version != _TRAJ_VERSION:
            raise ValueError(f"unsupported trajectory format version {version}")
        taus = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
        raw = np.frombuffer(fh.read(8 * n * m * 2), dtype="<f8").reshape(n, m, 2)
        states = raw[..., 0] + 1j * raw[..., 1]
    return Trajectory(taus=taus, states=states, frame="unknown", meta={})
