"""Spectral Galerkin model for Schrodinger-type operators with discrete spectrum.

The model holds the lowest M eigenpairs of A = -Laplace + V(x) on either a
circle of circumference L (real trigonometric basis) or an interval [0, L]
with Dirichlet conditions (sine basis).  The operator is assembled and
diagonalized at an extended truncation n_ext = ext_factor * M and only the M
lowest eigenpairs are retained, so the retained eigenvectors are converged
well beyond the working tolerance for potentials whose bandwidth is small
compared with M.

Conventions
-----------
* basis row k of ``psi`` holds the coefficients of the eigenfunction phi_k in
  the trigonometric basis, so ``psi @ psi.T == I`` (rows orthonormal),
* complex Galerkin coordinates v_k = <phi_k, u>,
* actions I_k(v) = |v_k|^2 / 2,
* Sobolev-type norm |v|_s^2 = sum_k (lambda_k^s + 1) |v_k|^2, and the matching
  action norm |I|_{I,s} = sum_k (lambda_k^s + 1) |I_k|, so |I(v)|_{I,s} is
  identically |v|_s^2 / 2.

The collocation grid attached to the model integrates products of up to four
basis functions exactly (uniform rule on the circle, midpoint rule on the
interval; for the interval the potential is restricted to a cosine series,
which keeps every integrand a pure cosine polynomial and the midpoint rule
exact).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "Potential",
    "SpectralModel",
    "build_model",
    "actions",
    "action_norm",
    "sobolev_norm",
    "rotate",
    "to_interaction",
    "from_interaction",
    "save_model_json",
    "load_model_json",
    "model_to_dict",
    "model_from_dict",
]

_FORMAT_VERSION = 1

# Default decay rate of the noise amplitudes b_l = exp(-DEFAULT_NOISE_DECAY * l).
DEFAULT_NOISE_DECAY = 0.5

# Relative tolerance that decides when two eigenvalues belong to one
# degenerate block during basis canonicalization.
_DEGENERACY_RTOL = 1e-9


@dataclass(frozen=True)
class Potential:
    """Finite trigonometric description of the potential V(x).

    On the circle: V(x) = const + sum_j cos_coeffs[j-1] cos(2 pi j x / L)
                                 + sum_j sin_coeffs[j-1] sin(2 pi j x / L).
    On the interval the natural harmonics are half as long:
    V(x) = const + sum_j cos_coeffs[j-1] cos(pi j x / L); sine terms are
    rejected there because they would break exactness of the midpoint rule.
    """

    const: float = 1.0
    cos_coeffs: tuple = ()
    sin_coeffs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "cos_coeffs", tuple(float(c) for c in self.cos_coeffs))
        object.__setattr__(self, "sin_coeffs", tuple(float(c) for c in self.sin_coeffs))
        if not np.isfinite(self.const):
            raise ValueError("potential constant must be finite")

    @property
    def bandwidth(self) -> int:
        return max(len(self.cos_coeffs), len(self.sin_coeffs))

    def values(self, x: np.ndarray, length: float, geometry: str) -> np.ndarray:
        base = 2.0 * np.pi / length if geometry == "torus" else np.pi / length
        v = np.full_like(x, self.const, dtype=float)
        for j, c in enumerate(self.cos_coeffs, start=1):
            v += c * np.cos(base * j * x)
        for j, s in enumerate(self.sin_coeffs, start=1):
            v += s * np.sin(base * j * x)
        return v

    def to_dict(self) -> dict:
        return {
            "const": self.const,
            "cos": list(self.cos_coeffs),
            "sin": list(self.sin_coeffs),
        }

    @staticmethod
    def from_dict(d: dict) -> "Potential":
        return Potential(
            const=float(d.get("const", 0.0)),
            cos_coeffs=tuple(d.get("cos", ())),
            sin_coeffs=tuple(d.get("sin", ())),
        )


def _trig_basis_torus(n_ext: int, length: float, x: np.ndarray):
    """Values of the first n_ext real trigonometric basis functions on x.

    Ordering: [1, cos(1.), sin(1.), cos(2.), sin(2.), ...] (L2-normalized),
    with the multiplier kappa_l of -Laplace attached to each function.
    """
    base = 2.0 * np.pi / length
    vals = np.empty((n_ext, x.size))
    kappa = np.empty(n_ext)
    vals[0] = 1.0 / np.sqrt(length)
    kappa[0] = 0.0
    amp = np.sqrt(2.0 / length)
    for l in range(1, n_ext):
        j = (l + 1) // 2
        kappa[l] = (base * j) ** 2
        if l % 2 == 1:
            vals[l] = amp * np.cos(base * j * x)
        else:
            vals[l] = amp * np.sin(base * j * x)
    return vals, kappa


def _trig_basis_interval(n_ext: int, length: float, x: np.ndarray):
    """Dirichlet sine basis sqrt(2/L) sin(pi j x / L), j = 1..n_ext."""
    base = np.pi / length
    j = np.arange(1, n_ext + 1)
    vals = np.sqrt(2.0 / length) * np.sin(base * np.outer(j, x))
    kappa = (base * j) ** 2
    return vals, kappa


def _canonicalize_eigenvectors(lam: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Deterministic eigenbasis: Gram-Schmidt in index order inside each
    degenerate block, then a sign fix (largest-magnitude entry positive,
    earliest index breaking ties)."""
    vecs = vecs.copy()
    n = lam.size
    start = 0
    for i in range(1, n + 1):
        scale = max(abs(lam[start]), abs(lam[i - 1]) if i > start else 0.0, 1.0)
        if i == n or lam[i] - lam[start] > _DEGENERACY_RTOL * max(abs(lam[i]), scale):
            block = vecs[:, start:i]
            for c in range(block.shape[1]):
                for prev in range(c):
                    block[:, c] -= (block[:, prev] @ block[:, c]) * block[:, prev]
                block[:, c] /= np.linalg.norm(block[:, c])
            start = i
    for c in range(vecs.shape[1]):
        col = vecs[:, c]
        pivot = np.argmax(np.abs(np.abs(col) - np.max(np.abs(col))) < 1e-12)
        if col[pivot] < 0:
            vecs[:, c] = -col
    return vecs


@dataclass(frozen=True)
class SpectralModel:
    """Immutable container for the retained eigenpairs and noise amplitudes.

    Arrays are read-only after construction.  ``psi`` has shape (M, n_ext):
    row k holds eigenfunction phi_k in the trigonometric basis.
    """

    dim: int
    lengths: tuple
    truncation: int
    geometry: str
    potential: Potential
    lam: np.ndarray
    psi: np.ndarray
    b: np.ndarray
    n_ext: int
    # collocation machinery, derived in __post_init__
    grid: np.ndarray = field(default=None, repr=False)
    quad_weight: float = field(default=0.0, repr=False)
    basis_grid: np.ndarray = field(default=None, repr=False)
    phi_grid: np.ndarray = field(default=None, repr=False)
    potential_grid: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        length = self.lengths[0]
        n_c = 4 * self.n_ext + 8 + 2 * self.potential.bandwidth
        if self.geometry == "torus":
            x = np.arange(n_c) * (length / n_c)
            basis, _ = _trig_basis_torus(self.n_ext, length, x)
        else:
            x = (np.arange(n_c) + 0.5) * (length / n_c)
            basis, _ = _trig_basis_interval(self.n_ext, length, x)
        object.__setattr__(self, "grid", x)
        object.__setattr__(self, "quad_weight", length / n_c)
        object.__setattr__(self, "basis_grid", basis)
        object.__setattr__(self, "phi_grid", self.psi @ basis)
        object.__setattr__(
            self, "potential_grid", self.potential.values(x, length, self.geometry)
        )
        for name in ("lam", "psi", "b", "grid", "basis_grid", "phi_grid", "potential_grid"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def M(self) -> int:
        return self.truncation

    def eigenfunction_values(self, x: np.ndarray) -> np.ndarray:
        """Values of the retained eigenfunctions at arbitrary points, (M, len(x))."""
        length = self.lengths[0]
        if self.geometry == "torus":
            basis, _ = _trig_basis_torus(self.n_ext, length, np.asarray(x, dtype=float))
        else:
            basis, _ = _trig_basis_interval(self.n_ext, length, np.asarray(x, dtype=float))
        return self.psi @ basis


def _validated_noise(b, M: int) -> np.ndarray:
    if b is None:
        b = np.exp(-DEFAULT_NOISE_DECAY * np.arange(1, M + 1))
    elif np.isscalar(b):
        b = np.exp(-float(b) * np.arange(1, M + 1))
    else:
        b = np.asarray(b, dtype=float)
        if b.shape != (M,):
            raise ValueError(f"noise amplitudes must have length M={M}")
    if not np.all(np.isfinite(b)) or np.any(b <= 0):
        raise ValueError("noise amplitudes must be positive and finite")
    if np.any(np.diff(b) > 0):
        raise ValueError("noise amplitudes must be nonincreasing")
    return b


def build_model(
    dim: int = 1,
    lengths=(2.0 * np.pi,),
    truncation: int = 8,
    potential: Potential | dict | None = None,
    b=None,
    geometry: str = "torus",
    ext_factor: int = 2,
) -> SpectralModel:
    """Assemble -Laplace + V at extended truncation and retain the M lowest modes.

    The operator matrix is built in the real trigonometric basis with
    n_ext = ext_factor * M functions, diagonalized with a dense symmetric
    solver, and the M lowest eigenpairs are kept.  Eigenvectors are
    canonicalized deterministically (Gram-Schmidt in index order within
    degenerate blocks, positive pivot sign).
    """
    if dim < 1:
        raise ValueError("dimension must be a positive integer")
    if dim != 1:
        raise NotImplementedError(
            "only one-dimensional domains are supported at this scale"
        )
    lengths = tuple(float(L) for L in lengths)
    if len(lengths) != dim or any(L <= 0 for L in lengths):
        raise ValueError("lengths must give one positive extent per dimension")
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    if geometry not in ("torus", "interval"):
        raise ValueError(f"unknown geometry {geometry!r}")
    if ext_factor < 2:
        raise ValueError("ext_factor must be >= 2 so retained modes are converged")
    if potential is None:
        potential = Potential()
    elif isinstance(potential, dict):
        potential = Potential.from_dict(potential)
    if geometry == "interval" and potential.sin_coeffs:
        raise ValueError(
            "interval potentials must be cosine series (sine terms break "
            "exact quadrature on the half period)"
        )
    if potential.bandwidth >= truncation:
        raise ValueError("potential bandwidth must be small compared with truncation")

    M = truncation
    n_ext = ext_factor * M
    length = lengths[0]

    # quadrature grid exact for basis x V x basis products
    n_q = 4 * n_ext + 8 + 2 * potential.bandwidth
    if geometry == "torus":
        x = np.arange(n_q) * (length / n_q)
        basis, kappa = _trig_basis_torus(n_ext, length, x)
    else:
        x = (np.arange(n_q) + 0.5) * (length / n_q)
        basis, kappa = _trig_basis_interval(n_ext, length, x)
    v_vals = potential.values(x, length, geometry)
    if geometry == "torus" and np.min(v_vals) <= 0:
        raise ValueError(
            f"potential must be positive on the torus (min V = {np.min(v_vals):.6g})"
        )
    if geometry == "interval" and np.min(v_vals) < 0:
        raise ValueError(
            f"potential must be nonnegative on the interval (min V = {np.min(v_vals):.6g})"
        )

    w = length / n_q
    gram = (basis * v_vals) @ basis.T * w
    op = np.diag(kappa) + 0.5 * (gram + gram.T)
    lam_all, vecs = scipy.linalg.eigh(op)
    vecs = _canonicalize_eigenvectors(lam_all, vecs)
    lam = lam_all[:M].copy()
    psi = vecs[:, :M].T.copy()
    if lam[0] <= 0:
        raise ValueError(f"lowest eigenvalue must be positive (got {lam[0]:.6g})")

    return SpectralModel(
        dim=dim,
        lengths=lengths,
        truncation=M,
        geometry=geometry,
        potential=potential,
        lam=lam,
        psi=psi,
        b=_validated_noise(b, M),
        n_ext=n_ext,
    )


def operator_matrix(model: SpectralModel) -> np.ndarray:
    """The extended truncated matrix of -Laplace + V used at build time."""
    length = model.lengths[0]
    n_q = model.grid.size
    if model.geometry == "torus":
        _, kappa = _trig_basis_torus(model.n_ext, length, model.grid)
    else:
        _, kappa = _trig_basis_interval(model.n_ext, length, model.grid)
    gram = (model.basis_grid * model.potential_grid) @ model.basis_grid.T * (length / n_q)
    return np.diag(kappa) + 0.5 * (gram + gram.T)


# ---------------------------------------------------------------------------
# state-space operations


def actions(v: np.ndarray) -> np.ndarray:
    """Action variables I_k = |v_k|^2 / 2 (works on batched states)."""
    return 0.5 * (np.abs(v) ** 2)


def sobolev_weights(model: SpectralModel, s: float) -> np.ndarray:
    return np.abs(model.lam) ** s + 1.0


def sobolev_norm(model: SpectralModel, v: np.ndarray, s: float = 1.0) -> np.ndarray:
    """|v|_s = sqrt(sum_k (lambda_k^s + 1) |v_k|^2), batched over leading axes."""
    w = sobolev_weights(model, s)
    return np.sqrt(np.sum(w * np.abs(v) ** 2, axis=-1))


def action_norm(model: SpectralModel, I: np.ndarray, s: float = 1.0) -> np.ndarray:
    """|I|_{I,s} = sum_k (lambda_k^s + 1) |I_k|; equals |v|_s^2 / 2 for I = I(v)."""
    w = sobolev_weights(model, s)
    return np.sum(w * np.abs(I), axis=-1)


def rotate(v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Mode-wise rotation Phi_theta: v_k -> exp(i theta_k) v_k (an isometry)."""
    return v * np.exp(1j * np.asarray(theta))


def to_interaction(model: SpectralModel, v: np.ndarray, tau: float, eps: float) -> np.ndarray:
    """Interaction-frame coordinates a_k = exp(i lambda_k tau / eps) v_k."""
    return rotate(v, model.lam * (tau / eps))


def from_interaction(model: SpectralModel, a: np.ndarray, tau: float, eps: float) -> np.ndarray:
    """Inverse of :func:`to_interaction`."""
    return rotate(a, -model.lam * (tau / eps))


# ---------------------------------------------------------------------------
# serialization (bit-exact round trip through JSON's shortest-repr floats)


def model_to_dict(model: SpectralModel) -> dict:
    return {
        "format_version": _FORMAT_VERSION,
        "dim": model.dim,
        "lengths": list(model.lengths),
        "truncation": model.truncation,
        "geometry": model.geometry,
        "n_ext": model.n_ext,
        "lambda": model.lam.tolist(),
        "psi": model.psi.tolist(),
        "b": model.b.tolist(),
        "potential": model.potential.to_dict(),
    }


def model_from_dict(d: dict) -> SpectralModel:
    if d.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {d.get('format_version')!r}")
    return SpectralModel(
        dim=int(d["dim"]),
        lengths=tuple(float(L) for L in d["lengths"]),
        truncation=int(d["truncation"]),
        geometry=d["geometry"],
        potential=Potential.from_dict(d["potential"]),
        lam=np.asarray(d["lambda"], dtype=float),
        psi=np.asarray(d["psi"], dtype=float),
        b=np.asarray(d["b"], dtype=float),
        n_ext=int(d["n_ext"]),
    )


def save_model_json(model: SpectralModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model_json(path) -> SpectralModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
