"""Dynamics: noise stream addressing, collocation nonlinearity vs direct
quadrature, exponential Euler steppers vs analytic oracles, wave system
against per-mode matrix exponentials, trajectory round trips."""

from types import SimpleNamespace

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg

from resavg.spectral import Potential, actions, build_model, sobolev_norm
from resavg.dynamics import (
    BlowUpError,
    NOISE_BLOCK,
    NoisePath,
    NonlinearitySpec,
    eval_nonlinearity,
    load_trajectory_bin,
    load_trajectory_csv,
    nlw_actions,
    nlw_complexify,
    nlw_decomplexify,
    nlw_noise_amplitudes,
    save_trajectory_bin,
    save_trajectory_csv,
    simulate,
    simulate_nlw,
    step_effective,
    step_nlw,
    step_perturbed,
)


class ZeroNoise:
    """Duck-typed silent noise source for deterministic integrator checks."""

    master_seed = 0
    traj_index = 0

    def complex_increments(self, lo, hi, dtau):
        return np.zeros((hi - lo, self.M), dtype=complex)

    def real_increments(self, lo, hi, dtau):
        return np.zeros((hi - lo, self.M))

    def __init__(self, M):
        self.M = M


# ---------------------------------------------------------------------------
# noise paths


def test_noise_reproducible_and_counter_addressable():
    p1 = NoisePath(123, 7, 4)
    p2 = NoisePath(123, 7, 4)
    full = p1.complex_increments(0, 600, 0.01)
    window = p2.complex_increments(300, 310, 0.01)
    assert np.array_equal(full[300:310], window)
    # fresh object, blocks pulled out of order
    p3 = NoisePath(123, 7, 4)
    tail = p3.complex_increments(512, 600, 0.01)
    head = p3.complex_increments(0, 512, 0.01)
    assert np.array_equal(np.vstack([head, tail]), full)


def test_noise_streams_differ_across_trajectories_and_seeds():
    a = NoisePath(123, 0, 4).complex_increments(0, 64, 0.01)
    b = NoisePath(123, 1, 4).complex_increments(0, 64, 0.01)
    c = NoisePath(124, 0, 4).complex_increments(0, 64, 0.01)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_noise_variance_scaling():
    incs = NoisePath(5, 0, 8).complex_increments(0, 20000, 0.25)
    assert abs(np.var(incs.real) - 0.25) < 0.01
    assert abs(np.var(incs.imag) - 0.25) < 0.01
    re = NoisePath(5, 0, 8).real_increments(0, 20000, 0.25)
    assert abs(np.var(re) - 0.25) < 0.01
    # real increments are the real components of the complex stream
    assert np.array_equal(re, incs.real)


# ---------------------------------------------------------------------------
# nonlinearity evaluation


def test_eval_nonlinearity_against_direct_quadrature():
    model = build_model(truncation=4, potential=Potential(1.0, (0.3,)))
    spec = NonlinearitySpec(z=np.exp(-3j * np.pi / 4))
    rng = np.random.default_rng(2)
    v = rng.normal(size=4) + 1j * rng.normal(size=4)

    def u_at(x):
        phi = model.eigenfunction_values(np.atleast_1d(x))[:, 0]
        return v @ phi

    length = model.lengths[0]
    expected = np.empty(4, dtype=complex)
    for k in range(4):
        def integrand(x, k=k, part=None):
            u = u_at(x)
            vv = model.potential.values(np.atleast_1d(x), length, "torus")[0]
            w = vv * u - u + spec.z * (abs(u) ** 2) * u
            phi_k = model.eigenfunction_values(np.atleast_1d(x))[k, 0]
            return phi_k * w
        re, _ = scipy.integrate.quad(lambda x: integrand(x).real, 0, length, limit=200)
        im, _ = scipy.integrate.quad(lambda x: integrand(x).imag, 0, length, limit=200)
        expected[k] = complex(re, im)
    got = eval_nonlinearity(model, spec, v)
    assert np.max(np.abs(got - expected)) <= 1e-9


def test_eval_nonlinearity_single_mode_closed_form():
    # unit-length torus, constant V = c: phi_1 = 1, so
    # P(v) = (c - 1) v + z |v|^2 v exactly.
    c = 1.7
    model = build_model(truncation=1, lengths=(1.0,), potential=Potential(c))
    spec = NonlinearitySpec(z=-1.0 + 0.0j)
    v = np.array([0.8 - 0.35j])
    got = eval_nonlinearity(model, spec, v)
    expected = (c - 1.0) * v - (np.abs(v) ** 2) * v
    assert np.max(np.abs(got - expected)) <= 1e-12


def test_eval_nonlinearity_batched_matches_loop():
    model = build_model(truncation=6, potential=Potential(1.0, (0.3,)))
    spec = NonlinearitySpec()
    rng = np.random.default_rng(3)
    vs = rng.normal(size=(10, 6)) + 1j * rng.normal(size=(10, 6))
    batch = eval_nonlinearity(model, spec, vs)
    for i in range(10):
        assert np.max(np.abs(batch[i] - eval_nonlinearity(model, spec, vs[i]))) <= 1e-13


def test_custom_grid_dealiasing_bound():
    model = build_model(truncation=8)
    spec = NonlinearitySpec(grid_size=16)     # below 4 M = 32
    with pytest.raises(ValueError):
        eval_nonlinearity(model, spec, np.ones(8, dtype=complex))
    spec_ok = NonlinearitySpec(grid_size=64)
    ref = eval_nonlinearity(model, NonlinearitySpec(), np.ones(8, dtype=complex))
    got = eval_nonlinearity(model, spec_ok, np.ones(8, dtype=complex))
    assert np.max(np.abs(got - ref)) <= 1e-10


def test_nonlinearity_spec_validation():
    with pytest.raises(ValueError):
        NonlinearitySpec(z=1.0 + 0.0j)          # Re z > 0
    with pytest.raises(ValueError):
        NonlinearitySpec(z=-0.5 + 0.0j)         # |z| != 1
    with pytest.raises(ValueError):
        NonlinearitySpec(z=-0.6 + 0.8j)         # Im z > 0
    with pytest.raises(ValueError):
        NonlinearitySpec(kind="custom_pointwise")
    with pytest.raises(ValueError):
        NonlinearitySpec(kind="nope")
    with pytest.raises(ValueError):
        NonlinearitySpec(p=0)
    d = NonlinearitySpec(z=np.exp(-1j * np.pi / 3 - 1j * np.pi / 2)).to_dict()
    again = NonlinearitySpec.from_dict(d)
    assert abs(again.z - np.exp(-1j * np.pi / 3 - 1j * np.pi / 2)) <= 1e-15


# ---------------------------------------------------------------------------
# steppers


def test_perturbed_linear_step_matches_ou_map():
    # custom nonlinearity that vanishes: P(v) = V u with V = c, so the
    # interaction-frame step is the plain OU map a -> e^{-lam dt}(a + c a dt).
    c = 1.3
    model = build_model(truncation=3, lengths=(1.0,), potential=Potential(c))
    spec = NonlinearitySpec(kind="custom_pointwise", func=lambda u: np.zeros_like(u))
    rng = np.random.default_rng(0)
    a = rng.normal(size=3) + 1j * rng.normal(size=3)
    dW = (rng.normal(size=3) + 1j * rng.normal(size=3)) * np.sqrt(0.01)
    tau, eps, dtau = 0.37, 0.1, 0.01
    got = step_perturbed(model, spec, a, tau, eps, dtau, dW)
    phase = np.exp(1j * model.lam * tau / eps)
    noise_mat = model.psi[:, :3] * model.b
    expected = np.exp(-model.lam * dtau) * (a + c * a * dtau) + phase * (noise_mat @ dW)
    assert np.max(np.abs(got - expected)) <= 1e-12


def test_effective_step_strong_order_one_against_exact_ou():
    """Pathwise error at tau = 1 vs exact OU transition sampling with shared
    increments halves when dtau halves (additive noise, strong order 1)."""
    lam = np.array([1.0, 2.5])
    sigma = np.array([0.8, 0.5])
    eff = SimpleNamespace(d=lam, B=np.diag(sigma), drift=lambda a: np.zeros_like(a))
    delta = 1.0 / 1024                     # finest resolution
    levels = [32, 64, 128, 256]            # coarse steps per unit time
    n_paths = 400
    rng = np.random.default_rng(42)

    c1 = (1.0 - np.exp(-lam * delta)) / (lam * delta)
    var_conv = (1.0 - np.exp(-2.0 * lam * delta)) / (2.0 * lam)
    c2 = np.sqrt(np.maximum(var_conv - c1 ** 2 * delta, 0.0))

    errors = {L: [] for L in levels}
    for _ in range(n_paths):
        n_fine = int(round(1.0 / delta))
        dW = (rng.normal(size=(n_fine, 2)) + 1j * rng.normal(size=(n_fine, 2))) * np.sqrt(delta)
        z = (rng.normal(size=(n_fine, 2)) + 1j * rng.normal(size=(n_fine, 2)))
        a_exact = np.array([1.0 + 0.5j, -0.3 + 0.2j])
        for i in range(n_fine):
            conv = c1 * (sigma * dW[i]) + c2 * (sigma * z[i])
            a_exact = np.exp(-lam * delta) * a_exact + conv
        for L in levels:
            per = n_fine // L
            a = np.array([1.0 + 0.5j, -0.3 + 0.2j])
            for i in range(L):
                dw = dW[i * per : (i + 1) * per].sum(axis=0)
                a = step_effective(eff, a, 1.0 / L, dw)
            errors[L].append(np.linalg.norm(a - a_exact))
    rms = {L: np.sqrt(np.mean(np.square(errors[L]))) for L in levels}
    rates = [np.log2(rms[levels[i]] / rms[levels[i + 1]]) for i in range(len(levels) - 1)]
    assert all(0.7 <= r <= 1.3 for r in rates), (rms, rates)


def test_simulate_grid_and_validation():
    model = build_model(truncation=3)
    spec = NonlinearitySpec()
    noise = NoisePath(1, 0, 3)
    with pytest.raises(ValueError):
        simulate(model, np.zeros(3), 1.0, 0.03, 0.1, noise, eps=0.5, spec=spec)
    with pytest.raises(ValueError):
        simulate(model, np.zeros(3), 1.0, 0.01, 0.1, noise, eps=1.5, spec=spec)
    with pytest.raises(ValueError):
        simulate(model, np.zeros(3), 1.0, 0.01, 0.1, noise)
    traj = simulate(model, np.zeros(3), 1.0, 0.01, 0.1, noise, eps=0.5, spec=spec)
    assert traj.taus.shape == (11,)
    assert traj.states.shape == (11, 3)
    assert traj.frame == "interaction"


def test_simulate_deterministic_rerun():
    model = build_model(truncation=4)
    spec = NonlinearitySpec()
    v0 = 0.5 * np.ones(4, dtype=complex)
    t1 = simulate(model, v0, 2.0, 0.01, 0.1, NoisePath(99, 3, 4), eps=0.2, spec=spec)
    t2 = simulate(model, v0, 2.0, 0.01, 0.1, NoisePath(99, 3, 4), eps=0.2, spec=spec)
    assert np.array_equal(t1.states, t2.states)


def test_blow_up_guard_carries_tau():
    model = build_model(truncation=2, lengths=(1.0,), potential=Potential(1.0))
    eff = SimpleNamespace(
        d=np.zeros(2),
        B=np.zeros((2, 2)),
        drift=lambda a: 10.0 * (np.abs(a) ** 2) * a,
    )
    with pytest.raises(BlowUpError) as exc:
        simulate(model, np.array([30.0 + 0j, 0j]), 5.0, 0.01, 0.1, ZeroNoise(2), eff=eff)
    assert 0 < exc.value.tau <= 5.0
    assert exc.value.norm > 1e6 or np.isnan(exc.value.norm)


# ---------------------------------------------------------------------------
# wave system


def test_nlw_complexify_round_trip_and_actions():
    model = build_model(truncation=5, lengths=(np.pi,), geometry="interval",
                        potential=Potential(0.0))
    rng = np.random.default_rng(8)
    u = rng.normal(size=5)
    u_t = rng.normal(size=5)
    xi = nlw_complexify(u, u_t, model)
    u2, u_t2 = nlw_decomplexify(xi, model)
    assert np.max(np.abs(u - u2)) <= 1e-14
    assert np.max(np.abs(u_t - u_t2)) <= 1e-14
    expected = 0.5 * (u ** 2 + u_t ** 2 / model.lam)
    assert np.max(np.abs(nlw_actions(xi) - expected)) <= 1e-14


def test_nlw_linear_matches_matrix_exponential():
    """f = 0, no noise: per mode, (Re xi, Im xi) follows the 2x2 system
    [[0, -w], [w, -1]] with w = lambda^{1/2}/gamma (oracle: expm)."""
    model = build_model(truncation=3, lengths=(np.pi,), geometry="interval",
                        potential=Potential(0.0))
    gamma, T = 0.5, 2.0
    xi0 = np.array([1.0 + 0.2j, -0.4 + 0.7j, 0.3 - 0.3j])
    errs = []
    for dtau in (0.01, 0.005, 0.0025):
        traj = simulate_nlw(model, None, xi0, gamma, T, dtau, 0.5, ZeroNoise(3))
        xi_T = traj.states[-1]
        err = 0.0
        for k in range(3):
            w = np.sqrt(model.lam[k]) / gamma
            A = np.array([[0.0, -w], [w, -1.0]])
            xy = scipy.linalg.expm(T * A) @ np.array([xi0[k].real, xi0[k].imag])
            err = max(err, abs(xi_T[k] - complex(xy[0], xy[1])))
        errs.append(err)
    assert errs[0] < 0.02
    # first-order convergence: halving dtau roughly halves the error
    assert errs[1] <= 0.65 * errs[0]
    assert errs[2] <= 0.65 * errs[1]


def test_nlw_undamped_rotation_conserves_mode_energy():
    model = build_model(truncation=4, lengths=(np.pi,), geometry="interval",
                        potential=Potential(0.0))
    xi0 = np.array([1.0 + 0.2j, -0.4 + 0.7j, 0.3 - 0.3j, 0.1 + 0.9j])
    traj = simulate_nlw(model, None, xi0, 0.1, 3.0, 0.01, 0.5, ZeroNoise(4),
                        include_damping=False)
    mags = np.abs(traj.states)
    assert np.max(np.abs(mags - mags[0])) <= 1e-12


def test_nlw_noise_amplitudes_scaling():
    model = build_model(truncation=4, lengths=(np.pi,), geometry="interval",
                        potential=Potential(0.0), b=[0.5, 0.4, 0.3, 0.2])
    bt = nlw_noise_amplitudes(model)
    assert np.allclose(bt, model.b / np.sqrt(model.lam), atol=0)


# ---------------------------------------------------------------------------
# trajectory round trips


def _small_trajectory():
    model = build_model(truncation=3)
    spec = NonlinearitySpec()
    return simulate(model, 0.3 * np.ones(3, dtype=complex), 0.5, 0.01, 0.1,
                    NoisePath(7, 1, 3), eps=0.5, spec=spec)


def test_trajectory_csv_round_trip(tmp_path):
    traj = _small_trajectory()
    path = tmp_path / "traj.csv"
    save_trajectory_csv(traj, path, traj_id=4)
    again = load_trajectory_csv(path)
    assert np.array_equal(traj.taus, again.taus)
    assert np.array_equal(traj.states, again.states)


def test_trajectory_bin_round_trip(tmp_path):
    traj = _small_trajectory()
    path = tmp_path / "traj.bin"
    save_trajectory_bin(traj, path)
    again = load_trajectory_bin(path)
    assert np.array_equal(traj.taus, again.taus)
    assert np.array_equal(traj.states, again.states)


def test_trajectory_bin_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_trajectory_bin(path)
