"""Effective-equation construction against closed forms and quadrature.

The monomial resonant drift is validated two independent ways: a single-mode
model where the average is computable by hand, and Cesaro quadrature of the
rotated drift.  On a constant-potential torus model all frequency gaps are
integers, so trapezoid quadrature over a whole number of common periods is
exact and the two routes must agree to roundoff.  On a generic potential the
split pairs leave near-resonances; there the disagreement is required to sit
inside the explicit Cesaro bound sum(2 |c| / (gap T)) computed from the
model itself.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from resavg.dynamics import NoisePath, NonlinearitySpec, simulate
from resavg.effective import (
    EffectiveModel,
    adaptive_drift_average,
    average_rotated_drift,
    build_effective_cgl,
    build_effective_nlw,
    cubic_tensor,
    drift_gauge_residual,
    effective_diffusion,
    effective_from_dict,
    effective_to_dict,
    nlw_deviation_envelope,
    nlw_diffusion_average,
    resonance_clusters,
    resonant_drift_monomial,
    resonant_drift_quadrature,
)
from resavg.spectral import Potential, build_model


def const_model(M=5, const=1.0, **kw):
    return build_model(truncation=M, potential=Potential(const=const), **kw)


def generic_model(M=6):
    pot = Potential(const=1.0, cos_coeffs=(0.3,), sin_coeffs=(0.1,))
    return build_model(truncation=M, potential=pot)


def test_resonance_clusters_constant_potential():
    model = const_model(M=8)
    clusters = resonance_clusters(model.lam)
    assert [c.tolist() for c in clusters] == [[0], [1, 2], [3, 4], [5, 6], [7]]


def test_resonance_clusters_width_anchored_at_start():
    lam = np.array([1.0, 1.0 + 5e-10, 1.0 + 9e-10, 2.0])
    clusters = resonance_clusters(lam, rtol=1e-9)
    assert [c.tolist() for c in clusters] == [[0, 1, 2], [3]]
    fine = resonance_clusters(lam, rtol=1e-12)
    assert len(fine) == 4


def test_effective_diffusion_hand_rotation():
    # two modes mixing a single noise direction at 45 degrees
    c = s = np.sqrt(0.5)
    psi = np.array([[c, -s, 0.0, 0.0], [s, c, 0.0, 0.0]])
    duck = SimpleNamespace(truncation=2, lam=np.array([1.0, 2.0]), psi=psi,
                           b=np.array([1.0, 0.0]))
    A, B = effective_diffusion(duck)
    assert np.allclose(A, np.diag([0.5, 0.5]), atol=1e-15)
    assert np.allclose(B, np.diag([np.sqrt(0.5), np.sqrt(0.5)]), atol=1e-15)

    # degenerate pair: the full rank-one block survives and sqrt is itself
    duck_deg = SimpleNamespace(truncation=2, lam=np.array([2.0, 2.0]), psi=psi,
                               b=np.array([1.0, 0.0]))
    A2, B2 = effective_diffusion(duck_deg)
    assert np.allclose(A2, 0.5 * np.ones((2, 2)), atol=1e-15)
    assert np.allclose(B2, A2, atol=1e-14)
    assert np.allclose(B2 @ B2.T, A2, atol=1e-14)


def test_effective_diffusion_model_invariants():
    model = generic_model()
    A, B = effective_diffusion(model)
    assert np.allclose(A, A.T, atol=1e-14)
    assert np.allclose(B @ B.T, A, atol=1e-10)
    M = model.truncation
    noise_mat = model.psi[:, :M] * model.b
    gram = noise_mat @ noise_mat.T
    assert np.allclose(np.diag(A), np.diag(gram), atol=1e-14)
    # single cluster keeps the whole gram matrix
    A_full, _ = effective_diffusion(model, clusters=[np.arange(M)])
    assert np.allclose(A_full, gram, atol=1e-14)


def test_single_mode_closed_form_drift():
    # one retained mode on a unit torus: phi = 1, so
    # R(a) = (V + lin) a + z |a|^2 a exactly
    z = np.exp(-3j * np.pi / 4)
    spec = NonlinearitySpec(z=z, lin_coeff=-1.0)
    model = build_model(truncation=1, lengths=(1.0,), potential=Potential(const=2.0))
    eff = build_effective_cgl(model, spec)
    rng = np.random.default_rng(7)
    a = rng.normal(size=(12, 1)) + 1j * rng.normal(size=(12, 1))
    expected = (2.0 - 1.0) * a + z * np.abs(a) ** 2 * a
    assert np.max(np.abs(eff.drift(a) - expected)) < 1e-12


def test_cubic_tensor_symmetry_and_values():
    model = const_model(M=3, lengths=(1.0,))
    C = cubic_tensor(model)
    assert np.allclose(C, np.transpose(C, (1, 0, 2, 3)), atol=1e-12)
    assert np.allclose(C, np.transpose(C, (0, 2, 1, 3)), atol=1e-12)
    # on the unit torus phi_0 = 1, so C[0, 0, 0, 0] = 1 and
    # C[0, 1, 1, 0] = int phi_1^2 = 1
    assert abs(C[0, 0, 0, 0] - 1.0) < 1e-12
    assert abs(C[0, 1, 1, 0] - 1.0) < 1e-12
    # int cos^4 = 3/8 of (sqrt 2 cos)^4 -> C[1,1,1,1] = 2^2 * 3/8 = 1.5
    assert abs(C[1, 1, 1, 1] - 1.5) < 1e-12


def test_quadrature_matches_monomial_exactly_on_integer_gaps():
    # constant potential: lam = c + j^2, all resonance gaps are integers, so
    # averaging over T = 159 full periods with unaliased trapezoid nodes is
    # exact and the quadrature route must reproduce the monomial drift
    spec = NonlinearitySpec(z=np.exp(-3j * np.pi / 4), lin_coeff=-1.0)
    model = const_model(M=5)
    eff = build_effective_cgl(model, spec)
    assert eff.diagnostics["n_near_resonances"] == 0
    T = 2 * np.pi * 159
    rng = np.random.default_rng(3)
    for _ in range(3):
        a = rng.normal(size=5) + 1j * rng.normal(size=5)
        quad, residual = resonant_drift_quadrature(model, spec, a, T, 65536)
        mono = eff.drift(a)
        scale = max(np.max(np.abs(mono)), 1e-12)
        assert np.max(np.abs(quad - mono)) / scale < 1e-9
        assert residual / scale < 1e-9


def test_quadrature_matches_monomial_within_cesaro_bound_generic():
    # generic potential: split pairs produce small but nonzero gaps; the
    # quadrature value may differ from the monomial drift only by the
    # explicit Cesaro tail bound sum 2 |c| / (gap T)
    spec = NonlinearitySpec(z=np.exp(-3j * np.pi / 4), lin_coeff=-1.0)
    model = generic_model(M=6)
    eff = build_effective_cgl(model, spec)
    assert eff.diagnostics["n_near_resonances"] > 0
    M, lam = model.truncation, model.lam
    phi = model.phi_grid
    vgram = (phi * model.potential_grid) @ phi.T * model.quad_weight
    C = cubic_tensor(model)
    gap_lin = np.abs(lam[:, None] - lam[None, :])
    gap_cub = np.abs(lam[:, None, None, None] + lam[None, None, :, None]
                     - lam[None, :, None, None] - lam[None, None, None, :])

    T = 4000.0
    rng = np.random.default_rng(11)
    a = rng.normal(size=M) + 1j * rng.normal(size=M)
    quad, _ = resonant_drift_quadrature(model, spec, a, T, 2 ** 18)
    mono = eff.drift(a)

    res_lin = gap_lin <= eff.rtol * np.maximum(np.abs(lam)[:, None], 1.0)
    amp = np.abs(a)
    bound_lin = np.where(res_lin, 0.0, np.abs(vgram) * amp[None, :]
                         * 2.0 / np.maximum(gap_lin, 1e-30) / T).sum(axis=1)
    scale4 = np.maximum.reduce([
        np.broadcast_to(x, gap_cub.shape)
        for x in (lam[:, None, None, None], lam[None, :, None, None],
                  lam[None, None, :, None], lam[None, None, None, :])
    ])
    res_cub = gap_cub <= eff.rtol * np.maximum(scale4, 1.0)
    amp3 = amp[None, :, None, None] * amp[None, None, :, None] * amp[None, None, None, :]
    bound_cub = np.where(res_cub, 0.0, np.abs(C) * amp3
                         * 2.0 / np.maximum(gap_cub, 1e-30) / T).sum(axis=(1, 2, 3))
    bound = bound_lin + bound_cub
    err = np.abs(quad - mono)
    assert np.all(err <= 1.5 * bound + 1e-8)
    # the bound is actually informative at this horizon
    assert np.max(err) < 0.1 * np.max(np.abs(mono))


def test_pure_phase_average_obeys_kernel_bounds():
    # P swaps the two components, so the rotated average of component k is
    # the windowed average of exp(i (f_k - f_j) t): bounded by 2 / (gap T)
    # for the flat kernel and (4 / (gap T))^2 for the triangular one
    freqs = np.array([1.0, 3.0])
    gap = 2.0
    a = np.array([1.0 + 0.0j, 1.0 + 0.0j])
    P = lambda v: v[..., ::-1]
    T = 100.0
    ces, _ = average_rotated_drift(P, freqs, a, T, 2 ** 17, kernel="cesaro")
    fej, _ = average_rotated_drift(P, freqs, a, T, 2 ** 17, kernel="fejer")
    assert np.max(np.abs(ces)) <= 2.0 / (gap * T) + 1e-10
    assert np.max(np.abs(fej)) <= (4.0 / (gap * T)) ** 2 + 1e-10
    g = freqs[0] - freqs[1]
    exact = (np.exp(1j * g * T) - 1.0) / (1j * g * T)
    assert abs(ces[0] - exact) < 1e-8
    # tent window = sum of two flat half-windows, so its transform squares
    exact_fej = np.exp(1j * g * T / 2) * (np.sin(g * T / 4) / (g * T / 4)) ** 2
    assert abs(fej[0] - exact_fej) < 1e-7


def test_average_residual_bounded_by_horizon():
    freqs = np.array([0.0, 1.0])
    a = np.array([1.0 + 0.0j, 0.5 + 0.0j])
    P = lambda v: v[..., ::-1]
    for T in (50.0, 100.0, 200.0):
        _, residual = average_rotated_drift(P, freqs, a, T, 16384)
        assert residual <= 6.0 / T + 1e-10


def test_adaptive_average_resonant_stops_immediately():
    freqs = np.array([1.0, 2.0])
    a = np.array([0.3 + 0.4j, -1.0 + 0.2j])
    value, residual, T = adaptive_drift_average(lambda v: v, freqs, a, tol=1e-10)
    assert T == 100.0
    assert residual < 1e-12
    assert np.allclose(value, a, atol=1e-12)


def test_adaptive_average_nonresonant_converges_to_zero():
    freqs = np.array([1.0, 2.0])
    gap = 1.0
    a = np.array([1.0 + 0.0j, 1.0 + 0.0j])
    P = lambda v: v[..., ::-1]
    value, residual, T = adaptive_drift_average(P, freqs, a, tol=1e-3, T0=100.0)
    assert residual < 1e-3
    assert T <= 1.0e4
    assert np.max(np.abs(value)) <= 2.0 / (gap * 100.0)


def test_batched_average_matches_loop():
    spec = NonlinearitySpec(z=np.exp(-3j * np.pi / 4), lin_coeff=-1.0)
    model = const_model(M=4)
    rng = np.random.default_rng(5)
    batch = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
    from resavg.dynamics import eval_nonlinearity
    P = lambda v: eval_nonlinearity(model, spec, v)
    got, _ = average_rotated_drift(P, model.lam, batch, 200.0, 4096)
    for i in range(3):
        single, _ = average_rotated_drift(P, model.lam, batch[i], 200.0, 4096)
        assert np.allclose(got[i], single, atol=1e-12)


def test_drift_gauge_invariance():
    spec = NonlinearitySpec(z=np.exp(-3j * np.pi / 4), lin_coeff=-1.0)
    model = generic_model(M=6)
    eff = build_effective_cgl(model, spec)
    rng = np.random.default_rng(9)
    a = rng.normal(size=6) + 1j * rng.normal(size=6)
    ts = rng.uniform(0.0, 10.0, size=8)
    assert drift_gauge_residual(eff, a, ts) < 1e-10


def test_near_resonance_diagnostics_recorded():
    spec = NonlinearitySpec(z=-1.0 + 0.0j, lin_coeff=-1.0)
    model = generic_model(M=6)
    _, _, diag = resonant_drift_monomial(model, spec)
    assert diag["n_near_resonances"] > 0
    assert diag["near_resonances"]
    worst = diag["near_resonances"][0]
    assert 0.0 < worst["gap"] < 0.5
    assert diag["min_nonresonant_gap"] > 0.0


def test_effective_serialization_round_trip():
    spec = NonlinearitySpec(z=np.exp(-3j * np.pi / 4), lin_coeff=-1.0)
    model = generic_model(M=6)
    eff = build_effective_cgl(model, spec)
    clone = effective_from_dict(effective_to_dict(eff))
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 6)) + 1j * rng.normal(size=(5, 6))
    assert np.array_equal(eff.drift(a), clone.drift(a))
    assert np.array_equal(eff.B, clone.B)
    assert np.array_equal(eff.d, clone.d)

    bad = effective_to_dict(eff)
    bad["format_version"] = 99
    with pytest.raises(ValueError):
        effective_from_dict(bad)


def test_nlw_effective_serializes_without_forcing_only():
    model = const_model(M=4)
    eff = build_effective_nlw(model)
    clone = effective_from_dict(effective_to_dict(eff))
    assert np.array_equal(eff.B, clone.B)
    assert np.allclose(eff.d, 0.5)
    eff_f = build_effective_nlw(model, f=lambda u: -u ** 3)
    with pytest.raises(ValueError):
        effective_to_dict(eff_f)


def test_nlw_diffusion_average_closed_form():
    # each mode's averaged block deviates from (btilde^2 / 2) I by exactly
    # btilde^2 |sin(w T)| / (sqrt 2 w T) in Frobenius norm, w = sqrt(lam)/gamma
    model = const_model(M=4)
    gamma, T = 0.1, 5.0
    blocks, deviations, max_dev = nlw_diffusion_average(model, gamma, T, nsteps=1_000_000)
    from resavg.dynamics import nlw_noise_amplitudes
    btilde = nlw_noise_amplitudes(model)
    w = np.sqrt(model.lam) / gamma
    expected = btilde ** 2 * np.abs(np.sin(w * T)) / (np.sqrt(2.0) * w * T)
    assert np.allclose(deviations, expected, rtol=1e-5, atol=1e-9)
    assert abs(max_dev - np.max(expected)) < 1e-7
    # block structure: symmetric, trace = btilde^2
    assert np.allclose(blocks[:, 0, 1], blocks[:, 1, 0], atol=1e-12)
    assert np.allclose(blocks[:, 0, 0] + blocks[:, 1, 1], btilde ** 2, rtol=1e-9)


def test_nlw_diffusion_average_decays_with_horizon():
    model = const_model(M=4)
    _, _, d1 = nlw_diffusion_average(model, 0.05, 4.0)
    _, _, d2 = nlw_diffusion_average(model, 0.05, 64.0)
    assert d2 < d1 / 4.0


def test_nlw_deviation_envelope_halves_per_doubling():
    # the band sup is certified at per-mode phase peaks, so it tracks the
    # 1 / T envelope: the envelope at (1 + band/2) T brackets the sup and the
    # doubling ratio stays near 1/2 regardless of where T lands in the phase
    from resavg.dynamics import nlw_noise_amplitudes
    pot = Potential(const=1.0, cos_coeffs=(0.3,))
    model = build_model(truncation=8, potential=pot)
    btilde = nlw_noise_amplitudes(model)
    for gamma in (0.1, 0.01):
        w = np.sqrt(model.lam) / gamma
        prev = None
        for T in (6.0, 12.0, 24.0):
            dev, nodes = nlw_deviation_envelope(model, gamma, T)
            assert np.all((nodes >= T) & (nodes <= 1.25 * T))
            env_lo = np.max(btilde ** 2 / (np.sqrt(2.0) * w * 1.25 * T))
            env_hi = np.max(btilde ** 2 / (np.sqrt(2.0) * w * T))
            assert env_lo * 0.9 <= dev <= env_hi * 1.1
            if prev is not None:
                assert dev / prev < 0.7
            prev = dev


def test_effective_model_drives_simulation():
    spec = NonlinearitySpec(z=np.exp(-3j * np.pi / 4), lin_coeff=-1.0)
    model = const_model(M=4)
    eff = build_effective_cgl(model, spec)
    v0 = np.full(4, 0.3 + 0.2j)
    traj = simulate(model, v0, T=1.0, dtau=0.01, grid_step=0.5,
                    noise=NoisePath(123, 0, 4), eff=eff)
    assert traj.states.shape == (3, 4)
    assert np.all(np.isfinite(traj.states.view(float)))
