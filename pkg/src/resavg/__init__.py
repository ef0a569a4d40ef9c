"""Spectral simulation and averaging toolkit for weakly perturbed dispersive
systems: Galerkin models, interaction-frame integrators, resonant effective
equations, ensemble runners and transport-distance diagnostics."""

from .spectral import (
    Potential,
    SpectralModel,
    actions,
    action_norm,
    build_model,
    from_interaction,
    load_model_json,
    rotate,
    save_model_json,
    sobolev_norm,
    to_interaction,
)
from .dynamics import (
    BlowUpError,
    NonlinearitySpec,
    Trajectory,
    simulate,
    simulate_nlw,
)
from .effective import (
    EffectiveModel,
    build_effective_cgl,
    build_effective_nlw,
    effective_diffusion,
    load_effective_json,
    nlw_deviation_envelope,
    nlw_diffusion_average,
    resonance_clusters,
    resonant_drift_monomial,
    resonant_drift_quadrature,
    save_effective_json,
)
from .ensemble import EnsembleResult, run_ensemble, run_ensemble_nlw
from .metrics import (
    ConvergenceResult,
    MixingResult,
    WindowResult,
    bl_upper_distance,
    mixing_curve,
    sliced_distance,
    uniform_convergence_experiment,
    window_restart_check,
)

__version__ = "0.1.0"
