"""Command line front end.

Subcommands build models and effective equations, run ensembles, and drive
the comparison experiments, all from one declarative config file (TOML or
JSON) with strict schema checking: an unrecognized section or key is a
config error, not a silent default.

Exit codes: 0 success, 2 config error, 3 blow-up, 4 a checked convergence
property failed (outputs are still written so the failure can be inspected).

Every command writes a manifest recording the tool version, the exact
command line, the canonical config digest, the master seed, and the sha256
of each output file.  Output filenames carry the config digest, so runs with
different configs never overwrite each other.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

try:
    import tomllib
except ImportError:
    import tomli as tomllib

from . import __version__
from .dynamics import BlowUpError, NonlinearitySpec
from .effective import (
    build_effective_cgl,
    build_effective_nlw,
    nlw_deviation_envelope,
    save_effective_json,
)
from .ensemble import (
    digest_path,
    hash_config,
    run_ensemble,
    run_ensemble_nlw,
    save_actions_csv,
    save_actions_jsonl,
)
from .metrics import (
    mixing_curve,
    save_distance_surface_csv,
    save_mixing_csv,
    save_nlw_average_csv,
    save_sup_decay_csv,
    uniform_convergence_experiment,
)
from .spectral import Potential, build_model, save_model_json


class ConfigError(Exception):
    pass


class PropertyFailure(Exception):
    pass


_ALLOWED = {
    "model": {
        "dim", "truncation", "geometry", "length", "potential_const",
        "potential_cos", "potential_sin", "noise_decay", "noise", "ext_factor",
    },
    "nonlinearity": {"z", "lin_coeff", "p"},
    "run": {
        "system", "eps", "n_traj", "T", "dtau", "grid_step", "seed",
        "init_kind", "init_scale", "init_value", "gamma", "workers", "chunk",
        "max_blowup_frac", "window_starts", "window_len", "T0", "doublings",
        "nlw_forcing", "nlw_coeff",
    },
    "metrics": {"s", "cap", "max_n", "n_boot", "n_pool", "n_dirs",
                "mixing_initial_scales"},
}


def load_config(path) -> dict:
    try:
        if str(path).endswith(".json"):
            with open(path) as fh:
                cfg = json.load(fh)
        else:
            with open(path, "rb") as fh:
                cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a table")
    for section, body in cfg.items():
        if section not in _ALLOWED:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        extra = set(body) - _ALLOWED[section]
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    for required in ("model", "run"):
        if required not in cfg:
            raise ConfigError(f"missing required section [{required}]")
    if "seed" not in cfg["run"]:
        raise ConfigError("run.seed is required; experiments must be seeded")
    return cfg


def model_from_config(cfg) -> "object":
    m = cfg["model"]
    pot = Potential(
        const=float(m.get("potential_const", 1.0)),
        cos_coeffs=tuple(m.get("potential_cos", ())),
        sin_coeffs=tuple(m.get("potential_sin", ())),
    )
    b = m.get("noise")
    if b is None:
        b = float(m.get("noise_decay", 0.5))
    try:
        return build_model(
            dim=int(m.get("dim", 1)),
            lengths=(float(m.get("length", 2.0 * np.pi)),),
            truncation=int(m.get("truncation", 8)),
            potential=pot,
            b=b,
            geometry=m.get("geometry", "torus"),
            ext_factor=int(m.get("ext_factor", 2)),
        )
    except (ValueError, NotImplementedError) as exc:
        raise ConfigError(f"model: {exc}")


def spec_from_config(cfg) -> NonlinearitySpec:
    if "nonlinearity" not in cfg:
        raise ConfigError("missing required section [nonlinearity]")
    nl = cfg["nonlinearity"]
    z = nl.get("z", [-1.0, 0.0])
    try:
        return NonlinearitySpec(
            z=complex(float(z[0]), float(z[1])),
            lin_coeff=float(nl.get("lin_coeff", -1.0)),
            p=int(nl.get("p", 1)),
        )
    except (ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"nonlinearity: {exc}")


def resolve_dtau(cfg, model) -> float:
    run = cfg["run"]
    raw = run.get("dtau", "auto")
    if raw == "auto":
        cap = min(0.01, 0.1 / float(np.max(model.lam)))
        grid = run.get("grid_step")
        if grid is None:
            return cap
        # snap onto the output grid: grid_step must be a multiple of dtau
        return float(grid) / int(np.ceil(float(grid) / cap))
    dtau = float(raw)
    if dtau <= 0:
        raise ConfigError("run.dtau must be positive")
    return dtau


def init_from_config(cfg):
    run = cfg["run"]
    kind = run.get("init_kind", "gaussian")
    if kind == "gaussian":
        return {"kind": "gaussian", "scale": run.get("init_scale", 1.0)}
    if kind == "fixed":
        value = run.get("init_value")
        if value is None:
            raise ConfigError("init_kind = 'fixed' needs run.init_value")
        return {"kind": "fixed", "value": [complex(v[0], v[1]) for v in value]}
    raise ConfigError(f"unknown init_kind {kind!r}")


def nlw_forcing_from_config(cfg):
    run = cfg["run"]
    kind = run.get("nlw_forcing", "none")
    if kind == "none":
        return None
    if kind == "cubic":
        coeff = float(run.get("nlw_coeff", -1.0))
        return lambda u: coeff * u ** 3
    raise ConfigError(f"unknown nlw_forcing {kind!r}")


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, digest, seed, outputs, argv) -> str:
    manifest = {
        "tool": "resavg",
        "version": __version__,
        "command": list(argv),
        "config_digest": digest,
        "master_seed": seed,
        "outputs": {os.path.basename(p): _sha256_file(p) for p in outputs},
        "created": datetime.now(timezone.utc).isoformat(),
    }
    path = digest_path(out_dir, "manifest", digest, ".json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _metrics(cfg) -> dict:
    return cfg.get("metrics", {})


def cmd_model_build(cfg, digest, out_dir, workers, fmt, argv):
    model = model_from_config(cfg)
    path = digest_path(out_dir, "model", digest, ".json")
    save_model_json(model, path)
    print(f"[resavg] model M={model.truncation} lam=[{model.lam[0]:.6g}.."
          f"{model.lam[-1]:.6g}] -> {path}")
    return [path], cfg["run"]["seed"]


def cmd_effective_build(cfg, digest, out_dir, workers, fmt, argv):
    model = model_from_config(cfg)
    system = cfg["run"].get("system", "cgl")
    if system == "nlw":
        eff = build_effective_nlw(model)
    else:
        eff = build_effective_cgl(model, spec_from_config(cfg))
    path = digest_path(out_dir, "effective", digest, ".json")
    save_effective_json(eff, path)
    ncub = 0 if eff.cubic_k is None else int(eff.cubic_k.size)
    print(f"[resavg] effective kind={eff.kind} cubic_terms={ncub} "
          f"near_resonances={eff.diagnostics.get('n_near_resonances', 0)} -> {path}")
    return [path], cfg["run"]["seed"]


def _run_common(cfg, model):
    run = cfg["run"]
    dtau = resolve_dtau(cfg, model)
    try:
        T = float(run["T"])
        grid_step = float(run["grid_step"])
        n_traj = int(run["n_traj"])
    except KeyError as exc:
        raise ConfigError(f"run.{exc.args[0]} is required")
    return run, dtau, T, grid_step, n_traj


def cmd_run(cfg, digest, out_dir, workers, fmt, argv):
    model = model_from_config(cfg)
    run, dtau, T, grid_step, n_traj = _run_common(cfg, model)
    seed = int(run["seed"])
    init = init_from_config(cfg)
    system = run.get("system", "cgl")
    common = dict(n_traj=n_traj, T=T, dtau=dtau, grid_step=grid_step,
                  master_seed=seed, init=init, workers=workers,
                  chunk=int(run.get("chunk", 256)),
                  max_blowup_frac=float(run.get("max_blowup_frac", 1e-3)),
                  config_digest=digest)
    if system == "cgl":
        eps = run.get("eps")
        if not isinstance(eps, (int, float)):
            raise ConfigError("run.eps must be a scalar for 'run'")
        result = run_ensemble(model, eps=float(eps), spec=spec_from_config(cfg),
                              **common)
    elif system == "effective":
        eff = build_effective_cgl(model, spec_from_config(cfg))
        result = run_ensemble(model, eff=eff, **common)
    elif system == "nlw":
        gamma = float(run.get("gamma", 0.1))
        result = run_ensemble_nlw(model, nlw_forcing_from_config(cfg), gamma,
                                  **common)
    else:
        raise ConfigError(f"unknown system {system!r}")
    outputs = []
    if fmt in ("json", "both"):
        path = digest_path(out_dir, "actions", digest, ".jsonl")
        save_actions_jsonl(result, path)
        outputs.append(path)
    if fmt in ("csv", "both"):
        path = digest_path(out_dir, "actions", digest, ".csv")
        save_actions_csv(result, path)
        outputs.append(path)
    print(f"[resavg] {system} ensemble: n={result.n}/{result.n_requested} "
          f"grid={result.taus.size} dtau={dtau:.6g}"
          + (f" dropped={len(result.dropped)}" if result.dropped else ""))
    return outputs, seed


def cmd_compare(cfg, digest, out_dir, workers, fmt, argv):
    model = model_from_config(cfg)
    spec = spec_from_config(cfg)
    eff = build_effective_cgl(model, spec)
    run, dtau, T, grid_step, n_traj = _run_common(cfg, model)
    seed = int(run["seed"])
    eps_list = run.get("eps")
    if isinstance(eps_list, (int, float)):
        eps_list = [eps_list]
    if not eps_list:
        raise ConfigError("run.eps must list the perturbation sizes to compare")
    eps_list = sorted((float(e) for e in eps_list), reverse=True)
    met = _metrics(cfg)
    conv = uniform_convergence_experiment(
        model, spec, eff, eps_list, n_traj, T, dtau, grid_step, seed,
        init_from_config(cfg), s=float(met.get("s", 1.0)),
        max_n=int(met.get("max_n", 2000)), workers=workers,
    )
    surface = digest_path(out_dir, "surface", digest, ".csv")
    save_distance_surface_csv(conv, surface)
    sup_csv = digest_path(out_dir, "sup", digest, ".csv")
    save_sup_decay_csv(conv, sup_csv)
    summary = digest_path(out_dir, "compare", digest, ".json")
    with open(summary, "w") as fh:
        json.dump({
            "eps": conv.eps.tolist(),
            "sup": conv.sup.tolist(),
            "sup_tau": conv.sup_tau.tolist(),
            "stabilized": conv.stabilized.tolist(),
        }, fh, indent=2)
    for e, s_val, st in zip(conv.eps, conv.sup, conv.stabilized):
        print(f"[resavg] eps={e:g}: sup distance {s_val:.4f}"
              f" tail {'flat' if st else 'moving'}")
    outputs = [surface, sup_csv, summary]
    for i in range(conv.eps.size - 1):
        se = conv.stderr[i].max() + conv.stderr[i + 1].max()
        if conv.sup[i + 1] > conv.sup[i] + 2.0 * se:
            raise PropertyFailure(
                f"sup distance grew from eps={conv.eps[i]:g} "
                f"({conv.sup[i]:.4f}) to eps={conv.eps[i + 1]:g} "
                f"({conv.sup[i + 1]:.4f}) beyond twice the standard error",
                outputs, seed,
            )
    return outputs, seed


def cmd_mixing(cfg, digest, out_dir, workers, fmt, argv):
    model = model_from_config(cfg)
    spec = spec_from_config(cfg)
    eff = build_effective_cgl(model, spec)
    run, dtau, T, grid_step, n_traj = _run_common(cfg, model)
    seed = int(run["seed"])
    met = _metrics(cfg)
    scales = met.get("mixing_initial_scales", [0.0, 1.5])
    M = model.truncation
    initials = [np.full(M, s / np.sqrt(M), dtype=complex) for s in scales]
    mix = mixing_curve(model, eff, initials, T, dtau, grid_step, n_traj, seed,
                       n_pool=int(met.get("n_pool", 1000)),
                       s=float(met.get("s", 1.0)),
                       max_n=int(met.get("max_n", 2000)), workers=workers)
    csv_path = digest_path(out_dir, "mixing", digest, ".csv")
    save_mixing_csv(mix, csv_path)
    summary = digest_path(out_dir, "mixing", digest, ".json")
    with open(summary, "w") as fh:
        json.dump({
            "floor": mix.floor, "half_split": mix.half_split,
            "replica_ok": bool(mix.replica_ok), "rate": mix.rate,
            "ghat_final": float(mix.ghat[-1]),
        }, fh, indent=2)
    print(f"[resavg] mixing: floor={mix.floor:.4f} rate={mix.rate:.3f} "
          f"replicas {'consistent' if mix.replica_ok else 'INCONSISTENT'}")
    outputs = [csv_path, summary]
    if not mix.replica_ok:
        raise PropertyFailure("replica pools disagree beyond sampling noise",
                              outputs, seed)
    horizon = 10.0 / float(np.min(eff.d))
    if T >= horizon and mix.ghat[-1] > 2.0 * mix.floor:
        raise PropertyFailure(
            f"mixing curve still {mix.ghat[-1]:.4f} > 2 x floor "
            f"{mix.floor:.4f} at tau={T:g}", outputs, seed)
    return outputs, seed


def cmd_nlw_check(cfg, digest, out_dir, workers, fmt, argv):
    model = model_from_config(cfg)
    run = cfg["run"]
    seed = int(run["seed"])
    gammas = run.get("gamma", [0.1, 0.01])
    if isinstance(gammas, (int, float)):
        gammas = [gammas]
    T0 = float(run.get("T0", 6.0))
    doublings = int(run.get("doublings", 3))
    horizons = [T0 * 2 ** k for k in range(doublings + 1)]
    rows_g, rows_t, rows_d = [], [], []
    failures = []
    for gamma in gammas:
        devs = [nlw_deviation_envelope(model, float(gamma), T)[0] for T in horizons]
        rows_g += [gamma] * len(horizons)
        rows_t += horizons
        rows_d += devs
        for k in range(doublings):
            if devs[k + 1] > 0.75 * devs[k]:
                failures.append(
                    f"gamma={gamma:g}: deviation {devs[k]:.3e} -> {devs[k + 1]:.3e} "
                    f"(ratio {devs[k + 1] / devs[k]:.2f} > 0.75) at T={horizons[k]:g}"
                )
        print(f"[resavg] gamma={gamma:g}: deviations "
              + " ".join(f"{d:.3e}" for d in devs))
    csv_path = digest_path(out_dir, "nlw-average", digest, ".csv")
    save_nlw_average_csv(csv_path, rows_g, rows_t, rows_d)
    outputs = [csv_path]
    if failures:
        raise PropertyFailure("; ".join(failures), outputs, seed)
    return outputs, seed


_COMMANDS = {
    "model-build": cmd_model_build,
    "effective-build": cmd_effective_build,
    "run": cmd_run,
    "compare": cmd_compare,
    "mixing": cmd_mixing,
    "nlw-check": cmd_nlw_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resavg",
        description="spectral averaging toolkit: models, ensembles, convergence checks",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="TOML or JSON config file")
    parser.add_argument("--out-dir", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override run.seed from the config")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--format", choices=("csv", "json", "both"),
                        default="both", help="ensemble output format")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        digest = hash_config(cfg)
        os.makedirs(args.out_dir, exist_ok=True)
        outputs, seed = _COMMANDS[args.command](
            cfg, digest, args.out_dir, args.workers, args.format, argv)
    except ConfigError as exc:
        print(f"[resavg] config error: {exc}", file=sys.stderr)
        return 2
    except BlowUpError as exc:
        print(f"[resavg] blow-up: {exc}", file=sys.stderr)
        return 3
    except PropertyFailure as exc:
        message, outputs, seed = exc.args
        manifest = write_manifest(args.out_dir, digest, seed, outputs,
                                  ["resavg"] + argv)
        print(f"[resavg] property failure: {message}", file=sys.stderr)
        print(f"[resavg] manifest: {manifest}")
        return 4
    manifest = write_manifest(args.out_dir, digest, seed, outputs,
                              ["resavg"] + argv)
    print(f"[resavg] manifest: {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
