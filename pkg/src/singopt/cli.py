"""Command-line harness.

Subcommands: simulate | cost | verify | certify | chatter | adjoint.  Every
command reads a JSON run configuration, applies the global overrides
(--seed, --paths, --steps), echoes the fully resolved configuration into its
output artifacts and writes everything below --out together with a
manifest.json indexing the produced files (sizes and SHA-256 digests).
Seeds are mandatory; nothing falls back to wall-clock entropy, so reruns
with identical configurations are byte-identical.

Exit codes: 0 success / verification passed, 1 verification or
certification failed, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import adjoint as adj
from . import controls as ctl
from . import io as sio
from . import model, optimality, sde

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    """Raised for malformed or incomplete run configurations."""


def _positive_int(cfg, path_desc, value):
    try:
        out = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path_desc} must be an integer, got {value!r}")
    if out <= 0:
        raise ConfigError(f"{path_desc} must be positive, got {out}")
    return out


def resolve_config(raw: dict, overrides: dict) -> dict:
    """Validate a run configuration and fold in CLI overrides."""
    cfg = json.loads(json.dumps(raw))  # deep copy, JSON-clean
    if "problem" not in cfg:
        raise ConfigError("config missing 'problem' (built-in name or problem JSON path)")
    grid = cfg.setdefault("grid", {})
    mc = cfg.setdefault("monte_carlo", {})
    if overrides.get("steps") is not None:
        grid["N"] = overrides["steps"]
    if overrides.get("paths") is not None:
        mc["M"] = overrides["paths"]
    if overrides.get("seed") is not None:
        mc["seed"] = overrides["seed"]
    grid["N"] = _positive_int(cfg, "grid.N", grid.get("N", 100))
    mc["M"] = _positive_int(cfg, "monte_carlo.M", mc.get("M", 1000))
    if "seed" not in mc:
        raise ConfigError("monte_carlo.seed is required (no wall-clock default)")
    mc["seed"] = int(mc["seed"])
    reg = cfg.setdefault("regression", {})
    reg["degree"] = int(reg.get("degree", 2))
    if reg["degree"] < 0:
        raise ConfigError("regression.degree must be >= 0")
    tol = cfg.setdefault("tolerances", {})
    defaults = optimality.Tolerances().as_dict()
    for key, val in defaults.items():
        tol.setdefault(key, val)
        if float(tol[key]) < 0:
            raise ConfigError(f"tolerances.{key} must be nonnegative")
    return cfg


def load_problem(cfg: dict) -> model.ProblemSpec:
    name = cfg["problem"]
    options = cfg.get("problem_options", {})
    if isinstance(name, str) and name in model.BUILTIN_NAMES:
        return model.builtin_problem(name, kappa=float(options.get("kappa", 1.0)))
    path = Path(str(name))
    if not path.exists():
        raise ConfigError(
            f"problem {name!r} is neither a built-in ({', '.join(model.BUILTIN_NAMES)}) "
            "nor an existing problem JSON file"
        )
    return model.problem_from_json(path)


def _point_in_grid(point, u1_grid):
    return any(np.array_equal(point, row) for row in u1_grid)


def _check_candidate_atoms(control, spec):
    """Candidate control values must come from the problem's grid."""
    if isinstance(control, ctl.StrictControl):
        ok = control.in_grid(spec.u1_grid)
    else:
        ok = all(
            _point_in_grid(atom, spec.u1_grid)
            for j in range(control.grid.num_steps)
            for atom, w in zip(control.atoms[j], control.weights[j])
            if w > 0
        )
    if not ok:
        raise ConfigError("candidate control uses points outside the problem's U1 grid")
    return control


def build_candidate(cfg: dict, spec: model.ProblemSpec, grid: model.TimeGrid):
    """Resolve the candidate (control, singular) pair from the config."""
    cand = cfg.get("candidate")
    if cand is None:
        raise ConfigError("config missing 'candidate'")
    control = None
    if "path" in cand:
        try:
            obj = json.loads(Path(cand["path"]).read_text())
            control = _check_candidate_atoms(ctl.control_from_obj(obj["control"], grid), spec)
            singular = (
                ctl.control_from_obj(obj["singular"], grid)
                if "singular" in obj
                else ctl.zero_singular(grid, spec.m)
            )
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot load candidate file {cand['path']!r}: {exc!r}")
        return control, singular
    name = cand.get("name")
    if name is not None:
        if name == "relaxed_pm1":
            for pt in ([-1.0], [1.0]):
                if not _point_in_grid(np.array(pt), spec.u1_grid):
                    raise ConfigError(f"candidate 'relaxed_pm1' needs {pt} in the U1 grid")
            control = ctl.constant_relaxed(grid, [[-1.0], [1.0]], [0.5, 0.5])
        elif name.startswith("alternating:"):
            blocks = _positive_int(cfg, "candidate blocks", name.split(":", 1)[1])
            control = ctl.alternating_strict(grid, blocks)
        elif name.startswith("constant:"):
            point = np.array([float(v) for v in name.split(":", 1)[1].split(",")])
            if not _point_in_grid(point, spec.u1_grid):
                raise ConfigError(f"candidate point {point.tolist()} is not in the U1 grid")
            control = ctl.constant_strict(grid, point)
        else:
            raise ConfigError(
                f"unknown candidate name {name!r}; use relaxed_pm1, alternating:<n>, "
                "constant:<v>, or a candidate JSON path"
            )
    elif "control" in cand:
        control = _check_candidate_atoms(ctl.control_from_obj(cand["control"], grid), spec)
    else:
        raise ConfigError("candidate needs 'name', 'path' or an inline 'control'")
    if "singular" in cand:
        singular = ctl.control_from_obj(cand["singular"], grid)
    else:
        singular = ctl.zero_singular(grid, spec.m)
    return control, singular


class OutputDir:
    """Collects produced files and writes the manifest."""

    def __init__(self, root, command):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files = []

    def path(self, name):
        self.files.append(name)
        return self.root / name

    def finish(self, config):
        manifest = {
            "command": self.command,
            "config": config,
            "files": {
                name: {
                    "bytes": (self.root / name).stat().st_size,
                    "sha256": sio.file_digest(self.root / name),
                }
                for name in self.files
            },
        }
        sio.write_json(manifest, self.root / "manifest.json")


def _setup(cfg):
    spec = load_problem(cfg)
    grid = model.TimeGrid(cfg["grid"]["N"], spec.horizon)
    noise = model.NoiseBatch.generate(cfg["monte_carlo"]["M"], grid, spec.d, cfg["monte_carlo"]["seed"])
    return spec, grid, noise


def _simulate_candidate(spec, control, singular, grid, noise):
    if isinstance(control, ctl.StrictControl):
        return sde.simulate_strict(spec, control, singular, grid, noise)
    return sde.simulate_relaxed(spec, control, singular, grid, noise)


def cmd_simulate(cfg, out: OutputDir) -> int:
    spec, grid, noise = _setup(cfg)
    control, singular = build_candidate(cfg, spec, grid)
    traj = _simulate_candidate(spec, control, singular, grid, noise)
    cost = sde.estimate_cost(spec, traj, control, singular)
    sio.ensemble_to_csv(traj.states, grid.knots, out.path("trajectory.csv"))
    sio.ensemble_to_binary(traj.states, noise.seed, out.path("trajectory.bin"))
    terminal = traj.terminal
    summary = {
        "terminal_mean": terminal.mean(axis=0).tolist(),
        "terminal_variance": terminal.var(axis=0, ddof=1).tolist() if traj.num_paths > 1
        else [0.0] * spec.n,
        "cost": cost.as_dict(),
        "deterministic_paths": spec.diffusion_is_zero,
        "config": cfg,
    }
    sio.write_json(summary, out.path("summary.json"))
    return EXIT_OK


def cmd_cost(cfg, out: OutputDir) -> int:
    spec, grid, noise = _setup(cfg)
    control, singular = build_candidate(cfg, spec, grid)
    traj = _simulate_candidate(spec, control, singular, grid, noise)
    cost = sde.estimate_cost(spec, traj, control, singular)
    sio.write_json({"cost": cost.as_dict(), "config": cfg}, out.path("cost.json"))
    print(f"cost = {cost.value!r} (se {cost.std_error!r})")
    return EXIT_OK


def _verification_inputs(cfg):
    spec, grid, noise = _setup(cfg)
    control, singular = build_candidate(cfg, spec, grid)
    traj = _simulate_candidate(spec, control, singular, grid, noise)
    mu = ctl.dirac_embed(control) if isinstance(control, ctl.StrictControl) else control
    pair = adj.adjoint_bsde(spec, (mu, singular), traj, grid, degree=cfg["regression"]["degree"])
    tol = optimality.Tolerances(**cfg["tolerances"])
    echo = {
        "grid": cfg["grid"],
        "monte_carlo": cfg["monte_carlo"],
        "regression": cfg["regression"],
        "tolerances": cfg["tolerances"],
    }
    return spec, grid, traj, (mu, singular), pair, tol, echo


def cmd_verify(cfg, out: OutputDir) -> int:
    spec, grid, traj, candidate, pair, tol, echo = _verification_inputs(cfg)
    report = optimality.verify_necessary(
        spec, candidate, pair, traj, grid, tol, config_echo=echo
    )
    sio.write_json({"report": report.as_dict(), "config": cfg}, out.path("verify_report.json"))
    print(report)
    return EXIT_OK if report.passed else EXIT_VERIFY_FAIL


def cmd_certify(cfg, out: OutputDir) -> int:
    spec, grid, traj, candidate, pair, tol, echo = _verification_inputs(cfg)
    cert = optimality.certify_sufficient(
        spec, candidate, pair, traj, grid, tol, config_echo=echo
    )
    sio.write_json({"certificate": cert.as_dict(), "config": cfg}, out.path("certificate.json"))
    for rec in cert.convexity:
        print(f"[{'pass' if rec.passed else 'FAIL'}] convexity {rec.subject}: {rec.evidence}")
    print(cert.report)
    print(f"certified: {cert.certified}")
    return EXIT_OK if cert.certified else EXIT_VERIFY_FAIL


def cmd_chatter(cfg, out: OutputDir) -> int:
    spec, grid, _ = _setup(cfg)
    control, singular = build_candidate(cfg, spec, grid)
    target = ctl.dirac_embed(control) if isinstance(control, ctl.StrictControl) else control
    n_values = cfg.get("chatter", {}).get("n_values", [4, 8, 16])
    rows = [
        sde.chattering_gap(
            spec, target, singular, int(n), cfg["monte_carlo"]["M"], cfg["monte_carlo"]["seed"]
        )
        for n in n_values
    ]
    lines = ["n,traj_gap,cost_gap,cost_gap_se,refined_steps"]
    for row in rows:
        lines.append(
            f"{row['n']},{row['traj_gap']!r},{row['cost_gap']!r},"
            f"{row['cost_gap_se']!r},{row['refined_steps']}"
        )
    out.path("chatter.csv").write_text("\n".join(lines) + "\n")
    sio.write_json({"rows": rows, "config": cfg}, out.path("chatter.json"))
    for row in rows:
        print(
            f"n={row['n']}: traj_gap={row['traj_gap']:.3e} cost_gap={row['cost_gap']:.3e}"
        )
    return EXIT_OK


def cmd_adjoint(cfg, out: OutputDir) -> int:
    spec, grid, noise = _setup(cfg)
    control, singular = build_candidate(cfg, spec, grid)
    traj = _simulate_candidate(spec, control, singular, grid, noise)
    mu = ctl.dirac_embed(control) if isinstance(control, ctl.StrictControl) else control
    degree = cfg["regression"]["degree"]
    fund = sde.fundamental_solutions(spec, (mu, singular), traj, grid, noise)
    explicit = adj.adjoint_explicit(spec, (mu, singular), traj, fund, grid, degree=degree)
    bsde = adj.adjoint_bsde(spec, (mu, singular), traj, grid, degree=degree)
    agreement = float(np.sqrt(np.mean((explicit.p - bsde.p) ** 2)))
    sio.ensemble_to_csv(bsde.p, grid.knots, out.path("adjoint_p.csv"), prefix="p")
    sio.ensemble_to_binary(bsde.p, noise.seed, out.path("adjoint_p.bin"))
    sio.ensemble_to_binary(
        bsde.P.reshape(traj.num_paths, grid.num_steps + 1, spec.n * spec.d),
        noise.seed,
        out.path("adjoint_P.bin"),
    )
    diagnostics = {
        "explicit": explicit.diagnostics,
        "bsde": bsde.diagnostics,
        "method_agreement_rms": agreement,
        "inverse_defect": fund.inverse_defect(),
        "config": cfg,
    }
    sio.write_json(diagnostics, out.path("adjoint_diagnostics.json"))
    print(f"explicit vs backward-sweep p agreement (time-path RMS): {agreement:.3e}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "cost": cmd_cost,
    "verify": cmd_verify,
    "certify": cmd_certify,
    "chatter": cmd_chatter,
    "adjoint": cmd_adjoint,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="singopt",
        description="Simulate controlled SDEs and verify first-order optimality conditions.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="run configuration JSON")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("--seed", type=int, default=None, help="override monte_carlo.seed")
    parser.add_argument("--paths", type=int, default=None, help="override monte_carlo.M")
    parser.add_argument("--steps", type=int, default=None, help="override grid.N")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(
            raw, {"seed": args.seed, "paths": args.paths, "steps": args.steps}
        )
        out = OutputDir(args.out, args.command)
        code = COMMANDS[args.command](cfg, out)
        out.finish(cfg)
        return code
    except (ConfigError, model.ProblemError, ctl.ControlError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (sde.SimulationError, adj.RegressionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
