"""Command-line driver.

    hdsa solve|hdsa|predict|verify --config run.json [--out DIR] [--seed N] [--threads N]

Exit codes: 0 ok, 1 configuration error, 2 optimizer failure, 3 GSVD
failure, 4 verification failure. The thread count can also be set with
the HDSA_THREADS environment variable; ``--threads`` wins if both are
given. Every other setting lives in the JSON config.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .discrepancy import build_L, build_prior, delta_eval
from .gsvd import CholeskyBreakdown, GsvdConfig, SensitivityContext, apply_sensitivity_to_discrepancy, randomized_gsvd, table2_expected
from .optctl import NonpositiveCurvature, ReducedProblem, make_objective, solve_optimum
from .pde import NonConvergence, ModelPairDiscrepancy, make_model, solve_forward

log = logging.getLogger("hdsa")

EXIT_OK, EXIT_CONFIG, EXIT_OPTIMIZER, EXIT_GSVD, EXIT_VERIFY = 0, 1, 2, 3, 4

PROBLEMS = ("illustrative", "cdr2d")
MAX_SEED = 2**64 - 1


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _true_source(x):
    return np.exp(-50.0 * (x[:, 0] - 0.5) ** 2)


def _cdr_target(x):
    x1, x2 = x[:, 0], x[:, 1]
    return (3 * x1**2 - 3 * x1**3) * (2 * x2 - x2**2)


PRESETS = {
    "illustrative": dict(mesh=200, beta1=1e-8, beta2=0.0, high_fidelity="advdiff1d", k=5),
    "cdr2d": dict(mesh=32, beta1=1e-6, beta2=1e-6, high_fidelity=None, k=54),
}


@dataclass
class RunConfig:
    problem: str = "illustrative"
    mesh: int = 200
    beta1: float = 0.0
    beta2: float = 0.0
    high_fidelity: object = "advdiff1d"
    epsilon: float = 1e-3
    tau: float = 50.0
    alpha: float = 1.0
    beta: float = 1e-6
    k: int = 5
    oversampling: int = 8
    subspace_iterations: int = 1
    seed: int = 0
    gtol: float = 1e-8
    newton_rtol: float = 1e-10
    cg_rtol: float = 1e-10
    out: str = "hdsa_out"

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        problem = data.get("problem", cls.problem)
        if problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {problem!r}")
        merged = {**PRESETS[problem], **data, "problem": problem}
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self):
        def number(name, lo=None, strict=False):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
                raise ConfigError(f"{name} must be a finite number, got {v!r}")
            if lo is not None and (v <= lo if strict else v < lo):
                raise ConfigError(f"{name} must be {'>' if strict else '>='} {lo}, got {v}")
            setattr(self, name, float(v))

        def integer(name, lo, hi=None):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < lo or (hi is not None and v > hi):
                raise ConfigError(f"{name} must be an integer in [{lo}, {hi or 'inf'}], got {v!r}")

        integer("mesh", 2)
        integer("k", 1)
        integer("oversampling", 0)
        integer("subspace_iterations", 0)
        integer("seed", 0, MAX_SEED)
        for name in ("beta1", "beta2", "tau", "beta"):
            number(name, 0.0)
        for name in ("epsilon", "alpha", "gtol", "newton_rtol", "cg_rtol"):
            number(name, 0.0, strict=True)
        if self.high_fidelity is not None and self.high_fidelity not in ("advdiff1d", "diffusion1d"):
            raise ConfigError(f"high_fidelity must be advdiff1d, diffusion1d or null, got {self.high_fidelity!r}")
        if self.problem == "cdr2d" and self.high_fidelity is not None:
            raise ConfigError("cdr2d has no high-fidelity partner model; set high_fidelity to null")
        if not isinstance(self.out, str) or not self.out:
            raise ConfigError("out must be a non-empty path string")


# ---------------------------------------------------------------------------
# problem setup

@dataclass
class Setup:
    model: object
    problem: ReducedProblem
    boundary: str
    high: object = None
    true_control: np.ndarray = None


def build_setup(cfg):
    if cfg.problem == "illustrative":
        model = make_model("diffusion1d", cfg.mesh)
        # the target is reachable by the advection-diffusion model with the true source
        truth = make_model("advdiff1d", cfg.mesh)
        z_true = truth.interpolate_control(_true_source)
        target = solve_forward(truth, z_true, rtol=cfg.newton_rtol).state
        high = make_model(cfg.high_fidelity, cfg.mesh) if cfg.high_fidelity else None
        boundary = "left"
    else:
        model = make_model("cdr2d", cfg.mesh)
        target = model.interpolate_state(_cdr_target)
        high, z_true, boundary = None, None, "bottom"
    objective = make_objective(model, target, cfg.beta1, cfg.beta2)
    problem = ReducedProblem(model, objective, newton_rtol=cfg.newton_rtol, cg_rtol=cfg.cg_rtol)
    return Setup(model, problem, boundary, high, z_true)


def _optimize(problem, cfg, **kw):
    try:
        return solve_optimum(problem, gtol=cfg.gtol, seed=cfg.seed % 2**32, **kw)
    except (NonConvergence, NonpositiveCurvature, np.linalg.LinAlgError) as exc:
        raise StageError(f"optimizer failed: {exc}", EXIT_OPTIMIZER) from exc


# ---------------------------------------------------------------------------
# output

class Output:
    """Collects files written under one directory for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def _atomic(self, name, writer):
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                writer(fh)
            os.replace(tmp, self.root / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        if name not in self.files:
            self.files.append(name)

    def field(self, name, coords, ids, columns):
        """Node-value CSV: node id, coordinates, then one column per field."""
        dim = coords.shape[1]
        axes = ["x", "y", "z"][:dim]

        def write(fh):
            w = csv.writer(fh)
            w.writerow(["node", *axes, *columns])
            data = np.column_stack([np.asarray(c, dtype=float) for c in columns.values()])
            for i, node in enumerate(ids):
                w.writerow([int(node), *(f"{c:.17g}" for c in coords[node]), *(f"{v:.17g}" for v in data[i])])

        self._atomic(name, write)

    def table(self, name, header, rows):
        def write(fh):
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])

        self._atomic(name, write)

    def json(self, name, payload):
        self._atomic(name, lambda fh: json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable))

    def manifest(self):
        out = {}
        for name in self.files:
            data = (self.root / name).read_bytes()
            out[name] = {"bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}
        return out

    def summary(self, payload):
        payload = dict(payload)
        payload["manifest"] = self.manifest()
        self.json("summary.json", payload)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _control_field(out, name, model, columns):
    out.field(name, model.mesh.coords, model.control_nodes, columns)


def _state_field(out, name, model, columns):
    out.field(name, model.mesh.coords, np.arange(model.m), columns)


def _opt_report(opt):
    return {
        "objective": float(opt.history[-1]["objective"]),
        "gradient_norm": opt.gradient_norm,
        "gradient_norm_mz_inv": opt.gradient_norm_mz,
        "newton_iterations": len(opt.history) - 1,
        "min_rayleigh_quotient": opt.min_rayleigh,
        "history": opt.history,
    }


# ---------------------------------------------------------------------------
# commands

def cmd_solve(cfg, out, threads=1):
    t0 = time.perf_counter()
    s = build_setup(cfg)
    opt = _optimize(s.problem, cfg)
    t1 = time.perf_counter()
    _control_field(out, "zbar.csv", s.model, {"zbar": opt.z})
    _state_field(out, "ubar.csv", s.model, {"ubar": opt.u})
    report = {"command": "solve", "config": cfg.to_dict(), "optimality": _opt_report(opt),
              "timings": {"solve": t1 - t0}}
    out.summary(report)
    return report


def run_hdsa(cfg, threads=1, setup=None, opt=None):
    """Optimize (unless given) and run the randomized GSVD; returns (setup, opt, ctx, result)."""
    s = setup or build_setup(cfg)
    opt = opt or _optimize(s.problem, cfg)
    L = build_L(s.model.mesh, cfg.epsilon, cfg.tau, s.boundary)
    prior = build_prior(s.model.mesh, opt.z, cfg.alpha, cfg.beta, nodes=s.model.control_nodes)
    gcfg = GsvdConfig(cfg.k, cfg.oversampling, cfg.subspace_iterations, cfg.seed)
    try:
        ctx = SensitivityContext(s.problem, opt, L, prior, threads=threads)
        res = randomized_gsvd(ctx, gcfg)
    except (CholeskyBreakdown, NonConvergence, NonpositiveCurvature, np.linalg.LinAlgError) as exc:
        raise StageError(f"GSVD failed: {exc}", EXIT_GSVD) from exc
    return s, opt, ctx, res


def cmd_hdsa(cfg, out, threads=1):
    t0 = time.perf_counter()
    s = build_setup(cfg)
    opt = _optimize(s.problem, cfg)
    t1 = time.perf_counter()
    s, opt, ctx, res = run_hdsa(cfg, threads, s, opt)
    t2 = time.perf_counter()
    k = min(cfg.k, res.d)
    sigma = res.sigma[:k]
    model = s.model
    out.table("singular_values.csv", ["index", "sigma"], [(i + 1, float(v)) for i, v in enumerate(sigma)])

    theta = res.theta.columns(slice(0, k))
    W = res.W[:, :k]
    Mz = res.mass_z
    nominal = delta_eval(opt.z, theta, Mz).reshape(model.m, k)
    perturbed = np.column_stack([
        delta_eval(opt.z + sigma[j] * W[:, j], theta.column(j), Mz) for j in range(k)
    ]).reshape(model.m, k)
    names = [f"mode_{j + 1}" for j in range(k)]
    _control_field(out, "modes_w.csv", model, dict(zip(names, W.T)))
    _control_field(out, "modes_sigma_w.csv", model, dict(zip(names, (W * sigma).T)))
    _state_field(out, "modes_delta_nominal.csv", model, dict(zip(names, nominal.T)))
    _state_field(out, "modes_delta_perturbed.csv", model, dict(zip(names, perturbed.T)))
    _control_field(out, "zbar.csv", model, {"zbar": opt.z})
    _state_field(out, "ubar.csv", model, {"ubar": opt.u})
    _state_field(out, "theta_U.csv", model, dict(zip(names, theta.U.T)))
    _control_field(out, "theta_Z.csv", model, dict(zip(names, theta.Z.T)))
    out.json("theta_shared.json", {"a": theta.a, "b": theta.b, "u0": theta.u0, "z0": theta.z0})

    counters = {key: int(v) for key, v in res.counters.items()}
    expected = table2_expected(res.q, res.d, counters["cg_total"])
    report = {
        "command": "hdsa",
        "config": cfg.to_dict(),
        "optimality": _opt_report(opt),
        "sigma": sigma,
        "sigma_ratio_first_last": float(sigma[0] / sigma[-1]) if sigma[-1] > 0 else float("inf"),
        "sketch_width": res.d,
        "orthonormality": {"W": res.left_orthonormality, "theta": res.right_orthonormality},
        "counters": counters,
        "counters_expected": expected,
        "counters_match": all(counters.get(key, 0) == v for key, v in expected.items()),
        "cg_iterations": res.cg_iterations,
        "mean_cg_iterations": float(np.mean(res.cg_iterations)) if res.cg_iterations else 0.0,
        "threads": threads,
        "timings": {"solve": t1 - t0, "gsvd": t2 - t1},
    }
    out.summary(report)
    return report


def run_predict(cfg, threads=1):
    """Nominal, high-fidelity and predicted optimal controls for a model pair."""
    if cfg.problem != "illustrative" or cfg.high_fidelity is None:
        raise ConfigError(f"no high-fidelity/low-fidelity pair defined for problem {cfg.problem!r}")
    s = build_setup(cfg)
    opt = _optimize(s.problem, cfg)
    hi_problem = ReducedProblem(s.high, s.problem.objective, newton_rtol=cfg.newton_rtol, cg_rtol=cfg.cg_rtol)
    z_star = _optimize(hi_problem, cfg, z0=opt.z, n_rayleigh=0).z
    L = build_L(s.model.mesh, cfg.epsilon, cfg.tau, s.boundary)
    prior = build_prior(s.model.mesh, opt.z, cfg.alpha, cfg.beta, nodes=s.model.control_nodes)
    try:
        ctx = SensitivityContext(s.problem, opt, L, prior, threads=threads)
        d = ModelPairDiscrepancy(s.high, s.model)
        dz = apply_sensitivity_to_discrepancy(ctx, d.value(opt.z), d)
    except (NonConvergence, NonpositiveCurvature, np.linalg.LinAlgError) as exc:
        raise StageError(f"sensitivity solve failed: {exc}", EXIT_OPTIMIZER) from exc
    Mz = s.problem.mass_z
    norm = lambda v: float(np.sqrt(v @ (Mz @ v)))
    errors = {
        "nominal_error_mz": norm(opt.z - z_star),
        "predicted_error_mz": norm(opt.z + dz - z_star),
        "shift_norm_mz": norm(dz),
    }
    errors["ratio"] = errors["predicted_error_mz"] / errors["nominal_error_mz"] if errors["nominal_error_mz"] > 0 else 0.0
    return s, opt, z_star, dz, errors


def cmd_predict(cfg, out, threads=1):
    t0 = time.perf_counter()
    s, opt, z_star, dz, errors = run_predict(cfg, threads)
    t1 = time.perf_counter()
    _control_field(out, "zbar.csv", s.model, {"zbar": opt.z})
    _control_field(out, "zstar.csv", s.model, {"zstar": z_star})
    _control_field(out, "zpred.csv", s.model, {"zpred": opt.z + dz})
    report = {"command": "predict", "config": cfg.to_dict(), "optimality": _opt_report(opt),
              "errors": errors, "timings": {"total": t1 - t0}}
    out.summary(report)
    return report


def cmd_verify(cfg, out, threads=1, mutate_x_sign=False):
    from .oracle import run_checks

    t0 = time.perf_counter()
    results = run_checks(seed=cfg.seed % 2**32, mutate_x_sign=mutate_x_sign)
    checks = {name: {"passed": bool(ok), "value": float(val)} for name, (ok, val) in results.items()}
    failed = sorted(name for name, c in checks.items() if not c["passed"])
    report = {"command": "verify", "checks": checks, "failed": failed,
              "passed": not failed, "timings": {"total": time.perf_counter() - t0}}
    out.json("verify.json", report)
    out.summary(report)
    if failed:
        raise StageError(f"verification failed: {', '.join(failed)}", EXIT_VERIFY)
    return report


COMMANDS = {"solve": cmd_solve, "hdsa": cmd_hdsa, "predict": cmd_predict, "verify": cmd_verify}


def _threads(arg):
    if arg is not None:
        value = arg
    else:
        env = os.environ.get("HDSA_THREADS")
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"HDSA_THREADS must be an integer, got {env!r}")
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def build_parser():
    p = argparse.ArgumentParser(prog="hdsa", description="Discrepancy sensitivity of PDE-constrained optimal control.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration (optional for verify)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--threads", type=int, help="worker threads for Hessian solves")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is None:
            if args.command != "verify":
                raise ConfigError(f"{args.command} requires --config")
            data = {}
        else:
            data = RunConfig.load(args.config).to_dict()
        if args.seed is not None:
            data["seed"] = args.seed
        if args.out is not None:
            data["out"] = args.out
        cfg = RunConfig.from_dict(data)
        threads = _threads(args.threads)
        out = Output(cfg.out)
        COMMANDS[args.command](cfg, out, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
