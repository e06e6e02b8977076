"""Batch front-end: ``vibrafeed <mode> --config <path> [--out <path>] [--seed <u64>] [--threads <n>]``.

Config files hold ``key=value`` lines; ``#`` starts a comment. Keys and
defaults:

    gamma=1  n=1  chi2_over_kappa=1  (or chi and kappa)  eta=1  g=0  phi=-pi/2
    dim=auto  dt=auto  t_final=5  n_traj=100  seed=0  record_stride=10
    alpha=none  (real coherent amplitude of the initial state; thermal otherwise)
    sweep=<param>:<start>:<stop>:<points>:<linear|log>
    out=<path>

Angles and other numbers may use ``pi`` (``phi=-pi/2``).
"""

from __future__ import annotations

import argparse
import ast
import hashlib
import math
import operator
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import Stability, stability_check, steady_dim, steady_moments
from .fock import FockBasis, coherent_state, dim_for_tail, lowering_op, momentum_op, position_op, thermal_state
from .liouville import build_general_fb_me, integrate
from .params import FIELDS, FeedbackParams, ParameterError, derived_coeffs
from .sme import TrajectoryConfig, run_ensemble
from .validate import run_suite

MODES = ("analytic", "evolve", "trajectories", "sweep", "validate")
PARAM_DEFAULTS = {"gamma": 1.0, "n": 1.0, "eta": 1.0, "g": 0.0, "phi": -math.pi / 2}
NUMERIC_KEYS = ("gamma", "n", "chi", "kappa", "chi2_over_kappa", "eta", "g", "phi", "dt", "t_final", "alpha")
INTEGER_KEYS = ("dim", "n_traj", "seed", "record_stride")
KNOWN_KEYS = NUMERIC_KEYS + INTEGER_KEYS + ("sweep", "out", "mode")
ANALYTIC_HEADER = "Gamma,N,Re_M,Im_M,zeta,Re_mu,Im_mu,n_eff,stability"
MAX_AUTO_DIM = 80


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class SweepSpec:
    name: str
    start: float
    stop: float
    points: int
    scale: str = "linear"

    def __post_init__(self):
        if self.name not in FIELDS:
            raise ValueError(f"sweep parameter {self.name!r} is not one of {', '.join(FIELDS)}")
        if self.points < 1:
            raise ValueError("sweep needs at least one point")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"sweep scale must be linear or log, got {self.scale!r}")
        if self.scale == "log" and (self.start <= 0 or self.stop <= 0):
            raise ValueError("log sweep needs positive start and stop")

    def grid(self) -> np.ndarray:
        if self.scale == "log":
            return np.geomspace(self.start, self.stop, self.points)
        return np.linspace(self.start, self.stop, self.points)


@dataclass(frozen=True)
class RunConfig:
    mode: str | None
    params: FeedbackParams
    dim: int | None = None
    dt: float | None = None
    t_final: float = 5.0
    n_traj: int = 100
    seed: int = 0
    record_stride: int = 10
    alpha: float | None = None
    sweep: SweepSpec | None = None
    out: str | None = field(default=None, compare=False)

    def canonical(self) -> str:
        """Text that determines every output bit; output path and thread count excluded."""
        fmt = lambda v: "none" if v is None else (format(v, ".17g") if isinstance(v, float) else str(v))
        lines = [f"mode={self.mode}", f"version={__version__}"]
        lines += [f"{k}={fmt(v)}" for k, v in self.params.as_dict().items()]
        for k in ("dim", "dt", "t_final", "n_traj", "seed", "record_stride", "alpha"):
            lines.append(f"{k}={fmt(getattr(self, k))}")
        if self.sweep:
            s = self.sweep
            lines.append(f"sweep={s.name}:{fmt(s.start)}:{fmt(s.stop)}:{s.points}:{s.scale}")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def banner(self) -> str:
        return f"# vibrafeed {__version__} config-hash={self.config_hash()}"


_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
        ast.Pow: operator.pow, ast.USub: operator.neg, ast.UAdd: operator.pos}


def parse_number(text: str) -> float:
    """Float literal or arithmetic on literals and ``pi``."""
    try:
        return float(text)
    except ValueError:
        pass

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.operand))
        raise ValueError(text)

    try:
        return ev(ast.parse(text.strip(), mode="eval"))
    except (SyntaxError, ValueError, ZeroDivisionError, OverflowError):
        raise ValueError(f"cannot parse number {text!r}") from None


def _parse_sweep(text: str) -> SweepSpec:
    parts = text.split(":")
    if len(parts) not in (4, 5):
        raise ValueError("sweep must be name:start:stop:points[:linear|log]")
    name, start, stop, points = parts[:4]
    count = float(points)
    if count != int(count):
        raise ValueError(f"sweep point count must be an integer, got {points!r}")
    return SweepSpec(name.strip(), parse_number(start), parse_number(stop), int(count),
                     parts[4].strip() if len(parts) == 5 else "linear")


def _build_params(raw: dict[str, float], where: dict[str, int]) -> FeedbackParams:
    values = {k: raw.get(k, v) for k, v in PARAM_DEFAULTS.items()}
    c, chi, kappa = raw.get("chi2_over_kappa"), raw.get("chi"), raw.get("kappa")
    line = max([where.get(k, 0) for k in ("chi2_over_kappa", "chi", "kappa")]) or None
    if chi is None:
        c = 1.0 if c is None else c
        if c < 0:
            raise ConfigError(f"chi2_over_kappa must be >= 0, got {c}", where.get("chi2_over_kappa"))
        kappa = 1.0 if kappa is None else kappa
        if kappa <= 0:
            raise ConfigError(f"kappa must be > 0, got {kappa}", where.get("kappa"))
        chi = math.sqrt(c * kappa)
    elif kappa is None:
        if c is None:
            raise ConfigError("chi given without kappa or chi2_over_kappa", where.get("chi"))
        if c <= 0:
            raise ConfigError("chi2_over_kappa must be > 0 to infer kappa from chi", where.get("chi2_over_kappa"))
        kappa = chi * chi / c
    elif c is not None and not math.isclose(chi * chi / kappa, c, rel_tol=1e-12, abs_tol=1e-300):
        raise ConfigError(f"chi^2/kappa = {chi * chi / kappa:.17g} contradicts chi2_over_kappa = {c:.17g}", line)
    try:
        return FeedbackParams(values["gamma"], values["n"], chi, kappa, values["eta"], values["g"], values["phi"])
    except ParameterError as exc:
        name = str(exc).split()[0]
        raise ConfigError(str(exc), where.get(name, line)) from None


def parse_config(text: str) -> RunConfig:
    """Parse and fully validate a key=value config; errors carry the offending line number."""
    raw: dict[str, object] = {}
    where: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected key=value, got {body!r}", lineno)
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        where[key] = lineno
        try:
            if (key == "dt" and value == "auto") or (key == "alpha" and value == "none"):
                continue
            if key in NUMERIC_KEYS:
                v = parse_number(value)
                if not math.isfinite(v):
                    raise ValueError(f"{key} must be finite")
                raw[key] = v
            elif key in INTEGER_KEYS:
                if key == "dim" and value == "auto":
                    continue
                v = parse_number(value)
                if v != int(v):
                    raise ValueError(f"{key} must be an integer, got {value!r}")
                raw[key] = int(v)
            elif key == "sweep":
                raw[key] = _parse_sweep(value)
            elif key == "mode":
                if value not in MODES:
                    raise ValueError(f"mode must be one of {', '.join(MODES)}")
                raw[key] = value
            else:
                raw[key] = value
        except ValueError as exc:
            msg = str(exc)
            raise ConfigError(msg if msg.startswith(key) else f"{key}: {msg}", lineno) from None
    params = _build_params({k: v for k, v in raw.items() if k in NUMERIC_KEYS}, where)
    checks = [
        ("dim", lambda v: v >= 2, "dim must be >= 2"),
        ("dt", lambda v: v > 0, "dt must be > 0"),
        ("t_final", lambda v: v > 0, "t_final must be > 0"),
        ("n_traj", lambda v: v >= 2, "n_traj must be >= 2"),
        ("seed", lambda v: 0 <= v < 2**64, "seed must be an unsigned 64-bit integer"),
        ("record_stride", lambda v: v >= 1, "record_stride must be >= 1"),
    ]
    for key, ok, msg in checks:
        if key in raw and not ok(raw[key]):
            raise ConfigError(f"{msg}, got {raw[key]}", where[key])
    if "out" in raw:
        parent = Path(str(raw["out"])).expanduser().resolve().parent
        if not parent.is_dir():
            raise ConfigError(f"output directory {parent} does not exist", where["out"])
    return RunConfig(
        mode=raw.get("mode"),
        params=params,
        dim=raw.get("dim"),
        dt=raw.get("dt"),
        t_final=raw.get("t_final", 5.0),
        n_traj=raw.get("n_traj", 100),
        seed=raw.get("seed", 0),
        record_stride=raw.get("record_stride", 10),
        alpha=raw.get("alpha"),
        sweep=raw.get("sweep"),
        out=raw.get("out"),
    )


# -- modes -------------------------------------------------------------------


def _g(x: float) -> str:
    return format(float(x), ".17g")


def _require_stable(p: FeedbackParams) -> None:
    state = stability_check(p)
    if state is not Stability.STABLE:
        raise ParameterError(
            f"stability_check reports {state.value} for these parameters "
            f"(need gamma - g sin(phi) > |g sin(phi)|); no steady state exists"
        )


def analytic_row(p: FeedbackParams) -> str:
    """Coefficients always; stationary moments only for stable points (nan otherwise)."""
    try:
        co = derived_coeffs(p)
        head = [co.Gamma, co.N, co.M.real, co.M.imag]
    except ParameterError:
        head = [p.gamma - p.feedback_drive] + [math.nan] * 3
    try:
        state = stability_check(p)
    except ParameterError:
        state = Stability.UNSTABLE
    if state is Stability.STABLE:
        m = steady_moments(p)
        tail = [m.zeta, m.mu.real, m.mu.imag, m.n_eff]
    else:
        tail = [math.nan] * 4
    return ",".join([_g(v) for v in head + tail] + [state.value])


def _auto_dim(cfg: RunConfig) -> int:
    if cfg.dim:
        return cfg.dim
    p = cfg.params
    occ = p.n
    if cfg.alpha is not None:
        occ = max(occ, cfg.alpha**2 + 2 * math.sqrt(occ * cfg.alpha**2 + 1e-300) + 1)
    d = dim_for_tail(occ, 1e-8)
    if stability_check(p) is Stability.STABLE:
        d = max(d, steady_dim(p))
    return min(max(d, 4), MAX_AUTO_DIM)


def _initial_state(cfg: RunConfig, basis: FockBasis):
    if cfg.alpha is None:
        return None
    return coherent_state(basis, cfg.alpha)


def _run_analytic(cfg: RunConfig) -> dict[str, str]:
    _require_stable(cfg.params)
    return {"": f"{cfg.banner()}\n{ANALYTIC_HEADER}\n{analytic_row(cfg.params)}\n"}


def _sweep_point(args) -> str:
    p, name, value = args
    try:
        q = p.with_(**{name: float(value)})
    except ParameterError:
        return ",".join([_g(value)] + ["nan"] * 8 + ["invalid"])
    return f"{_g(value)},{analytic_row(q)}"


def _run_sweep(cfg: RunConfig, threads: int) -> dict[str, str]:
    if cfg.sweep is None:
        raise ValueError("sweep mode needs a sweep=name:start:stop:points:scale line")
    s = cfg.sweep
    jobs = [(cfg.params, s.name, v) for v in s.grid()]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_point, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        rows = [_sweep_point(j) for j in jobs]
    return {"": "\n".join([cfg.banner(), f"{s.name},{ANALYTIC_HEADER}", *rows]) + "\n"}


def _run_evolve(cfg: RunConfig) -> dict[str, str]:
    basis = FockBasis(_auto_dim(cfg))
    gen = build_general_fb_me(cfg.params, basis)
    dt = cfg.dt or 0.5 / gen.max_rate()
    init = _initial_state(cfg, basis)
    rho0 = init if init is not None else thermal_state(basis, cfg.params.n)
    res = integrate(gen, rho0, cfg.t_final, dt, record_every=cfg.record_stride)
    X = np.array(position_op(basis).matrix)
    P = np.array(momentum_op(basis).matrix)
    a = np.array(lowering_op(basis).matrix)
    num = a.conj().T @ a
    lines = [cfg.banner(), "t,mean_X,mean_P,var_X,mean_n"]
    for t, r in zip(res.times, res.states):
        x = np.sum(X.T * r).real
        x2 = np.sum((X @ X).T * r).real
        lines.append(",".join(_g(v) for v in (t, x, np.sum(P.T * r).real, x2 - x * x, np.sum(num.T * r).real)))
    return {"": "\n".join(lines) + "\n"}


ENSEMBLE_HEADER = "t,mean_X,mean_X_se,mean_n,mean_n_se,mean_P,mean_var_X,mean_var_X_se,var_mean_X,uncond_var_X"


def _run_trajectories(cfg: RunConfig, threads: int) -> dict[str, str]:
    basis = FockBasis(_auto_dim(cfg))
    dt = cfg.dt or 1e-3
    steps = max(1, math.ceil(cfg.t_final / dt - 1e-12))
    tc = TrajectoryConfig(cfg.params, basis, dt, steps, cfg.seed, cfg.record_stride,
                          initial=_initial_state(cfg, basis))
    summary = run_ensemble(tc, cfg.n_traj, threads=threads)
    width = max(5, len(str(cfg.n_traj - 1)))
    files = {}
    for i, rec in enumerate(summary.records):
        files[f"traj_{i:0{width}d}.csv"] = rec.to_csv(preamble=f"{cfg.banner()} trajectory={i} seed={rec.seed}")
    cols = (summary.times, summary.mean_X, summary.mean_X_se, summary.mean_n, summary.mean_n_se, summary.mean_P,
            summary.mean_var_X, summary.mean_var_X_se, summary.var_mean_X, summary.uncond_var_X)
    rows = [",".join(_g(c[k]) for c in cols) for k in range(len(summary.times))]
    files["ensemble.csv"] = "\n".join([cfg.banner(), ENSEMBLE_HEADER, *rows]) + "\n"
    return files


def _run_validate(cfg: RunConfig) -> tuple[dict[str, str], bool]:
    results = run_suite(cfg.params, seed=cfg.seed, dim=cfg.dim)
    lines = [cfg.banner(), "check,value,tolerance,passed,detail"]
    for r in results:
        lines.append(f"{r.name},{_g(r.value)},{_g(r.tolerance)},{int(r.passed)},{r.detail}")
    return {"": "\n".join(lines) + "\n"}, all(r.passed for r in results)


def run(cfg: RunConfig, threads: int = 1) -> tuple[int, dict[str, str]]:
    """Execute ``cfg``; returns (exit status, {relative file name: CSV text}).

    A single-output mode uses the key "". ``trajectories`` returns one file per
    trajectory plus ``ensemble.csv``.
    """
    if cfg.mode not in MODES:
        raise ValueError(f"mode must be one of {', '.join(MODES)}")
    if cfg.mode == "analytic":
        return 0, _run_analytic(cfg)
    if cfg.mode == "sweep":
        return 0, _run_sweep(cfg, threads)
    if cfg.mode == "evolve":
        return 0, _run_evolve(cfg)
    if cfg.mode == "trajectories":
        return 0, _run_trajectories(cfg, threads)
    files, ok = _run_validate(cfg)
    return (0 if ok else 1), files


def write_outputs(files: dict[str, str], out: str | None, stdout=None) -> None:
    stdout = stdout or sys.stdout
    if list(files) == [""]:
        if out:
            Path(out).write_text(files[""])
        else:
            stdout.write(files[""])
        return
    if not out:
        raise ValueError("this mode writes several files; pass --out <directory>")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (root / name).write_text(text)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="vibrafeed", description=__doc__.split("\n")[0])
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("--out", help="output file (directory for trajectories)")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--threads", type=int, default=1, help="worker processes")
    args = parser.parse_args(argv)
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text)
        if cfg.mode is not None and cfg.mode != args.mode:
            raise ConfigError(f"config declares mode={cfg.mode} but {args.mode} was requested")
        cfg = replace(cfg, mode=args.mode)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = replace(cfg, seed=args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = args.out or cfg.out
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            status, files = run(cfg, threads=args.threads)
        write_outputs(files, out)
    except (OSError, ValueError) as exc:
        print(f"vibrafeed: error: {exc}", file=sys.stderr)
        return 2
    if status:
        print("vibrafeed: validation failed", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
