"""Command-line front end: ``key = value`` configs in, CSV and a summary line out."""

from __future__ import annotations

import argparse
import math
import re
import sys
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from . import analysis
from .dynamics import (
    DegenerateKernelError,
    NormUnderflowError,
    StiffnessError,
    appendix_oracle,
    evolve,
    run_trajectories,
    state_fidelity,
    steady_state,
)
from .model import (
    FeedbackStrategy,
    SystemParams,
    basis_state,
    build_cavity_me,
    build_full_me,
    projector,
    singlet_state,
    vacuum_product,
)
from .opalg import NoSteadyStateError

if TYPE_CHECKING:
    from numpy.typing import NDArray

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2

MODELS = ("effective", "cavity", "full")
STRATEGIES = ("none", "nonlocal", "local")
MODES = ("steady", "evolve", "sweep", "traj", "oracle")
REQUIRED = ("model", "strategy", "omega_fb", "Omega_over_Gamma")

_DECIMAL = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")
_ANGLE = re.compile(r"(?P<x>[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?)?\s*\*?\s*pi")


class ConfigError(Exception):
    def __init__(self, code: str, detail: str):
        super().__init__(f"{code} {detail}")
        self.code = code
        self.detail = detail


def _real(text: str) -> float:
    if not _DECIMAL.fullmatch(text):
        raise ValueError(f"not a decimal real: {text!r}")
    return float(text)


def _angle(text: str) -> float:
    m = _ANGLE.fullmatch(text)
    if m:
        return (_real(m["x"]) if m["x"] else 1.0) * math.pi
    return _real(text)


def _integer(text: str) -> int:
    if not re.fullmatch(r"[+-]?\d+", text):
        raise ValueError(f"not an integer: {text!r}")
    return int(text)


def _choice(options: Sequence[str]) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ConfigError("E_RANGE", f"value {text!r} not in {{{', '.join(options)}}}")
        return text

    return parse


INF = math.inf
# key -> (parser, lower, upper, lower bound inclusive)
_KEYS: dict[str, tuple[Callable[[str], object], float | None, float | None, bool]] = {
    "model": (_choice(MODELS), None, None, True),
    "strategy": (_choice(STRATEGIES), None, None, True),
    "mode": (_choice(MODES), None, None, True),
    "omega_fb": (_angle, None, None, True),
    "Omega_over_Gamma": (_real, 0.0, INF, True),
    "g": (_real, 0.0, INF, False),
    "delta_big": (_real, 0.0, INF, False),
    "J": (_real, None, None, True),
    "G": (_real, 0.0, INF, True),
    "kappa": (_real, 0.0, INF, False),
    "gamma": (_real, 0.0, INF, True),
    "gamma_prime": (_real, 0.0, INF, True),
    "eta": (_real, 0.0, 1.0, True),
    "n_max": (_integer, 1, 6, True),
    "truncation": (_choice(("mode", "total")), None, None, True),
    "binding": (_choice(("none", "default")), None, None, True),
    "lambda_a": (_real, 0.0, INF, True),
    "lambda_b": (_real, 0.0, INF, True),
    "Omega_a": (_real, 0.0, INF, True),
    "Omega_b": (_real, 0.0, INF, True),
    "Omega_c": (_real, 0.0, INF, True),
    "t_end": (_real, 0.0, INF, False),
    "n_points": (_integer, 2, 10**6, True),
    "sweep_mode": (_choice(("steady", "finite_time")), None, None, True),
    "t_final": (_real, 0.0, INF, False),
    "x_axis": (_choice(analysis.AXES), None, None, True),
    "y_axis": (_choice(analysis.AXES), None, None, True),
    "x_min": (_angle, None, None, True),
    "x_max": (_angle, None, None, True),
    "x_num": (_integer, 1, 10**4, True),
    "y_min": (_angle, None, None, True),
    "y_max": (_angle, None, None, True),
    "y_num": (_integer, 1, 10**4, True),
    "n_traj": (_integer, 1, 10**7, True),
    "seed": (_integer, 0, 2**63 - 1, True),
    "check": (_choice(("appendix", "elimination")), None, None, True),
    "gamma1": (_real, 0.0, INF, True),
    "gamma2": (_real, 0.0, INF, True),
    "output": (str, None, None, True),
}

_PARAM_KEYS = (
    "g", "delta_big", "J", "G", "kappa", "gamma", "gamma_prime", "eta", "n_max",
    "lambda_a", "lambda_b", "Omega_a", "Omega_b", "Omega_c",
)


def _check_range(key: str, value, lo, hi, lo_inclusive: bool) -> None:
    if lo is None or not isinstance(value, (int, float)):
        return
    below = value < lo if lo_inclusive else value <= lo
    if below or value > hi:
        lb = "[" if lo_inclusive else "("
        raise ConfigError("E_RANGE", f"{key}={value} outside {lb}{lo:g}, {hi:g}]")


@dataclass(frozen=True)
class RunConfig:
    model: str
    strategy: str
    omega_fb: float
    Omega_over_Gamma: float
    params: SystemParams
    mode: str | None = None
    values: dict[str, object] = field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def feedback(self) -> FeedbackStrategy:
        return FeedbackStrategy.from_params(self.strategy, self.params)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a line-based ``key = value`` configuration."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("E_PARSE", f"line {lineno}: expected 'key = value'")
        key, _, val = (s.strip() for s in line.partition("="))
        if not key or not val:
            raise ConfigError("E_PARSE", f"line {lineno}: expected 'key = value'")
        if key not in _KEYS:
            raise ConfigError("E_UNKNOWN_KEY", f"line {lineno}: {key}")
        if key in values:
            raise ConfigError("E_PARSE", f"line {lineno}: duplicate key {key}")
        parser, lo, hi, inclusive = _KEYS[key]
        try:
            parsed = parser(val)
        except ValueError as exc:
            raise ConfigError("E_PARSE", f"line {lineno}: {key}: {exc}") from None
        except ConfigError as exc:
            raise ConfigError(exc.code, f"{key}: {exc.detail}") from None
        _check_range(key, parsed, lo, hi, inclusive)
        values[key] = parsed
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError("E_PARSE", "missing required keys: " + ", ".join(missing))
    return _build_config(values)


def _build_config(values: dict[str, object]) -> RunConfig:
    kw = {k: values[k] for k in _PARAM_KEYS if k in values}
    if values.get("mode") == "oracle" and values.get("check", "appendix") == "appendix":
        # the single-atom check reads lambda_a, lambda_b on their own
        for k in ("lambda_a", "lambda_b", "Omega_a", "Omega_b", "Omega_c"):
            kw.pop(k, None)
    kw.setdefault("G", 1.0)
    kw.setdefault("kappa", 1.0)
    kw["omega_fb"] = values["omega_fb"]
    ratio = float(values["Omega_over_Gamma"])
    try:
        p = SystemParams(**kw)
        p = p.replace(Omega=ratio * p.Gamma)
        if values.get("binding") == "default":
            p = p.with_default_binding()
    except ValueError as exc:
        raise ConfigError("E_RANGE", f"parameters: {exc}") from None
    return RunConfig(
        model=str(values["model"]),
        strategy=str(values["strategy"]),
        omega_fb=float(values["omega_fb"]),
        Omega_over_Gamma=ratio,
        params=p,
        mode=values.get("mode"),  # type: ignore[arg-type]
        values=values,
    )


# ---------------------------------------------------------------------------
# output


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(path: str | None, header: Sequence[str], rows) -> None:
    if path is None:
        return
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# runners; each returns the summary line


def _generator(cfg: RunConfig):
    p, strat = cfg.params, cfg.feedback
    if cfg.model == "effective":
        return analysis.noisy_feedback_me(p, strat)
    if cfg.model == "cavity":
        return build_cavity_me(p, strat)
    return build_full_me(p, strat, str(cfg.get("truncation", "mode")))


def _initial_state(gen) -> NDArray[np.complex128]:
    psi = basis_state(1, 1, 1)
    if gen.dim > psi.size:
        psi = vacuum_product(psi, gen.dim // psi.size)
    return np.outer(psi, psi.conj())


def run_steady(cfg: RunConfig, out: str | None, threads: int) -> str:
    if cfg.model == "full":
        raise ConfigError("E_RANGE", "model=full has no direct steady-state solver; use evolve")
    gen = _generator(cfg)
    rho = steady_state(gen)
    f = state_fidelity(singlet_state(), rho)
    purity = float(np.real(np.trace(rho @ rho)))
    min_eig = float(np.linalg.eigvalsh(rho)[0])
    write_csv(out, ("fidelity", "purity", "min_eigenvalue"), [(f, purity, min_eig)])
    return f"F_ss={_fmt(f)}"


def run_evolve(cfg: RunConfig, out: str | None, threads: int) -> str:
    gen = _generator(cfg)
    t_end = float(cfg.get("t_end", 200.0 / cfg.params.Gamma if cfg.params.Gamma > 0 else 200.0))
    res = evolve(gen, _initial_state(gen), t_end, n_points=int(cfg.get("n_points", 201)))
    rows = zip(res.times, res.fidelities, res.traces, res.purities, res.min_eigenvalues)
    write_csv(out, ("t", "fidelity", "trace", "purity", "min_eigenvalue"), rows)
    return f"F_final={_fmt(res.fidelities[-1])}"


def _axis(cfg: RunConfig, which: str, name: str):
    defaults = {
        "Omega_over_Gamma": (0.0, 2.0),
        "omega_fb": (0.0, math.pi),
        "gamma": (0.0125, 0.1),
        "kappa": (0.0125, 0.1),
        "eta": (0.0, 1.0),
    }
    lo, hi = defaults[name]
    lo = float(cfg.get(f"{which}_min", lo))
    hi = float(cfg.get(f"{which}_max", hi))
    return np.linspace(lo, hi, int(cfg.get(f"{which}_num", 41)))


def run_sweep(cfg: RunConfig, out: str | None, threads: int) -> str:
    if cfg.model != "effective":
        raise ConfigError("E_RANGE", "sweeps run on model=effective")
    x_name = str(cfg.get("x_axis", "omega_fb"))
    y_name = str(cfg.get("y_axis", "Omega_over_Gamma"))
    xs, ys = _axis(cfg, "x", x_name), _axis(cfg, "y", y_name)
    if {x_name, y_name} == {"gamma", "kappa"}:
        grid = analysis.decoherence_contour(
            cfg.params, cfg.strategy,
            xs if x_name == "gamma" else ys, ys if x_name == "gamma" else xs,
            drive_ratio=cfg.Omega_over_Gamma, threads=threads,
        )
        if x_name != "gamma":
            grid = analysis.SweepGrid(x_name, y_name, xs, ys, grid.fidelities.T, grid.failures)
    else:
        grid = analysis.sweep_fidelity_2d(
            cfg.params, cfg.strategy, x_name, y_name, xs, ys,
            mode=str(cfg.get("sweep_mode", "steady")),
            t_final=float(cfg.get("t_final", 1500.0)), threads=threads,
        )
    write_csv(out, ("x", "y", "fidelity"), grid.rows())
    f = grid.fidelities
    if np.all(np.isnan(f)):
        return f"F_min=nan F_max=nan failures={len(grid.failures)}"
    return f"F_min={_fmt(np.nanmin(f))} F_max={_fmt(np.nanmax(f))} failures={len(grid.failures)}"


def run_traj(cfg: RunConfig, out: str | None, threads: int, seed: int | None = None) -> str:
    if cfg.model != "effective":
        raise ConfigError("E_RANGE", "trajectories run on model=effective")
    p = cfg.params
    t_end = float(cfg.get("t_end", 200.0 / p.Gamma))
    seed = int(cfg.get("seed", 0)) if seed is None else seed
    ens = run_trajectories(
        p, cfg.feedback, basis_state(1, 1, 1), t_end, int(cfg.get("n_traj", 1000)), seed,
        n_points=int(cfg.get("n_points", 201)), threads=threads,
    )
    write_csv(out, ("t", "fidelity", "population"), zip(ens.times, ens.mean_fidelity, ens.mean_population))
    return f"F_final={_fmt(ens.mean_fidelity[-1])} mean_jumps={_fmt(np.mean(ens.jump_counts))}"


def run_oracle(cfg: RunConfig, out: str | None, threads: int) -> str:
    check = str(cfg.get("check", "appendix"))
    if check == "appendix":
        lam_a = float(cfg.get("lambda_a", 1.0))
        lam_b = float(cfg.get("lambda_b", lam_a))
        delta = float(cfg.get("delta_big", 100.0 * max(lam_a, lam_b)))
        t_end = float(cfg.get("t_end", 10.0 * delta / max(lam_a * lam_b, 1e-300)))
        full, eff, dev = appendix_oracle(
            lam_a, lam_b, float(cfg.get("gamma1", 0.5)), float(cfg.get("gamma2", 0.5)), delta, t_end,
            n_points=int(cfg.get("n_points", 2001)),
        )
        rows = zip(full.times, full.expectations["P0"], full.expectations["P1"],
                   eff.expectations["P0"], eff.expectations["P1"])
        write_csv(out, ("t", "full_P0", "full_P1", "eff_P0", "eff_P1"), rows)
        return f"max_deviation={_fmt(dev)}"
    p = cfg.params
    t_end = float(cfg.get("t_end", 20.0 / p.Gamma))
    cmp = analysis.compare_cavity_vs_effective(p, cfg.feedback, t_end, n_points=int(cfg.get("n_points", 201)))
    write_csv(out, ("t", "cavity_F", "effective_F"), zip(cmp.times, cmp.full_F, cmp.eff_F))
    return f"F_ss_overlap={_fmt(cmp.steady_overlap)} max_gap={_fmt(cmp.max_gap)}"


# ---------------------------------------------------------------------------
# figure presets


def _preset_texts() -> dict[str, str]:
    base = "model = effective\nOmega_over_Gamma = 0.5\n"
    sweep = "x_axis = omega_fb\ny_axis = Omega_over_Gamma\n"
    return {
        "fig2a": base + "strategy = nonlocal\nomega_fb = 0.3pi\n" + sweep,
        "fig2b": base + "strategy = local\nomega_fb = 0.5pi\n" + sweep,
        "fig2c": base + "strategy = nonlocal\nomega_fb = 0.3pi\nsweep_mode = finite_time\n" + sweep,
        "fig2d": base + "strategy = local\nomega_fb = 0.5pi\nsweep_mode = finite_time\n" + sweep,
        "fig4a": "model = effective\nstrategy = nonlocal\nomega_fb = 0.3pi\nOmega_over_Gamma = 0.5\n"
        "G = 0.1\ndelta_big = 200\nx_axis = gamma\ny_axis = kappa\nx_num = 8\ny_num = 8\n",
        "fig4b": "model = effective\nstrategy = local\nomega_fb = 0.5pi\nOmega_over_Gamma = 0.5\n"
        "G = 0.1\ndelta_big = 200\nx_axis = gamma\ny_axis = kappa\nx_num = 8\ny_num = 8\n",
    }


def run_fig3(out: str | None) -> str:
    """Fidelity from ``|111>`` for the feedback variants of the convergence figure."""
    rho0 = projector(basis_state(1, 1, 1))
    variants = [
        ("nonlocal", 0.3, 1.0), ("nonlocal", 0.3, 0.5),
        ("local", 0.5, 1.0), ("local", 0.3, 1.0), ("local", 0.5, 0.5),
    ]
    times = np.linspace(0.0, 400.0, 401)
    cols, names = [], []
    for kind, w, eta in variants:
        p = SystemParams.effective(0.5, omega_fb=w * math.pi, eta=eta)
        res = evolve(analysis.noisy_feedback_me(p, FeedbackStrategy.from_params(kind, p)), rho0,
                     times=times, method="expm")
        cols.append(res.fidelities)
        names.append(f"{kind}_w{w:g}pi_eta{eta:g}")
    write_csv(out, ("t", *names), zip(times, *cols))
    at200 = cols[0][200]
    return f"F_nonlocal_200={_fmt(at200)}"


# Reduced-scale three-mode runs: G small against the detuned modes, kappa = 5G.
FIG5_G = 0.25
FIG5_DELTAS = (20.0, 50.0)


def run_fig5(out: str | None) -> str:
    """Three-mode model against the eliminated model at two reduced detunings."""
    cols, names, gaps = [], [], []
    G = FIG5_G
    for delta in FIG5_DELTAS:
        p = SystemParams(G=G, kappa=5.0 * G, Omega=0.1 * G, delta_big=delta, omega_fb=0.3 * math.pi, n_max=1)
        cmp = analysis.compare_full_vs_effective(
            p, FeedbackStrategy.from_params("nonlocal", p), 1500.0 / G, n_points=151, truncation="total"
        )
        times = cmp.times
        cols += [cmp.full_F, cmp.eff_F]
        names += [f"full_D{delta:g}", f"eff_D{delta:g}"]
        gaps.append(cmp.max_gap)
    write_csv(out, ("t", *names), zip(G * times, *cols))
    return f"max_gap_D20={_fmt(gaps[0])} max_gap_D50={_fmt(gaps[1])}"


FIGURES = ("fig2a", "fig2b", "fig2c", "fig2d", "fig3", "fig4a", "fig4b", "fig5")


def run_figure(name: str, out: str | None, threads: int) -> str:
    if name == "fig3":
        return run_fig3(out)
    if name == "fig5":
        return run_fig5(out)
    return run_sweep(parse_config(_preset_texts()[name]), out, threads)


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="singlet-feedback", description=__doc__)
    ap.add_argument("command", choices=(*MODES, "figure"))
    ap.add_argument("preset", nargs="?", help="figure preset: " + ", ".join(FIGURES))
    ap.add_argument("--config", help="path to a key = value configuration file")
    ap.add_argument("--out", help="CSV output path")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int)
    return ap


def _dispatch(args) -> str:
    if args.threads < 1:
        raise ConfigError("E_RANGE", f"threads={args.threads} outside [1, inf]")
    if args.command == "figure":
        if args.preset not in FIGURES:
            raise ConfigError("E_RANGE", f"figure preset {args.preset!r} not in {{{', '.join(FIGURES)}}}")
        return run_figure(args.preset, args.out, args.threads)
    if not args.config:
        raise ConfigError("E_PARSE", "--config is required")
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("E_IO", f"{args.config}: {exc.strerror}") from None
    cfg = parse_config(text)
    if cfg.mode is not None and cfg.mode != args.command:
        raise ConfigError("E_RANGE", f"mode={cfg.mode} conflicts with command {args.command}")
    out = args.out if args.out is not None else cfg.get("output")
    if args.command == "traj":
        return run_traj(cfg, out, args.threads, args.seed)
    runner = {"steady": run_steady, "evolve": run_evolve, "sweep": run_sweep, "oracle": run_oracle}
    return runner[args.command](cfg, out, args.threads)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        summary = _dispatch(args)
    except ConfigError as exc:
        print(f"ERROR {exc.code} {exc.detail}", file=sys.stderr)
        return EXIT_CONFIG
    except StiffnessError as exc:
        print(f"ERROR E_STIFF {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DegenerateKernelError as exc:
        print(f"ERROR E_DEGENERATE {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (NoSteadyStateError, NormUnderflowError, np.linalg.LinAlgError) as exc:
        print(f"ERROR E_SOLVER {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
