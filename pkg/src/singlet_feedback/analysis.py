"""Fidelity metrics, parameter sweeps and model comparisons."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .dynamics import EvolutionResult, evolve, partial_trace_keep_first, steady_state
from .model import (
    FeedbackKind,
    FeedbackStrategy,
    Generator,
    SystemParams,
    basis_state,
    build_cavity_me,
    build_feedback_me,
    build_full_me,
    build_spontaneous_channels,
    projector,
    singlet_state,
    vacuum_product,
)
from .opalg import DimensionError, herm_eig

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = logging.getLogger(__name__)

AXES = ("Omega_over_Gamma", "omega_fb", "gamma", "kappa", "eta")


def fidelity(target: NDArray[np.complex128], rho: NDArray[np.complex128]) -> float:
    """``sqrt(<psi|rho|psi>)`` for a pure target, clamped to ``[0, 1]``."""
    psi = np.asarray(target, dtype=np.complex128).reshape(-1)
    rho = np.asarray(rho, dtype=np.complex128)
    if rho.shape != (psi.size, psi.size):
        raise DimensionError(f"target of length {psi.size} does not match rho of shape {rho.shape}")
    overlap = float(np.real(psi.conj() @ rho @ psi))
    if overlap < -1e-12:
        raise ValueError(f"negative target population {overlap:.3e}; rho is not positive")
    return math.sqrt(min(max(overlap, 0.0), 1.0))


def mixed_fidelity(rho: NDArray[np.complex128], sigma: NDArray[np.complex128]) -> float:
    """``tr sqrt(sqrt(rho) sigma sqrt(rho))``; reduces to :func:`fidelity` for a pure ``rho``."""
    rho = np.asarray(rho, dtype=np.complex128)
    sigma = np.asarray(sigma, dtype=np.complex128)
    if rho.shape != sigma.shape:
        raise DimensionError(f"shapes differ: {rho.shape} vs {sigma.shape}")
    w, v = herm_eig(rho)
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T
    m = root @ sigma @ root
    ev = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
    return float(min(np.sum(np.sqrt(np.clip(ev, 0.0, None))), 1.0))


def oscillation_frequency(times: NDArray[np.float64], signal: NDArray[np.float64]) -> float:
    """Angular frequency from the spacing of mean crossings, linearly interpolated."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(signal, dtype=float) - np.mean(signal)
    idx = np.flatnonzero(np.sign(y[:-1]) * np.sign(y[1:]) < 0)
    if idx.size < 3:
        raise ValueError("fewer than three crossings; extend the time window")
    crossings = t[idx] - y[idx] * (t[idx + 1] - t[idx]) / (y[idx + 1] - y[idx])
    half_period = (crossings[-1] - crossings[0]) / (crossings.size - 1)
    return math.pi / half_period


def convergence_time(result: EvolutionResult, threshold: float) -> float:
    """First output time at which the fidelity reaches ``threshold``, else ``inf``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    hits = np.flatnonzero(np.asarray(result.fidelities) >= threshold)
    return float(result.times[hits[0]]) if hits.size else math.inf


@dataclass
class SweepGrid:
    """Fidelities on a rectangular grid; ``fidelities[i, j]`` belongs to ``(x_values[i], y_values[j])``."""

    x_name: str
    y_name: str
    x_values: NDArray[np.float64]
    y_values: NDArray[np.float64]
    fidelities: NDArray[np.float64]
    failures: list[tuple[int, int, str]] = field(default_factory=list)
    extra: dict[str, NDArray[np.float64]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        shape = (len(self.x_values), len(self.y_values))
        if self.fidelities.shape != shape:
            raise DimensionError(f"fidelity matrix {self.fidelities.shape} does not match axes {shape}")

    def rows(self):
        for i, x in enumerate(self.x_values):
            for j, y in enumerate(self.y_values):
                yield float(x), float(y), float(self.fidelities[i, j])


def _point_params(base: SystemParams, values: dict[str, float]) -> SystemParams:
    changes = {k: v for k, v in values.items() if k != "Omega_over_Gamma"}
    p = base.replace(**changes)
    if "Omega_over_Gamma" in values:
        p = p.replace(Omega=values["Omega_over_Gamma"] * p.Gamma)
    return p


def noisy_feedback_me(p: SystemParams, strategy: FeedbackStrategy) -> Generator:
    """Feedback master equation plus the spontaneous channels when ``gamma > 0``."""
    gen = build_feedback_me(p, strategy)
    if p.gamma > 0 or p.gamma_r > 0:
        return Generator(gen.H, list(gen.terms) + build_spontaneous_channels(p))
    return gen


def _map_grid(fn: Callable[[int, int], float], nx: int, ny: int, threads: int):
    """Evaluate ``fn`` on every index pair; failures become NaN plus a log entry."""
    out = np.full((nx, ny), np.nan)
    failures: list[tuple[int, int, str]] = []

    def task(ij):
        i, j = ij
        try:
            return i, j, fn(i, j), None
        except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
            return i, j, math.nan, f"{type(exc).__name__}: {exc}"

    jobs = [(i, j) for i in range(nx) for j in range(ny)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, jobs))
    else:
        results = [task(ij) for ij in jobs]
    for i, j, val, err in results:
        out[i, j] = val
        if err is not None:
            failures.append((i, j, err))
            log.info("grid point (%d, %d) failed: %s", i, j, err)
    return out, failures


def sweep_fidelity_2d(
    base: SystemParams,
    kind: str | FeedbackKind,
    x_axis: str,
    y_axis: str,
    x_values: Sequence[float],
    y_values: Sequence[float],
    mode: str = "steady",
    t_final: float = 1500.0,
    threads: int = 1,
) -> SweepGrid:
    """Steady-state or finite-time fidelity over two parameters.

    Axes are drawn from :data:`AXES`. ``Omega_over_Gamma`` is applied after
    the other axis so that it follows a swept ``kappa``. In ``finite_time``
    mode the state starts in ``|111>`` and ``t_final`` is measured in
    ``1/Gamma``.
    """
    for axis in (x_axis, y_axis):
        if axis not in AXES:
            raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    if x_axis == y_axis:
        raise ValueError("sweep axes must differ")
    if mode not in ("steady", "finite_time"):
        raise ValueError(f"unknown sweep mode {mode!r}")
    xs = np.asarray(x_values, dtype=float)
    ys = np.asarray(y_values, dtype=float)
    if xs.size == 0 or ys.size == 0:
        raise ValueError("sweep grid must be non-empty")
    target = singlet_state()
    rho0 = projector(basis_state(1, 1, 1))

    def point(i: int, j: int) -> float:
        p = _point_params(base, {x_axis: xs[i], y_axis: ys[j]})
        gen = noisy_feedback_me(p, FeedbackStrategy.from_params(kind, p))
        if mode == "steady":
            return fidelity(target, steady_state(gen))
        res = evolve(gen, rho0, t_final / p.Gamma, n_points=2, method="expm")
        return float(res.fidelities[-1])

    fids, failures = _map_grid(point, xs.size, ys.size, threads)
    return SweepGrid(x_axis, y_axis, xs, ys, fids, failures)


def decoherence_contour(
    base: SystemParams,
    kind: str | FeedbackKind,
    gamma_values: Sequence[float],
    kappa_values: Sequence[float],
    drive_ratio: float = 0.5,
    threads: int = 1,
) -> SweepGrid:
    """Steady fidelity with spontaneous emission over ``(gamma, kappa)``.

    At every point the drive is reset to ``Omega = drive_ratio * Gamma`` and
    the raw amplitudes are rebound with :meth:`SystemParams.with_default_binding`.
    The cooperativity ``g^2/(gamma kappa)`` is returned in ``extra["C"]``.
    """
    gs = np.asarray(gamma_values, dtype=float)
    ks = np.asarray(kappa_values, dtype=float)
    if gs.size == 0 or ks.size == 0:
        raise ValueError("sweep grid must be non-empty")
    target = singlet_state()
    coop = np.empty((gs.size, ks.size))

    def params(i: int, j: int) -> SystemParams:
        p = base.replace(gamma=gs[i], kappa=ks[j], lambda_a=None, lambda_b=None,
                         Omega_a=None, Omega_b=None, Omega_c=None)
        p = p.replace(Omega=drive_ratio * p.Gamma)
        return p.with_default_binding()

    def point(i: int, j: int) -> float:
        p = params(i, j)
        return fidelity(target, steady_state(noisy_feedback_me(p, FeedbackStrategy.from_params(kind, p))))

    for i in range(gs.size):
        for j in range(ks.size):
            coop[i, j] = base.g**2 / (gs[i] * ks[j]) if gs[i] > 0 else math.inf
    fids, failures = _map_grid(point, gs.size, ks.size, threads)
    return SweepGrid("gamma", "kappa", gs, ks, fids, failures, extra={"C": coop})


@dataclass
class Comparison:
    times: NDArray[np.float64]
    full_F: NDArray[np.float64]
    eff_F: NDArray[np.float64]
    max_gap: float
    full: EvolutionResult
    effective: EvolutionResult


def compare_full_vs_effective(
    p: SystemParams,
    strategy: FeedbackStrategy,
    t_end: float,
    n_points: int = 151,
    truncation: str = "mode",
    **evolve_kw,
) -> Comparison:
    """Evolve the three-mode model and the eliminated model from ``|111>``.

    The full-model fidelity is taken on the atomic state after tracing out
    the modes. Times are in the units of the parameters (``1/g``).
    """
    full_gen = build_full_me(p, strategy, truncation)
    psi = vacuum_product(basis_state(1, 1, 1), full_gen.mode_dim)
    full = evolve(full_gen, np.outer(psi, psi.conj()), t_end, n_points=n_points, **evolve_kw)
    eff = evolve(noisy_feedback_me(p, strategy), projector(basis_state(1, 1, 1)), t_end, n_points=n_points, **evolve_kw)
    gap = float(np.max(np.abs(full.fidelities - eff.fidelities)))
    return Comparison(full.times, full.fidelities, eff.fidelities, gap, full, eff)


@dataclass
class CavityComparison:
    times: NDArray[np.float64]
    full_F: NDArray[np.float64]
    eff_F: NDArray[np.float64]
    max_gap: float
    steady_overlap: float


def compare_cavity_vs_effective(
    p: SystemParams,
    strategy: FeedbackStrategy,
    t_end: float,
    n_points: int = 201,
) -> CavityComparison:
    """Single-mode cavity model against its eliminated atom-only counterpart.

    ``steady_overlap`` is the fidelity between the reduced atomic steady state
    of the cavity model and the effective steady state. The time series start
    from ``|111>`` (with the cavity empty).
    """
    cav = build_cavity_me(p, strategy)
    eff = build_feedback_me(p, strategy)
    reduced = partial_trace_keep_first(steady_state(cav), eff.dim)
    overlap = mixed_fidelity(steady_state(eff), reduced)
    psi = vacuum_product(basis_state(1, 1, 1), cav.mode_dim)
    r_cav = evolve(cav, np.outer(psi, psi.conj()), t_end, n_points=n_points)
    r_eff = evolve(eff, projector(basis_state(1, 1, 1)), t_end, n_points=n_points)
    gap = float(np.max(np.abs(r_cav.fidelities - r_eff.fidelities)))
    return CavityComparison(r_cav.times, r_cav.fidelities, r_eff.fidelities, gap, overlap)
