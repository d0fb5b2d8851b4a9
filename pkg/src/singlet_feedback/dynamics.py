"""Time evolution, steady states and quantum-jump unfolding."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg
from scipy.optimize import brentq

from .model import (
    FeedbackStrategy,
    Generator,
    LindbladTerm,
    SystemParams,
    collective_ops,
    drive_hamiltonian,
    singlet_state,
)
from .opalg import DEFAULT_KERNEL_TOL, NoSteadyStateError, devectorize, null_space, vectorize

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = logging.getLogger(__name__)

DENSE_LIMIT = 27


class StiffnessError(RuntimeError):
    """The adaptive step size collapsed."""


class DegenerateKernelError(NoSteadyStateError):
    def __init__(self, kernel_dim: int, tol: float):
        super().__init__(f"steady state not unique: kernel dimension {kernel_dim} at tol={tol:g}")
        self.kernel_dim = kernel_dim


@dataclass
class EvolutionResult:
    times: NDArray[np.float64]
    fidelities: NDArray[np.float64]
    traces: NDArray[np.float64]
    purities: NDArray[np.float64]
    min_eigenvalues: NDArray[np.float64]
    final_rho: NDArray[np.complex128]
    expectations: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    n_steps: int = 0


@dataclass
class RelaxationResult:
    rho: NDArray[np.complex128]
    converged: bool
    residual: float
    time: float


@dataclass
class TrajectoryEnsemble:
    times: NDArray[np.float64]
    n_traj: int
    seed: int
    mean_population: NDArray[np.float64]
    jump_counts: NDArray[np.int64]

    @property
    def mean_fidelity(self) -> NDArray[np.float64]:
        """Fidelity of the ensemble-averaged state with the target."""
        return np.sqrt(np.clip(self.mean_population, 0.0, None))


# ---------------------------------------------------------------------------
# helpers


def partial_trace_keep_first(rho: NDArray[np.complex128], d_keep: int) -> NDArray[np.complex128]:
    d = rho.shape[0]
    if d % d_keep:
        raise ValueError(f"cannot split dimension {d} with a leading factor {d_keep}")
    rest = d // d_keep
    return np.einsum("ikjk->ij", rho.reshape(d_keep, rest, d_keep, rest))


def state_fidelity(target: NDArray[np.complex128], rho: NDArray[np.complex128]) -> float:
    """``sqrt(<psi|rho|psi>)``, tracing out trailing factors when ``rho`` is larger."""
    target = np.asarray(target, dtype=np.complex128)
    if rho.shape[0] != target.size:
        rho = partial_trace_keep_first(rho, target.size)
    overlap = float(np.real(target.conj() @ rho @ target))
    if overlap < -1e-12:
        raise ValueError(f"negative overlap {overlap:.3e}: rho is not positive")
    return float(np.sqrt(min(max(overlap, 0.0), 1.0)))


def check_density_matrix(rho: NDArray[np.complex128], tol: float = 1e-10) -> None:
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"density matrix must be square, got {rho.shape}")
    if not np.allclose(rho, rho.conj().T, rtol=0, atol=tol):
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1) > tol:
        raise ValueError(f"density matrix trace {np.trace(rho).real} != 1")
    if np.linalg.eigvalsh(rho)[0] < -tol:
        raise ValueError("density matrix is not positive semidefinite")


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]
# fifth-order minus embedded fourth-order weights, last entry multiplies the FSAL stage
_E = [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]


def _dp5_step(f, y, k1, h):
    ks = [k1]
    for i in range(1, 6):
        yi = y.copy()
        for j, a in enumerate(_A[i]):
            if a:
                yi += (h * a) * ks[j]
        ks.append(f(yi))
    y_new = y.copy()
    for b, k in zip(_B, ks):
        if b:
            y_new += (h * b) * k
    k7 = f(y_new)
    ks.append(k7)
    err = sum((h * e) * k for e, k in zip(_E, ks) if e)
    return y_new, k7, err


class _Sampler:
    def __init__(self, n, target, observables):
        self.target = target
        self.observables = dict(observables or {})
        self.fid = np.full(n, np.nan)
        self.tr = np.empty(n)
        self.pur = np.empty(n)
        self.mineig = np.empty(n)
        self.exp = {k: np.empty(n) for k in self.observables}

    def __call__(self, k, rho):
        self.tr[k] = np.trace(rho).real
        self.pur[k] = np.vdot(rho, rho).real
        self.mineig[k] = np.linalg.eigvalsh(rho)[0]
        if self.target is not None:
            self.fid[k] = state_fidelity(self.target, rho)
        for name, op in self.observables.items():
            self.exp[name][k] = np.real(np.vdot(op.conj().T, rho))

    def result(self, times, rho, n_steps):
        return EvolutionResult(
            times=np.asarray(times, dtype=float),
            fidelities=self.fid if self.target is not None else np.empty(0),
            traces=self.tr,
            purities=self.pur,
            min_eigenvalues=self.mineig,
            final_rho=rho,
            expectations=self.exp,
            n_steps=n_steps,
        )


def _output_grid(t_end: float, n_points: int | None, times: Sequence[float] | None) -> NDArray[np.float64]:
    if times is not None:
        grid = np.asarray(times, dtype=float)
        if grid.ndim != 1 or grid.size < 1 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
            raise ValueError("output times must be increasing and non-negative")
        return grid
    if not t_end > 0:
        raise ValueError("t_end must be > 0")
    return np.linspace(0.0, t_end, n_points or 101)


def evolve(
    generator: Generator,
    rho0: NDArray[np.complex128],
    t_end: float | None = None,
    observables: Mapping[str, NDArray[np.complex128]] | None = None,
    *,
    n_points: int | None = 101,
    times: Sequence[float] | None = None,
    target: NDArray[np.complex128] | None | str = "auto",
    method: str = "rk45",
    rtol: float = 1e-8,
    atol: float = 1e-10,
    max_steps: int | None = None,
    check_input: bool = True,
) -> EvolutionResult:
    """Integrate the master equation and sample observables on a uniform grid.

    ``method="rk45"`` is an adaptive Dormand-Prince 5(4) integrator acting on
    the density matrix through ``generator(rho)``; the state is Hermitized
    after every accepted step. ``method="expm"`` propagates with the exact
    exponential of the dense Liouvillian and is limited to small spaces.

    ``target="auto"`` scores against the three-atom singlet whenever the
    space starts with the 27 atomic levels (on the reduced atomic state for
    composite spaces); ``None`` skips the fidelity.
    """
    rho0 = np.array(rho0, dtype=np.complex128)
    if check_input:
        check_density_matrix(rho0)
    if rho0.shape[0] != generator.dim:
        raise ValueError(f"rho0 has dimension {rho0.shape[0]}, generator {generator.dim}")
    grid = _output_grid(t_end, n_points, times)
    if isinstance(target, str):
        if target == "auto":
            target = "singlet" if generator.dim % 27 == 0 else None
        target = singlet_state() if target == "singlet" else None
    sampler = _Sampler(grid.size, target, observables)

    if method == "expm":
        return _evolve_expm(generator, rho0, grid, sampler)
    if method != "rk45":
        raise ValueError(f"unknown method {method!r}")

    f = generator
    t = 0.0
    rho = rho0
    k = 0
    while k < grid.size and grid[k] <= 0.0:
        sampler(k, rho)
        k += 1
    wmax = generator.max_frequency()
    h = min(0.1 / wmax if wmax > 0 else np.inf, (grid[-1] - t) / 10 if grid[-1] > t else 1.0, 1.0)
    rate = max([np.linalg.norm(tm.op, 2) ** 2 * tm.rate for tm in generator.terms] + [0.0])
    if rate > 0:
        h = min(h, 0.1 / rate)
    k1 = f(rho)
    n_steps = 0
    while k < grid.size:
        t_next = grid[k]
        step = min(h, t_next - t)
        y_new, k7, err = _dp5_step(f, rho, k1, step)
        scale = atol + rtol * np.maximum(np.abs(rho), np.abs(y_new))
        err_norm = np.sqrt(np.mean(np.abs(err / scale) ** 2))
        if err_norm <= 1.0:
            t = t_next if step == t_next - t else t + step
            rho = 0.5 * (y_new + y_new.conj().T)
            k1 = k7
            n_steps += 1
            if t == t_next:
                sampler(k, rho)
                k += 1
            factor = 10.0 if err_norm == 0 else min(10.0, 0.9 * err_norm**-0.2)
            # a step clipped to hit an output time does not shrink the proposal
            h = max(h, step * factor) if step < h else step * factor
        else:
            h = step * max(0.2, 0.9 * err_norm**-0.2)
        underflow = h < 1e-12 * max(1.0, abs(t))
        if underflow or (max_steps is not None and n_steps > max_steps):
            ratio = wmax / generator.min_rate() if generator.min_rate() > 0 else np.inf
            what = f"step size underflow (h={h:.3e})" if underflow else f"exceeded {max_steps} steps"
            raise StiffnessError(f"{what} at t={t:.6g}; max-frequency/min-rate ratio {ratio:.3e}")
    return sampler.result(grid, rho, n_steps)


def _evolve_expm(generator, rho0, grid, sampler):
    d = generator.dim
    if d > DENSE_LIMIT:
        raise ValueError(f"expm propagation is limited to d <= {DENSE_LIMIT}, got {d}")
    L = generator.liouvillian().matrix
    v = vectorize(rho0)
    t = 0.0
    cache: dict[float, NDArray] = {}
    for k, tk in enumerate(grid):
        dt = float(tk - t)
        if dt > 0:
            key = round(dt, 12)
            if key not in cache:
                cache[key] = scipy.linalg.expm(L * dt)
            v = cache[key] @ v
            t = tk
        rho = devectorize(v, d)
        rho = 0.5 * (rho + rho.conj().T)
        sampler(k, rho)
    return sampler.result(grid, rho, len(grid))


# ---------------------------------------------------------------------------
# steady states


def _normalize_state(rho: NDArray[np.complex128]) -> NDArray[np.complex128]:
    rho = 0.5 * (rho + rho.conj().T)
    tr = np.trace(rho).real
    if abs(tr) < 1e-14:
        raise NoSteadyStateError("kernel vector has vanishing trace")
    return rho / tr


def steady_state(generator: Generator, tol: float = DEFAULT_KERNEL_TOL, method: str = "auto") -> NDArray[np.complex128]:
    """Unique fixed point of the generator.

    ``method="dense"`` takes the SVD kernel of the full Liouvillian and
    raises :class:`DegenerateKernelError` unless it is one-dimensional.
    ``method="sparse"`` solves the trace-constrained linear system with a
    sparse LU factorization; it is used automatically above 27 dimensions.
    """
    if method == "auto":
        method = "dense" if generator.dim <= DENSE_LIMIT else "sparse"
    if method == "dense":
        kernel = null_space(generator.liouvillian(), tol)
        if len(kernel) != 1:
            raise DegenerateKernelError(len(kernel), tol)
        return _normalize_state(devectorize(kernel[0], generator.dim))
    if method == "sparse":
        return _steady_state_sparse(generator)
    raise ValueError(f"unknown method {method!r}")


def _steady_state_sparse(generator: Generator) -> NDArray[np.complex128]:
    d = generator.dim
    L = generator.sparse_liouvillian().tolil()
    # the equation for rho_00 is redundant with trace preservation; replace it
    L[0, :] = vectorize(np.eye(d)).reshape(1, -1)
    b = np.zeros(d * d, dtype=np.complex128)
    b[0] = 1.0
    lu = scipy.sparse.linalg.splu(L.tocsc())
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise NoSteadyStateError("sparse steady-state solve failed")
    rho = _normalize_state(devectorize(x, d))
    residual = np.linalg.norm(generator(rho))
    if residual > 1e-6:
        raise DegenerateKernelError(-1, residual)
    return rho


def steady_state_by_evolution(
    generator: Generator,
    t_long: float,
    tol: float = 1e-8,
    rho0: NDArray[np.complex128] | None = None,
    n_chunks: int = 50,
    **evolve_kw,
) -> RelaxationResult:
    """Relax from the maximally mixed state until ``||d rho/dt|| < tol`` or ``t_long``."""
    d = generator.dim
    rho = np.eye(d, dtype=np.complex128) / d if rho0 is None else np.asarray(rho0, dtype=np.complex128)
    chunk = t_long / n_chunks
    t = 0.0
    residual = float(np.linalg.norm(generator(rho)))
    while residual >= tol and t < t_long - 1e-12:
        res = evolve(generator, rho, chunk, n_points=2, target=None, check_input=False, **evolve_kw)
        rho = res.final_rho / np.trace(res.final_rho).real
        t += chunk
        residual = float(np.linalg.norm(generator(rho)))
    return RelaxationResult(rho=rho, converged=residual < tol, residual=residual, time=t)


# ---------------------------------------------------------------------------
# quantum trajectories


class NormUnderflowError(RuntimeError):
    pass


@dataclass
class _JumpModel:
    h_nh: NDArray[np.complex128]
    jump: NDArray[np.complex128]
    kicks: list[tuple[float, NDArray[np.complex128]]]
    eta: float
    vecs: NDArray[np.complex128]
    vals: NDArray[np.complex128]
    vecs_inv: NDArray[np.complex128]


def _jump_model(p: SystemParams, strategy: FeedbackStrategy) -> _JumpModel:
    j1m, j1p, _, _ = collective_ops()
    h_nh = drive_hamiltonian(p.Omega) - 0.5j * p.Gamma * (j1p @ j1m)
    vals, vecs = np.linalg.eig(h_nh)
    vecs_inv = np.linalg.inv(vecs)
    if np.linalg.cond(vecs) > 1e8:
        raise NormUnderflowError("non-Hermitian Hamiltonian is too close to defective")
    return _JumpModel(h_nh, j1m, strategy.kicks(), strategy.eta, vecs, vals, vecs_inv)


def _run_chunk(model: _JumpModel, psi0, target, grid, seed, indices):
    dt_grid = np.diff(grid)
    prop = {round(dt, 12): scipy.linalg.expm(-1j * model.h_nh * dt) for dt in np.unique(dt_grid)}
    n = len(indices)
    rngs = [np.random.default_rng([seed, int(i)]) for i in indices]
    psi = np.repeat(psi0[:, None], n, axis=1)
    thresholds = np.array([r.random() for r in rngs])
    pops = np.zeros((grid.size, n))
    jumps = np.zeros(n, dtype=np.int64)
    pops[0] = np.abs(target.conj() @ psi) ** 2
    weights = np.array([w for w, _ in model.kicks]) if model.kicks else None

    def evolve_free(v, tau):
        return model.vecs @ (np.exp(-1j * model.vals * tau) * (model.vecs_inv @ v))

    for k, dt in enumerate(dt_grid, start=1):
        new = prop[round(dt, 12)] @ psi
        norms = np.einsum("ij,ij->j", new.conj(), new).real
        for j in np.nonzero(norms < thresholds)[0]:
            v, remaining, r = psi[:, j], dt, thresholds[j]
            while True:
                c = model.vecs_inv @ v
                norm_at = lambda tau: np.linalg.norm(model.vecs @ (np.exp(-1j * model.vals * tau) * c)) ** 2 - r
                if norm_at(remaining) >= 0:
                    v = evolve_free(v, remaining)
                    break
                tau = brentq(norm_at, 0.0, remaining, xtol=1e-12, rtol=1e-12)
                v = model.jump @ evolve_free(v, tau)
                nv = np.linalg.norm(v)
                if nv < 1e-300:
                    raise NormUnderflowError(f"jump from a dark state in trajectory {indices[j]}")
                v = v / nv
                jumps[j] += 1
                rng = rngs[j]
                if model.kicks and rng.random() < model.eta:
                    which = 0 if len(model.kicks) == 1 else int(rng.choice(len(model.kicks), p=weights))
                    v = model.kicks[which][1] @ v
                r = rng.random()
                remaining -= tau
            new[:, j] = v
            thresholds[j] = r
        norms = np.einsum("ij,ij->j", new.conj(), new).real
        if np.any(norms < 1e-300):
            raise NormUnderflowError("wavefunction norm underflow")
        # keep the running norm equal to the no-jump survival probability
        psi = new
        pops[k] = np.abs(target.conj() @ psi) ** 2 / norms
    return pops, jumps


def run_trajectories(
    p: SystemParams,
    strategy: FeedbackStrategy,
    psi0: NDArray[np.complex128],
    t_end: float,
    n_traj: int,
    seed: int,
    *,
    n_points: int = 101,
    target: NDArray[np.complex128] | None = None,
    threads: int = 1,
    chunk_size: int = 250,
) -> TrajectoryEnsemble:
    """Monte Carlo wavefunction unfolding of the feedback master equation.

    Each click applies ``J1-`` and, with probability ``eta``, a feedback kick.
    Trajectory ``i`` draws from its own generator seeded by ``(seed, i)``, and
    trajectories are grouped in fixed-size chunks, so the result does not
    depend on ``threads``.
    """
    psi0 = np.asarray(psi0, dtype=np.complex128)
    if psi0.ndim != 1:
        raise ValueError("trajectories start from a pure state vector")
    psi0 = psi0 / np.linalg.norm(psi0)
    target = singlet_state() if target is None else np.asarray(target, dtype=np.complex128)
    grid = np.linspace(0.0, t_end, n_points)
    model = _jump_model(p, strategy)
    chunks = [range(s, min(s + chunk_size, n_traj)) for s in range(0, n_traj, chunk_size)]
    work = lambda idx: _run_chunk(model, psi0, target, grid, seed, idx)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    pops = np.concatenate([pp for pp, _ in parts], axis=1)
    jumps = np.concatenate([j for _, j in parts])
    return TrajectoryEnsemble(grid, n_traj, seed, pops.mean(axis=1), jumps)


# ---------------------------------------------------------------------------
# single-atom elimination check


def _raman_models(lambda_a, lambda_b, gamma1, gamma2, delta_big):
    def op(i, j, n):
        m = np.zeros((n, n), dtype=np.complex128)
        m[i, j] = 1.0
        return m

    e = 2
    H = (
        lambda_a * (op(e, 0, 3) + op(0, e, 3))
        + lambda_b * (op(e, 1, 3) + op(1, e, 3))
        - delta_big * op(e, e, 3)
    )
    full = Generator(H, [LindbladTerm(gamma1, op(0, e, 3)), LindbladTerm(gamma2, op(1, e, 3))])
    bright = np.array([lambda_a, lambda_b], dtype=np.complex128)
    H_eff = np.outer(bright, bright) / delta_big
    eff_terms = [
        LindbladTerm(g / delta_big**2, np.outer(np.eye(2)[j], bright)) for j, g in enumerate((gamma1, gamma2))
    ]
    return full, Generator(H_eff, eff_terms)


def appendix_oracle(
    lambda_a: float,
    lambda_b: float,
    gamma1: float,
    gamma2: float,
    delta_big: float,
    t_end: float,
    n_points: int = 2001,
) -> tuple[EvolutionResult, EvolutionResult, float]:
    """Compare a driven three-level atom with its two-level Raman reduction.

    The full model has levels ``0, 1, e`` with the excited state detuned by
    ``-delta_big``; the reduced model keeps ``0, 1`` with the second-order
    coupling ``lambda_a*lambda_b/delta_big`` and decay channels
    ``|j><0|*lambda_a + |j><1|*lambda_b`` at rate ``gamma_j/delta_big**2``.
    Both start in ``|0>``. Returns the two runs and the largest difference of
    the ground-level populations over the grid.
    """
    if delta_big == 0:
        raise ValueError("delta_big must be nonzero")
    full, eff = _raman_models(lambda_a, lambda_b, gamma1, gamma2, delta_big)
    grid = np.linspace(0.0, t_end, n_points)
    p3 = {"P0": np.diag([1, 0, 0]).astype(complex), "P1": np.diag([0, 1, 0]).astype(complex)}
    p2 = {"P0": np.diag([1, 0]).astype(complex), "P1": np.diag([0, 1]).astype(complex)}
    r_full = evolve(full, np.diag([1, 0, 0]).astype(complex), times=grid, observables=p3, target=None, method="expm")
    r_eff = evolve(eff, np.diag([1, 0]).astype(complex), times=grid, observables=p2, target=None, method="expm")
    dev = max(
        np.max(np.abs(r_full.expectations[k] - r_eff.expectations[k])) for k in ("P0", "P1")
    )
    return r_full, r_eff, float(dev)
