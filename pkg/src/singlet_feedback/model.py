"""Physical operators and master-equation generators for three driven qutrits.

Atom levels are ordered ``0, 1, 2``; a three-atom basis state ``|abc>`` has
index ``9a + 3b + c`` (atom 1 slowest). Composite spaces put the atoms first,
followed by the bosonic modes ``c1, c2, c3``.

All rates and frequencies are in units of the atom-cavity coupling ``g``.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .opalg import LindbladTerm, SuperOp, embed, liouvillian_matrix

if TYPE_CHECKING:
    from numpy.typing import NDArray

N_ATOMS = 3
LEVELS = 3
ATOM_DIM = LEVELS**N_ATOMS
SQRT2 = np.sqrt(2.0)


def transition(i: int, j: int, levels: int = LEVELS) -> NDArray[np.complex128]:
    """Single-atom ``|i><j|``."""
    m = np.zeros((levels, levels), dtype=np.complex128)
    m[i, j] = 1.0
    return m


def atom_op(op: NDArray[np.complex128], atom: int) -> NDArray[np.complex128]:
    """Embed a 3x3 operator on ``atom`` (0-based) of the three-atom space."""
    return embed(op, atom, [LEVELS] * N_ATOMS)


def basis_state(*levels: int) -> NDArray[np.complex128]:
    psi = np.zeros(ATOM_DIM, dtype=np.complex128)
    a, b, c = levels
    psi[9 * a + 3 * b + c] = 1.0
    return psi


def singlet_state() -> NDArray[np.complex128]:
    """The totally antisymmetric three-qutrit state."""
    psi = np.zeros(ATOM_DIM, dtype=np.complex128)
    for perm in itertools.permutations(range(3)):
        # sign of the permutation from its inversion count
        inversions = sum(perm[i] > perm[j] for i in range(3) for j in range(i + 1, 3))
        psi += (-1) ** inversions * basis_state(*perm)
    return psi / np.sqrt(6.0)


def projector(psi: NDArray[np.complex128]) -> NDArray[np.complex128]:
    return np.outer(psi, psi.conj())


def collective_ops() -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """``(J1-, J1+, J2-, J2+)`` with ``J1- = sum_i |1><0|_i`` and ``J2- = sum_i |1><2|_i``."""
    j1m = sum(atom_op(transition(1, 0), i) for i in range(N_ATOMS))
    j2m = sum(atom_op(transition(1, 2), i) for i in range(N_ATOMS))
    return j1m, j1m.conj().T.copy(), j2m, j2m.conj().T.copy()


# ---------------------------------------------------------------------------
# parameters and strategies


@dataclass(frozen=True)
class SystemParams:
    """Physical parameters in units of ``g``.

    ``G`` is the effective atom-mode coupling and ``Omega`` the effective
    drive; the collective damping rate ``Gamma = G**2 / kappa`` is derived.
    The raw drive amplitudes are only needed for spontaneous emission and,
    when given, must reproduce ``G`` and ``Omega``.
    """

    g: float = 1.0
    delta_big: float = 200.0
    J: float | None = None
    G: float = 0.1
    Omega: float = 0.0
    kappa: float = 1.0
    gamma: float = 0.0
    gamma_prime: float | None = None
    omega_fb: float = 0.0
    eta: float = 1.0
    n_max: int = 1
    lambda_a: float | None = None
    lambda_b: float | None = None
    Omega_a: float | None = None
    Omega_b: float | None = None
    Omega_c: float | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("g", "delta_big", "G", "Omega", "kappa", "gamma", "omega_fb", "eta"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        for name in ("g", "G", "Omega", "kappa", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.gamma_prime is not None and not (np.isfinite(self.gamma_prime) and self.gamma_prime >= 0):
            raise ValueError(f"gamma_prime must be finite and >= 0, got {self.gamma_prime}")
        if self.J is not None and not np.isfinite(self.J):
            raise ValueError(f"J must be finite, got {self.J}")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be an integer >= 1, got {self.n_max}")
        if self.has_raw_amplitudes:
            if self.delta_big == 0:
                raise ValueError("raw drive amplitudes require a nonzero detuning")
            checks = {
                "G = g*Omega_a/delta": (self.g * self.Omega_a / self.delta_big, self.G),
                "Omega = Omega_b*Omega_c/delta": (self.Omega_b * self.Omega_c / self.delta_big, self.Omega),
                "Omega = lambda_a*lambda_b/delta": (self.lambda_a * self.lambda_b / self.delta_big, self.Omega),
            }
            for label, (derived, stored) in checks.items():
                if not np.isclose(derived, stored, rtol=1e-9, atol=1e-12):
                    raise ValueError(f"drive binding violated: {label} gives {derived}, stored {stored}")

    @property
    def has_raw_amplitudes(self) -> bool:
        raw = (self.lambda_a, self.lambda_b, self.Omega_a, self.Omega_b, self.Omega_c)
        if all(v is None for v in raw):
            return False
        if any(v is None for v in raw):
            raise ValueError("either all or none of the raw drive amplitudes must be given")
        return True

    @property
    def Gamma(self) -> float:
        return self.G**2 / self.kappa

    @property
    def hopping(self) -> float:
        return self.delta_big / SQRT2 if self.J is None else self.J

    @property
    def gamma_r(self) -> float:
        return self.gamma if self.gamma_prime is None else self.gamma_prime

    @property
    def cooperativity(self) -> float:
        return self.g**2 / (self.gamma * self.kappa) if self.gamma > 0 else np.inf

    def replace(self, **changes) -> SystemParams:
        return replace(self, **changes)

    @classmethod
    def effective(cls, Omega_over_Gamma: float, **kw) -> SystemParams:
        """Parameters for the atom-only model with time measured in ``1/Gamma``."""
        kw.setdefault("G", 1.0)
        kw.setdefault("kappa", 1.0)
        gamma_c = kw["G"] ** 2 / kw["kappa"]
        return cls(Omega=Omega_over_Gamma * gamma_c, **kw)

    def with_default_binding(self, Omega_a: float | None = None) -> SystemParams:
        """Attach raw amplitudes consistent with the current ``G`` and ``Omega``.

        ``Omega_a`` follows from ``G = g*Omega_a/delta``; the Raman pairs are
        chosen symmetric, ``lambda_a = lambda_b = Omega_b = Omega_c = sqrt(Omega*delta)``.
        """
        if self.delta_big <= 0:
            raise ValueError("default binding needs delta_big > 0")
        oa = self.G * self.delta_big / self.g if Omega_a is None else Omega_a
        if not np.isclose(self.g * oa / self.delta_big, self.G):
            raise ValueError("Omega_a inconsistent with G")
        s = float(np.sqrt(self.Omega * self.delta_big))
        return replace(self, Omega_a=oa, Omega_b=s, Omega_c=s, lambda_a=s, lambda_b=s)


class FeedbackKind(str, enum.Enum):
    NONE = "none"
    NONLOCAL = "nonlocal"
    LOCAL = "local"


@dataclass(frozen=True)
class FeedbackStrategy:
    """Which unitary kick follows a detector click.

    ``NONLOCAL`` rotates atoms 1 and 2 together; ``LOCAL`` rotates one atom
    chosen uniformly at random.
    """

    kind: FeedbackKind = FeedbackKind.NONE
    omega_fb: float = 0.0
    eta: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", FeedbackKind(self.kind))
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")

    @classmethod
    def from_params(cls, kind: str | FeedbackKind, p: SystemParams) -> FeedbackStrategy:
        return cls(FeedbackKind(kind), p.omega_fb, p.eta)

    def kicks(self) -> list[tuple[float, NDArray[np.complex128]]]:
        """``(probability, unitary)`` pairs applied after a registered click."""
        if self.kind is FeedbackKind.NONE:
            return []
        if self.kind is FeedbackKind.NONLOCAL:
            return [(1.0, feedback_unitary_nonlocal(self.omega_fb))]
        return [(1.0 / N_ATOMS, u) for u in feedback_unitaries_local(self.omega_fb)]


def _qutrit_x_rotation(angle: float) -> NDArray[np.complex128]:
    """``exp(-i*angle*(|1><0| + |0><1|))``; identity on level 2."""
    u = np.eye(LEVELS, dtype=np.complex128)
    u[:2, :2] = [[np.cos(angle), -1j * np.sin(angle)], [-1j * np.sin(angle), np.cos(angle)]]
    return u


def feedback_unitary_nonlocal(omega_fb: float) -> NDArray[np.complex128]:
    """Kick of angle ``omega_fb`` on atom 1 and ``2*omega_fb`` on atom 2."""
    # the two single-atom generators commute, so the exponential factorizes
    return np.kron(np.kron(_qutrit_x_rotation(omega_fb), _qutrit_x_rotation(2 * omega_fb)), np.eye(LEVELS))


def feedback_unitaries_local(omega_fb: float) -> list[NDArray[np.complex128]]:
    r = _qutrit_x_rotation(omega_fb)
    return [atom_op(r, i) for i in range(N_ATOMS)]


# ---------------------------------------------------------------------------
# generators


@dataclass
class Generator:
    """Lindblad generator ``rho -> -i[H, rho] + sum_k rate_k D[op_k] rho``."""

    H: NDArray[np.complex128]
    terms: list[LindbladTerm] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.H = np.asarray(self.H, dtype=np.complex128)
        d = self.H.shape[0]
        if self.H.shape != (d, d):
            raise ValueError(f"Hamiltonian must be square, got {self.H.shape}")
        for t in self.terms:
            if t.op.shape != (d, d):
                raise ValueError(f"jump operator shape {t.op.shape} does not match d={d}")
        self._cache = None

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def _prepared(self):
        if self._cache is None:
            active = [t for t in self.terms if t.rate > 0]
            d = self.dim
            h_eff = self.H.copy()
            for t in active:
                h_eff -= 0.5j * t.rate * (t.op.conj().T @ t.op)
            if active:
                a = np.concatenate([np.sqrt(t.rate) * t.op for t in active], axis=0)
                stacked_dag = np.concatenate([np.sqrt(t.rate) * t.op.conj().T for t in active], axis=0)
            else:
                a = stacked_dag = None
            self._cache = (-1j * h_eff, a, stacked_dag, len(active), d)
        return self._cache

    def __call__(self, rho: NDArray[np.complex128]) -> NDArray[np.complex128]:
        """Time derivative for a Hermitian ``rho`` by direct sandwich products."""
        m_eff, a, stacked_dag, k, d = self._prepared()
        x = m_eff @ rho
        out = x + x.conj().T
        if k:
            y = a @ rho  # (K*d, d): rows of every rate_k^1/2 op_k @ rho
            # sum_k Y_k @ A_k^dag as one product of (d, K*d) and (K*d, d)
            y_wide = y.reshape(k, d, d).transpose(1, 0, 2).reshape(d, k * d)
            out += y_wide @ stacked_dag
        return out

    def liouvillian(self) -> SuperOp:
        return liouvillian_matrix(self.H, self.terms)

    def sparse_liouvillian(self):
        """The same superoperator assembled in ``scipy.sparse`` CSR form."""
        import scipy.sparse as sp

        d = self.dim
        eye = sp.identity(d, dtype=np.complex128, format="csr")
        h = sp.csr_matrix(self.H)
        L = -1j * (sp.kron(eye, h) - sp.kron(h.T, eye))
        for t in self.terms:
            if t.rate == 0:
                continue
            c = sp.csr_matrix(t.op)
            cdc = (c.conj().T @ c).tocsr()
            L = L + t.rate * (sp.kron(c.conj(), c) - 0.5 * sp.kron(eye, cdc) - 0.5 * sp.kron(cdc.T, eye))
        return L.tocsc()

    def max_frequency(self) -> float:
        w = np.linalg.eigvalsh(0.5 * (self.H + self.H.conj().T))
        return float(w[-1] - w[0])

    def min_rate(self) -> float:
        rates = [t.rate for t in self.terms if t.rate > 0]
        return min(rates) if rates else 0.0


def drive_hamiltonian(Omega: float) -> NDArray[np.complex128]:
    j1m, j1p, j2m, j2p = collective_ops()
    return Omega * (j1p + j1m + j2p + j2m)


def _dressed_terms(
    rate: float,
    op: NDArray[np.complex128],
    strategy: FeedbackStrategy,
    lift=lambda u: u,
) -> list[LindbladTerm]:
    """Split a monitored channel into kicked (detected) and bare (missed) parts."""
    if rate == 0:
        return []
    kicks = strategy.kicks()
    if not kicks:
        return [LindbladTerm(rate, op)]
    terms = [LindbladTerm(strategy.eta * rate * w, lift(u) @ op) for w, u in kicks if strategy.eta > 0]
    if strategy.eta < 1:
        terms.append(LindbladTerm((1 - strategy.eta) * rate, op))
    return terms


def build_effective_me(p: SystemParams) -> Generator:
    """Drive plus collective decay ``Gamma*D[J1-]`` on the 27-dim atom space."""
    if p.kappa == 0:
        raise ValueError("kappa must be nonzero")
    j1m = collective_ops()[0]
    terms = [LindbladTerm(p.Gamma, j1m)] if p.Gamma > 0 else []
    return Generator(drive_hamiltonian(p.Omega), terms)


def build_feedback_me(p: SystemParams, strategy: FeedbackStrategy) -> Generator:
    """Collective decay whose detected part is followed by a feedback kick."""
    if not isinstance(strategy, FeedbackStrategy):
        raise TypeError(f"invalid strategy {strategy!r}")
    j1m = collective_ops()[0]
    return Generator(drive_hamiltonian(p.Omega), _dressed_terms(p.Gamma, j1m, strategy))


def build_spontaneous_channels(p: SystemParams) -> list[LindbladTerm]:
    """Effective spontaneous emission left after eliminating the excited levels.

    Per atom: two channels from the ``lambda`` Raman pair, two from the
    ``Omega_a`` coupling and two from the ``Omega_b, Omega_c`` pair, assuming
    branching ratios of one half. Atom 2 carries ``Omega_a/sqrt(2)`` so that
    all three atoms see the same effective coupling to ``c3``.
    """
    return [LindbladTerm(rate, atom_op(op, i)) for rate, i, op in _spontaneous_local(p)]


def _spontaneous_local(p: SystemParams) -> list[tuple[float, int, NDArray[np.complex128]]]:
    if p.gamma == 0 and p.gamma_r == 0:
        return []
    if p.delta_big == 0:
        raise ValueError("spontaneous channels need a nonzero detuning")
    if not p.has_raw_amplitudes:
        raise ValueError("spontaneous channels need the raw drive amplitudes")
    ket = np.eye(LEVELS, dtype=np.complex128)
    scale_e = p.gamma / (2 * p.delta_big**2)
    scale_r = p.gamma_r / (2 * p.delta_big**2)
    out = []
    for i in range(N_ATOMS):
        oa = p.Omega_a / SQRT2 if i == 1 else p.Omega_a
        bra_lambda = p.lambda_a * ket[0] + p.lambda_b * ket[1]
        bra_r = p.Omega_b * ket[1] + p.Omega_c * ket[2]
        local = [
            (scale_e, np.outer(ket[0], bra_lambda)),
            (scale_e, np.outer(ket[1], bra_lambda)),
            (scale_e, oa * transition(0, 0)),
            (scale_e, oa * transition(1, 0)),
            (scale_r, np.outer(ket[1], bra_r)),
            (scale_r, np.outer(ket[2], bra_r)),
        ]
        out += [(rate, i, op) for rate, op in local if rate > 0]
    return out


# ---------------------------------------------------------------------------
# bosonic modes


def mode_basis(n_max: int, n_modes: int = 3, truncation: str = "mode") -> list[tuple[int, ...]]:
    """Occupation tuples of the truncated mode space.

    ``truncation="mode"`` allows up to ``n_max`` photons in every mode,
    ``"total"`` up to ``n_max`` photons summed over all modes.
    """
    states = list(itertools.product(range(n_max + 1), repeat=n_modes))
    if truncation == "total":
        states = [s for s in states if sum(s) <= n_max]
    elif truncation != "mode":
        raise ValueError(f"unknown truncation {truncation!r}")
    return states


def mode_annihilators(basis: Sequence[tuple[int, ...]]) -> list[NDArray[np.complex128]]:
    index = {s: k for k, s in enumerate(basis)}
    n_modes = len(basis[0])
    ops = []
    for m in range(n_modes):
        a = np.zeros((len(basis), len(basis)), dtype=np.complex128)
        for k, s in enumerate(basis):
            if s[m] == 0:
                continue
            lower = s[:m] + (s[m] - 1,) + s[m + 1 :]
            if lower in index:
                a[index[lower], k] = np.sqrt(s[m])
        ops.append(a)
    return ops


def physical_modes(c1, c2, c3):
    """Cavity modes ``(a, b, c)`` recovered from the normal modes."""
    a = c1 / SQRT2 + (c2 + c3) / 2
    b = (c3 - c2) / SQRT2
    c = -c1 / SQRT2 + (c2 + c3) / 2
    return a, b, c


def _lift_atoms(op: NDArray[np.complex128], mode_dim: int) -> NDArray[np.complex128]:
    return np.kron(op, np.eye(mode_dim, dtype=np.complex128))


def _lift_modes(op: NDArray[np.complex128]) -> NDArray[np.complex128]:
    return np.kron(np.eye(ATOM_DIM, dtype=np.complex128), op)


class FactorizedGenerator(Generator):
    """Generator on ``atoms (x) modes`` whose jump operators are ``V (x) x``.

    Jumps sharing the atomic factor ``V`` are summed as a superoperator on the
    mode indices first, so each group costs two ``atom_dim``-sized
    contractions instead of two full matrix products.
    """

    def __init__(self, H, jumps, atom_dim: int, mode_dim: int):
        self.atom_dim, self.mode_dim = int(atom_dim), int(mode_dim)
        eye_a = np.eye(self.atom_dim, dtype=np.complex128)
        eye_m = np.eye(self.mode_dim, dtype=np.complex128)
        self.jumps = [(float(r), V, x) for r, V, x in jumps if r > 0]
        terms = [
            LindbladTerm(r, np.kron(eye_a if V is None else V, eye_m if x is None else x))
            for r, V, x in self.jumps
        ]
        super().__init__(H, terms)
        m_eff = self.H.copy()
        for t in self.terms:
            m_eff -= 0.5j * t.rate * (t.op.conj().T @ t.op)
        self._m_eff = -1j * m_eff
        self._groups = self._group_jumps()

    def _group_jumps(self):
        groups: list[tuple[NDArray | None, NDArray | None]] = []
        keys: list[NDArray | None] = []
        supers: list[NDArray | None] = []
        for r, V, x in self.jumps:
            for k, key in enumerate(keys):
                if (key is None and V is None) or (key is not None and V is not None and np.array_equal(key, V)):
                    break
            else:
                keys.append(V)
                supers.append(None)
                k = len(keys) - 1
            if x is None:
                s_mode = r * np.eye(self.mode_dim**2, dtype=np.complex128)
            else:
                s_mode = r * np.kron(x, x.conj())
            supers[k] = s_mode if supers[k] is None else supers[k] + s_mode
        for V, s_mode in zip(keys, supers):
            identity = np.allclose(s_mode, s_mode[0, 0] * np.eye(self.mode_dim**2), atol=0)
            groups.append((V, s_mode[0, 0].real if identity else s_mode.T.copy()))
        return groups

    def _atom_left(self, V, y):
        a = self.atom_dim
        return (V @ y.reshape(a, -1)).reshape(y.shape)

    def __call__(self, rho):
        x = self._m_eff @ rho
        out = x + x.conj().T
        a, m = self.atom_dim, self.mode_dim
        for V, s_mode in self._groups:
            if np.isscalar(s_mode):
                y = s_mode * rho
            else:
                y = rho.reshape(a, m, a, m).transpose(0, 2, 1, 3).reshape(a * a, m * m) @ s_mode
                y = y.reshape(a, a, m, m).transpose(0, 2, 1, 3).reshape(rho.shape)
            if V is not None:
                y = self._atom_left(V, y)
                y = self._atom_left(V, y.conj().T).conj().T
            out += y
        return out


def _kick_jumps(rate, x, strategy: FeedbackStrategy):
    """``(rate, atom factor, mode factor)`` triples of a monitored mode channel."""
    if rate == 0:
        return []
    kicks = strategy.kicks()
    if not kicks:
        return [(rate, None, x)]
    out = [(strategy.eta * rate * w, u, x) for w, u in kicks if strategy.eta > 0]
    if strategy.eta < 1:
        out.append(((1 - strategy.eta) * rate, None, x))
    return out


def build_cavity_me(p: SystemParams, strategy: FeedbackStrategy) -> FactorizedGenerator:
    """Atoms coupled to the single resonant mode ``c3`` which leaks at rate ``kappa``."""
    n = p.n_max + 1
    c = mode_annihilators(mode_basis(p.n_max, 1))[0]
    j1m, j1p, _, _ = collective_ops()
    H = _lift_atoms(drive_hamiltonian(p.Omega), n) + 0.5 * p.G * (np.kron(j1p, c) + np.kron(j1m, c.conj().T))
    return FactorizedGenerator(H, _kick_jumps(p.kappa, c, strategy), ATOM_DIM, n)


def build_full_me(p: SystemParams, strategy: FeedbackStrategy, truncation: str = "mode") -> FactorizedGenerator:
    """Atoms coupled to all three normal modes, each cavity monitored separately.

    The frame keeps ``c3`` resonant; ``c1`` and ``c2`` carry the
    frequencies ``-sqrt(2) J`` and ``-2 sqrt(2) J``.
    """
    if p.n_max < 1:
        raise ValueError("n_max must be >= 1")
    basis = mode_basis(p.n_max, 3, truncation)
    m = len(basis)
    c1, c2, c3 = mode_annihilators(basis)
    H = _lift_atoms(drive_hamiltonian(p.Omega), m)
    for i, mode in enumerate([c3 + c2 + SQRT2 * c1, c3 - c2, c3 + c2 - SQRT2 * c1]):
        x = np.kron(atom_op(transition(0, 1), i), mode)
        H += 0.5 * p.G * (x + x.conj().T)
    J = p.hopping
    H += _lift_modes(-SQRT2 * J * (c1.conj().T @ c1) - 2 * SQRT2 * J * (c2.conj().T @ c2))
    jumps = []
    for x in physical_modes(c1, c2, c3):
        jumps += _kick_jumps(p.kappa, x, strategy)
    jumps += [(t.rate, t.op, None) for t in build_spontaneous_channels(p)]
    return FactorizedGenerator(H, jumps, ATOM_DIM, m)


def vacuum_product(psi_atoms: NDArray[np.complex128], mode_dim: int) -> NDArray[np.complex128]:
    """``|psi> (x) |vacuum>`` with the vacuum as the first mode basis state."""
    vac = np.zeros(mode_dim, dtype=np.complex128)
    vac[0] = 1.0
    return np.kron(psi_atoms, vac)
