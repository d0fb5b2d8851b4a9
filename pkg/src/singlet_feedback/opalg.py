"""Dense complex linear algebra for operators, density matrices and superoperators.

Matrices are plain ``numpy`` arrays of dtype ``complex128``. Vectorization
stacks columns, so that ``vec(A @ rho @ B) == kron(B.T, A) @ vec(rho)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

DEFAULT_KERNEL_TOL = 1e-9


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class NoSteadyStateError(RuntimeError):
    """The Liouvillian kernel is empty at the requested tolerance."""


@dataclass(frozen=True)
class LindbladTerm:
    """A dissipative channel ``rate * D[op]``."""

    rate: float
    op: NDArray[np.complex128]

    def __post_init__(self) -> None:
        if not np.isfinite(self.rate) or self.rate < 0:
            raise ValueError(f"Lindblad rate must be finite and >= 0, got {self.rate}")
        object.__setattr__(self, "op", as_matrix(self.op))


@dataclass(frozen=True)
class SuperOp:
    """A d^2 x d^2 matrix acting on column-stacked density matrices."""

    dim: int
    matrix: NDArray[np.complex128]

    def __post_init__(self) -> None:
        if self.matrix.shape != (self.dim**2, self.dim**2):
            raise DimensionError(
                f"superoperator for d={self.dim} must be {self.dim**2}x{self.dim**2}, "
                f"got {self.matrix.shape}"
            )

    def apply(self, rho: NDArray[np.complex128]) -> NDArray[np.complex128]:
        return devectorize(self.matrix @ vectorize(rho), self.dim)


def as_matrix(a: ArrayLike) -> NDArray[np.complex128]:
    m = np.asarray(a, dtype=np.complex128)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def _square(a: ArrayLike, name: str = "matrix") -> NDArray[np.complex128]:
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got {m.shape}")
    return m


def _same_dim(*mats: NDArray[np.complex128]) -> int:
    dims = {m.shape[0] for m in mats}
    if len(dims) != 1:
        raise DimensionError(f"dimension mismatch: {sorted(dims)}")
    return dims.pop()


def kron(a: ArrayLike, b: ArrayLike) -> NDArray[np.complex128]:
    return np.kron(as_matrix(a), as_matrix(b))


def kron_all(mats: Iterable[ArrayLike]) -> NDArray[np.complex128]:
    return reduce(kron, mats)


def embed(op: ArrayLike, site: int, dims: Sequence[int]) -> NDArray[np.complex128]:
    """Place a single-site operator on ``site`` of a tensor product space."""
    op = _square(op, "site operator")
    if op.shape[0] != dims[site]:
        raise DimensionError(f"site {site} has dimension {dims[site]}, operator {op.shape}")
    factors = [np.eye(d, dtype=np.complex128) for d in dims]
    factors[site] = op
    return kron_all(factors)


def dag(a: ArrayLike) -> NDArray[np.complex128]:
    return as_matrix(a).conj().T


def commutator(h: ArrayLike, rho: ArrayLike) -> NDArray[np.complex128]:
    h, rho = _square(h), _square(rho)
    _same_dim(h, rho)
    return h @ rho - rho @ h


def dissipator(c: ArrayLike, rho: ArrayLike) -> NDArray[np.complex128]:
    """``c rho c^dag - (c^dag c rho + rho c^dag c) / 2``."""
    c, rho = _square(c), _square(rho)
    _same_dim(c, rho)
    cd = c.conj().T
    cdc = cd @ c
    return c @ rho @ cd - 0.5 * (cdc @ rho + rho @ cdc)


def vectorize(rho: ArrayLike) -> NDArray[np.complex128]:
    return as_matrix(rho).reshape(-1, order="F")


def devectorize(v: ArrayLike, d: int) -> NDArray[np.complex128]:
    v = np.asarray(v, dtype=np.complex128).reshape(-1)
    if v.size != d * d:
        raise DimensionError(f"vector of length {v.size} cannot be reshaped to {d}x{d}")
    return v.reshape((d, d), order="F")


def spre(a: NDArray[np.complex128]) -> NDArray[np.complex128]:
    """Superoperator of ``rho -> a @ rho``."""
    return np.kron(np.eye(a.shape[0], dtype=np.complex128), a)


def spost(b: NDArray[np.complex128]) -> NDArray[np.complex128]:
    """Superoperator of ``rho -> rho @ b``."""
    return np.kron(b.T, np.eye(b.shape[0], dtype=np.complex128))


def liouvillian_matrix(h: ArrayLike, terms: Sequence[LindbladTerm] = ()) -> SuperOp:
    """Dense matrix of ``rho -> -i[h, rho] + sum_k rate_k D[op_k] rho``."""
    h = _square(h, "Hamiltonian")
    d = _same_dim(h, *(_square(t.op, "jump operator") for t in terms))
    eye = np.eye(d, dtype=np.complex128)
    L = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    for t in terms:
        if t.rate == 0:
            continue
        c = t.op
        cdc = c.conj().T @ c
        L += t.rate * (
            np.kron(c.conj(), c) - 0.5 * np.kron(eye, cdc) - 0.5 * np.kron(cdc.T, eye)
        )
    return SuperOp(d, L)


def trace_row(d: int) -> NDArray[np.complex128]:
    """Row vector ``vec(I)^T``; its product with ``vec(rho)`` is ``tr(rho)``."""
    return vectorize(np.eye(d, dtype=np.complex128))


def null_space(L: SuperOp | ArrayLike, tol: float = DEFAULT_KERNEL_TOL) -> list[NDArray[np.complex128]]:
    """Orthonormal basis of the kernel of ``L`` from its singular value decomposition.

    Right singular vectors with singular value below ``tol`` span the kernel.
    Raises :class:`NoSteadyStateError` when there are none.
    """
    m = L.matrix if isinstance(L, SuperOp) else _square(L)
    _, s, vh = np.linalg.svd(m)
    kernel = [vh[k].conj() for k in range(len(s)) if s[k] < tol]
    if not kernel:
        raise NoSteadyStateError(
            f"kernel dimension 0 at tol={tol:g} (smallest singular value {s[-1]:.3e})"
        )
    return kernel


def herm_eig(a: ArrayLike, atol: float = 1e-10) -> tuple[NDArray[np.float64], NDArray[np.complex128]]:
    """Ascending eigenvalues and column eigenvectors of a Hermitian matrix."""
    a = _square(a)
    if not np.allclose(a, a.conj().T, rtol=0, atol=atol):
        raise ValueError("matrix is not Hermitian within tolerance")
    w, v = np.linalg.eigh(0.5 * (a + a.conj().T))
    return w, v

