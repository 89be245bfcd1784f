"""
Order-M jets of nonlinear maps on the flattened (q, slot) space.
A jet stores w(z) = c + L z + B(z, z) + C(z, z, z) with dense symmetric kernels.
"""

from typing import Optional

import numpy as np

from utils.config import JET_DENSE_ENTRY_CAP, MAX_JET_ORDER
from utils.number_format import humanize_count
from .errors import TruncationError
from .logger import Logger
from .mode_space import Truncation

logger = Logger().get_logger()


def check_dense_size(trunc: Truncation, order: int) -> None:
    """Raise before allocating a kernel of order ``order`` above the dense cap."""
    if order > MAX_JET_ORDER:
        raise TruncationError(f"jet order {order} not supported (max {MAX_JET_ORDER})")
    entries = trunc.size ** (order + 1)
    if entries > JET_DENSE_ENTRY_CAP:
        raise TruncationError(
            f"order-{order} kernel needs {humanize_count(entries)} entries "
            f"(cap {humanize_count(JET_DENSE_ENTRY_CAP)}); lower Q or Kmax",
            {"entries": entries, "cap": JET_DENSE_ENTRY_CAP})


class JetFunctional:
    """
    Truncated Taylor expansion of a map on the normal space about z = 0.

    Args:
        trunc: Truncation the flattened indices refer to
        order: Highest stored order M (1, 2 or 3)
        c: Constant term, shape (N,)
        L: Linear kernel, shape (N, N)
        B: Quadratic kernel, shape (N, N, N), symmetric in the last two indices
        C: Cubic kernel, shape (N, N, N, N), symmetric in the last three
    """

    def __init__(self, trunc: Truncation, order: int, c: np.ndarray, L: np.ndarray,
                 B: Optional[np.ndarray] = None, C: Optional[np.ndarray] = None) -> None:
        if order < 1 or order > MAX_JET_ORDER:
            raise TruncationError(f"jet order {order} not supported (max {MAX_JET_ORDER})")
        self.trunc = trunc
        self.order = order
        n = trunc.size
        self.c = np.asarray(c, dtype=complex).reshape(n)
        self.L = np.asarray(L, dtype=complex).reshape(n, n)
        self.B = None if order < 2 else (np.zeros((n, n, n), dtype=complex) if B is None
                                          else np.asarray(B, dtype=complex))
        self.C = None if order < 3 else (np.zeros((n, n, n, n), dtype=complex) if C is None
                                          else np.asarray(C, dtype=complex))

    @classmethod
    def zeros(cls, trunc: Truncation, order: int) -> "JetFunctional":
        for m in range(2, order + 1):
            check_dense_size(trunc, m)
        n = trunc.size
        return cls(trunc, order, np.zeros(n), np.zeros((n, n)))

    def copy(self) -> "JetFunctional":
        return JetFunctional(self.trunc, self.order, self.c.copy(), self.L.copy(),
                             None if self.B is None else self.B.copy(),
                             None if self.C is None else self.C.copy())

    def scaled(self, factor: complex) -> "JetFunctional":
        return JetFunctional(self.trunc, self.order, self.c * factor, self.L * factor,
                             None if self.B is None else self.B * factor,
                             None if self.C is None else self.C * factor)

    def is_zero(self) -> bool:
        parts = [self.c, self.L] + [k for k in (self.B, self.C) if k is not None]
        return not any(np.any(part) for part in parts)

    def quadratic(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.B is None:
            return np.zeros(self.trunc.size, dtype=complex)
        return np.einsum("ijk,j,k->i", self.B, x, y)

    def cubic(self, x: np.ndarray, y: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.C is None:
            return np.zeros(self.trunc.size, dtype=complex)
        return np.einsum("ijkl,j,k,l->i", self.C, x, y, v)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        return self.c + self.L @ z + self.quadratic(z, z) + self.cubic(z, z, z)

    def derivative(self, z: np.ndarray) -> np.ndarray:
        """Dw(z) as a dense (N, N) matrix."""
        z = np.asarray(z, dtype=complex)
        out = self.L.copy()
        if self.B is not None:
            out += 2.0 * np.einsum("ijk,j->ik", self.B, z)
        if self.C is not None:
            out += 3.0 * np.einsum("ijkl,j,k->il", self.C, z, z)
        return out

    def recentred(self, z0: np.ndarray) -> "JetFunctional":
        """The jet of z -> w(z0 + z), exact for polynomial jets."""
        z0 = np.asarray(z0, dtype=complex)
        c = self(z0)
        L = self.derivative(z0)
        B = None if self.B is None else self.B.copy()
        if self.C is not None:
            B = B + 3.0 * np.einsum("ijkl,j->ikl", self.C, z0)
        return JetFunctional(self.trunc, self.order, c, L, B,
                             None if self.C is None else self.C.copy())

    # Symmetries inherited from reality of the equation. Index n_q - 1 - i is -q.

    def _flip(self) -> np.ndarray:
        n_q, n_z = self.trunc.n_q, self.trunc.n_z
        return (np.arange(n_q)[::-1][:, None] * n_z + np.arange(n_z)[None, :]).reshape(-1)

    def reality_defect(self) -> float:
        """Relative max |L(-q, -q') - conj L(q, q')|."""
        flip = self._flip()
        scale = max(np.max(np.abs(self.L), initial=0.0), 1e-300)
        return float(np.max(np.abs(self.L[np.ix_(flip, flip)] - np.conj(self.L)), initial=0.0) / scale)

    def transpose_defect(self) -> float:
        """Relative max |L(q, q')^{ab} - L(-q', -q)^{ba}|."""
        flip = self._flip()
        scale = max(np.max(np.abs(self.L), initial=0.0), 1e-300)
        return float(np.max(np.abs(self.L - self.L[np.ix_(flip, flip)].T), initial=0.0) / scale)

    def diagonal_blocks(self) -> np.ndarray:
        """sigma(q, q): the n_z x n_z diagonal-in-q blocks of L, shape (n_q, n_z, n_z)."""
        n_q, n_z = self.trunc.n_q, self.trunc.n_z
        shaped = self.L.reshape(n_q, n_z, n_q, n_z)
        idx = np.arange(n_q)
        return shaped[idx, :, idx, :]

    def subtract_diagonal(self, blocks: np.ndarray) -> "JetFunctional":
        """w(z) - A z for a q-diagonal A given by its blocks."""
        out = self.copy()
        n_q, n_z = self.trunc.n_q, self.trunc.n_z
        shaped = out.L.reshape(n_q, n_z, n_q, n_z)
        idx = np.arange(n_q)
        shaped[idx, :, idx, :] -= blocks
        out.L = shaped.reshape(n_q * n_z, n_q * n_z)
        return out

    def max_abs(self) -> float:
        parts = [self.c, self.L] + [k for k in (self.B, self.C) if k is not None]
        return float(max(np.max(np.abs(p), initial=0.0) for p in parts))
