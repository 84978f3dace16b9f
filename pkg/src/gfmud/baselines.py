"""Greedy sparse-recovery detectors used as reference points."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = ["RecoveryResult", "stomp", "ls_bomp", "exhaustive_support", "mutual_coherence"]


@dataclass
class RecoveryResult:
    support: np.ndarray
    residual_norm: float
    iterations: int
    trace: list = field(default_factory=list)
    coefficients: np.ndarray | None = None
    rank_deficient: bool = False

    def indicator(self, N: int) -> np.ndarray:
        out = np.zeros(N, dtype=np.uint8)
        out[self.support] = 1
        return out


def _lstsq(A, y):
    """Least squares; falls back to the pseudo-inverse and flags rank loss."""
    if A.shape[1] == 0:
        return np.zeros(0, dtype=complex), False
    rank = np.linalg.matrix_rank(A)
    if rank < A.shape[1]:
        return np.linalg.pinv(A) @ y, True
    return np.linalg.lstsq(A, y, rcond=None)[0], False


def stomp(y, Phi, stages: int = 10, t: float = 2.0, n_known: int | None = None,
          tol: float = 1e-9) -> RecoveryResult:
    """Stagewise OMP.

    Each stage admits every column whose normalised matched-filter output
    ``|phi_i^H r| / |phi_i|`` exceeds ``t * |r| / sqrt(K)``, then re-fits by
    least squares. If no column clears the threshold while the residual is
    still above ``tol * |y|`` the single strongest column is admitted. With
    `n_known` the final support is cut to the `n_known` largest coefficients
    and re-fitted.
    """
    y = np.asarray(y, dtype=complex)
    Phi = np.asarray(Phi, dtype=complex)
    K, N = Phi.shape
    norms = np.linalg.norm(Phi, axis=0)
    if np.any(norms == 0):
        raise ValueError("sensing matrix has an all-zero column")
    y_norm = float(np.linalg.norm(y))
    support = np.zeros(N, dtype=bool)
    r = y.copy()
    coef = np.zeros(0, dtype=complex)
    trace = [y_norm]
    deficient = False
    it = 0
    if y_norm == 0:
        return RecoveryResult(np.array([], dtype=int), 0.0, 0, trace, coef)
    for it in range(1, stages + 1):
        rn = float(np.linalg.norm(r))
        if rn <= tol * y_norm:
            it -= 1
            break
        stat = np.abs(Phi.conj().T @ r) / norms
        stat[support] = -np.inf
        new = stat > t * rn / np.sqrt(K)
        if not new.any():
            new = np.zeros(N, dtype=bool)
            new[int(np.argmax(stat))] = True
        if not (new & ~support).any():
            break
        support |= new
        coef, flag = _lstsq(Phi[:, support], y)
        deficient |= flag
        r = y - Phi[:, support] @ coef
        trace.append(float(np.linalg.norm(r)))
        if support.all():
            break
    idx = np.flatnonzero(support)
    if n_known is not None and len(idx) > n_known:
        keep = np.sort(idx[np.argsort(-np.abs(coef), kind="stable")[:n_known]])
        idx = keep
        coef, flag = _lstsq(Phi[:, idx], y)
        deficient |= flag
        r = y - Phi[:, idx] @ coef
    return RecoveryResult(idx, float(np.linalg.norm(r)), it, trace, coef, deficient)


def ls_bomp(y, Phi, n: int, block_size: int = 1) -> RecoveryResult:
    """Least-squares block OMP with known sparsity.

    Columns are grouped into consecutive blocks of `block_size`. Each step adds
    the block whose inclusion yields the smallest least-squares residual, so
    exactly `n` blocks are selected.
    """
    y = np.asarray(y, dtype=complex)
    Phi = np.asarray(Phi, dtype=complex)
    K, N = Phi.shape
    if n < 1:
        raise ValueError("sparsity must be >= 1")
    if N % block_size:
        raise ValueError("block size must divide the number of columns")
    n_blocks = N // block_size
    n = min(n, n_blocks)
    chosen: list[int] = []
    trace = [float(np.linalg.norm(y))]
    deficient = False
    coef = np.zeros(0, dtype=complex)
    r = y.copy()
    for _ in range(n):
        cols = [c for b in chosen for c in range(b * block_size, (b + 1) * block_size)]
        if block_size == 1:
            # orthogonalise candidates against the current support
            if cols:
                Q, _ = np.linalg.qr(Phi[:, cols])
                Pc = Phi - Q @ (Q.conj().T @ Phi)
            else:
                Pc = Phi
            energy = np.sum(np.abs(Pc) ** 2, axis=0)
            gain = np.where(energy > 1e-12 * np.max(energy), np.abs(Pc.conj().T @ r) ** 2 /
                            np.maximum(energy, 1e-300), -np.inf)
            gain[chosen] = -np.inf
            best = int(np.argmax(gain))
        else:
            best, best_res = -1, np.inf
            for b in range(n_blocks):
                if b in chosen:
                    continue
                trial = cols + list(range(b * block_size, (b + 1) * block_size))
                c, _ = _lstsq(Phi[:, trial], y)
                res = np.linalg.norm(y - Phi[:, trial] @ c)
                if res < best_res - 1e-12:
                    best, best_res = b, res
        chosen.append(best)
        cols = [c for b in chosen for c in range(b * block_size, (b + 1) * block_size)]
        coef, flag = _lstsq(Phi[:, cols], y)
        deficient |= flag
        r = y - Phi[:, cols] @ coef
        trace.append(float(np.linalg.norm(r)))
    support = np.array(sorted(cols), dtype=int)
    order = np.argsort(cols)
    return RecoveryResult(support, trace[-1], len(chosen), trace, coef[order], deficient)


def exhaustive_support(y, Phi, n: int) -> np.ndarray:
    """Minimum-residual n-subset by brute force over all C(N, n) supports."""
    y = np.asarray(y, dtype=complex)
    Phi = np.asarray(Phi, dtype=complex)
    best, best_res = None, np.inf
    for S in itertools.combinations(range(Phi.shape[1]), n):
        A = Phi[:, S]
        c = np.linalg.lstsq(A, y, rcond=None)[0]
        res = np.linalg.norm(y - A @ c)
        if res < best_res:
            best, best_res = S, res
    return np.array(best, dtype=int)


def mutual_coherence(Phi) -> float:
    Phi = np.asarray(Phi, dtype=complex)
    G = Phi / np.linalg.norm(Phi, axis=0, keepdims=True)
    C = np.abs(G.conj().T @ G)
    np.fill_diagonal(C, 0.0)
    return float(C.max())
