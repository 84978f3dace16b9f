"""SCMA codebooks, MUSA spreading sequences and sequence allocation.

Everything here produces the device signatures that form the columns of the
sensing matrix used by :mod:`gfmud.datagen`.
"""

from __future__ import annotations

import csv
import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "CodeSet",
    "CodeError",
    "ScmaCodebook",
    "MusaSequenceSet",
    "SequenceAllocation",
    "MUSA_ALPHABET",
    "build_mother_constellation",
    "build_factor_graph",
    "validate_factor_graph",
    "rotation_values",
    "assign_phase_rotations",
    "validate_latin",
    "build_scma_codebook",
    "enumerate_musa_space",
    "select_musa_sequences",
    "random_musa_sequences",
    "correlation_matrix",
    "allocate_sequences",
    "collision_probability_mc",
    "birthday_collision_probability",
    "save_codeset",
    "load_codeset",
    "write_codeset_csv",
]


class CodeError(ValueError):
    """Raised when a code construction is infeasible."""


# Lexicographic order on (re, im).
MUSA_ALPHABET = np.array(
    [complex(re, im) for re in (-1, 0, 1) for im in (-1, 0, 1)], dtype=complex
)

_GRAY2 = {0: -3, 1: -1, 3: 1, 2: 3}  # 2-bit Gray label -> PAM level


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass
class CodeSet:
    """Per-device codeword matrices, the common currency of the package.

    ``codewords`` has shape ``(N, K, R)``. MUSA sets use ``R = 1`` and
    ``U = 0``.
    """

    codewords: np.ndarray
    scheme: str = "musa"
    U: int = 0

    @property
    def N(self) -> int:
        return self.codewords.shape[0]

    @property
    def K(self) -> int:
        return self.codewords.shape[1]

    @property
    def R(self) -> int:
        return self.codewords.shape[2]

    def signatures(self, point: int = 0) -> np.ndarray:
        """K x N matrix whose column i is device i's codeword number `point`."""
        return self.codewords[:, :, point].T.copy()

    def sensing_matrix(self, pilots=None, point: int = 0) -> np.ndarray:
        """Columns ``s_i * x_{p,i}``; unit pilots when `pilots` is None."""
        S = self.signatures(point)
        if pilots is None:
            return S
        pilots = np.broadcast_to(np.asarray(pilots, dtype=complex), (self.N,))
        return S * pilots[None, :]


@dataclass
class ScmaCodebook:
    factor_graph: np.ndarray      # K x N binary
    rotated_graph: np.ndarray     # K x N complex
    mother: np.ndarray            # U x R complex
    mappings: np.ndarray          # N x K x U binary (V_i)
    operators: np.ndarray         # N x U x U complex diagonal (Delta_i)
    codewords: np.ndarray         # N x K x R complex (S_i)

    @property
    def U(self) -> int:
        return self.mother.shape[0]

    def to_codeset(self) -> CodeSet:
        return CodeSet(self.codewords.copy(), scheme="scma", U=self.U)

    def recompose(self) -> np.ndarray:
        """Recompute every S_i = V_i Delta_i M_c from the stored parts."""
        return np.einsum("nku,nuv,vr->nkr", self.mappings, self.operators, self.mother)


@dataclass
class MusaSequenceSet:
    raw: np.ndarray               # K x N entries over MUSA_ALPHABET
    rho: float

    @property
    def matrix(self) -> np.ndarray:
        return self.raw / np.linalg.norm(self.raw, axis=0, keepdims=True)

    @property
    def K(self) -> int:
        return self.raw.shape[0]

    @property
    def N(self) -> int:
        return self.raw.shape[1]

    def to_codeset(self) -> CodeSet:
        return CodeSet(self.matrix.T[:, :, None].copy(), scheme="musa", U=0)


@dataclass
class SequenceAllocation:
    high: np.ndarray              # sequence indices for high-activity devices
    low: np.ndarray               # sequence indices for low-activity devices
    nu_high: float
    nu_low: float
    thresholds: tuple[float, float] = (1.0, 1.0)
    pool_correlation: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# SCMA
# ---------------------------------------------------------------------------


def _gray_pam(bits: int, levels: int) -> float:
    if levels == 2:
        return -1.0 if bits == 0 else 1.0
    if levels == 4:
        return float(_GRAY2[bits])
    raise CodeError(f"unsupported PAM size {levels}")


def build_mother_constellation(R: int, U: int) -> np.ndarray:
    """Mother constellation ``M_c`` of shape ``(U, R)``.

    The first dimension is a Gray-labelled square/rectangular lattice from
    Z^2 (QPSK for R=4), scaled to unit average energy. Column ``c`` holds the
    point whose Gray label is ``c``. Dimension ``u`` is the first one rotated
    by ``u * pi / (R * U)``; every second dimension (rows 1, 3, ...) has its
    points reordered by reversing the label order.
    """
    if R not in (4, 8, 16):
        raise CodeError(f"unsupported constellation size R={R}; expected 4, 8 or 16")
    if U < 2:
        raise CodeError(f"need at least 2 dimensions, got U={U}")
    i_levels, q_levels = {4: (2, 2), 8: (4, 2), 16: (4, 4)}[R]
    q_bits = int(math.log2(q_levels))
    base = np.empty(R, dtype=complex)
    for label in range(R):
        base[label] = complex(
            _gray_pam(label >> q_bits, i_levels),
            _gray_pam(label & (q_levels - 1), q_levels),
        )
    base /= np.sqrt(np.mean(np.abs(base) ** 2))

    M = np.empty((U, R), dtype=complex)
    for u in range(U):
        row = base * np.exp(1j * u * np.pi / (R * U))
        M[u] = row[::-1] if u % 2 == 1 else row
    return M


def validate_factor_graph(F, U: int | None = None, require_distinct: bool = True) -> bool:
    """Check the column/row weight structure of a binary factor graph."""
    F = np.asarray(F)
    if F.ndim != 2 or not np.isin(F, (0, 1)).all():
        return False
    K, N = F.shape
    col = F.sum(axis=0)
    row = F.sum(axis=1)
    if U is None:
        U = int(col[0])
    if not (col == U).all():
        return False
    if N * U % K or not (row == N * U // K).all():
        return False
    if require_distinct and len({tuple(c) for c in F.T}) != N:
        return False
    return True


def _balanced_greedy(K: int, N: int, U: int, d_f: int):
    load = np.zeros(K, dtype=int)
    used = set()
    cols = []
    for _ in range(N):
        pick = None
        # least-loaded rows first; ties broken by index
        order = sorted(range(K), key=lambda r: (load[r], r))
        avail = [r for r in order if load[r] < d_f]
        for combo in itertools.combinations(avail, U):
            key = tuple(sorted(combo))
            if key not in used:
                pick = key
                break
        if pick is None:
            return None
        used.add(pick)
        cols.append(pick)
        load[list(pick)] += 1
    return cols


def _balanced_search(K: int, N: int, U: int, d_f: int, budget: int):
    combos = list(itertools.combinations(range(K), U))
    load = [0] * K
    chosen: list[int] = []
    nodes = 0

    def dfs(start: int) -> bool:
        nonlocal nodes
        if len(chosen) == N:
            return True
        # rows must still be fillable by the remaining picks
        need = N - len(chosen)
        if need > len(combos) - start:
            return False
        for idx in range(start, len(combos)):
            nodes += 1
            if nodes > budget:
                raise CodeError(f"factor-graph search exceeded {budget} nodes")
            c = combos[idx]
            if any(load[r] >= d_f for r in c):
                continue
            for r in c:
                load[r] += 1
            chosen.append(idx)
            if dfs(idx + 1):
                return True
            chosen.pop()
            for r in c:
                load[r] -= 1
        return False

    if not dfs(0):
        return None
    return [combos[i] for i in chosen]


def build_factor_graph(K: int, N: int, U: int = 3, budget: int = 10**6) -> np.ndarray:
    """Binary K x N factor graph with column weight U and equal row weights.

    N is a free parameter up to C(K, U); when N equals C(K, U) every
    U-subset of resources is used.
    """
    if K < 1 or N < 1 or U < 1 or U > K:
        raise CodeError(f"invalid dimensions K={K}, N={N}, U={U}")
    if (N * U) % K:
        raise CodeError(f"N*U = {N * U} is not divisible by K = {K}")
    if N > math.comb(K, U):
        raise CodeError(f"N = {N} exceeds C({K},{U}) = {math.comb(K, U)}")
    d_f = N * U // K
    cols = _balanced_greedy(K, N, U, d_f)
    if cols is None:
        cols = _balanced_search(K, N, U, d_f, budget)
    if cols is None:
        raise CodeError(f"no balanced factor graph for K={K}, N={N}, U={U}")
    F = np.zeros((K, N), dtype=np.int8)
    for i, c in enumerate(cols):
        F[list(c), i] = 1
    return F


def rotation_values(R: int, d_f: int) -> np.ndarray:
    """Phase rotations ``exp(j 2 pi (i-1) / (R d_f))`` for i = 1..d_f."""
    return np.exp(1j * 2 * np.pi * np.arange(d_f) / (R * d_f))


def validate_latin(Ft, F=None) -> bool:
    """True if no nonzero value repeats within any row or column of `Ft`."""
    Ft = np.asarray(Ft)
    if F is not None and not np.array_equal(Ft != 0, np.asarray(F) != 0):
        return False
    nz = Ft != 0
    if not np.allclose(np.abs(Ft[nz]), 1.0):
        return False
    keys = np.round(np.angle(Ft) * 1e9).astype(np.int64)
    for vals, mask in ((keys, nz), (keys.T, nz.T)):
        for vec, m in zip(vals, mask):
            if len(np.unique(vec[m])) != m.sum():
                return False
    return True


def assign_phase_rotations(F, R: int, budget: int = 10**6) -> np.ndarray:
    """Replace the ones of `F` with rotations so that each row and column is Latin.

    Row-by-row backtracking over the rotation index placed at every nonzero.
    """
    F = np.asarray(F)
    K, N = F.shape
    d_f = int(F.sum(axis=1).max())
    U = int(F.sum(axis=0).max())
    if d_f < U:
        # a column needs U distinct values out of only d_f
        raise CodeError(f"row weight {d_f} is below column weight {U}; no Latin layout exists")
    rows = [np.flatnonzero(F[k]) for k in range(K)]
    col_used = [set() for _ in range(N)]
    labels = np.full((K, N), -1, dtype=int)
    slots = [(k, c) for k in range(K) for c in rows[k]]
    row_used = [set() for _ in range(K)]
    nodes = 0

    def place(s: int) -> bool:
        nonlocal nodes
        if s == len(slots):
            return True
        k, c = slots[s]
        # cyclic preference keeps the search near a shifted-Latin layout
        start = (k + int(np.searchsorted(rows[k], c))) % d_f
        for off in range(d_f):
            v = (start + off) % d_f
            if v in row_used[k] or v in col_used[c]:
                continue
            nodes += 1
            if nodes > budget:
                raise CodeError(f"Latin assignment search exceeded {budget} nodes")
            row_used[k].add(v)
            col_used[c].add(v)
            labels[k, c] = v
            if place(s + 1):
                return True
            row_used[k].discard(v)
            col_used[c].discard(v)
            labels[k, c] = -1
        return False

    if not place(0):
        raise CodeError("no Latin assignment of phase rotations exists for this graph")
    rot = rotation_values(R, d_f)
    Ft = np.zeros((K, N), dtype=complex)
    nz = labels >= 0
    Ft[nz] = rot[labels[nz]]
    return Ft


def build_scma_codebook(Ft, mother) -> ScmaCodebook:
    """Assemble ``S_i = V_i Delta_i M_c`` for every device."""
    Ft = np.asarray(Ft, dtype=complex)
    mother = np.asarray(mother, dtype=complex)
    K, N = Ft.shape
    U, R = mother.shape
    support = Ft != 0
    weights = support.sum(axis=0)
    if not (weights == U).all():
        raise CodeError(
            f"column weight {sorted(set(weights.tolist()))} does not match "
            f"mother constellation dimension {U}"
        )
    V = np.zeros((N, K, U))
    D = np.zeros((N, U, U), dtype=complex)
    for i in range(N):
        idx = np.flatnonzero(support[:, i])
        V[i, idx, np.arange(U)] = 1.0
        D[i] = np.diag(Ft[idx, i])
    S = np.einsum("nku,nuv,vr->nkr", V, D, mother)
    return ScmaCodebook(
        factor_graph=support.astype(np.int8),
        rotated_graph=Ft,
        mother=mother,
        mappings=V,
        operators=D,
        codewords=S,
    )


# ---------------------------------------------------------------------------
# MUSA
# ---------------------------------------------------------------------------


def enumerate_musa_space(K: int) -> Iterator[tuple]:
    """Yield all 9**K sequences in lexicographic order of the alphabet."""
    if K < 1:
        raise CodeError("code length must be >= 1")
    return itertools.product(tuple(MUSA_ALPHABET), repeat=K)


def correlation_matrix(C) -> np.ndarray:
    """|c_i^H c_j| / (|c_i| |c_j|) for the columns of `C`."""
    C = np.asarray(C, dtype=complex)
    Cn = C / np.linalg.norm(C, axis=0, keepdims=True)
    return np.abs(Cn.conj().T @ Cn)


def _max_offdiag(C) -> float:
    G = correlation_matrix(C)
    if G.shape[0] < 2:
        return 0.0
    np.fill_diagonal(G, 0.0)
    return float(G.max())


def _admissible(idx: np.ndarray, min_nonzero: int) -> np.ndarray:
    # idx: (..., K) alphabet indices; index 4 is the zero element
    return (idx != 4).sum(axis=-1) >= min_nonzero


_EXACT_POOL_LIMIT = 9**6


def select_musa_sequences(
    rho: float,
    N: int,
    seed: int = 0,
    K: int = 4,
    min_nonzero: int = 2,
    max_draws: int = 10**6,
) -> MusaSequenceSet:
    """Greedy random selection of sequences with pairwise correlation <= rho.

    Each step picks a uniformly random candidate among those still compatible
    with everything already chosen and prunes the pool. Small spaces are
    filtered exactly; large ones are sampled by rejection, which draws from
    the same conditional distribution without ever listing the space.
    """
    if not 0 < rho < 1:
        raise CodeError(f"threshold must lie in (0, 1), got {rho}")
    if N < 1:
        raise CodeError("N must be >= 1")
    rng = np.random.default_rng(seed)
    chosen: list[np.ndarray] = []

    if 9**K <= _EXACT_POOL_LIMIT:
        idx = np.array(list(itertools.product(range(9), repeat=K)), dtype=np.int8)
        pool = MUSA_ALPHABET[idx[_admissible(idx, min_nonzero)]]
        pool /= np.linalg.norm(pool, axis=1, keepdims=True)
        raw_pool = MUSA_ALPHABET[idx[_admissible(idx, min_nonzero)]]
        alive = np.arange(len(pool))
        while len(chosen) < N and alive.size:
            pick = alive[rng.integers(alive.size)]
            chosen.append(raw_pool[pick])
            corr = np.abs(pool[alive].conj() @ pool[pick])
            alive = alive[corr <= rho + 1e-12]
        if len(chosen) < N:
            raise CodeError(
                f"candidate pool exhausted after selecting {len(chosen)} of {N} sequences"
            )
    else:
        normed: list[np.ndarray] = []
        draws = 0
        while len(chosen) < N:
            draws += 1
            if draws > max_draws:
                raise CodeError(
                    f"no admissible candidate in {max_draws} draws; "
                    f"selected {len(chosen)} of {N} sequences"
                )
            cand_idx = rng.integers(0, 9, size=K)
            if not _admissible(cand_idx, min_nonzero):
                continue
            cand = MUSA_ALPHABET[cand_idx]
            cn = cand / np.linalg.norm(cand)
            if normed and np.max(np.abs(np.asarray(normed).conj() @ cn)) > rho + 1e-12:
                continue
            chosen.append(cand)
            normed.append(cn)
            draws = 0
    return MusaSequenceSet(raw=np.array(chosen).T, rho=rho)


def random_musa_sequences(K: int, N: int, seed: int = 0, min_nonzero: int = 2) -> MusaSequenceSet:
    """N distinct admissible sequences drawn uniformly, ignoring correlation."""
    rng = np.random.default_rng(seed)
    seen = set()
    out = []
    while len(out) < N:
        idx = rng.integers(0, 9, size=K)
        key = idx.tobytes()
        if key in seen or not _admissible(idx, min_nonzero):
            continue
        seen.add(key)
        out.append(MUSA_ALPHABET[idx])
    return MusaSequenceSet(raw=np.array(out).T, rho=1.0)


# ---------------------------------------------------------------------------
# Allocation protocol and collisions
# ---------------------------------------------------------------------------


def allocate_sequences(
    seqs,
    N_high: int,
    N_low: int,
    thresholds: tuple[float, float] = (1.0, 1.0),
    threshold_mode: str = "cross",
) -> SequenceAllocation:
    """Split the available sequences into high- and low-activity pools.

    The high pool gets the share ``(1/nu_low) / (1/nu_low + 1/nu_high)`` of
    all sequences and is grown greedily from the least mutually correlated
    sequences. `thresholds` caps the within-pool cross-correlation (high,
    low) when ``threshold_mode == "cross"``; with ``"auto"`` it caps the
    normalized self-product instead, which is 1 for every unit sequence and
    therefore only rejects degenerate entries.
    """
    C = seqs.matrix if isinstance(seqs, MusaSequenceSet) else np.asarray(seqs)
    total = C.shape[1]
    if N_high < 1 or N_low < 1:
        raise CodeError("both clusters need at least one device")
    if N_high + N_low > total:
        raise CodeError(f"{N_high + N_low} devices but only {total} sequences")
    N = N_high + N_low
    nu_high, nu_low = N_high / N, N_low / N
    frac_high = (1 / nu_low) / (1 / nu_low + 1 / nu_high)
    n_high = int(round(frac_high * total))
    n_high = min(max(n_high, N_high), total - N_low)

    G = correlation_matrix(C)
    np.fill_diagonal(G, 0.0)
    cap_high, cap_low = thresholds if threshold_mode == "cross" else (1.0, 1.0)

    # seed with the sequence least correlated to everything, then add the
    # candidate whose worst correlation with the pool is smallest
    remaining = list(range(total))
    first = int(np.argmin(G.max(axis=1) + 1e-9 * G.sum(axis=1)))
    high = [first]
    remaining.remove(first)
    while len(high) < n_high:
        worst = G[np.ix_(remaining, high)].max(axis=1)
        j = int(np.argmin(worst))
        if worst[j] > cap_high + 1e-12:
            break
        high.append(remaining.pop(j))
    low = [r for r in remaining]
    if cap_low < 1.0:
        kept = []
        for r in low:
            if not kept or G[r, kept].max() <= cap_low + 1e-12:
                kept.append(r)
        low = kept
    if len(high) < N_high or len(low) < N_low:
        raise CodeError("thresholds leave too few sequences for one of the pools")

    def pool_max(p):
        return float(G[np.ix_(p, p)].max()) if len(p) > 1 else 0.0

    return SequenceAllocation(
        high=np.array(sorted(high)),
        low=np.array(sorted(low)),
        nu_high=nu_high,
        nu_low=nu_low,
        thresholds=(cap_high, cap_low),
        pool_correlation={"high": pool_max(high), "low": pool_max(low)},
    )


def birthday_collision_probability(n_active: int, n_sequences: int) -> float:
    """P(some pair among n uniform picks from M sequences coincides)."""
    p = 1.0
    for k in range(n_active):
        p *= (n_sequences - k) / n_sequences
    return 1.0 - p


def collision_probability_mc(
    n_sequences: int,
    n_high: int,
    n_low: int,
    trials: int = 10**5,
    seed: int = 0,
    allocation: SequenceAllocation | None = None,
) -> tuple[float, float]:
    """Monte-Carlo estimate of P(two active devices share a sequence).

    Without `allocation` every active device picks uniformly from all
    sequences. With an allocation, high-activity devices pick from the high
    pool and low-activity devices from the low pool; the pools are disjoint.

    Returns ``(estimate, standard_error)``.
    """
    if trials < 10**4:
        raise ValueError("at least 10**4 trials are required")
    rng = np.random.default_rng(seed)
    if allocation is None:
        picks = rng.integers(0, n_sequences, size=(trials, n_high + n_low))
    else:
        ph = rng.integers(0, len(allocation.high), size=(trials, n_high))
        pl = rng.integers(0, len(allocation.low), size=(trials, n_low))
        picks = np.concatenate(
            [allocation.high[ph], allocation.low[pl]], axis=1
        ) if n_high and n_low else (allocation.high[ph] if n_high else allocation.low[pl])
    if picks.shape[1] < 2:
        return 0.0, 0.0
    s = np.sort(picks, axis=1)
    hit = (np.diff(s, axis=1) == 0).any(axis=1)
    p = float(hit.mean())
    return p, math.sqrt(p * (1 - p) / trials)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_CS_MAGIC = b"NMCS"
_CS_VERSION = 1
_CS_HEADER = struct.Struct("<4sIIIII")


def save_codeset(codeset: CodeSet, path) -> None:
    """Binary container: header then f64 (re, im) pairs, each S_i column-major."""
    arr = np.asarray(codeset.codewords, dtype=np.complex128)
    N, K, R = arr.shape
    # (N, K, R) -> per device, column-major = iterate R then K
    payload = np.ascontiguousarray(arr.transpose(0, 2, 1)).astype("<c16").tobytes()
    with open(path, "wb") as fh:
        fh.write(_CS_HEADER.pack(_CS_MAGIC, _CS_VERSION, K, N, R, codeset.U))
        fh.write(payload)


def load_codeset(path) -> CodeSet:
    data = Path(path).read_bytes()
    if len(data) < _CS_HEADER.size:
        raise CodeError("code-set file truncated")
    magic, version, K, N, R, U = _CS_HEADER.unpack_from(data)
    if magic != _CS_MAGIC:
        raise CodeError("not a code-set file (bad magic)")
    if version != _CS_VERSION:
        raise CodeError(f"unsupported code-set version {version}")
    body = data[_CS_HEADER.size:]
    if len(body) != N * K * R * 16:
        raise CodeError("code-set file truncated")
    arr = np.frombuffer(body, dtype="<c16").reshape(N, R, K).transpose(0, 2, 1)
    return CodeSet(arr.astype(np.complex128), scheme="scma" if U else "musa", U=U)


def write_codeset_csv(codeset: CodeSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device", "row", "col", "re", "im"])
        for i, S in enumerate(codeset.codewords):
            for c in range(S.shape[1]):
                for r in range(S.shape[0]):
                    v = S[r, c]
                    w.writerow([i, r, c, repr(float(v.real)), repr(float(v.imag))])
