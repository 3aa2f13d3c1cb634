"""Grid topology, normalized/scaled Laplacians and Chebyshev filter banks.

The topology is a weighted, symmetric, zero-diagonal adjacency matrix W
(entries are admittance magnitudes in practice).  Graph convolutions operate
on Chebyshev polynomials of the scaled Laplacian, so the only spectral
quantity ever computed is the maximal eigenvalue of L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import AsymmetricTopology, DuplicateEdge, IsolatedNode, StgcnError

_LAMBDA_TOL = 1e-6


@dataclass(frozen=True)
class Topology:
    """Symmetric weighted grid graph over n buses."""

    n: int
    W: sparse.csr_matrix = field(repr=False)

    @classmethod
    def from_edges(cls, n, edges):
        """Build from an iterable of (i, j, w) with 0-based bus indices."""
        rows, cols, vals = [], [], []
        seen = set()
        for i, j, w in edges:
            i, j, w = int(i), int(j), float(w)
            if i == j:
                raise StgcnError(f"self-loop on bus {i} not allowed")
            if not (0 <= i < n and 0 <= j < n):
                raise StgcnError(f"edge ({i},{j}) out of range for n={n}")
            if w < 0:
                raise StgcnError(f"negative weight on edge ({i},{j})")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise DuplicateEdge(f"edge ({i},{j}) listed more than once")
            seen.add(key)
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
        W = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
        return cls.from_matrix(W)

    @classmethod
    def from_matrix(cls, W):
        """Build from a dense or sparse symmetric weight matrix."""
        W = sparse.csr_matrix(W, dtype=np.float64)
        n = W.shape[0]
        if W.shape[0] != W.shape[1]:
            raise StgcnError("topology matrix must be square")
        if (W != W.T).nnz != 0:
            raise AsymmetricTopology("W[i,j] != W[j,i]")
        if W.diagonal().any():
            raise StgcnError("topology diagonal must be zero")
        if W.nnz and W.data.min() < 0:
            raise StgcnError("topology weights must be nonnegative")
        W.eliminate_zeros()
        deg = np.asarray(W.sum(axis=1)).ravel()
        zero = np.flatnonzero(deg == 0)
        if zero.size:
            raise IsolatedNode(int(zero[0]))
        W.sort_indices()
        return cls(n=n, W=W)

    @classmethod
    def from_admittance(cls, Y):
        """Derive weights as |Y_ij| off-diagonal, diagonal zeroed."""
        A = np.abs(np.asarray(Y))
        np.fill_diagonal(A, 0.0)
        return cls.from_matrix(A)

    @property
    def degrees(self):
        return np.asarray(self.W.sum(axis=1)).ravel()

    def edges(self):
        """Upper-triangle edge list [(i, j, w)] with i < j."""
        coo = sparse.triu(self.W, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[k]), int(coo.col[k]), float(coo.data[k])) for k in order]

    def dense(self):
        return self.W.toarray()


@dataclass(frozen=True)
class ScaledLaplacian:
    """Normalized Laplacian L, its top eigenvalue and the rescaled L_tilde."""

    L: sparse.csr_matrix = field(repr=False)
    lambda_max: float = 2.0
    L_tilde: sparse.csr_matrix = field(repr=False, default=None)

    @property
    def n(self):
        return self.L.shape[0]


@dataclass(frozen=True)
class ChebFilterBank:
    """Chebyshev polynomials [T_0(L_tilde), ..., T_K(L_tilde)], kept sparse."""

    order: int
    matrices: tuple

    @property
    def n(self):
        return self.matrices[0].shape[0]


def _power_iteration_lambda_max(L, n):
    """Largest eigenvalue of the (PSD) normalized Laplacian.

    The start vector is constant so the estimate is invariant under node
    permutations.  For regular graphs the constant vector lies in the kernel
    of L and the analytic bound 2.0 is returned instead.  The converged
    Rayleigh quotient approaches lambda_max from below, so it is inflated by
    a residual-scaled margin (and clamped at 2.0) to keep the rescaled
    spectrum inside [-1, 1].
    """
    v = np.full(n, 1.0 / np.sqrt(n))
    lam_prev = None
    max_iter = 10 * n
    for _ in range(max_iter):
        w = L @ v
        norm_w = float(np.linalg.norm(w))
        if norm_w < 1e-12:
            return 2.0
        lam = float(v @ w)
        if lam_prev is not None and abs(lam - lam_prev) <= _LAMBDA_TOL * abs(lam):
            residual = float(np.linalg.norm(w - lam * v))
            margin = max(2.0 * _LAMBDA_TOL, 4.0 * residual / max(lam, 1e-12))
            return min(2.0, lam * (1.0 + margin))
        lam_prev = lam
        v = w / norm_w
    return 2.0


def build_laplacian(topology: Topology) -> ScaledLaplacian:
    """L = I - D^{-1/2} W D^{-1/2}, plus lambda_max and L_tilde = 2L/lambda_max - I."""
    n = topology.n
    deg = topology.degrees
    zero = np.flatnonzero(deg == 0)
    if zero.size:
        raise IsolatedNode(int(zero[0]))
    d_inv_sqrt = sparse.diags(1.0 / np.sqrt(deg), format="csr")
    eye = sparse.identity(n, format="csr", dtype=np.float64)
    L = (eye - d_inv_sqrt @ topology.W @ d_inv_sqrt).tocsr()
    lam = _power_iteration_lambda_max(L, n)
    L_tilde = ((2.0 / lam) * L - eye).tocsr()
    L.sort_indices()
    L_tilde.sort_indices()
    return ScaledLaplacian(L=L, lambda_max=lam, L_tilde=L_tilde)


def build_cheb_bank(lap: ScaledLaplacian, K: int) -> ChebFilterBank:
    """T_0 = I, T_1 = L_tilde, T_i = 2 L_tilde T_{i-1} - T_{i-2}."""
    if K < 0:
        raise StgcnError("Chebyshev order K must be >= 0")
    n = lap.n
    mats = [sparse.identity(n, format="csr", dtype=np.float64)]
    if K >= 1:
        mats.append(lap.L_tilde.copy())
    for _ in range(2, K + 1):
        t = (2.0 * (lap.L_tilde @ mats[-1]) - mats[-2]).tocsr()
        t.eliminate_zeros()
        mats.append(t)
    for m in mats:
        m.sort_indices()
    return ChebFilterBank(order=K, matrices=tuple(mats))


def khop_pattern(topology: Topology, i: int) -> np.ndarray:
    """Boolean reachability-within-i-hops matrix; diagonal always true."""
    if i < 0:
        raise StgcnError("hop count must be >= 0")
    adj = (topology.dense() != 0) | np.eye(topology.n, dtype=bool)
    reach = np.eye(topology.n, dtype=bool)
    for _ in range(i):
        reach = (reach.astype(np.int64) @ adj.astype(np.int64)) > 0
    return reach


# ---------------------------------------------------------------------------
# edge-list file format: first line "n <count>", then one "i j w" per edge.
# ---------------------------------------------------------------------------

def save_topology(topology: Topology, path):
    lines = [f"n {topology.n}"]
    for i, j, w in topology.edges():
        lines.append(f"{i} {j} {w!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_topology(path) -> Topology:
    with open(path, "r", encoding="ascii") as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw:
        raise StgcnError(f"empty topology file: {path}")
    head = raw[0].split()
    if len(head) != 2 or head[0] != "n":
        raise StgcnError(f"topology file must start with 'n <count>', got {raw[0]!r}")
    n = int(head[1])
    edges = []
    for ln in raw[1:]:
        parts = ln.split()
        if len(parts) != 3:
            raise StgcnError(f"bad edge line {ln!r}")
        edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return Topology.from_edges(n, edges)


# ---------------------------------------------------------------------------
# topology generators
# ---------------------------------------------------------------------------

def make_ring(n, chords=0, seed=0):
    """Ring of n buses with optional random chord edges."""
    if n < 3:
        raise StgcnError("ring needs n >= 3")
    edges = [(i, (i + 1) % n, 1.0) for i in range(n)]
    taken = {(min(i, j), max(i, j)) for i, j, _ in edges}
    rng = np.random.default_rng(seed)
    added = 0
    while added < chords:
        i, j = int(rng.integers(0, n)), int(rng.integers(0, n))
        key = (min(i, j), max(i, j))
        if i == j or key in taken:
            continue
        taken.add(key)
        edges.append((key[0], key[1], 1.0))
        added += 1
    return Topology.from_edges(n, edges)


def make_random_tree(n, seed=0):
    """Random attachment tree with weights drawn uniform in [0.5, 1.5]."""
    if n < 2:
        raise StgcnError("tree needs n >= 2")
    rng = np.random.default_rng(seed)
    edges = []
    for i in range(1, n):
        parent = int(rng.integers(0, i))
        edges.append((parent, i, float(rng.uniform(0.5, 1.5))))
    return Topology.from_edges(n, edges)


def make_grid(rows, cols):
    """Unit-weight lattice of rows x cols buses."""
    if rows * cols < 2:
        raise StgcnError("grid needs at least 2 buses")
    def idx(r, c):
        return r * cols + c
    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((idx(r, c), idx(r, c + 1), 1.0))
            if r + 1 < rows:
                edges.append((idx(r, c), idx(r + 1, c), 1.0))
    return Topology.from_edges(rows * cols, edges)


def make_random_connected(n, extra_edges=0, seed=0):
    """Random tree plus extra non-duplicate edges; always connected."""
    rng = np.random.default_rng(seed)
    edges = []
    taken = set()
    for i in range(1, n):
        parent = int(rng.integers(0, i))
        edges.append((parent, i, float(rng.uniform(0.5, 1.5))))
        taken.add((parent, i))
    added = 0
    attempts = 0
    while added < extra_edges and attempts < 100 * (extra_edges + 1):
        attempts += 1
        i, j = int(rng.integers(0, n)), int(rng.integers(0, n))
        key = (min(i, j), max(i, j))
        if i == j or key in taken:
            continue
        taken.add(key)
        edges.append((key[0], key[1], float(rng.uniform(0.5, 1.5))))
        added += 1
    return Topology.from_edges(n, edges)


GENERATORS = {
    "ring": lambda n, seed: make_ring(n, chords=max(1, n // 4), seed=seed),
    "random-tree": lambda n, seed: make_random_tree(n, seed=seed),
    "grid": lambda n, seed: _square_grid(n),
}


def _square_grid(n):
    rows = int(np.floor(np.sqrt(n)))
    rows = max(rows, 1)
    cols = int(np.ceil(n / rows))
    topo = make_grid(rows, cols)
    if topo.n != n:
        raise StgcnError(f"grid generator needs n = rows*cols; nearest is {topo.n}")
    return topo
