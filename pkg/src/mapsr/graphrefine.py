"""Affinity graph over segments and score propagation.

Edge weights combine feature agreement and spatial proximity::

    A_ij = max(0, z_i . z_j) ** gamma * exp(-sigma * |x_i - x_j| ** q)

with edges drawn from exact kNN in the joint space ``[z, x]``. Scores are
smoothed by solving ``(I - alpha * A_hat) Y = (1 - alpha) Y0`` where
``A_hat = D^-1/2 A D^-1/2``, either directly or by the contraction
``Y <- alpha * A_hat @ Y + (1 - alpha) * Y0``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .classify import INACTIVE_SCORE
from .superpixel import SuperpixelPartition
from .tensorio import LabelMap, PathLike

SOLVERS = ("fixed_point", "direct")
# factorize below this size, conjugate gradients above
_DIRECT_LU_MAX_NODES = 4000


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class GraphConfig:
    k: int = 100
    gamma: float = 1.0
    sigma: float = 1.0
    spatial_exponent: float = 2.0
    alpha: float = 0.5
    tol: float = 1e-6
    max_prop_iters: int = 1000
    solver: str = "fixed_point"

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.gamma <= 0 or self.sigma <= 0 or self.spatial_exponent <= 0:
            raise ValueError("gamma, sigma and spatial_exponent must be > 0")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if self.tol <= 0 or self.max_prop_iters < 1:
            raise ValueError("tol must be > 0 and max_prop_iters >= 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")

    @property
    def lam(self) -> float:
        return self.alpha / (1.0 - self.alpha)


@dataclass
class AffinityGraph:
    weights: sp.csr_matrix
    degrees: np.ndarray
    normalized: sp.csr_matrix
    k_used: int = 0
    k_clamped: bool = False

    @property
    def num_nodes(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_weights(cls, A, k_used: int = 0, k_clamped: bool = False) -> AffinityGraph:
        A = sp.csr_matrix(A, dtype=np.float64)
        A.setdiag(0.0)
        A.eliminate_zeros()
        if (A != A.T).nnz:
            raise ValueError("affinity matrix must be symmetric")
        if A.nnz and A.data.min() < 0:
            raise ValueError("affinity weights must be non-negative")
        deg = np.asarray(A.sum(axis=1)).ravel()
        inv = np.zeros_like(deg)
        inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
        Dm = sp.diags(inv)
        return cls(A, deg, sp.csr_matrix(Dm @ A @ Dm), k_used, k_clamped)


def edge_weight(z_i, z_j, x_i, x_j, gamma, sigma, q) -> float:
    sim = max(0.0, float(np.dot(z_i, z_j)))
    return sim**gamma * float(np.exp(-sigma * np.linalg.norm(np.subtract(x_i, x_j)) ** q))


def knn_joint(z: np.ndarray, x: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Indices of the ``k`` nearest other nodes under ``|dz|^2 + |dx|^2``."""
    P = np.hstack([z, x]).astype(np.float64)
    n = len(P)
    sq = (P**2).sum(1)
    out = np.empty((n, k), dtype=np.int64)
    for s in range(0, n, chunk):
        rows = np.arange(s, min(s + chunk, n))
        d = sq[rows, None] - 2.0 * P[rows] @ P.T + sq[None, :]
        d[np.arange(len(rows)), rows] = np.inf
        part = np.argpartition(d, k - 1, axis=1)[:, :k]
        # order each row so ties resolve the same way on every run
        order = np.lexsort((part, np.take_along_axis(d, part, 1)), axis=1)
        out[rows] = np.take_along_axis(part, order, 1)
    return out


def build_graph_from_nodes(z: np.ndarray, coords: np.ndarray, cfg: GraphConfig) -> AffinityGraph:
    """Graph over nodes with unit embeddings ``z`` and normalised ``coords``."""
    cfg.validate()
    z = np.asarray(z, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    n = len(z)
    if n < 2:
        raise ValueError("need at least two nodes")
    k, clamped = cfg.k, False
    if k >= n:
        k, clamped = n - 1, True
        warnings.warn(f"k={cfg.k} >= N={n}; clamped to {k}", RuntimeWarning, stacklevel=2)
    nbr = knn_joint(z, coords, k)
    rows = np.repeat(np.arange(n), k)
    cols = nbr.ravel()
    sim = np.maximum(0.0, np.einsum("ij,ij->i", z[rows], z[cols])) ** cfg.gamma
    dist = np.linalg.norm(coords[rows] - coords[cols], axis=1)
    w = sim * np.exp(-cfg.sigma * dist**cfg.spatial_exponent)
    Wd = sp.csr_matrix((w, (rows, cols)), shape=(n, n))
    return AffinityGraph.from_weights(Wd.maximum(Wd.T), k_used=k, k_clamped=clamped)


def normalized_coords(part: SuperpixelPartition) -> np.ndarray:
    H, W = part.assignment.shape
    return part.centroids / max(1, max(H, W) - 1)


def build_graph(part: SuperpixelPartition, cfg: GraphConfig | None = None) -> AffinityGraph:
    cfg = cfg or GraphConfig()
    return build_graph_from_nodes(part.mean_embeddings, normalized_coords(part), cfg)


def _system(graph: AffinityGraph, alpha: float):
    return sp.identity(graph.num_nodes, format="csr") - alpha * graph.normalized


def residual(graph: AffinityGraph, y0: np.ndarray, y: np.ndarray, alpha: float) -> float:
    """Infinity-norm residual of ``(I - alpha A_hat) Y = (1 - alpha) Y0``."""
    r = _system(graph, alpha) @ y - (1.0 - alpha) * y0
    return float(np.abs(r).max()) if r.size else 0.0


def propagate_direct(graph: AffinityGraph, y0: np.ndarray, alpha: float, tol: float = 1e-6) -> np.ndarray:
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0, 1)")
    y0 = np.asarray(y0, dtype=np.float64)
    if alpha == 0.0:
        return y0.copy()
    M = _system(graph, alpha).tocsc()
    b = (1.0 - alpha) * y0
    if graph.num_nodes <= _DIRECT_LU_MAX_NODES:
        y = spla.splu(M).solve(np.asfortranarray(b))
    else:
        y = np.empty_like(b)
        for c in range(b.shape[1]):
            # 2-norm bound implies the infinity-norm bound
            y[:, c], _ = spla.cg(M, b[:, c], x0=b[:, c], rtol=0.0, atol=0.1 * tol, maxiter=10 * graph.num_nodes)
    res = residual(graph, y0, y, alpha)
    if res >= tol:
        raise ConvergenceError("direct solve did not reach tolerance", res)
    return y


def propagate_fixed_point(
    graph: AffinityGraph,
    y0: np.ndarray,
    alpha: float,
    tol: float = 1e-6,
    max_iters: int = 1000,
    return_history: bool = False,
):
    """Iterate ``Y <- alpha A_hat Y + (1 - alpha) Y0`` from ``Y = Y0``.

    Stops once successive iterates differ by less than ``tol`` in the
    infinity norm; at that point the residual equals that difference. With
    ``return_history`` also returns the list of successive differences.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0, 1)")
    y0 = np.asarray(y0, dtype=np.float64)
    A = graph.normalized
    base = (1.0 - alpha) * y0
    y = y0.copy()
    history = []
    for _ in range(max_iters):
        nxt = alpha * (A @ y) + base
        diff = float(np.abs(nxt - y).max()) if y.size else 0.0
        history.append(diff)
        y = nxt
        if diff < tol:
            return (y, history) if return_history else y
    raise ConvergenceError(f"fixed point not reached in {max_iters} iterations", history[-1])


def propagate(graph: AffinityGraph, y0: np.ndarray, cfg: GraphConfig) -> np.ndarray:
    """Propagate active score columns; columns holding the inactive sentinel pass through."""
    y0 = np.asarray(y0, dtype=np.float64)
    out = y0.copy()
    live = (y0 > INACTIVE_SCORE / 2).all(axis=0)
    if not live.any():
        return out
    sub = y0[:, live]
    if cfg.solver == "direct":
        out[:, live] = propagate_direct(graph, sub, cfg.alpha, cfg.tol)
    else:
        out[:, live] = propagate_fixed_point(graph, sub, cfg.alpha, cfg.tol, cfg.max_prop_iters)
    return out


def refine_labels(part: SuperpixelPartition, graph: AffinityGraph, cfg: GraphConfig | None = None) -> LabelMap:
    """Smooth segment scores over the graph and paint each segment with its top class."""
    cfg = cfg or GraphConfig()
    cfg.validate()
    refined = propagate(graph, part.mean_scores, cfg)
    seg_class = refined.argmax(axis=1).astype(np.uint8)
    return LabelMap(seg_class[part.assignment], part.mean_scores.shape[1])


def objective_value(
    graph: AffinityGraph, y_hat: np.ndarray, y_tilde: np.ndarray, lam: float, normalized: bool = False
) -> float:
    """Fidelity plus ``lam`` times graph smoothness.

    The literal form sums ``A_ij |Y_i - Y_j|^2`` once per undirected edge.
    The normalized form uses ``tr(Y^T (I - A_hat) Y)``, which equals the
    degree-normalized pairwise sum when no node is isolated; its minimizer
    is the solution of ``(I - alpha A_hat) Y = (1 - alpha) Y0`` with
    ``alpha = lam / (1 + lam)``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y_tilde = np.asarray(y_tilde, dtype=np.float64)
    fidelity = float(((y_tilde - y_hat) ** 2).sum())
    if normalized:
        smooth = float((y_tilde * (y_tilde - graph.normalized @ y_tilde)).sum())
    else:
        A = sp.triu(graph.weights, k=1).tocoo()
        smooth = float((A.data * ((y_tilde[A.row] - y_tilde[A.col]) ** 2).sum(axis=1)).sum())
    return fidelity + lam * smooth


def write_edge_list(graph: AffinityGraph, path: PathLike) -> None:
    A = sp.triu(graph.weights, k=1).tocoo()
    with open(path, "w") as fh:
        for i, j, w in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {w:.9g}\n")
