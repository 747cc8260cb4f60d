"""Graph structure encodings for context elements: sequence table, Laplacian eigenvectors, GNN."""

import enum
from dataclasses import dataclass

import numpy as np

from . import _ext
from . import autodiff as ad
from .encoders import map_to_lm
from .graphdoc import NodeKind


class PEKind(enum.Enum):
    SEQUENCE = "sequence"
    LPE = "lpe"
    GNN = "gnn"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown position encoding {value!r}")


@dataclass(frozen=True)
class PEConfig:
    kind: PEKind = PEKind.SEQUENCE
    k: int = 4
    gnn_layers: int = 2
    # rows of the learned element-position table (max context elements per example)
    table_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "kind", PEKind.parse(self.kind))
        if self.k < 1 or self.gnn_layers < 1 or self.table_size < 1:
            raise ValueError("PEConfig needs k >= 1, gnn_layers >= 1, table_size >= 1")


@dataclass(frozen=True)
class ContextGraph:
    node_ids: tuple
    adjacency: np.ndarray

    @property
    def n(self):
        return len(self.node_ids)

    def permuted(self, perm):
        """Graph with node ``perm[i]`` of this graph placed at position ``i``."""
        perm = np.asarray(perm)
        return ContextGraph(tuple(self.node_ids[i] for i in perm),
                            self.adjacency[np.ix_(perm, perm)])


def build_context_graph(neighbors, target):
    nodes = list(neighbors) + [target]
    pos = {n.id: i for i, n in enumerate(nodes)}
    adj = np.zeros((len(nodes), len(nodes)))

    def link(a, b):
        if a in pos and b in pos and a != b:
            adj[pos[a], pos[b]] = adj[pos[b], pos[a]] = 1.0

    title = next((n.id for n in nodes if n.kind is NodeKind.TITLE), None)
    for n in nodes:
        if n.kind is NodeKind.TITLE:
            continue
        if n.parent_id is not None:
            link(n.id, n.parent_id)
        elif n.kind is NodeKind.SECTION and title is not None:
            link(n.id, title)
    return ContextGraph(tuple(pos), adj)


def normalized_laplacian(g):
    a = g.adjacency if isinstance(g, ContextGraph) else np.asarray(g, dtype=np.float64)
    deg = a.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = -inv_sqrt[:, None] * a * inv_sqrt[None, :]
    lap[np.diag_indices_from(lap)] += (deg > 0).astype(np.float64)
    return lap


def sym_eigendecomp(m, tol=None, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition; eigenvalues ascending, eigenvectors as columns."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ad.ShapeError(f"sym_eigendecomp needs a square matrix, got {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > 1e-12 * scale:
        raise ValueError("sym_eigendecomp: matrix is not symmetric")
    n = m.shape[0]
    a = np.ascontiguousarray((m + m.T) / 2)
    v = np.eye(n)
    if tol is None:
        tol = 1e-15 * max(1.0, float(np.linalg.norm(a)))
    _ext.jacobi_sweeps(a, v, tol, max_sweeps)
    evals = np.diag(a).copy()
    order = np.argsort(evals, kind="stable")
    return evals[order], np.ascontiguousarray(v[:, order])


def fix_signs(vectors, tie_tol=1e-9):
    """Flip each column so its largest-magnitude entry is positive (ties: lowest index)."""
    out = np.array(vectors, dtype=np.float64, copy=True)
    for j in range(out.shape[1]):
        col = np.abs(out[:, j])
        if col.size == 0 or col.max() == 0:
            continue
        i = int(np.flatnonzero(col >= col.max() - tie_tol)[0])
        if out[i, j] < 0:
            out[:, j] *= -1
    return out


def lpe_features(g, k):
    """Per-node k-vectors: non-trivial Laplacian eigenvectors, sign-fixed, zero-padded."""
    feats = np.zeros((g.n, k))
    if g.n <= 1:
        return feats
    _, vecs = sym_eigendecomp(normalized_laplacian(g))
    vecs = fix_signs(vecs[:, 1:k + 1])
    feats[:, :vecs.shape[1]] = vecs
    return feats


def lpe_vectors(g, cfg, mapper, features=None):
    if features is None:
        features = lpe_features(g, cfg.k)
    return map_to_lm(features, mapper)


def mean_aggregation(g):
    """Row-stochastic operator averaging each node with its neighbors."""
    a = g.adjacency + np.eye(g.n)
    return a / a.sum(axis=1, keepdims=True)


def gnn_pe(h, g, layers):
    """``len(layers)`` rounds of h <- ReLU(mean_{N(v) ∪ v}(h) W + b)."""
    agg = mean_aggregation(g)
    for w, b in layers:
        h = ad.relu(ad.add(ad.matmul(ad.matmul(agg, h), w), b))
    return h


def sequence_pe(n, table):
    if n > table.shape[0]:
        raise ValueError(f"{n} context elements exceed the position table ({table.shape[0]} rows)")
    return ad.take_rows(table, np.arange(n))
