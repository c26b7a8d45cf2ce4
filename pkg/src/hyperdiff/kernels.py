"""Normalized graph and hypergraph convolution kernels.

Graph kernel:       D^-1/2 (A + I) D^-1/2
Hypergraph kernel:  Dv^-1/2 H M De^-1 H^T Dv^-1/2, with Dv taken from the
                    weighted incidence H M.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

DEGREE_FLOOR = 1e-8


class KernelError(ValueError):
    pass


def graph_kernel(adj: np.ndarray) -> np.ndarray:
    adj = np.asarray(adj, dtype=float)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise KernelError(f"adjacency must be square, got shape {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise KernelError("adjacency must be symmetric")
    a_tilde = adj + np.eye(adj.shape[0])
    d = np.maximum(a_tilde.sum(axis=1), DEGREE_FLOOR)
    s = 1.0 / np.sqrt(d)
    return s[:, None] * a_tilde * s[None, :]


def hyperedge_degrees(inc: np.ndarray) -> np.ndarray:
    return np.asarray(inc, dtype=float).sum(axis=0)


def vertex_degrees(inc: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    inc = np.asarray(inc, dtype=float)
    if weights is None:
        weights = np.ones(inc.shape[1])
    return inc @ np.asarray(weights, dtype=float)


def _check_incidence(inc: np.ndarray, joint_names: Sequence[str] | None):
    if inc.ndim != 2:
        raise KernelError(f"incidence must be a J x E matrix, got shape {inc.shape}")
    empty_cols = np.flatnonzero(inc.sum(axis=0) < 1)
    if empty_cols.size:
        raise KernelError(f"hyperedge {int(empty_cols[0]) + 1} has no members")
    empty_rows = np.flatnonzero(inc.sum(axis=1) < 1)
    if empty_rows.size:
        i = int(empty_rows[0])
        who = joint_names[i] if joint_names is not None else f"#{i}"
        raise KernelError(f"joint {who} belongs to no hyperedge")


def hypergraph_kernel_op(inc: np.ndarray, log_weights: Tensor | None = None,
                         joint_names: Sequence[str] | None = None) -> Tensor:
    """Differentiable hypergraph kernel; hyperedge weights are ``exp(log_weights)``."""
    inc = np.asarray(inc, dtype=float)
    _check_incidence(inc, joint_names)
    n_edges = inc.shape[1]
    if log_weights is None:
        log_weights = Tensor(np.zeros(n_edges))
    if log_weights.shape != (n_edges,):
        raise KernelError(f"expected {n_edges} hyperedge weights, got shape {log_weights.shape}")
    m = nx.reshape(nx.exp(log_weights), (n_edges, 1))
    de = np.maximum(hyperedge_degrees(inc), DEGREE_FLOOR)
    dv = nx.clamp_min(nx.matmul(inc, m), DEGREE_FLOOR)          # J x 1
    left = nx.mul(nx.power(dv, -0.5), inc)                       # Dv^-1/2 H
    right = nx.mul(left, nx.transpose(nx.mul(m, 1.0 / de[:, None])))  # Dv^-1/2 H M De^-1
    return nx.matmul(right, nx.transpose(left))


def hypergraph_kernel(inc: np.ndarray, weights: np.ndarray | None = None,
                      joint_names: Sequence[str] | None = None) -> np.ndarray:
    """Plain-array hypergraph kernel for positive hyperedge ``weights`` (default all ones)."""
    log_w = None
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if np.any(weights <= 0):
            raise KernelError("hyperedge weights must be positive")
        log_w = Tensor(np.log(weights))
    return hypergraph_kernel_op(inc, log_w, joint_names).data


def spectral_radius(mat: np.ndarray, iters: int = 500, seed: int = 0) -> float:
    """Power-iteration estimate of the largest absolute eigenvalue."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(mat.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = mat @ v
        n = np.linalg.norm(w)
        if n == 0.0:
            return 0.0
        lam = n
        v = w / n
    return float(lam)
