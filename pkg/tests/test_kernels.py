import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hyperdiff import numerics as nx
from hyperdiff.kernels import (
    KernelError, graph_kernel, hyperedge_degrees, hypergraph_kernel, hypergraph_kernel_op,
    spectral_radius, vertex_degrees,
)
from hyperdiff.numerics import Parameter
from hyperdiff.skeleton import adjacency, incidence


@st.composite
def incidences(draw, max_joints=12, max_edges=8):
    j = draw(st.integers(2, max_joints))
    e = draw(st.integers(1, max_edges))
    h = draw(hnp.arrays(np.bool_, (j, e))).astype(float)
    for c in range(e):
        if h[:, c].sum() < 2:
            h[[c % j, (c + 1) % j], c] = 1.0
    for i in range(j):
        if h[i].sum() == 0:
            h[i, i % e] = 1.0
    return h


def test_graph_kernel_two_nodes():
    np.testing.assert_allclose(graph_kernel(np.array([[0.0, 1.0], [1.0, 0.0]])), 0.5, atol=1e-15)


def test_graph_kernel_single_node():
    np.testing.assert_array_equal(graph_kernel(np.zeros((1, 1))), [[1.0]])


def test_graph_kernel_rejects_asymmetric():
    with pytest.raises(KernelError):
        graph_kernel(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_graph_kernel_fixed_point(skeleton):
    adj = adjacency(skeleton)
    d = (adj + np.eye(17)).sum(axis=1)
    lam = graph_kernel(adj)
    np.testing.assert_allclose(lam @ np.sqrt(d), np.sqrt(d), atol=1e-12)
    np.testing.assert_allclose(lam, lam.T, atol=1e-12)
    assert spectral_radius(lam) <= 1 + 1e-8


def test_hypergraph_kernel_pair():
    np.testing.assert_allclose(hypergraph_kernel(np.ones((2, 1))), 0.5, atol=1e-15)


@pytest.mark.parametrize("n", [1, 3, 7])
def test_hypergraph_kernel_single_edge(n):
    np.testing.assert_allclose(hypergraph_kernel(np.ones((n, 1))), 1.0 / n, atol=1e-15)


def test_degrees(skeleton):
    part = incidence(skeleton, "part")
    body = incidence(skeleton, "body")
    assert vertex_degrees(part)[skeleton.index("thorax")] == 4
    assert hyperedge_degrees(part)[3] == 2
    assert hyperedge_degrees(body)[0] == 9
    w = np.arange(1.0, 11.0)
    np.testing.assert_allclose(vertex_degrees(part, w), part @ w)


@pytest.mark.parametrize("scale", ["part", "body"])
def test_default_hypergraph_spectrum(skeleton, scale):
    h = incidence(skeleton, scale)
    g = hypergraph_kernel(h)
    np.testing.assert_allclose(g, g.T, atol=1e-12)
    ev = np.linalg.eigvalsh(g)
    assert ev.min() >= -1e-8
    assert ev.max() <= 1 + 1e-8
    sq = np.sqrt(vertex_degrees(h))
    np.testing.assert_allclose(g @ sq, sq, atol=1e-10)


def test_matches_explicit_formula(skeleton, rng):
    h = incidence(skeleton, "part")
    w = rng.uniform(0.5, 2.0, h.shape[1])
    dv = h @ w
    de = h.sum(axis=0)
    explicit = (np.diag(dv ** -0.5) @ h @ np.diag(w) @ np.diag(1 / de) @ h.T @ np.diag(dv ** -0.5))
    np.testing.assert_allclose(hypergraph_kernel(h, w), explicit, atol=1e-14)


def test_joint_without_hyperedge_is_named():
    h = np.array([[1.0], [1.0], [0.0]])
    with pytest.raises(KernelError, match="wrist"):
        hypergraph_kernel(h, joint_names=["a", "b", "wrist"])


def test_kernel_differentiable_in_weights(skeleton, rng):
    h = incidence(skeleton, "body")
    log_m = Parameter(rng.uniform(-0.5, 0.5, h.shape[1]), "log_m")
    report = nx.grad_check(lambda: nx.sum(hypergraph_kernel_op(h, log_m)), [log_m], tol=1e-6)
    assert report.ok, report.max_rel_err


@settings(max_examples=100, deadline=None)
@given(incidences())
def test_random_hypergraph_properties(h):
    g = hypergraph_kernel(h)
    np.testing.assert_allclose(g, g.T, atol=1e-12)
    ev = np.linalg.eigvalsh(g)
    assert ev.min() >= -1e-8
    assert spectral_radius(g) <= 1 + 1e-8
    sq = np.sqrt(h.sum(axis=1))
    np.testing.assert_allclose(g @ sq, sq, atol=1e-10)
