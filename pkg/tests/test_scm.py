import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfcontrast.scm import (
    CausalGraph, ConfigurationError, ExogenousState, GraphError, Intervention, apply, counterfactual,
)

GRAPH = CausalGraph.star(["domain", "sexlike"])


def test_apply_forces_only_named_parent():
    assert apply({"domain": 2}, {"domain": 0, "sexlike": 1}) == {"domain": 2, "sexlike": 1}


def test_apply_on_arrays_broadcasts():
    out = apply({"domain": 1}, {"domain": np.array([0, 2, 1]), "sexlike": np.array([1, 0, 0])})
    assert out["domain"].tolist() == [1, 1, 1]
    assert out["sexlike"].tolist() == [1, 0, 0]


@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 1))
def test_apply_is_idempotent(v, d, a):
    pa = {"domain": d, "sexlike": a}
    once = apply({"domain": v}, pa, GRAPH)
    assert apply({"domain": v}, once, GRAPH) == once


def test_empty_intervention_is_null():
    pa = {"domain": 1, "sexlike": 0}
    assert apply(Intervention(), pa, GRAPH) == pa


def test_unknown_node_rejected():
    with pytest.raises(GraphError, match="scanner"):
        apply({"scanner": 1}, {"domain": 0, "sexlike": 0}, GRAPH)


def test_image_node_not_intervenable():
    with pytest.raises(GraphError):
        Intervention({"image": 0}).check(GRAPH)


def test_graph_rejects_edges_between_parents():
    with pytest.raises(GraphError):
        CausalGraph(nodes=("a", "b", "image"), parent_map={"image": ("a", "b"), "b": ("a",)})
    with pytest.raises(GraphError):
        CausalGraph(nodes=("a", "image"), parent_map={"image": ("a", "c")})


def test_graph_dict_roundtrip():
    assert CausalGraph.from_dict(GRAPH.to_dict()) == GRAPH


class _Shift:
    """Toy mechanism: x = parents' domain + u."""

    graph = GRAPH
    image_shape = (2, 2)

    def abduct(self, images, parents):
        d = np.asarray(parents["domain"], dtype=float)[:, None, None]
        return ExogenousState([], np.asarray(images) - d)

    def predict(self, exo, parents):
        return exo.residual + np.asarray(parents["domain"], dtype=float)[:, None, None]


def test_counterfactual_replays_noise():
    x = np.zeros((2, 2, 2)) + np.array([0.5, 1.25])[:, None, None]
    pa = {"domain": np.array([0, 1]), "sexlike": np.array([0, 0])}
    cf = counterfactual(_Shift(), x, pa, {"domain": 2})
    np.testing.assert_allclose(cf[:, 0, 0], [2.5, 2.25])


def test_counterfactual_shape_mismatch():
    with pytest.raises(ConfigurationError, match="shape"):
        counterfactual(_Shift(), np.zeros((1, 3, 3)), {"domain": np.array([0]), "sexlike": np.array([0])}, {})
