"""Structural causal model plumbing: graphs, interventions, and the
abduction -> intervention -> prediction counterfactual procedure.

The image mechanism itself lives in :mod:`cfcontrast.hvae`; anything with
``abduct(images, parents)`` and ``predict(exo, parents)`` methods works here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Protocol

import numpy as np


class GraphError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class CausalGraph:
    nodes: tuple[str, ...]
    parent_map: Mapping[str, tuple[str, ...]]
    image_node: str = "image"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        pm = {k: tuple(v) for k, v in dict(self.parent_map).items()}
        object.__setattr__(self, "parent_map", MappingProxyType(pm))
        self.validate()

    def validate(self):
        if self.image_node not in self.nodes:
            raise GraphError(f"image node {self.image_node!r} not among nodes")
        for child, parents in self.parent_map.items():
            if child not in self.nodes:
                raise GraphError(f"unknown node {child!r} in parent_map")
            for p in parents:
                if p not in self.nodes:
                    raise GraphError(f"unknown parent {p!r} of {child!r}")
                if p == self.image_node:
                    raise GraphError("the image node cannot have children")
                if child != self.image_node:
                    # parents of the image are assumed mutually independent
                    raise GraphError(f"edge {p!r} -> {child!r} between non-image nodes")
        return self

    @property
    def image_parents(self) -> tuple[str, ...]:
        return self.parent_map.get(self.image_node, ())

    @classmethod
    def star(cls, parents, image_node: str = "image") -> "CausalGraph":
        """Every parent points at the image and nowhere else."""
        parents = tuple(parents)
        return cls(nodes=parents + (image_node,), parent_map={image_node: parents}, image_node=image_node)

    @classmethod
    def from_dict(cls, d: dict) -> "CausalGraph":
        return cls(
            nodes=tuple(d["nodes"]),
            parent_map={k: tuple(v) for k, v in d.get("parents", {}).items()},
            image_node=d.get("image_node", "image"),
        )

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "parents": {k: list(v) for k, v in self.parent_map.items()},
            "image_node": self.image_node,
        }


@dataclass(frozen=True)
class Intervention:
    assignments: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "assignments", MappingProxyType(dict(self.assignments)))

    def check(self, graph: CausalGraph) -> "Intervention":
        for node in self.assignments:
            if node not in graph.nodes:
                raise GraphError(f"intervention on unknown node {node!r}")
            if node == graph.image_node:
                raise GraphError("cannot intervene on the image node")
        return self


@dataclass
class ExogenousState:
    """Abducted noise: hierarchical latents z_1..z_L plus the pixel residual eps."""

    latents: list[np.ndarray]
    residual: np.ndarray

    @property
    def levels(self) -> int:
        return len(self.latents)

    def scaled(self, factor: float) -> "ExogenousState":
        return ExogenousState(latents=self.latents, residual=self.residual * factor)


def apply(intervention: Intervention | Mapping[str, int], parents: Mapping, graph: CausalGraph | None = None):
    """Copy of ``parents`` with intervened values forced; other entries untouched."""
    if not isinstance(intervention, Intervention):
        intervention = Intervention(intervention)
    for node in intervention.assignments:
        if node not in parents and (graph is None or node not in graph.nodes):
            raise GraphError(f"intervention on unknown node {node!r}")
    if graph is not None:
        intervention.check(graph)
    out = dict(parents)
    for node, value in intervention.assignments.items():
        ref = parents.get(node)
        if isinstance(ref, np.ndarray):
            out[node] = np.full_like(ref, value)
        else:
            out[node] = value
    return out


class Mechanism(Protocol):
    graph: CausalGraph

    def abduct(self, images, parents) -> ExogenousState: ...

    def predict(self, exo: ExogenousState, parents) -> np.ndarray: ...


def counterfactual(mechanism: Mechanism, images, parents, intervention) -> np.ndarray:
    """predict(abduct(x, pa), apply(do, pa))."""
    images = np.asarray(images)
    expected = tuple(getattr(mechanism, "image_shape", images.shape[-2:]))
    if tuple(images.shape[-2:]) != expected:
        raise ConfigurationError(
            f"image shape {tuple(images.shape[-2:])} does not match mechanism shape {expected}"
        )
    exo = mechanism.abduct(images, parents)
    return mechanism.predict(exo, apply(intervention, parents, mechanism.graph))
