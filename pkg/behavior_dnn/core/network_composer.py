"""
Network regimes built from per-feature-group subnets.

The sparse composite keeps its block-diagonal base as one masked layer: row block j
(subnet j's hidden units) is connected only to the columns of feature group j, so a
forward pass reads each subnet's own slice and nothing else. Densifying drops the mask.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from behavior_dnn.core.errors import ConfigurationError
from behavior_dnn.core.feature_extractor import FeatureLayout
from behavior_dnn.core.network import (Activation, Layer, LayerShape, NetworkParams, init_params,
                                       predict)

logger = logging.getLogger(__name__)

DEFAULT_KNOWLEDGE_GROUPS: Dict[str, List[str]] = {
    "pitch": ["pitch"],
    "mfccs": ["mfcc"],
    "mfbs": ["mfb"],
    "intensity": ["intensity"],
    "jitter_shimmer": ["jitter", "shimmer"],
}


class SplitMode(Enum):
    KNOWLEDGE = "knowledge"
    RANDOM = "random"


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    indices: Tuple[int, ...]


@dataclass(frozen=True)
class SubnetAssignment:
    """Disjoint named groups of frame columns that together cover 0..dimension-1.

    partition_features emits each group sorted; a hand-built group keeps its own column order.
    """
    groups: Tuple[FeatureGroup, ...]
    dimension: int

    def __post_init__(self):
        seen = []
        for group in self.groups:
            if not group.indices:
                raise ConfigurationError(f"Feature group {group.name!r} is empty")
            seen.extend(group.indices)
        if sorted(seen) != list(range(self.dimension)):
            raise ConfigurationError(
                f"Feature groups must be a disjoint cover of 0..{self.dimension - 1}")

    @property
    def names(self) -> List[str]:
        return [group.name for group in self.groups]

    def as_pairs(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(group.name, group.indices) for group in self.groups]

    @classmethod
    def from_pairs(cls, pairs, dimension: int) -> "SubnetAssignment":
        return cls(tuple(FeatureGroup(name, tuple(int(i) for i in indices)) for name, indices in pairs),
                   dimension)


@dataclass
class CompositeSpec:
    """Frozen-or-not block-sparse base feeding a fusion stack with one sigmoid output."""
    network: NetworkParams
    assignment: SubnetAssignment
    fusion_hidden: Tuple[int, ...]
    subnet_widths: Tuple[int, ...] = field(default_factory=tuple)

    @property
    def base_layer(self) -> Layer:
        return self.network.layers[0]

    @property
    def fusion_input_width(self) -> int:
        return sum(self.subnet_widths)

    def subnet_block(self, j: int) -> Tuple[np.ndarray, np.ndarray]:
        """Weights and biases subnet ``j`` contributes to the base layer."""
        start = sum(self.subnet_widths[:j])
        rows = slice(start, start + self.subnet_widths[j])
        columns = list(self.assignment.groups[j].indices)
        return self.base_layer.weights[rows][:, columns], self.base_layer.biases[rows]

    def parameter_count(self) -> int:
        return self.network.parameter_count()

    @classmethod
    def from_params(cls, params: NetworkParams) -> "CompositeSpec":
        if not params.groups or "subnet_widths" not in params.info:
            raise ConfigurationError("Model does not describe a composite (no groups / subnet widths)")
        assignment = SubnetAssignment.from_pairs(params.groups, params.input_dim)
        return cls(network=params, assignment=assignment,
                   fusion_hidden=tuple(params.info.get("fusion_hidden", [])),
                   subnet_widths=tuple(params.info["subnet_widths"]))


def partition_features(mode, layout: FeatureLayout, num_groups: int = 5, seed: int = 0,
                       knowledge_groups: Optional[Dict[str, Sequence[str]]] = None) -> SubnetAssignment:
    """
    Split the frame columns into subnet groups.

    Knowledge mode groups columns by the LLD family of the column they summarize;
    random mode shuffles columns with ``seed`` and slices them into near-equal parts.

    Raises:
        ConfigurationError: unlabeled columns in knowledge mode, or more groups than columns
    """
    mode = SplitMode(mode)
    dimension = layout.frame_dim

    if mode is SplitMode.RANDOM:
        if not 1 <= num_groups <= dimension:
            raise ConfigurationError(f"Cannot split {dimension} columns into {num_groups} groups")
        permutation = np.random.default_rng(seed).permutation(dimension)
        parts = np.array_split(permutation, num_groups)
        groups = [FeatureGroup(f"subset_{k}", tuple(int(i) for i in np.sort(part))) for k, part in enumerate(parts)]
        return SubnetAssignment(tuple(groups), dimension)

    knowledge_groups = knowledge_groups or DEFAULT_KNOWLEDGE_GROUPS
    family_to_group = {}
    for name, families in knowledge_groups.items():
        for family in families:
            family_to_group[family] = name

    members: Dict[str, List[int]] = {name: [] for name in knowledge_groups}
    for column in range(dimension):
        family = layout.column_family(column)
        if family not in family_to_group:
            raise ConfigurationError(
                f"Frame column {column} ({layout.column_name(column)}) has family {family!r}, "
                f"which no knowledge group claims")
        members[family_to_group[family]].append(column)

    groups = []
    for name, columns in members.items():
        if not columns:
            logger.warning(f"⚠️ Knowledge group {name!r} has no columns in this layout, dropping it")
            continue
        groups.append(FeatureGroup(name, tuple(columns)))
    return SubnetAssignment(tuple(groups), dimension)


def build_subnet(group: Sequence[int], hidden_width: int, seed: int, name: str = "") -> NetworkParams:
    """|group| -> hidden_width (tanh) -> 1 (sigmoid), reading the group's columns in the order given."""
    if len(group) == 0:
        raise ConfigurationError(f"Cannot build a subnet over an empty feature group {name!r}")
    params = init_params([LayerShape(len(group), hidden_width, Activation.TANH),
                          LayerShape(hidden_width, 1, Activation.SIGMOID)], seed)
    params.feature_indices = np.array(list(group), dtype=np.int64)
    params.info = {"regime": "subnet", "group": name, "trained": False}
    return params


def build_fusion_stack(input_width: int, fusion_hidden: Sequence[int], seed: int) -> NetworkParams:
    widths = [input_width] + list(fusion_hidden)
    shapes = [LayerShape(widths[k], widths[k + 1], Activation.TANH) for k in range(len(fusion_hidden))]
    shapes.append(LayerShape(widths[-1], 1, Activation.SIGMOID))
    return init_params(shapes, seed)


def compose_sd(subnets: Sequence[NetworkParams], fusion_hidden: Sequence[int], seed: int) -> CompositeSpec:
    """
    Freeze trained subnets, drop their output heads, concatenate their hidden layers and
    stack freshly initialized fusion layers on top.

    Raises:
        ConfigurationError: if a subnet is not flagged as trained or lacks a feature slice
    """
    if not subnets:
        raise ConfigurationError("Composite needs at least one subnet")
    pairs = []
    for j, subnet in enumerate(subnets):
        if not subnet.info.get("trained"):
            raise ConfigurationError(f"Subnet {j} ({subnet.info.get('group', '?')}) is not trained")
        if subnet.feature_indices is None:
            raise ConfigurationError(f"Subnet {j} has no feature slice")
        pairs.append((subnet.info.get("group") or f"subset_{j}", tuple(int(i) for i in subnet.feature_indices)))
    dimension = sum(len(indices) for _, indices in pairs)
    assignment = SubnetAssignment.from_pairs(pairs, dimension)

    widths = tuple(subnet.layers[0].shape.output_dim for subnet in subnets)
    hidden = sum(widths)
    weights = np.zeros((hidden, dimension))
    mask = np.zeros((hidden, dimension), dtype=bool)
    biases = np.zeros(hidden)
    start = 0
    for subnet, width in zip(subnets, widths):
        rows = np.arange(start, start + width)
        block = np.ix_(rows, subnet.feature_indices)
        weights[block] = subnet.layers[0].weights
        mask[block] = True
        biases[rows] = subnet.layers[0].biases
        start += width
    base = Layer(weights=weights, biases=biases, shape=LayerShape(dimension, hidden, Activation.TANH),
                 trainable=False, mask=mask)

    fusion = build_fusion_stack(hidden, fusion_hidden, seed)
    network = NetworkParams(
        layers=[base] + fusion.layers,
        groups=assignment.as_pairs(),
        info={"regime": "sd", "trained": False, "fusion_hidden": list(fusion_hidden),
              "subnet_widths": list(widths)},
    )
    return CompositeSpec(network=network, assignment=assignment, fusion_hidden=tuple(fusion_hidden),
                         subnet_widths=widths)


def unfreeze(composite: CompositeSpec) -> CompositeSpec:
    """Same values and connectivity, every layer trainable."""
    network = composite.network.copy()
    for layer in network.layers:
        layer.trainable = True
    network.info["regime"] = "sj"
    return CompositeSpec(network=network, assignment=composite.assignment,
                         fusion_hidden=composite.fusion_hidden, subnet_widths=composite.subnet_widths)


def densify(composite: CompositeSpec) -> NetworkParams:
    """Fully connect the base layer; connections absent from the composite start at zero."""
    network = composite.network.copy()
    for layer in network.layers:
        layer.mask = None
        layer.trainable = True
    network.groups = []
    network.info = {"regime": "sd_init", "trained": composite.network.info.get("trained", False)}
    return network


def late_fusion_scores(subnets: Sequence[NetworkParams], frames) -> np.ndarray:
    """Frame scores of the output-level fusion: the mean of the standalone subnet outputs."""
    return np.mean([predict(subnet, frames) for subnet in subnets], axis=0)
