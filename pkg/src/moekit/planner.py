"""Placement planning for expert-sparse models on multi-GPU clusters.

Given a model description and a cluster shape, ``plan`` picks a parallel
degree for every routed layer:

  * expert parallelism spreads whole experts across devices, at most one
    group per expert, so its degree is capped at the layer's expert count;
  * leftover devices replicate the expert set (expert data parallelism), or,
    in latency mode, slice each expert's weight matrices instead so that all
    devices participate in a single token batch;
  * tensor slicing for the non-expert weights is a separate degree that must
    fit inside one node.

Every routed layer satisfies ep_degree * expert_dp * expert_slice ==
world_size. ``validate`` re-checks those identities on any plan, hand-built
or not, and ``memory_per_device`` turns a plan into a per-device weight
footprint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .arch import MoeModelConfig, count_params, count_params_per_layer

__all__ = [
    "LinkSpec",
    "ClusterTopology",
    "PlanError",
    "LayerPlacement",
    "ParallelPlan",
    "MemoryEstimate",
    "plan",
    "validate",
    "memory_per_device",
]


class PlanError(ValueError):
    """Raised when no consistent placement exists for the inputs."""


@dataclass(frozen=True)
class LinkSpec:
    """A link class: per-message latency and sustained bandwidth."""

    latency_s: float
    bandwidth_bytes_per_s: float

    def __post_init__(self) -> None:
        if self.latency_s < 0:
            raise PlanError("link latency must be >= 0")
        if self.bandwidth_bytes_per_s <= 0:
            raise PlanError("link bandwidth must be positive")


@dataclass(frozen=True)
class ClusterTopology:
    """Homogeneous cluster: ``nodes`` machines with ``gpus_per_node`` each.

    Ranks are numbered node-major, so ranks [0, gpus_per_node) share the
    first node's fast links.
    """

    nodes: int
    gpus_per_node: int
    intra_link: LinkSpec = field(default_factory=lambda: LinkSpec(1e-6, 300e9))
    inter_link: LinkSpec = field(default_factory=lambda: LinkSpec(5e-6, 50e9))

    def __post_init__(self) -> None:
        if self.nodes < 1 or self.gpus_per_node < 1:
            raise PlanError("cluster needs at least one node and one GPU per node")

    @property
    def world_size(self) -> int:
        return self.nodes * self.gpus_per_node

    def node_of(self, rank: int) -> int:
        return rank // self.gpus_per_node

    def local_rank(self, rank: int) -> int:
        return rank % self.gpus_per_node


@dataclass(frozen=True)
class LayerPlacement:
    """Parallel degrees for one routed layer."""

    layer_index: int
    num_experts: int
    ep_degree: int
    expert_dp: int
    expert_slice: int = 1

    @property
    def experts_per_device(self) -> int:
        # only meaningful when ep_degree divides num_experts; validate() flags
        # the uneven case
        return self.num_experts // self.ep_degree

    def expert_block(self, ep_rank: int) -> tuple[int, int]:
        """Half-open range of expert ids owned by one expert-parallel rank.

        Blocks are contiguous: rank 0 gets the lowest expert ids.
        """
        if not (0 <= ep_rank < self.ep_degree):
            raise PlanError(f"ep_rank {ep_rank} out of range for degree {self.ep_degree}")
        width = self.num_experts // self.ep_degree
        return ep_rank * width, (ep_rank + 1) * width


@dataclass(frozen=True)
class ParallelPlan:
    world_size: int
    gpus_per_node: int
    tensor_slice: int
    placements: tuple[LayerPlacement, ...]

    @property
    def data_parallel(self) -> int:
        """Replication degree of the non-expert weights."""
        return self.world_size // self.tensor_slice

    def placement_for(self, layer_index: int) -> LayerPlacement:
        for p in self.placements:
            if p.layer_index == layer_index:
                return p
        raise PlanError(f"no placement for layer {layer_index}")

    def to_dict(self) -> dict:
        return {
            "world_size": self.world_size,
            "gpus_per_node": self.gpus_per_node,
            "tensor_slice": self.tensor_slice,
            "placements": [
                {
                    "layer_index": p.layer_index,
                    "num_experts": p.num_experts,
                    "ep_degree": p.ep_degree,
                    "expert_dp": p.expert_dp,
                    "expert_slice": p.expert_slice,
                }
                for p in self.placements
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParallelPlan":
        top_keys = {"world_size", "gpus_per_node", "tensor_slice", "placements"}
        unknown = set(data) - top_keys
        if unknown:
            raise PlanError(f"unknown plan keys: {sorted(unknown)}")
        missing = top_keys - set(data)
        if missing:
            raise PlanError(f"missing plan keys: {sorted(missing)}")
        placement_keys = {"layer_index", "num_experts", "ep_degree", "expert_dp", "expert_slice"}
        placements = []
        for entry in data["placements"]:
            bad = set(entry) - placement_keys
            if bad:
                raise PlanError(f"unknown placement keys: {sorted(bad)}")
            placements.append(LayerPlacement(**entry))
        return cls(
            world_size=data["world_size"],
            gpus_per_node=data["gpus_per_node"],
            tensor_slice=data["tensor_slice"],
            placements=tuple(placements),
        )


def plan(
    cfg: MoeModelConfig,
    cluster: ClusterTopology,
    latency_mode: bool = False,
    tensor_slice: int = 1,
) -> ParallelPlan:
    """Choose per-layer parallel degrees for ``cfg`` on ``cluster``.

    Default policy: the expert-parallel degree is min(experts, world), the
    rest of the world replicates (expert_dp = world / ep). In latency mode a
    world larger than the expert count slices each expert instead,
    expert_slice = world / experts, keeping a single replica so one batch
    uses every device.
    """
    world = cluster.world_size
    if tensor_slice < 1:
        raise PlanError("tensor_slice must be >= 1")
    if tensor_slice > cluster.gpus_per_node:
        raise PlanError(
            f"tensor_slice {tensor_slice} exceeds gpus_per_node {cluster.gpus_per_node}: "
            "tensor groups may not span nodes"
        )
    if cluster.gpus_per_node % tensor_slice != 0:
        raise PlanError(
            f"tensor_slice {tensor_slice} must divide gpus_per_node {cluster.gpus_per_node}"
        )

    placements = []
    for idx in cfg.moe_layer_indices:
        experts = cfg.layers[idx].experts
        ep = min(experts, world)
        if experts % ep != 0:
            raise PlanError(
                f"layer {idx}: {experts} experts do not divide evenly across "
                f"ep degree {ep}"
            )
        if latency_mode and world > experts:
            if world % experts != 0:
                raise PlanError(
                    f"layer {idx}: world {world} is not a multiple of {experts} experts, "
                    "cannot slice evenly"
                )
            placements.append(
                LayerPlacement(
                    layer_index=idx,
                    num_experts=experts,
                    ep_degree=ep,
                    expert_dp=1,
                    expert_slice=world // experts,
                )
            )
            continue
        if world % ep != 0:
            raise PlanError(
                f"layer {idx}: ep degree {ep} leaves a fractional replica count "
                f"for world {world}"
            )
        placements.append(
            LayerPlacement(
                layer_index=idx,
                num_experts=experts,
                ep_degree=ep,
                expert_dp=world // ep,
                expert_slice=1,
            )
        )

    built = ParallelPlan(
        world_size=world,
        gpus_per_node=cluster.gpus_per_node,
        tensor_slice=tensor_slice,
        placements=tuple(placements),
    )
    problems = validate(built, cfg)
    if problems:
        raise PlanError("; ".join(problems))
    return built


def validate(built: ParallelPlan, cfg: MoeModelConfig | None = None) -> list[str]:
    """Structural checks; returns a list of violation strings (empty = ok)."""
    problems: list[str] = []
    if built.world_size < 1:
        problems.append("world_size must be positive")
        return problems
    if built.gpus_per_node < 1 or built.world_size % built.gpus_per_node != 0:
        problems.append(
            f"gpus_per_node {built.gpus_per_node} does not divide world {built.world_size}"
        )
    if built.tensor_slice < 1 or built.world_size % built.tensor_slice != 0:
        problems.append(f"tensor_slice {built.tensor_slice} does not divide world")
    elif built.tensor_slice > built.gpus_per_node or (
        built.gpus_per_node % built.tensor_slice != 0
    ):
        problems.append(
            f"tensor_slice {built.tensor_slice} does not fit inside a node of "
            f"{built.gpus_per_node} GPUs"
        )

    for p in built.placements:
        tag = f"layer {p.layer_index}"
        if p.ep_degree < 1 or p.expert_dp < 1 or p.expert_slice < 1:
            problems.append(f"{tag}: degrees must be >= 1")
            continue
        if p.ep_degree * p.expert_dp * p.expert_slice != built.world_size:
            problems.append(
                f"{tag}: ep {p.ep_degree} * dp {p.expert_dp} * slice {p.expert_slice} "
                f"!= world {built.world_size}"
            )
        if p.ep_degree > p.num_experts:
            problems.append(
                f"{tag}: ep degree {p.ep_degree} exceeds {p.num_experts} experts"
            )
        elif p.num_experts % p.ep_degree != 0:
            problems.append(
                f"{tag}: uneven experts per device "
                f"({p.num_experts} experts over ep degree {p.ep_degree})"
            )

    if cfg is not None:
        want = {i: cfg.layers[i].experts for i in cfg.moe_layer_indices}
        got = {p.layer_index: p.num_experts for p in built.placements}
        if set(want) != set(got):
            problems.append(
                f"placement layers {sorted(got)} do not match routed layers {sorted(want)}"
            )
        else:
            for i, e in want.items():
                if got[i] != e:
                    problems.append(
                        f"layer {i}: placement has {got[i]} experts, model has {e}"
                    )
    return problems


@dataclass(frozen=True)
class MemoryEstimate:
    """Per-device weight bytes, split by which degree shards them."""

    expert_bytes: float
    non_expert_bytes: float

    @property
    def total_bytes(self) -> float:
        return self.expert_bytes + self.non_expert_bytes


def memory_per_device(
    built: ParallelPlan, cfg: MoeModelConfig, bytes_per_param: int = 2
) -> MemoryEstimate:
    """Weight footprint on one device under the plan.

    Expert weights shard over ep_degree * expert_slice per layer; everything
    else (attention, dense FFN, norms, gates, embeddings) shards only over
    the tensor-slice degree.
    """
    problems = validate(built, cfg)
    if problems:
        raise PlanError("; ".join(problems))
    per_layer = count_params_per_layer(cfg)
    expert = 0.0
    for i in cfg.moe_layer_indices:
        p = built.placement_for(i)
        expert += per_layer[i].expert / (p.ep_degree * p.expert_slice)
    non_expert = count_params(cfg).non_expert_params / built.tensor_slice
    return MemoryEstimate(
        expert_bytes=expert * bytes_per_param,
        non_expert_bytes=non_expert * bytes_per_param,
    )
