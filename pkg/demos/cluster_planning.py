"""
Placing experts on a cluster
============================

Pick parallel degrees for expert-sparse models on a 16-node, 8-GPU-per-node
machine, and see what the validator rejects.
"""

from moekit.arch import build_pr_moe, build_standard, dense_config
from moekit.planner import (
    ClusterTopology,
    LayerPlacement,
    ParallelPlan,
    PlanError,
    memory_per_device,
    plan,
    validate,
)

cluster = ClusterTopology(nodes=16, gpus_per_node=8)
print("world size:", cluster.world_size)

base = dense_config(24, 2048, 16)

# expert parallelism caps at the expert count; spare devices replicate
for experts in (32, 64, 128):
    cfg = build_standard(base, experts)
    built = plan(cfg, cluster)
    p = built.placements[0]
    print(
        f"{experts:>3} experts: ep={p.ep_degree:<3} expert_dp={p.expert_dp} "
        f"experts/device={p.experts_per_device}"
    )

# pyramid layers get individual degrees
pyramid = build_pr_moe(base, (32,) * 4 + (64,) * 4 + (128,) * 4)
built = plan(pyramid, cluster)
print("\npyramid degrees by layer:")
for p in built.placements:
    print(f"  layer {p.layer_index:>2}: {p.num_experts:>3} experts -> ep {p.ep_degree:>3}, dp {p.expert_dp}")
print("validator violations:", validate(built, pyramid))

# per-device memory at fp16: experts shard over ep, the rest over the
# tensor-slice degree
cfg = build_standard(base, 128)
for ts in (1, 4, 8):
    built = plan(cfg, cluster, tensor_slice=ts)
    est = memory_per_device(built, cfg)
    print(
        f"tensor_slice {ts}: expert {est.expert_bytes / 1e9:.2f} GB + "
        f"non-expert {est.non_expert_bytes / 1e9:.2f} GB = {est.total_bytes / 1e9:.2f} GB"
    )

# with more devices than experts, latency mode slices expert weights
# instead of replicating them, so one batch can use every device
big = ClusterTopology(nodes=32, gpus_per_node=8)
for latency_mode in (False, True):
    built = plan(cfg, big, latency_mode=latency_mode)
    p = built.placements[0]
    print(
        f"world 256, latency_mode={latency_mode}: ep={p.ep_degree} "
        f"dp={p.expert_dp} slice={p.expert_slice}"
    )

# broken requests fail loudly rather than producing a lopsided layout
try:
    plan(cfg, cluster, tensor_slice=16)
except PlanError as e:
    print("\nrejected:", e)

# hand-built plans go through the same validator
bad = ParallelPlan(
    world_size=128,
    gpus_per_node=8,
    tensor_slice=1,
    placements=(LayerPlacement(layer_index=1, num_experts=128, ep_degree=96, expert_dp=1),),
)
for problem in validate(bad):
    print("violation:", problem)
