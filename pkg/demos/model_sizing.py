"""
Model sizing: dense, expert-sparse, pyramid, student
====================================================

Parameter and per-token compute accounting across the built-in presets,
plus a depth-reduced student derived from a pyramid teacher.
"""

from moekit.arch import (
    build_pr_moe,
    build_standard,
    count_flops_per_token,
    count_params,
    dense_config,
)
from moekit.distill import derive_student
from moekit.presets import get_preset, preset_names

print(f"{'preset':24} {'total':>16} {'active/token':>14} {'flops/token':>14}")
for name in preset_names():
    cfg = get_preset(name).config
    pc = count_params(cfg)
    print(f"{name:24} {pc.total:>16,} {pc.active_per_token:>14,} {count_flops_per_token(cfg):>14,}")

# replacing every other FFN with 128 experts multiplies total parameters
# by ~40x while the active set per token barely moves
dense = count_params(get_preset("dense-1.3B").config)
moe = count_params(get_preset("1.3B+MoE-128").config)
print("\ntotal growth:", f"{moe.total / dense.total:.1f}x")
print("active growth:", f"{moe.active_per_token / dense.active_per_token:.4f}x")

# that gap is where the serving win comes from: a quality-matched dense
# model needs ~5x the per-token compute
ratio = count_flops_per_token(get_preset("dense-6.7B").config) / count_flops_per_token(
    get_preset("1.3B+MoE-128").config
)
print("dense-6.7B flops / 1.3B+MoE-128 flops:", f"{ratio:.2f}")

# pyramid schedules put more experts in the deepest routed layers, and the
# residual form adds back a shared FFN next to the gated expert
base = dense_config(24, 2048, 16)
uniform = build_standard(base, 64)
pyramid = build_pr_moe(base, (64,) * 10 + (128,) * 2, residual=True)
print("\nuniform 64-expert total: ", f"{count_params(uniform).total:,}")
print("pyramid 64/128 + residual:", f"{count_params(pyramid).total:,}")
print("routed widths:", [s.experts for s in pyramid.layers if s.kind == "moe"])

# a student keeps the teacher's widest layers and drops shallow blocks
teacher = get_preset("1.3B+PR-MoE-64/128").config
plan = derive_student(teacher, target_depth=21)
t_total = count_params(plan.teacher).total
s_total = count_params(plan.student).total
print("\nstudent from 1.3B+PR-MoE-64/128:")
print("  removed teacher blocks:", plan.removed_layers)
print("  teacher params:", f"{t_total:,}")
print("  student params:", f"{s_total:,}", f"({s_total / t_total:.1%} of teacher)")
print("  student routed widths:", [s.experts for s in plan.student.layers if s.kind == "moe"])
