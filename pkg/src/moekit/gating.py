"""Top-k token routing with capacity-slotted dispatch tables.

The routing pipeline turns a batch of S token activations into per-expert
work buffers and back:

  1. ``top_k_gate``       - softmax over expert logits, pick k experts/token.
  2. ``build_dispatch_plan`` - assign each (token, choice) a capacity slot on
     its expert using an exclusive prefix scan over indicator vectors; tokens
     beyond an expert's capacity are dropped (slot = DROPPED).
  3. ``scatter_tokens``   - gather token rows into (E, c, M) expert buffers.
  4. ``combine_tokens``   - return expert outputs to original token order,
     scaled by the gate probability; dropped assignments contribute nothing,
     so a fully dropped token comes back as the zero row (its residual path
     elsewhere carries the activation through).

``sparse_dispatch_oracle`` / ``sparse_combine_oracle`` implement the same
semantics as literal one-hot tensor contractions of shape (S, E, c). They are
reference implementations: slower by a factor of E, used to cross-check the
table-driven path.

Operation counters measure the token-routing index space each path sweeps:
the one-hot contraction touches (token, expert, slot, hidden) = S*E*c*M
multiply-accumulate positions per transform, while the table-driven transform
resolves each token against only its own expert's c slots, S*c*M positions
per transform. The ratio of the two is the expert count E.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

__all__ = [
    "DROPPED",
    "GatingConfig",
    "TopKGate",
    "DispatchPlan",
    "ExpertBuffers",
    "OpCounter",
    "top_k_gate",
    "exclusive_scan_blelloch",
    "build_dispatch_plan",
    "scatter_tokens",
    "combine_tokens",
    "sparse_dispatch_oracle",
    "sparse_combine_oracle",
]

DROPPED = -1  # slot value for assignments that exceeded expert capacity


@dataclass(frozen=True)
class GatingConfig:
    """Routing hyperparameters.

    k is the number of experts each token is sent to (1 or 2). Capacity per
    expert is ceil(capacity_factor * S * k / E) slots for a batch of S tokens.
    """

    num_experts: int
    k: int = 1
    capacity_factor: float = 1.0

    def __post_init__(self) -> None:
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.k not in (1, 2):
            raise ValueError(f"k must be 1 or 2, got {self.k}")
        if self.k > self.num_experts:
            raise ValueError(f"k={self.k} exceeds num_experts={self.num_experts}")
        if not (self.capacity_factor > 0):
            raise ValueError(f"capacity_factor must be positive, got {self.capacity_factor}")

    def capacity(self, num_tokens: int) -> int:
        if num_tokens == 0:
            return 0
        return int(np.ceil(self.capacity_factor * num_tokens * self.k / self.num_experts))


@dataclass(frozen=True)
class TopKGate:
    """Per-token routing choices.

    expert_ids: (S, k) int64, in descending logit order, ties to lower index.
    gate_probs: (S, k) softmax over the full expert set at the chosen ids.
    probs:      (S, E) full softmax matrix (row-stochastic).
    """

    expert_ids: np.ndarray
    gate_probs: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class DispatchPlan:
    """Dense token-to-expert mapping table plus capacity bookkeeping.

    expert_ids / gate_probs mirror the gate output; slots[(s, j)] is the
    capacity slot of token s's j-th choice on its expert, or DROPPED.
    expert_load counts kept (non-dropped) assignments per expert.
    """

    num_tokens: int
    num_experts: int
    k: int
    capacity: int
    expert_ids: np.ndarray  # (S, k)
    gate_probs: np.ndarray  # (S, k)
    slots: np.ndarray  # (S, k), DROPPED where over capacity
    expert_load: np.ndarray  # (E,), kept counts, each <= capacity

    def kept_mask(self) -> np.ndarray:
        return self.slots != DROPPED


@dataclass
class ExpertBuffers:
    """Per-expert work buffers: data[(e, slot)] holds one routed token row."""

    data: np.ndarray  # (E, capacity, M)
    occupied: np.ndarray  # (E, capacity) bool


@dataclass
class OpCounter:
    """Plain accumulator for routing-transform operation counts."""

    ops: int = 0

    def add(self, n: int) -> None:
        self.ops += int(n)


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------


def top_k_gate(logits: np.ndarray, cfg: GatingConfig) -> TopKGate:
    """Select each token's k highest-logit experts.

    logits: (S, E) float64. Probabilities are the softmax over all E logits
    evaluated at the selected indices; the top-2 pair is deliberately not
    renormalized. Ties break toward the lower expert index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"gate logits must be 2-D, got shape {logits.shape}")
    if logits.shape[1] != cfg.num_experts:
        raise ShapeError(
            f"gate logits have {logits.shape[1]} columns, config expects {cfg.num_experts}"
        )
    shifted = logits - logits.max(axis=1, keepdims=True) if logits.size else logits
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True) if logits.size else e
    # stable sort on negated logits: equal logits keep ascending index order
    order = np.argsort(-logits, axis=1, kind="stable")
    ids = order[:, : cfg.k].astype(np.int64)
    sel = np.take_along_axis(probs, ids, axis=1) if logits.size else np.zeros_like(ids, dtype=float)
    return TopKGate(expert_ids=ids, gate_probs=sel, probs=probs)


# ---------------------------------------------------------------------------
# work-efficient exclusive prefix scan
# ---------------------------------------------------------------------------


def exclusive_scan_blelloch(values: np.ndarray) -> np.ndarray:
    """Work-efficient exclusive prefix sum (up-sweep + down-sweep).

    Inputs of any length are padded to the next power of two internally.
    Output[i] = sum(values[:i]); output[0] = 0. Exact for integer inputs.
    """
    values = np.asarray(values)
    n = values.shape[0]
    if values.ndim != 1:
        raise ShapeError(f"scan input must be 1-D, got shape {values.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.int64 if values.dtype.kind in "iub" else values.dtype)
    dtype = np.int64 if values.dtype.kind in "iub" else np.float64
    m = 1 << (n - 1).bit_length()
    buf = np.zeros(m, dtype=dtype)
    buf[:n] = values

    # up-sweep: build partial sums at stride-aligned positions
    d = 1
    while d < m:
        buf[2 * d - 1 :: 2 * d] += buf[d - 1 :: 2 * d]
        d *= 2

    # down-sweep: clear the root, push prefixes back down
    buf[m - 1] = 0
    d = m // 2
    while d >= 1:
        left = buf[d - 1 :: 2 * d].copy()
        buf[d - 1 :: 2 * d] = buf[2 * d - 1 :: 2 * d]
        buf[2 * d - 1 :: 2 * d] += left
        d //= 2

    return buf[:n]


# ---------------------------------------------------------------------------
# dispatch planning
# ---------------------------------------------------------------------------


def build_dispatch_plan(gates: TopKGate, cfg: GatingConfig, num_tokens: int) -> DispatchPlan:
    """Assign capacity slots in ascending token order per expert.

    Assignments are processed in flattened token-major order (token 0 choice
    0, token 0 choice 1, token 1 choice 0, ...). For each expert, the slot of
    an assignment is the number of earlier assignments to that expert,
    computed with the exclusive scan over the expert's indicator vector.
    Assignments landing at slot >= capacity are DROPPED.
    """
    if gates.expert_ids.shape != (num_tokens, cfg.k):
        raise ShapeError(
            f"gate table shape {gates.expert_ids.shape} does not match "
            f"({num_tokens}, {cfg.k})"
        )
    cap = cfg.capacity(num_tokens)
    flat_ids = gates.expert_ids.reshape(-1)  # token-major
    slots_flat = np.full(flat_ids.shape[0], DROPPED, dtype=np.int64)
    load = np.zeros(cfg.num_experts, dtype=np.int64)
    for e in range(cfg.num_experts):
        indicator = (flat_ids == e).astype(np.int64)
        prior = exclusive_scan_blelloch(indicator)  # running count of e-assignments
        mine = indicator == 1
        slot = prior[mine]
        kept = slot < cap
        chosen = np.where(mine)[0]
        slots_flat[chosen[kept]] = slot[kept]
        load[e] = int(kept.sum())
    return DispatchPlan(
        num_tokens=num_tokens,
        num_experts=cfg.num_experts,
        k=cfg.k,
        capacity=cap,
        expert_ids=gates.expert_ids.copy(),
        gate_probs=gates.gate_probs.copy(),
        slots=slots_flat.reshape(num_tokens, cfg.k),
        expert_load=load,
    )


# ---------------------------------------------------------------------------
# table-driven scatter / combine
# ---------------------------------------------------------------------------


def scatter_tokens(
    batch: np.ndarray, plan: DispatchPlan, counter: OpCounter | None = None
) -> ExpertBuffers:
    """Copy each kept token row into its expert's capacity slot.

    batch: (S, M). Unoccupied slots are zero-filled. Counter accounting: the
    table resolves each of the S*k assignments against its expert's c slots,
    M lanes wide -> S*c*M per transform (no factor of E).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] != plan.num_tokens:
        raise ShapeError(f"batch shape {batch.shape} does not match plan S={plan.num_tokens}")
    m = batch.shape[1]
    data = np.zeros((plan.num_experts, plan.capacity, m))
    occupied = np.zeros((plan.num_experts, plan.capacity), dtype=bool)
    kept = plan.kept_mask()
    tok = np.nonzero(kept)[0]
    e_ids = plan.expert_ids[kept]
    slots = plan.slots[kept]
    data[e_ids, slots] = batch[tok]
    occupied[e_ids, slots] = True
    if counter is not None:
        counter.add(plan.num_tokens * plan.capacity * m)
    return ExpertBuffers(data=data, occupied=occupied)


def combine_tokens(
    outputs: ExpertBuffers,
    plan: DispatchPlan,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Return expert outputs to original token order, gate-prob scaled.

    Each token row is the sum over its kept assignments of
    gate_prob * expert_output[expert, slot]; tokens with every assignment
    dropped come back as zero rows. Same counter convention as scatter.
    """
    e_count, cap, m = outputs.data.shape
    if e_count != plan.num_experts or cap != plan.capacity:
        raise ShapeError(
            f"buffer shape {outputs.data.shape} does not match plan "
            f"(E={plan.num_experts}, c={plan.capacity})"
        )
    combined = np.zeros((plan.num_tokens, m))
    kept = plan.kept_mask()
    tok = np.nonzero(kept)[0]
    e_ids = plan.expert_ids[kept]
    slots = plan.slots[kept]
    probs = plan.gate_probs[kept]
    np.add.at(combined, tok, probs[:, None] * outputs.data[e_ids, slots])
    if counter is not None:
        counter.add(plan.num_tokens * plan.capacity * m)
    return combined


# ---------------------------------------------------------------------------
# one-hot contraction oracles
# ---------------------------------------------------------------------------


def _onehot_dispatch_mask(gates: TopKGate, cfg: GatingConfig, num_tokens: int) -> np.ndarray:
    """(S, E, c) one-hot dispatch mask with the same slot order as the table.

    Slot positions are derived independently of the scan path, with a plain
    sequential cumulative sum over flattened token-major assignments.
    """
    cap = cfg.capacity(num_tokens)
    flat_ids = gates.expert_ids.reshape(-1)
    onehot_flat = flat_ids[:, None] == np.arange(cfg.num_experts)[None, :]
    running = np.cumsum(onehot_flat, axis=0) - onehot_flat  # exclusive count
    mask = np.zeros((num_tokens * max(cfg.k, 1), cfg.num_experts, cap))
    pos = np.where(onehot_flat)
    slots = running[pos]
    keep = slots < cap
    mask[pos[0][keep], pos[1][keep], slots[keep]] = 1.0
    return mask.reshape(num_tokens, cfg.k, cfg.num_experts, cap).sum(axis=1)


def sparse_dispatch_oracle(
    batch: np.ndarray,
    gates: TopKGate,
    cfg: GatingConfig,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Dispatch via literal (S, E, c) one-hot contraction. Reference path.

    Returns (E, c, M) buffers; counts S*E*c*M multiply-accumulates.
    """
    batch = np.asarray(batch, dtype=np.float64)
    s = batch.shape[0]
    mask = _onehot_dispatch_mask(gates, cfg, s)
    out = np.einsum("sec,sm->ecm", mask, batch)
    if counter is not None:
        counter.add(s * cfg.num_experts * cfg.capacity(s) * batch.shape[1])
    return out


def sparse_combine_oracle(
    expert_outputs: np.ndarray,
    gates: TopKGate,
    cfg: GatingConfig,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Combine via the gate-prob weighted one-hot contraction. Reference path.

    expert_outputs: (E, c, M); returns (S, M) in original token order.
    """
    s = gates.expert_ids.shape[0]
    mask = _onehot_dispatch_mask(gates, cfg, s)
    weights = np.zeros((s, cfg.k))
    # recover which assignments survived: mask row sums per (token, expert)
    present = mask.sum(axis=2)  # (S, E) 1.0 where the assignment kept a slot
    for j in range(cfg.k):
        kept = present[np.arange(s), gates.expert_ids[:, j]] > 0
        weights[kept, j] = gates.gate_probs[kept, j]
    wmask = np.zeros_like(mask)
    for j in range(cfg.k):
        cols = gates.expert_ids[:, j]
        wmask[np.arange(s), cols, :] += mask[np.arange(s), cols, :] * weights[:, j : j + 1]
    out = np.einsum("sec,ecm->sm", wmask, expert_outputs)
    if counter is not None:
        counter.add(s * cfg.num_experts * cfg.capacity(s) * expert_outputs.shape[2])
    return out
