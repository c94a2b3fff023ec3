"""Slotted working memory: layout, addressing, joint reads, and writes.

The memory is a K×d_h matrix split into three fixed segments: topic slots
(filled once per poem), history slots (updated between lines through an
addressed write), and local slots (overwritten with the previous line's
encoder states). A write-only null slot rides along with the history
segment so the model can discard information by addressing it.

Reads and soft writes build autodiff graph nodes, so gradients reach the
slot contents and both addressing layers. Hard writes are the inference
variant: a one-hot replacement of a single slot, or a no-op when the null
slot wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, DimensionError

# Magnitude of the tie-breaking bias injected on unoccupied slots.
EMPTY_SLOT_BIAS = 0.05

# Sharpness of the differentiable write gate; large enough that a softmax
# margin of 0.1 between the top two slots saturates tanh.
DEFAULT_WRITE_SHARPNESS = 50.0

TRAIN_MODE = "train"
TEST_MODE = "test"


@dataclass
class AddressingParams:
    """One addressing head: score each slot against a query vector.

    Reading and writing use distinct instances so their score surfaces can
    diverge.
    """

    slot_width: int
    query_width: int
    attn_width: int
    w: nm.Parameter      # [slot_width + query_width, attn_width]
    bias: nm.Parameter   # [attn_width]
    score: nm.Parameter  # [attn_width]

    @classmethod
    def create(
        cls,
        prefix: str,
        slot_width: int,
        query_width: int,
        attn_width: int,
        registry: nm.ParameterRegistry,
        rng: np.random.Generator,
    ) -> "AddressingParams":
        w = registry.uniform(f"{prefix}.w", (slot_width + query_width, attn_width), rng)
        bias = registry.zeros(f"{prefix}.bias", (attn_width,))
        score = registry.uniform(f"{prefix}.score", (attn_width,), rng)
        return cls(slot_width, query_width, attn_width, w, bias, score)


class WorkingMemoryState:
    """Per-poem memory: topic/history/local segments plus occupancy flags.

    Segment boundaries are fixed for the life of a poem. Slot contents are
    Tensors so the surrounding graph can differentiate through reads and
    soft writes; occupancy flags are plain booleans used only to gate the
    tie-breaking bias.
    """

    def __init__(self, k1: int, k2: int, k3: int, d_h: int):
        if min(k1, k2, k3) < 0:
            raise ConfigError(f"segment sizes must be >= 0, got ({k1}, {k2}, {k3})")
        if d_h < 1:
            raise ConfigError(f"slot width must be >= 1, got {d_h}")
        self.k1 = k1
        self.k2 = k2
        self.k3 = k3
        self.d_h = d_h
        self.topic = nm.zeros((k1, d_h))
        self.history = nm.zeros((k2, d_h))
        self.local = nm.zeros((k3, d_h))
        self.topic_occupied = np.zeros(k1, dtype=bool)
        self.history_occupied = np.zeros(k2, dtype=bool)
        self.local_occupied = np.zeros(k3, dtype=bool)
        self._topic_written = False

    @property
    def n_slots(self) -> int:
        return self.k1 + self.k2 + self.k3

    @property
    def occupied(self) -> np.ndarray:
        return np.concatenate([self.topic_occupied, self.history_occupied, self.local_occupied])

    def rows(self) -> nm.Tensor:
        """All K real slots stacked: [K, d_h]. The null slot is excluded."""
        return nm.concat([self.topic, self.history, self.local], axis=0)

    def slot_labels(self) -> list[str]:
        return (
            [f"topic[{i}]" for i in range(self.k1)]
            + [f"history[{i}]" for i in range(self.k2)]
            + [f"local[{i}]" for i in range(self.k3)]
        )


def init_memory(k1: int, k2: int, k3: int, d_h: int) -> WorkingMemoryState:
    """Fresh all-zero memory with every slot unoccupied."""
    return WorkingMemoryState(k1, k2, k3, d_h)


def addressing_scores(mem_rows: nm.Tensor, query: nm.Tensor, params: AddressingParams) -> nm.Tensor:
    """Raw slot scores z_k = score · tanh(W[row_k; query] + bias), shape [n]."""
    if mem_rows.data.ndim != 2:
        raise DimensionError(f"memory rows must be 2D, got shape {mem_rows.data.shape}")
    n = mem_rows.data.shape[0]
    if n == 0:
        raise ContractError("cannot address an empty memory")
    if mem_rows.data.shape[1] != params.slot_width:
        raise DimensionError(
            f"slot width {mem_rows.data.shape[1]} does not match addressing params ({params.slot_width})"
        )
    if query.data.shape != (params.query_width,):
        raise DimensionError(
            f"query shape {query.data.shape} does not match addressing params ({params.query_width},)"
        )
    pairs = nm.concat([mem_rows, nm.tile_row(query, n)], axis=1)  # [n, slot+query]
    hidden = nm.tanh(nm.linear_forward(pairs, params.w, params.bias))  # [n, attn]
    return nm.matmul(hidden, params.score.tensor)  # [n]


def address(
    mem_rows: nm.Tensor,
    query: nm.Tensor,
    params: AddressingParams,
    occupied: np.ndarray,
    rng: np.random.Generator,
) -> nm.Tensor:
    """Attention over slots: softmax of scores, with a small random bias
    injected on unoccupied slots so empty (all-zero) slots are not tied.

    The bias draw always consumes exactly n values from the stream, so the
    sequence of random numbers does not depend on the occupancy pattern.
    """
    n = mem_rows.data.shape[0] if mem_rows.data.ndim == 2 else 0
    z = addressing_scores(mem_rows, query, params)
    if occupied.shape != (n,):
        raise ContractError(f"occupancy flags shape {occupied.shape} does not match {n} slots")
    draw = rng.uniform(-EMPTY_SLOT_BIAS, EMPTY_SLOT_BIAS, size=n)
    bias = np.where(occupied, 0.0, draw)
    z = nm.add(z, nm.constant(bias))
    return nm.softmax(z)


def read(
    memory: WorkingMemoryState,
    query: nm.Tensor,
    read_params: AddressingParams,
    rng: np.random.Generator,
) -> tuple[nm.Tensor, nm.Tensor]:
    """Joint read over all K real slots.

    Returns (o, alpha): the attention-weighted slot sum [d_h] and the
    attention itself [K], which callers feed into the topic trace and
    attention dumps.
    """
    rows = memory.rows()  # [K, d_h]
    alpha = address(rows, query, read_params, memory.occupied, rng)  # [K]
    o = nm.matmul(alpha, rows)  # [d_h]
    return o, alpha


def write_topic_memory(memory: WorkingMemoryState, topic_vectors: list[nm.Tensor]) -> WorkingMemoryState:
    """Fill the topic segment once per poem; unused slots stay zero."""
    if memory._topic_written:
        raise ContractError("topic memory is immutable once written for a poem")
    if len(topic_vectors) > memory.k1:
        raise ConfigError(f"{len(topic_vectors)} topic vectors exceed the {memory.k1} topic slots")
    for v in topic_vectors:
        if v.data.shape != (memory.d_h,):
            raise DimensionError(f"topic vector shape {v.data.shape} != ({memory.d_h},)")
    if topic_vectors:
        rows = list(topic_vectors) + [nm.zeros((memory.d_h,)) for _ in range(memory.k1 - len(topic_vectors))]
        memory.topic = nm.stack_rows(rows)
        memory.topic_occupied[: len(topic_vectors)] = True
    memory._topic_written = True
    return memory


def write_local_memory(memory: WorkingMemoryState, encoder_states: nm.Tensor) -> WorkingMemoryState:
    """Replace the local segment with one line's encoder states.

    Rows beyond the line length are zeroed and marked unoccupied, so each
    call fully forgets the previous line.
    """
    t_enc = encoder_states.data.shape[0]
    if encoder_states.data.ndim != 2 or encoder_states.data.shape[1] != memory.d_h:
        raise DimensionError(f"encoder states must be [T, {memory.d_h}], got {encoder_states.data.shape}")
    if t_enc > memory.k3:
        raise ConfigError(
            f"line of {t_enc} states does not fit {memory.k3} local slots; "
            f"the local segment must cover the longest line"
        )
    if t_enc < memory.k3:
        memory.local = nm.concat([encoder_states, nm.zeros((memory.k3 - t_enc, memory.d_h))], axis=0)
    else:
        memory.local = encoder_states
    memory.local_occupied[:] = False
    memory.local_occupied[:t_enc] = True
    return memory


def _write_attention(
    memory: WorkingMemoryState,
    h_t: nm.Tensor,
    v: nm.Tensor,
    write_params: AddressingParams,
    rng: np.random.Generator,
) -> nm.Tensor:
    """Write attention over the history segment plus the null slot: [K2+1]."""
    rows = nm.concat([memory.history, nm.zeros((1, memory.d_h))], axis=0)
    occupied = np.append(memory.history_occupied, False)  # null slot never occupied
    query = nm.concat([h_t, v], axis=0)
    return address(rows, query, write_params, occupied, rng)


def write_history_hard(
    memory: WorkingMemoryState,
    h_t: nm.Tensor,
    v: nm.Tensor,
    write_params: AddressingParams,
    rng: np.random.Generator,
) -> int | None:
    """Inference write: replace the argmax history slot with h_t.

    Ties break toward the lowest slot index. When the null slot wins the
    memory is left bit-identical. Returns the written slot index, or None
    for a null write.
    """
    with nm.no_grad():
        alpha = _write_attention(memory, h_t, v, write_params, rng)
        target = int(np.argmax(alpha.data))  # first maximum = lowest index
        if target == memory.k2:
            return None
        data = memory.history.data.copy()
        data[target] = h_t.data
        memory.history = nm.Tensor(data)
        memory.history_occupied[target] = True
        return target


def soft_write_gate(alpha: nm.Tensor, gamma: float) -> nm.Tensor:
    """Differentiable stand-in for a one-hot write: tanh(γ(α − max α)) + 1.

    Exactly 1 at the argmax; decays to 0 as a slot's attention falls below
    the maximum, with γ controlling how fast.
    """
    if gamma <= 0:
        raise ConfigError(f"write sharpness must be positive, got {gamma}")
    shifted = nm.sub(alpha, nm.vmax(alpha))
    return nm.add_scalar(nm.tanh(nm.scale(shifted, gamma)), 1.0)


def write_history_soft(
    memory: WorkingMemoryState,
    h_t: nm.Tensor,
    v: nm.Tensor,
    write_params: AddressingParams,
    rng: np.random.Generator,
    gamma: float = DEFAULT_WRITE_SHARPNESS,
) -> np.ndarray:
    """Training write: blend h_t into every history slot by its gate value.

    M2[k] ← (1−β[k])·M2[k] + β[k]·h_t, fully differentiable. The null
    slot's blended value is computed through the gate but discarded, which
    is what lets the model route a state to nowhere. Returns a copy of the
    write attention for inspection.
    """
    alpha = _write_attention(memory, h_t, v, write_params, rng)  # [K2+1]
    beta = soft_write_gate(alpha, gamma)  # [K2+1]
    beta_hist = nm.slice0(beta, 0, memory.k2)  # [K2]
    beta_col = nm.reshape(beta_hist, (memory.k2, 1))  # [K2, 1]
    keep = nm.add_scalar(nm.scale(beta_col, -1.0), 1.0)  # 1 − β
    blended = nm.add(
        nm.mul(keep, memory.history),
        nm.mul(beta_col, nm.tile_row(h_t, memory.k2)),
    )
    memory.history = blended
    memory.history_occupied |= beta_hist.data > 0.5
    return alpha.data.copy()


def step_history_from_line(
    memory: WorkingMemoryState,
    prev_line_states: nm.Tensor | None,
    v: nm.Tensor,
    write_params: AddressingParams,
    mode: str,
    rng: np.random.Generator,
    gamma: float = DEFAULT_WRITE_SHARPNESS,
) -> list[int | None]:
    """Write one whole line's encoder states into history, in character order.

    Returns the per-character write targets (slot index, or None when the
    null slot absorbed the state). Passing None states (no line exists yet)
    is a no-op.
    """
    if prev_line_states is None:
        return []
    targets: list[int | None] = []
    for t in range(prev_line_states.data.shape[0]):
        h_t = nm.take_row(prev_line_states, t)
        if mode == TEST_MODE:
            targets.append(write_history_hard(memory, h_t, v, write_params, rng))
        elif mode == TRAIN_MODE:
            alpha = write_history_soft(memory, h_t, v, write_params, rng, gamma=gamma)
            best = int(np.argmax(alpha))
            targets.append(None if best == memory.k2 else best)
        else:
            raise ConfigError(f"unknown write mode {mode!r}; expected '{TRAIN_MODE}' or '{TEST_MODE}'")
    return targets
