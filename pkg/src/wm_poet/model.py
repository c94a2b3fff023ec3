"""Model assembly: encoder, decoder step, traces, and the per-poem loss.

The generator is a character-level sequence-to-sequence model. Keywords
and previously produced lines are encoded by a shared bidirectional GRU;
the decoder GRU emits one line at a time, reading a slotted working
memory at every step and consulting two recurrent summaries: a global
trace v (what the poem has said so far) and a topic trace [c; u] (which
topics have been used, and how much). A genre embedding feeds the
required phonology category and the number of characters still to come
into every decode step, which is how line lengths and tonal patterns are
controlled without an end-of-sequence token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .corpus import FREE_CATEGORY, PoemExample, Vocabulary
from .errors import ConfigError, ContractError, DataError
from .memory import (
    DEFAULT_WRITE_SHARPNESS,
    TEST_MODE,
    TRAIN_MODE,
    AddressingParams,
    WorkingMemoryState,
    init_memory,
    read as memory_read,
    step_history_from_line,
    write_local_memory,
    write_topic_memory,
)


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and switches for one model instance.

    The slot width d_h is always twice the GRU width (bidirectional
    concatenation), and the topic-trace width is the content part plus one
    usage counter per topic slot.
    """

    vocab_size: int
    max_line_length: int
    max_lines: int
    word_dim: int = 256
    phonology_dim: int = 64
    length_dim: int = 32
    hidden: int = 512
    trace_dim: int = 512
    content_dim: int = 20
    k1: int = 4
    k2: int = 4
    k3: int | None = None
    attn_dim: int | None = None
    dropout: float = 0.25
    write_gamma: float = DEFAULT_WRITE_SHARPNESS
    use_genre_embedding: bool = True
    use_topic_trace: bool = True
    truncate_bptt: bool = False

    def __post_init__(self):
        if self.vocab_size < len(Vocabulary.RESERVED_TOKENS) + 1:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no room for real characters")
        for name in ("max_line_length", "word_dim", "phonology_dim", "length_dim",
                     "hidden", "trace_dim", "content_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_lines < 2:
            raise ConfigError(f"max_lines must be >= 2, got {self.max_lines}")
        if self.k1 < 1 or self.k2 < 0:
            raise ConfigError(f"need k1 >= 1 and k2 >= 0, got k1={self.k1}, k2={self.k2}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.write_gamma <= 0:
            raise ConfigError(f"write_gamma must be positive, got {self.write_gamma}")
        if self.k3 is not None and self.k3 < self.max_line_length:
            raise ConfigError(
                f"k3={self.k3} cannot hold a line of {self.max_line_length} characters"
            )

    @property
    def d_h(self) -> int:
        return 2 * self.hidden

    @property
    def local_slots(self) -> int:
        return self.k3 if self.k3 is not None else self.max_line_length

    @property
    def attention_dim(self) -> int:
        return self.attn_dim if self.attn_dim is not None else self.hidden

    @property
    def genre_dim(self) -> int:
        return self.phonology_dim + self.length_dim

    @property
    def topic_trace_dim(self) -> int:
        return self.content_dim + self.k1

    @property
    def decoder_input_dim(self) -> int:
        width = self.word_dim + self.d_h + self.trace_dim
        if self.use_genre_embedding:
            width += self.genre_dim
        return width

    @property
    def read_query_dim(self) -> int:
        width = self.hidden + self.trace_dim
        if self.use_topic_trace:
            width += self.topic_trace_dim
        return width

    @property
    def write_query_dim(self) -> int:
        return self.d_h + self.trace_dim

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_line_length": self.max_line_length,
            "max_lines": self.max_lines,
            "word_dim": self.word_dim,
            "phonology_dim": self.phonology_dim,
            "length_dim": self.length_dim,
            "hidden": self.hidden,
            "trace_dim": self.trace_dim,
            "content_dim": self.content_dim,
            "k1": self.k1,
            "k2": self.k2,
            "k3": self.k3,
            "attn_dim": self.attn_dim,
            "dropout": self.dropout,
            "write_gamma": self.write_gamma,
            "use_genre_embedding": self.use_genre_embedding,
            "use_topic_trace": self.use_topic_trace,
            "truncate_bptt": self.truncate_bptt,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ModelConfig":
        return cls(**payload)


@dataclass
class LineEncoding:
    """Encoder output for one token sequence."""

    states: nm.Tensor  # [T, d_h]
    mean: nm.Tensor    # [d_h]


@dataclass
class DecoderContext:
    """Mutable per-poem decoder state.

    s is the decoder GRU state, v the global trace, c/u the two halves of
    the topic trace. alpha_log collects the current line's read attentions
    so the topic trace can average them at the line boundary.
    """

    s: nm.Tensor
    v: nm.Tensor
    c: nm.Tensor
    u: nm.Tensor
    line_index: int = 0
    alpha_log: list = field(default_factory=list)

    def clone(self) -> "DecoderContext":
        return DecoderContext(
            s=self.s, v=self.v, c=self.c, u=self.u,
            line_index=self.line_index, alpha_log=list(self.alpha_log),
        )


class WorkingMemoryModel:
    """All parameters plus the forward passes that tie them together."""

    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocabulary,
        rng: np.random.Generator,
        embedding_table: np.ndarray | None = None,
    ):
        if len(vocab) != config.vocab_size:
            raise ConfigError(f"vocabulary size {len(vocab)} != config vocab_size {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.registry = nm.ParameterRegistry()
        reg, c = self.registry, config

        if embedding_table is not None:
            if embedding_table.shape != (c.vocab_size, c.word_dim):
                raise ConfigError(
                    f"embedding table shape {embedding_table.shape} != "
                    f"({c.vocab_size}, {c.word_dim})"
                )
            self.embedding = reg.add("embedding", embedding_table.astype(nm.default_dtype()))
        else:
            self.embedding = reg.uniform("embedding", (c.vocab_size, c.word_dim), rng)

        self.enc_fwd = nm.GruCellParams.create("encoder.fwd", c.word_dim, c.hidden, reg, rng)
        self.enc_bwd = nm.GruCellParams.create("encoder.bwd", c.word_dim, c.hidden, reg, rng)

        self.w_topic = reg.uniform("topic_proj.w", (c.d_h, c.d_h), rng)
        self.b_topic = reg.zeros("topic_proj.b", (c.d_h,))

        if c.use_genre_embedding:
            self.phonology_table = reg.uniform("genre.phonology", (FREE_CATEGORY + 1, c.phonology_dim), rng)
            self.length_table = reg.uniform("genre.length", (c.max_line_length + 1, c.length_dim), rng)

        self.decoder_gru = nm.GruCellParams.create("decoder", c.decoder_input_dim, c.hidden, reg, rng)
        self.w_out = reg.uniform("output.w", (c.hidden, c.vocab_size), rng)
        self.b_out = reg.zeros("output.b", (c.vocab_size,))

        self.w_init = reg.uniform("line_init.w", (c.d_h, c.hidden), rng)
        self.b_init = reg.zeros("line_init.b", (c.hidden,))

        self.w_trace = reg.uniform("global_trace.w", (c.trace_dim + c.d_h, c.trace_dim), rng)
        self.b_trace = reg.zeros("global_trace.b", (c.trace_dim,))

        if c.use_topic_trace:
            self.w_topic_trace = reg.uniform("topic_trace.w", (c.content_dim + c.d_h, c.content_dim), rng)
            self.b_topic_trace = reg.zeros("topic_trace.b", (c.content_dim,))

        self.read_head = AddressingParams.create(
            "read_head", c.d_h, c.read_query_dim, c.attention_dim, reg, rng)
        self.write_head = AddressingParams.create(
            "write_head", c.d_h, c.write_query_dim, c.attention_dim, reg, rng)

    def parameters(self) -> list[nm.Parameter]:
        return list(self.registry)

    # ------------------------------------------------------------------
    # encoding
    # ------------------------------------------------------------------

    def encode_line(self, tokens: Sequence[int], mode: str = TEST_MODE,
                    rng: np.random.Generator | None = None) -> LineEncoding:
        """Bidirectional encoding: states [T, d_h] and their mean [d_h].

        The same encoder serves poem lines and keywords.
        """
        t_enc = len(tokens)
        if t_enc == 0:
            raise ContractError("cannot encode an empty token sequence")
        if t_enc > self.config.max_line_length:
            raise ContractError(
                f"sequence of {t_enc} tokens exceeds max line length {self.config.max_line_length}"
            )
        emb = nm.gather_rows(self.embedding.tensor, list(tokens))  # [T, word_dim]
        if mode == TRAIN_MODE:
            emb = nm.dropout_apply(emb, self.config.dropout, True, rng)
        xs = [nm.take_row(emb, t) for t in range(t_enc)]

        h = nm.zeros((self.config.hidden,))
        fwd = []
        for t in range(t_enc):
            h = nm.gru_cell_forward(xs[t], h, self.enc_fwd)
            fwd.append(h)
        h = nm.zeros((self.config.hidden,))
        bwd = [None] * t_enc
        for t in reversed(range(t_enc)):
            h = nm.gru_cell_forward(xs[t], h, self.enc_bwd)
            bwd[t] = h
        states = nm.stack_rows([nm.concat([fwd[t], bwd[t]], axis=0) for t in range(t_enc)])
        return LineEncoding(states=states, mean=nm.mean0(states))

    def topic_vector(self, keyword_tokens: Sequence[int], mode: str = TEST_MODE,
                     rng: np.random.Generator | None = None) -> nm.Tensor:
        """Topic vector for one keyword: tanh projection of its mean encoding."""
        enc = self.encode_line(keyword_tokens, mode, rng)
        return nm.tanh(nm.linear_forward(enc.mean, self.w_topic, self.b_topic))

    # ------------------------------------------------------------------
    # genre embedding
    # ------------------------------------------------------------------

    def genre_vector(self, category_id: int, remaining: int) -> nm.Tensor | None:
        """[phonology row; length row], or None when the switch is off."""
        if not self.config.use_genre_embedding:
            return None
        if not 0 <= category_id <= FREE_CATEGORY:
            raise ContractError(f"phonology category {category_id} out of range [0, {FREE_CATEGORY}]")
        if not 0 <= remaining <= self.config.max_line_length:
            raise ContractError(
                f"remaining length {remaining} out of range [0, {self.config.max_line_length}]"
            )
        return nm.concat(
            [nm.take_row(self.phonology_table.tensor, category_id),
             nm.take_row(self.length_table.tensor, remaining)],
            axis=0,
        )

    # ------------------------------------------------------------------
    # per-poem state
    # ------------------------------------------------------------------

    def make_memory(self) -> WorkingMemoryState:
        c = self.config
        return init_memory(c.k1, c.k2, c.local_slots, c.d_h)

    def new_context(self) -> DecoderContext:
        c = self.config
        return DecoderContext(
            s=nm.zeros((c.hidden,)),
            v=nm.zeros((c.trace_dim,)),
            c=nm.zeros((c.content_dim,)),
            u=nm.zeros((c.k1,)),
        )

    def line_start_state(self, ctx: DecoderContext, prev_line_mean: nm.Tensor | None) -> None:
        """Reset s for a new line: projected previous-line summary, or zeros."""
        if prev_line_mean is None:
            ctx.s = nm.zeros((self.config.hidden,))
        else:
            ctx.s = nm.tanh(nm.linear_forward(prev_line_mean, self.w_init, self.b_init))

    # ------------------------------------------------------------------
    # decoding
    # ------------------------------------------------------------------

    def decode_step(
        self,
        ctx: DecoderContext,
        y_prev: int,
        memory: WorkingMemoryState,
        g_t: nm.Tensor | None,
        mode: str,
        rng: np.random.Generator,
    ) -> tuple[nm.Tensor, nm.Tensor]:
        """One character step: read memory, advance the GRU, emit logits.

        Returns (logits [vocab_size], read attention [K]). The attention is
        also appended to ctx.alpha_log for the topic-trace update.
        """
        c = self.config
        query_parts = [ctx.s, ctx.v]
        if c.use_topic_trace:
            query_parts.append(nm.concat([ctx.c, ctx.u], axis=0))
        query = nm.concat(query_parts, axis=0)
        o_t, alpha = memory_read(memory, query, self.read_head, rng)

        parts = [nm.take_row(self.embedding.tensor, y_prev), o_t]
        if c.use_genre_embedding:
            if g_t is None:
                raise ContractError("genre embedding is enabled but no genre vector was given")
            parts.append(g_t)
        parts.append(ctx.v)
        x = nm.concat(parts, axis=0)
        training = mode == TRAIN_MODE
        x = nm.dropout_apply(x, c.dropout, training, rng)
        s_new = nm.gru_cell_forward(x, ctx.s, self.decoder_gru)
        s_out = nm.dropout_apply(s_new, c.dropout, training, rng)
        logits = nm.linear_forward(s_out, self.w_out, self.b_out)

        ctx.s = s_new
        ctx.alpha_log.append(alpha)
        return logits, alpha

    # ------------------------------------------------------------------
    # traces
    # ------------------------------------------------------------------

    def update_global_trace(self, ctx: DecoderContext, mean_state: nm.Tensor) -> None:
        """v ← tanh(W[v; mean line encoding] + b), once per completed line."""
        joint = nm.concat([ctx.v, mean_state], axis=0)
        ctx.v = nm.tanh(nm.linear_forward(joint, self.w_trace, self.b_trace))

    def update_topic_trace(self, ctx: DecoderContext, memory: WorkingMemoryState) -> None:
        """Fold the finished line's mean read attention into [c; u].

        c absorbs the attention-weighted topic content through a tanh
        layer; u accumulates the raw attention mass per topic slot, so it
        never decreases.
        """
        if not ctx.alpha_log:
            raise ContractError("update_topic_trace called with no decode steps recorded")
        if self.config.use_topic_trace:
            mean_alpha = nm.mean0(nm.stack_rows(ctx.alpha_log))  # [K]
            topic_alpha = nm.slice0(mean_alpha, 0, self.config.k1)  # [K1]
            weighted = nm.scale(nm.matmul(topic_alpha, memory.topic), 1.0 / self.config.k1)  # [d_h]
            joint = nm.concat([ctx.c, weighted], axis=0)
            ctx.c = nm.tanh(nm.linear_forward(joint, self.w_topic_trace, self.b_topic_trace))
            ctx.u = nm.add(ctx.u, topic_alpha)
        ctx.alpha_log = []
        ctx.line_index += 1

    def _detach_line_state(self, ctx: DecoderContext, memory: WorkingMemoryState) -> None:
        # Optional truncated backpropagation: cut the graph at line ends.
        for name in ("s", "v", "c", "u"):
            setattr(ctx, name, nm.Tensor(getattr(ctx, name).data.copy()))
        memory.topic = nm.Tensor(memory.topic.data.copy())
        memory.history = nm.Tensor(memory.history.data.copy())
        memory.local = nm.Tensor(memory.local.data.copy())

    # ------------------------------------------------------------------
    # training loss
    # ------------------------------------------------------------------

    def poem_forward_loss(
        self,
        example: PoemExample,
        rng: np.random.Generator,
        mode: str = TRAIN_MODE,
    ) -> nm.Tensor:
        """Teacher-forced mean cross entropy per character for one poem.

        Runs the full writing schedule: topics first; before line i the
        encoder states of line i−2 go to history and line i−1 to local
        memory; after each line the global and topic traces advance.
        """
        c = self.config
        if len(example.lines) > c.max_lines:
            raise DataError(f"poem has {len(example.lines)} lines, model allows {c.max_lines}")
        for line in example.lines:
            if len(line) > c.max_line_length:
                raise DataError(f"line of {len(line)} characters exceeds {c.max_line_length}")

        memory = self.make_memory()
        topics = [self.topic_vector(self.vocab.encode(kw), mode, rng) for kw in example.keywords]
        if len(topics) > c.k1:
            raise DataError(f"{len(topics)} keywords exceed the {c.k1} topic slots")
        write_topic_memory(memory, topics)
        ctx = self.new_context()

        encodings: list[LineEncoding] = []
        loss_sum: nm.Tensor | None = None
        n_chars = 0
        for i, line in enumerate(example.lines):
            if i >= 2:
                step_history_from_line(
                    memory, encodings[i - 2].states, ctx.v, self.write_head,
                    mode, rng, gamma=c.write_gamma,
                )
            if i >= 1:
                write_local_memory(memory, encodings[i - 1].states)
            self.line_start_state(ctx, encodings[i - 1].mean if i >= 1 else None)

            pattern_line = example.pattern.lines[i]
            for t, y_t in enumerate(line):
                y_prev = line[t - 1] if t > 0 else Vocabulary.BOS
                g_t = self.genre_vector(pattern_line[t], len(line) - 1 - t)
                logits, _ = self.decode_step(ctx, y_prev, memory, g_t, mode, rng)
                ce = nm.cross_entropy_logits(logits, y_t)
                loss_sum = ce if loss_sum is None else nm.add(loss_sum, ce)
                n_chars += 1

            enc = self.encode_line(line, mode, rng)
            encodings.append(enc)
            self.update_global_trace(ctx, enc.mean)
            self.update_topic_trace(ctx, memory)
            if c.truncate_bptt and mode == TRAIN_MODE:
                self._detach_line_state(ctx, memory)

        return nm.scale(loss_sum, 1.0 / n_chars)


def poem_char_count(example: PoemExample) -> int:
    return sum(len(line) for line in example.lines)
