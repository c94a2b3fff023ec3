"""Beam-search decoding of lines and the poem-level generation loop.

Within a line every hypothesis advances its own decoder context while
sharing one frozen memory; memory writes (finished lines into the history
and local segments) happen only between lines, using the states of the
single selected hypothesis. At each step all hypotheses see the identical
slot-bias noise — the step's draw is made once and replayed — so scores
stay comparable across the beam, a beam of one reproduces greedy decoding
exactly, and a wider beam can only improve the found score.

Phonological control is layered: the genre embedding conditions the
decoder softly, and an optional hard mask removes characters whose lexicon
category contradicts the pattern. A repetition guard (on by default)
blocks a character from reappearing within the same line unless the mask
would otherwise leave no candidate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nm
from .corpus import (
    FREE_CATEGORY,
    GenrePattern,
    PatternComplianceReport,
    PhonologyLexicon,
    Vocabulary,
    validate_against_pattern,
)
from .errors import ConfigError, ConstraintInfeasibleError, ContractError, DataError
from .memory import (
    TEST_MODE,
    WorkingMemoryState,
    step_history_from_line,
    write_local_memory,
    write_topic_memory,
)
from .model import DecoderContext, LineEncoding, WorkingMemoryModel


@dataclass(frozen=True)
class GenerationRequest:
    """What to generate: topics, a structural pattern, and search settings."""

    keywords: tuple[str, ...]
    pattern: GenrePattern
    seed: int = 0
    beam_size: int = 20
    hard_constraint: bool = True
    n_best: int = 1
    forbid_repetition: bool = True

    def __post_init__(self):
        if not 1 <= len(self.keywords) <= 4:
            raise DataError(f"need 1 to 4 keywords, got {len(self.keywords)}")
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.n_best < 1:
            raise ConfigError(f"n_best must be >= 1, got {self.n_best}")


@dataclass
class BeamHypothesis:
    """One partial line: chosen tokens, accumulated score, decoder state."""

    tokens: tuple[int, ...]
    log_prob: float
    ctx: DecoderContext

    @property
    def alpha_log(self) -> list:
        """Memory-read distributions recorded for this hypothesis's steps."""
        return self.ctx.alpha_log


def _allowed_mask(
    vocab: Vocabulary, lexicon: PhonologyLexicon | None, category: int
) -> np.ndarray:
    """Boolean vocab mask of candidate characters for one position."""
    mask = np.ones(len(vocab), dtype=bool)
    mask[: len(Vocabulary.RESERVED_TOKENS)] = False
    if lexicon is not None and category != FREE_CATEGORY:
        for idx in np.flatnonzero(mask):
            if lexicon.category(vocab.char_of(int(idx))) != category:
                mask[idx] = False
    return mask


def beam_search_line(
    model: WorkingMemoryModel,
    ctx: DecoderContext,
    memory: WorkingMemoryState,
    pattern_line: Sequence[int],
    rng: np.random.Generator,
    *,
    beam_size: int = 20,
    hard_constraint: bool = True,
    forbid_repetition: bool = True,
    lexicon: PhonologyLexicon | None = None,
) -> list[BeamHypothesis]:
    """Decode one line of exactly ``len(pattern_line)`` characters.

    Returns hypotheses sorted by log probability, best first. The memory
    is read but never written; the caller's ``ctx`` is left untouched.
    Raises a constraint-infeasible error when the hard mask removes every
    candidate at some position.
    """
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    length = len(pattern_line)
    if not 1 <= length <= model.config.max_line_length:
        raise ContractError(
            f"line length {length} outside [1, {model.config.max_line_length}]"
        )
    if hard_constraint and lexicon is None:
        raise ConfigError("hard_constraint requires a phonology lexicon")

    beams = [BeamHypothesis(tokens=(), log_prob=0.0, ctx=ctx.clone())]
    for t, category in enumerate(pattern_line):
        g_t = model.genre_vector(category, length - 1 - t)
        allowed = _allowed_mask(
            model.vocab, lexicon if hard_constraint else None, category
        )
        if not allowed.any():
            raise ConstraintInfeasibleError(
                f"no vocabulary character satisfies category {category} "
                f"at position {t}",
                position=t,
            )
        # every hypothesis replays the same slot-bias draw for this step
        step_state = rng.bit_generator.state
        advanced: list[DecoderContext] = []
        candidates: list[tuple[float, int, int]] = []
        step_rng = None
        for b_idx, hyp in enumerate(beams):
            step_rng = np.random.default_rng(0)
            step_rng.bit_generator.state = step_state
            y_prev = hyp.tokens[-1] if hyp.tokens else Vocabulary.BOS
            hyp_ctx = hyp.ctx.clone()
            with nm.no_grad():
                logits, _ = model.decode_step(
                    hyp_ctx, y_prev, memory, g_t, TEST_MODE, step_rng
                )
            advanced.append(hyp_ctx)
            log_probs = nm.log_softmax_values(logits.data)
            mask = allowed
            if forbid_repetition and hyp.tokens:
                narrowed = mask.copy()
                narrowed[list(set(hyp.tokens))] = False
                if narrowed.any():
                    mask = narrowed
            for tok in np.flatnonzero(mask):
                candidates.append(
                    (hyp.log_prob + float(log_probs[tok]), b_idx, int(tok))
                )
        rng.bit_generator.state = step_rng.bit_generator.state
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        beams = [
            BeamHypothesis(
                tokens=beams[b_idx].tokens + (tok,),
                log_prob=score,
                ctx=advanced[b_idx].clone(),
            )
            for score, b_idx, tok in candidates[:beam_size]
        ]
    return beams


@dataclass
class GenerationResult:
    """A finished poem plus everything needed to inspect how it was made."""

    lines: list[str]
    tokens: list[tuple[int, ...]]
    log_prob: float
    compliance: PatternComplianceReport
    diagnostics: dict = field(default_factory=dict)

    @property
    def text(self) -> str:
        return "\n".join(self.lines)

    def to_dict(self) -> dict:
        return {
            "lines": list(self.lines),
            "log_prob": self.log_prob,
            "category_compliance": self.compliance.category_compliance,
            "diagnostics": self.diagnostics,
        }


def generate_poem(
    request: GenerationRequest,
    model: WorkingMemoryModel,
    lexicon: PhonologyLexicon,
) -> GenerationResult:
    """Generate a poem for the request's keywords and pattern.

    Topic vectors are written first; before line i (counting from zero)
    the states of line i−2 are hard-written into history and line i−1
    replaces the local segment; each line is beam-searched against the
    frozen memory and only the winning hypothesis advances the traces.
    Diagnostics record, per line, the winner's read-attention matrix, the
    history-write slot indices, and the top-``n_best`` candidate lines.
    """
    c = model.config
    if len(request.pattern.lines) > c.max_lines:
        raise DataError(
            f"pattern has {len(request.pattern.lines)} lines, model allows {c.max_lines}"
        )
    for i, pat_line in enumerate(request.pattern.lines):
        if len(pat_line) > c.max_line_length:
            raise DataError(
                f"pattern line {i} has {len(pat_line)} positions, "
                f"model allows {c.max_line_length}"
            )
    if len(request.keywords) > c.k1:
        raise DataError(
            f"{len(request.keywords)} keywords exceed the {c.k1} topic slots"
        )
    for kw in request.keywords:
        if len(kw) > c.max_line_length:
            raise DataError(
                f"keyword {kw!r} is longer than the {c.max_line_length}-character "
                "encoder limit"
            )
        if not kw:
            raise DataError("keywords must be non-empty")

    rng = np.random.default_rng(request.seed)
    with nm.no_grad():
        memory = model.make_memory()
        topics = [
            model.topic_vector(model.vocab.encode(kw), TEST_MODE, rng)
            for kw in request.keywords
        ]
        write_topic_memory(memory, topics)
        ctx = model.new_context()

        encodings: list[LineEncoding] = []
        lines: list[str] = []
        token_lines: list[tuple[int, ...]] = []
        line_reports: list[dict] = []
        total_log_prob = 0.0
        for i, pattern_line in enumerate(request.pattern.lines):
            write_targets = None
            if i >= 2:
                write_targets = step_history_from_line(
                    memory, encodings[i - 2].states, ctx.v, model.write_head,
                    TEST_MODE, rng, gamma=c.write_gamma,
                )
            if i >= 1:
                write_local_memory(memory, encodings[i - 1].states)
            model.line_start_state(ctx, encodings[i - 1].mean if i >= 1 else None)

            try:
                hypotheses = beam_search_line(
                    model, ctx, memory, pattern_line, rng,
                    beam_size=request.beam_size,
                    hard_constraint=request.hard_constraint,
                    forbid_repetition=request.forbid_repetition,
                    lexicon=lexicon,
                )
            except ConstraintInfeasibleError as err:
                raise ConstraintInfeasibleError(
                    f"line {i}: {err}", line_index=i, position=err.position
                ) from None
            best = hypotheses[0]
            ctx = best.ctx
            total_log_prob += best.log_prob

            enc = model.encode_line(best.tokens, TEST_MODE, rng)
            encodings.append(enc)
            model.update_global_trace(ctx, enc.mean)
            alpha_matrix = [a.data.astype(float).tolist() for a in ctx.alpha_log]
            model.update_topic_trace(ctx, memory)

            text = model.vocab.decode(best.tokens)
            lines.append(text)
            token_lines.append(best.tokens)
            line_reports.append({
                "text": text,
                "tokens": [int(tok) for tok in best.tokens],
                "log_prob": best.log_prob,
                "alpha": alpha_matrix,
                "history_write_targets": (
                    None if write_targets is None
                    else [None if s is None else int(s) for s in write_targets]
                ),
                "candidates": [
                    {"text": model.vocab.decode(h.tokens), "log_prob": h.log_prob}
                    for h in hypotheses[: request.n_best]
                ],
            })

    compliance = validate_against_pattern(lines, request.pattern, lexicon)
    diagnostics = {
        "keywords": list(request.keywords),
        "pattern": request.pattern.name,
        "genre": request.pattern.genre,
        "seed": request.seed,
        "beam_size": request.beam_size,
        "hard_constraint": request.hard_constraint,
        "slot_labels": memory.slot_labels(),
        "category_compliance": compliance.category_compliance,
        "lines": line_reports,
    }
    return GenerationResult(
        lines=lines,
        tokens=token_lines,
        log_prob=total_log_prob,
        compliance=compliance,
        diagnostics=diagnostics,
    )
