"""Tests for beam-search line decoding and whole-poem generation."""

import json

import numpy as np
import pytest

from wm_poet import numerics as nm
from wm_poet.corpus import (
    FREE_CATEGORY,
    GenrePattern,
    PhonologyLexicon,
    Vocabulary,
    build_vocabulary,
    load_lexicon_file,
    load_pattern_library,
    read_corpus_file,
    toy_corpus_path,
    toy_lexicon_path,
    toy_patterns_path,
)
from wm_poet.errors import ConfigError, ConstraintInfeasibleError, DataError
from wm_poet.generation import (
    BeamHypothesis,
    GenerationRequest,
    beam_search_line,
    generate_poem,
)
from wm_poet.memory import TEST_MODE, write_topic_memory
from wm_poet.model import ModelConfig, WorkingMemoryModel

CHARS = "abcdefghij"
# two characters per category so constrained positions always have a choice;
# "i" and "j" are absent from the lexicon and therefore free
CATEGORY_OF = {
    "a": 1, "b": 1, "c": 2, "d": 2, "e": 3, "f": 3, "g": 4, "h": 4,
}


def build_lexicon():
    return PhonologyLexicon(CATEGORY_OF)


def free_pattern(lengths, genre="lyric", name="t"):
    return GenrePattern(
        name=name, genre=genre, lines=tuple(tuple([FREE_CATEGORY] * n) for n in lengths)
    )


def build_model(vocab=None, seed=0, **overrides):
    vocab = vocab or Vocabulary(list(CHARS))
    cfg = dict(
        vocab_size=len(vocab),
        max_line_length=7,
        max_lines=4,
        word_dim=6,
        phonology_dim=4,
        length_dim=3,
        hidden=8,
        trace_dim=8,
        content_dim=5,
        k1=2,
        k2=2,
        dropout=0.0,
    )
    cfg.update(overrides)
    return WorkingMemoryModel(ModelConfig(**cfg), vocab, np.random.default_rng(seed)), vocab


def line_ready_state(model, keyword="ab", seed=3):
    """Memory with a topic written and a context positioned at line 0."""
    rng = np.random.default_rng(seed)
    memory = model.make_memory()
    topic = model.topic_vector(model.vocab.encode(keyword), TEST_MODE, rng)
    write_topic_memory(memory, [topic])
    ctx = model.new_context()
    model.line_start_state(ctx, None)
    return memory, ctx, rng


def greedy_oracle(model, ctx, memory, pattern_line, rng, lexicon, hard=True,
                  forbid_repetition=True):
    """Step-by-step argmax decode mirroring the beam's masking rules."""
    from wm_poet.generation import _allowed_mask

    cur = ctx.clone()
    tokens: list[int] = []
    total = 0.0
    length = len(pattern_line)
    for t, category in enumerate(pattern_line):
        g_t = model.genre_vector(category, length - 1 - t)
        state = rng.bit_generator.state
        step_rng = np.random.default_rng(0)
        step_rng.bit_generator.state = state
        y_prev = tokens[-1] if tokens else Vocabulary.BOS
        with nm.no_grad():
            logits, _ = model.decode_step(cur, y_prev, memory, g_t, TEST_MODE, step_rng)
        rng.bit_generator.state = step_rng.bit_generator.state
        log_probs = nm.log_softmax_values(logits.data)
        mask = _allowed_mask(model.vocab, lexicon if hard else None, category)
        if forbid_repetition and tokens:
            narrowed = mask.copy()
            narrowed[list(set(tokens))] = False
            if narrowed.any():
                mask = narrowed
        scores = np.where(mask, log_probs, -np.inf)
        tok = int(np.argmax(scores))
        tokens.append(tok)
        total += float(log_probs[tok])
    return tuple(tokens), total


class TestGenerationRequest:
    def test_keyword_count_bounds(self):
        pattern = free_pattern([3, 3])
        with pytest.raises(DataError):
            GenerationRequest(keywords=(), pattern=pattern)
        with pytest.raises(DataError):
            GenerationRequest(keywords=("a",) * 5, pattern=pattern)

    def test_search_settings_validated(self):
        pattern = free_pattern([3, 3])
        with pytest.raises(ConfigError):
            GenerationRequest(keywords=("ab",), pattern=pattern, beam_size=0)
        with pytest.raises(ConfigError):
            GenerationRequest(keywords=("ab",), pattern=pattern, n_best=0)


class TestBeamSearchLine:
    def test_step_count_and_ordering(self):
        model, _ = build_model()
        memory, ctx, rng = line_ready_state(model)
        hyps = beam_search_line(
            model, ctx, memory, (FREE_CATEGORY,) * 5, rng,
            beam_size=6, lexicon=build_lexicon(),
        )
        assert len(hyps) == 6
        for hyp in hyps:
            assert len(hyp.tokens) == 5
            assert hyp.log_prob <= 0.0
            assert len(hyp.alpha_log) == 5
        scores = [h.log_prob for h in hyps]
        assert scores == sorted(scores, reverse=True)

    def test_scores_sum_per_step_log_probs(self):
        # greedy path: the hypothesis score must equal the oracle's sum
        model, _ = build_model(seed=1)
        lexicon = build_lexicon()
        memory, ctx, rng = line_ready_state(model)
        (best,) = beam_search_line(
            model, ctx, memory, (1, 2, 3), rng, beam_size=1, lexicon=lexicon,
        )
        memory2, ctx2, rng2 = line_ready_state(model)
        tokens, total = greedy_oracle(model, ctx2, memory2, (1, 2, 3), rng2, lexicon)
        assert best.tokens == tokens
        assert best.log_prob == pytest.approx(total, abs=1e-9)

    def test_beam_one_equals_greedy(self):
        model, _ = build_model(seed=2)
        lexicon = build_lexicon()
        for pattern_line in [(FREE_CATEGORY,) * 6, (1, 2, 1, 2), (4, FREE_CATEGORY, 3)]:
            memory, ctx, rng = line_ready_state(model, seed=9)
            (hyp,) = beam_search_line(
                model, ctx, memory, pattern_line, rng, beam_size=1, lexicon=lexicon,
            )
            memory2, ctx2, rng2 = line_ready_state(model, seed=9)
            tokens, _ = greedy_oracle(model, ctx2, memory2, pattern_line, rng2, lexicon)
            assert hyp.tokens == tokens

    def test_wider_beam_never_scores_below_greedy(self):
        lexicon = build_lexicon()
        for seed in range(5):
            model, _ = build_model(seed=seed)
            memory, ctx, rng = line_ready_state(model, seed=seed + 20)
            (greedy,) = beam_search_line(
                model, ctx, memory, (FREE_CATEGORY,) * 5, rng,
                beam_size=1, lexicon=lexicon,
            )
            memory2, ctx2, rng2 = line_ready_state(model, seed=seed + 20)
            beamed = beam_search_line(
                model, ctx2, memory2, (FREE_CATEGORY,) * 5, rng2,
                beam_size=8, lexicon=lexicon,
            )
            assert beamed[0].log_prob >= greedy.log_prob - 1e-9

    def test_hard_constraint_fully_complied(self):
        model, vocab = build_model(seed=3)
        lexicon = build_lexicon()
        pattern_line = (1, 2, 3, 4, FREE_CATEGORY)
        memory, ctx, rng = line_ready_state(model)
        hyps = beam_search_line(
            model, ctx, memory, pattern_line, rng, beam_size=10, lexicon=lexicon,
        )
        for hyp in hyps:
            for tok, category in zip(hyp.tokens, pattern_line):
                ch = vocab.char_of(tok)
                if category != FREE_CATEGORY:
                    assert lexicon.category(ch) == category

    def test_reserved_tokens_never_emitted(self):
        model, _ = build_model(seed=4)
        memory, ctx, rng = line_ready_state(model)
        hyps = beam_search_line(
            model, ctx, memory, (FREE_CATEGORY,) * 7, rng,
            beam_size=10, lexicon=build_lexicon(),
        )
        reserved = set(range(len(Vocabulary.RESERVED_TOKENS)))
        for hyp in hyps:
            assert not reserved.intersection(hyp.tokens)

    def test_infeasible_category_raises_with_position(self):
        model, _ = build_model(seed=5)
        memory, ctx, rng = line_ready_state(model)
        with pytest.raises(ConstraintInfeasibleError) as exc:
            beam_search_line(
                model, ctx, memory, (1, 9, 1), rng, beam_size=3,
                lexicon=build_lexicon(),
            )
        assert exc.value.position == 1

    def test_soft_mode_ignores_categories(self):
        model, _ = build_model(seed=6)
        # category 9 has no characters, but soft mode must not care
        memory, ctx, rng = line_ready_state(model)
        hyps = beam_search_line(
            model, ctx, memory, (9, 9, 9), rng, beam_size=2,
            hard_constraint=False, lexicon=build_lexicon(),
        )
        assert len(hyps[0].tokens) == 3

    def test_memory_and_caller_context_untouched(self):
        model, _ = build_model(seed=7)
        memory, ctx, rng = line_ready_state(model)
        before = {
            "topic": memory.topic.data.copy(),
            "history": memory.history.data.copy(),
            "local": memory.local.data.copy(),
            "occupied": memory.occupied.copy(),
        }
        s_obj = ctx.s
        beam_search_line(
            model, ctx, memory, (FREE_CATEGORY,) * 4, rng,
            beam_size=5, lexicon=build_lexicon(),
        )
        np.testing.assert_array_equal(memory.topic.data, before["topic"])
        np.testing.assert_array_equal(memory.history.data, before["history"])
        np.testing.assert_array_equal(memory.local.data, before["local"])
        np.testing.assert_array_equal(memory.occupied, before["occupied"])
        assert ctx.s is s_obj
        assert ctx.alpha_log == []

    def test_repetition_guard(self):
        model, vocab = build_model(seed=8)
        memory, ctx, rng = line_ready_state(model)
        hyps = beam_search_line(
            model, ctx, memory, (FREE_CATEGORY,) * 7, rng,
            beam_size=4, lexicon=build_lexicon(),
        )
        for hyp in hyps:
            assert len(set(hyp.tokens)) == len(hyp.tokens)

    def test_repetition_guard_relaxes_when_unavoidable(self):
        # only two characters carry category 1, so a 3-position line of
        # category 1 must reuse one of them rather than fail
        model, _ = build_model(seed=9)
        memory, ctx, rng = line_ready_state(model)
        hyps = beam_search_line(
            model, ctx, memory, (1, 1, 1), rng, beam_size=2,
            lexicon=build_lexicon(),
        )
        assert len(hyps[0].tokens) == 3

    def test_alpha_rows_are_distributions(self):
        model, _ = build_model(seed=10)
        memory, ctx, rng = line_ready_state(model)
        hyps = beam_search_line(
            model, ctx, memory, (FREE_CATEGORY,) * 5, rng,
            beam_size=3, lexicon=build_lexicon(),
        )
        k = model.config.k1 + model.config.k2 + model.config.local_slots
        for hyp in hyps:
            for alpha in hyp.alpha_log:
                assert alpha.data.shape == (k,)
                assert alpha.data.sum() == pytest.approx(1.0, abs=1e-6)


class TestGeneratePoem:
    def test_structural_contract_quatrain(self):
        model, _ = build_model(seed=11)
        pattern = free_pattern([7, 7, 7, 7], genre="quatrain", name="q7")
        request = GenerationRequest(keywords=("ab", "cd"), pattern=pattern,
                                    seed=1, beam_size=4)
        result = generate_poem(request, model, build_lexicon())
        assert len(result.lines) == 4
        assert all(len(line) == 7 for line in result.lines)
        assert result.compliance.length_ok
        assert result.log_prob <= 0.0

    def test_same_seed_identical_output(self):
        model, _ = build_model(seed=12)
        pattern = free_pattern([5, 5, 5], name="p3")
        request = GenerationRequest(keywords=("ef",), pattern=pattern,
                                    seed=7, beam_size=5, n_best=3)
        first = generate_poem(request, model, build_lexicon())
        second = generate_poem(request, model, build_lexicon())
        assert first.lines == second.lines
        assert first.log_prob == second.log_prob
        assert json.dumps(first.diagnostics, sort_keys=True) == json.dumps(
            second.diagnostics, sort_keys=True
        )

    def test_hard_mode_compliance_is_total(self):
        model, _ = build_model(seed=13)
        pattern = GenrePattern(
            name="strict", genre="lyric",
            lines=((1, 2, 3), (4, 1, 2), (3, 4, 1)),
        )
        request = GenerationRequest(keywords=("gh",), pattern=pattern, seed=2,
                                    beam_size=6)
        result = generate_poem(request, model, build_lexicon())
        assert result.compliance.category_compliance == 1.0
        assert result.compliance.n_constrained == 9

    def test_soft_mode_reports_compliance_without_enforcing(self):
        model, _ = build_model(seed=14)
        pattern = GenrePattern(
            name="strict", genre="lyric",
            lines=((1, 2, 3), (4, 1, 2), (3, 4, 1)),
        )
        request = GenerationRequest(keywords=("gh",), pattern=pattern, seed=2,
                                    beam_size=6, hard_constraint=False)
        result = generate_poem(request, model, build_lexicon())
        assert 0.0 <= result.compliance.category_compliance <= 1.0
        assert len(result.lines) == 3

    def test_diagnostics_layout(self):
        model, _ = build_model(seed=15)
        pattern = free_pattern([4, 4, 4, 4], name="p4")
        request = GenerationRequest(keywords=("ij",), pattern=pattern, seed=3,
                                    beam_size=3, n_best=2)
        result = generate_poem(request, model, build_lexicon())
        diag = result.diagnostics
        k = model.config.k1 + model.config.k2 + model.config.local_slots
        assert len(diag["slot_labels"]) == k
        assert len(diag["lines"]) == 4
        for i, line_report in enumerate(diag["lines"]):
            alpha = np.array(line_report["alpha"])
            assert alpha.shape == (4, k)
            np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-6)
            assert len(line_report["candidates"]) == 2
            if i < 2:
                assert line_report["history_write_targets"] is None
            else:
                targets = line_report["history_write_targets"]
                assert isinstance(targets, list)
                assert len(targets) == 4  # one per state of line i-2
                for slot in targets:
                    assert slot is None or 0 <= slot < model.config.k2
        # the whole report must serialize cleanly
        json.dumps(diag)

    def test_request_validation_against_model(self):
        model, _ = build_model(seed=16)
        lexicon = build_lexicon()
        too_many_lines = free_pattern([3] * 5, name="p5")
        with pytest.raises(DataError, match="lines"):
            generate_poem(
                GenerationRequest(keywords=("ab",), pattern=too_many_lines),
                model, lexicon,
            )
        too_long = free_pattern([9, 9], name="p9")
        with pytest.raises(DataError, match="positions"):
            generate_poem(
                GenerationRequest(keywords=("ab",), pattern=too_long),
                model, lexicon,
            )
        pattern = free_pattern([3, 3], name="p3")
        with pytest.raises(DataError, match="topic slots"):
            generate_poem(
                GenerationRequest(keywords=("ab", "cd", "ef"), pattern=pattern),
                model, lexicon,
            )
        with pytest.raises(DataError, match="longer"):
            generate_poem(
                GenerationRequest(keywords=("abcdefgh",), pattern=pattern),
                model, lexicon,
            )

    def test_infeasible_line_names_line_and_position(self):
        model, _ = build_model(seed=17)
        pattern = GenrePattern(
            name="bad", genre="lyric",
            lines=((FREE_CATEGORY, FREE_CATEGORY), (FREE_CATEGORY, 9)),
        )
        request = GenerationRequest(keywords=("ab",), pattern=pattern)
        with pytest.raises(ConstraintInfeasibleError) as exc:
            generate_poem(request, model, build_lexicon())
        assert exc.value.line_index == 1
        assert exc.value.position == 1

    def test_tune_pattern_controls_line_lengths(self):
        poems = read_corpus_file(toy_corpus_path())
        vocab = build_vocabulary("|".join(p.lines) for p in poems)
        lexicon = load_lexicon_file(toy_lexicon_path())
        patterns = load_pattern_library(toy_patterns_path())
        tune = next(p for p in patterns if len(set(p.line_lengths)) > 1)
        model, _ = build_model(
            vocab=vocab, seed=18,
            max_line_length=max(tune.line_lengths),
            max_lines=len(tune.lines),
        )
        request = GenerationRequest(keywords=(vocab.characters[0],), pattern=tune,
                                    seed=4, beam_size=3, hard_constraint=False)
        result = generate_poem(request, model, lexicon)
        assert tuple(len(line) for line in result.lines) == tune.line_lengths
