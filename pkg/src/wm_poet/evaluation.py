"""Automatic metrics and analysis harnesses.

Three metrics: corpus-level character BLEU-4 (pooled modified precisions,
geometric mean, brevity penalty, no smoothing), teacher-forced per-character
perplexity, and the topic-expression ratio (a topic counts when its keyword
or any mapped relevant word appears in the poem). Alongside them live the
attention heatmap export and the history-slot sweep harness that retrains
one model per slot count and tabulates (K2, BLEU, PP).
"""

from __future__ import annotations

import csv
import dataclasses
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import PhonologyLexicon, PreparedDataset
from .errors import DataError
from .generation import GenerationRequest, generate_poem
from .model import ModelConfig, WorkingMemoryModel
from .training import TrainConfig, dataset_mean_loss, train_model

BLEU_MAX_ORDER = 4


@dataclass
class EvalReport:
    """Metric bundle for one model on one split."""

    bleu: float
    perplexity: float
    expression_ratio: float
    per_poem: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "perplexity": self.perplexity,
            "expression_ratio": self.expression_ratio,
            "per_poem": self.per_poem,
        }


def _as_lines(poem) -> list[str]:
    return [poem] if isinstance(poem, str) else list(poem)


def _segment_pairs(hypotheses, references) -> list[tuple[str, str]]:
    if len(hypotheses) != len(references):
        raise DataError(
            f"hypothesis/reference counts differ: {len(hypotheses)} vs {len(references)}"
        )
    if not hypotheses:
        raise DataError("cannot score an empty corpus")
    pairs: list[tuple[str, str]] = []
    for hyp, ref in zip(hypotheses, references):
        hyp_lines, ref_lines = _as_lines(hyp), _as_lines(ref)
        if len(hyp_lines) == len(ref_lines):
            pairs.extend(zip(hyp_lines, ref_lines))
        else:
            # line counts disagree: fall back to whole-poem segments
            pairs.append(("".join(hyp_lines), "".join(ref_lines)))
    return pairs


def _ngram_counts(tokens: Sequence[str], order: int) -> Counter:
    return Counter(
        tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1)
    )


def bleu_corpus(hypotheses, references) -> float:
    """Corpus BLEU-4 over character tokens, on the 0–100 scale.

    Modified n-gram matches are pooled over all aligned segments before the
    precisions are formed; any empty pooled precision zeroes the score (no
    smoothing), and a hypothesis corpus shorter than its references incurs
    the exp(1 − r/c) brevity penalty. Poems may be given as line lists
    (each line scores as its own segment) or as plain strings.
    """
    pairs = _segment_pairs(hypotheses, references)
    clipped = [0] * BLEU_MAX_ORDER
    totals = [0] * BLEU_MAX_ORDER
    hyp_length = 0
    ref_length = 0
    for hyp_line, ref_line in pairs:
        hyp_tokens = list(hyp_line)
        ref_tokens = list(ref_line)
        hyp_length += len(hyp_tokens)
        ref_length += len(ref_tokens)
        for order in range(1, BLEU_MAX_ORDER + 1):
            hyp_counts = _ngram_counts(hyp_tokens, order)
            ref_counts = _ngram_counts(ref_tokens, order)
            totals[order - 1] += max(len(hyp_tokens) - order + 1, 0)
            for gram, count in hyp_counts.items():
                clipped[order - 1] += min(count, ref_counts.get(gram, 0))
    if hyp_length == 0:
        return 0.0
    log_sum = 0.0
    for order in range(1, BLEU_MAX_ORDER + 1):
        total = totals[order - 1]
        precision = clipped[order - 1] / total if total > 0 else 0.0
        if precision == 0.0:
            return 0.0
        log_sum += math.log(precision)
    brevity = 1.0 if hyp_length > ref_length else math.exp(1.0 - ref_length / hyp_length)
    return 100.0 * brevity * math.exp(log_sum / BLEU_MAX_ORDER)


def perplexity(model: WorkingMemoryModel, dataset, rng=None) -> float:
    """exp(mean teacher-forced cross entropy per character), dropout off."""
    if rng is None:
        rng = np.random.default_rng(0)
    return math.exp(dataset_mean_loss(model, dataset, rng))


def topic_expression_ratio(
    poems, keyword_sets, relevance_map: Mapping[str, Sequence[str]] | None = None
) -> float:
    """Fraction of topics whose keyword or a relevant word was generated.

    Matching is substring search within individual lines, so the result is
    invariant to line order and to duplicate occurrences. With no topics at
    all the ratio is vacuously 1.
    """
    if len(poems) != len(keyword_sets):
        raise DataError(
            f"poem/keyword-set counts differ: {len(poems)} vs {len(keyword_sets)}"
        )
    relevance_map = relevance_map or {}
    expressed = 0
    total = 0
    for poem, keywords in zip(poems, keyword_sets):
        lines = _as_lines(poem)
        for keyword in keywords:
            total += 1
            needles = [keyword, *relevance_map.get(keyword, ())]
            if any(needle in line for needle in needles for line in lines):
                expressed += 1
    return expressed / total if total else 1.0


def build_relevance_map(
    poems, keywords: Sequence[str], top_k: int = 10
) -> dict[str, list[str]]:
    """Top-``top_k`` co-occurrence neighbors per keyword, scored by PMI.

    Units are the characters and adjacent bigrams of each line; a unit and
    a keyword co-occur when both appear (as substrings) in the same line.
    Units that contain the keyword or are contained by it are excluded so a
    keyword is never its own evidence.
    """
    line_units: list[set[str]] = []
    for poem in poems:
        for line in _as_lines(poem):
            units = set(line)
            units.update(line[i:i + 2] for i in range(len(line) - 1))
            line_units.append((line, units))
    n_lines = len(line_units)
    if n_lines == 0:
        return {kw: [] for kw in keywords}
    unit_counts: Counter = Counter()
    for _, units in line_units:
        unit_counts.update(units)
    result: dict[str, list[str]] = {}
    for keyword in keywords:
        kw_count = sum(1 for line, _ in line_units if keyword in line)
        if kw_count == 0:
            result[keyword] = []
            continue
        co_counts: Counter = Counter()
        for line, units in line_units:
            if keyword in line:
                co_counts.update(units)
        scored = []
        for unit, co in co_counts.items():
            if unit == keyword or unit in keyword or keyword in unit:
                continue
            pmi = math.log(co * n_lines / (kw_count * unit_counts[unit]))
            scored.append((-pmi, -co, unit))
        scored.sort()
        result[keyword] = [unit for _, _, unit in scored[:top_k]]
    return result


def dump_attention(diagnostics: Mapping, line_index: int, path) -> Path:
    """Write one line's read-attention matrix as comma-delimited text.

    Rows are the line's generated characters; columns are the K memory
    slots, labeled by segment and, where known, by content: the keyword
    held by a topic slot, the last character written into a history slot,
    and the previous-line character mirrored by a local slot.
    """
    if not isinstance(diagnostics, Mapping) or "lines" not in diagnostics \
            or "slot_labels" not in diagnostics:
        raise DataError("diagnostics are missing; generate with a diagnostics dump first")
    reports = diagnostics["lines"]
    if not 0 <= line_index < len(reports):
        raise DataError(
            f"line {line_index} out of range for a {len(reports)}-line poem"
        )
    labels = list(diagnostics["slot_labels"])
    keywords = diagnostics.get("keywords", [])
    history_content: dict[int, str] = {}
    for li in range(line_index + 1):
        targets = reports[li].get("history_write_targets")
        if not targets:
            continue
        source_text = reports[li - 2]["text"]
        for pos, slot in enumerate(targets):
            if slot is not None and pos < len(source_text):
                history_content[slot] = source_text[pos]
    prev_text = reports[line_index - 1]["text"] if line_index >= 1 else ""
    annotated = []
    for label in labels:
        segment, idx = label[: label.index("[")], int(label[label.index("[") + 1:-1])
        if segment == "topic" and idx < len(keywords):
            annotated.append(f"{label}:{keywords[idx]}")
        elif segment == "history" and idx in history_content:
            annotated.append(f"{label}:{history_content[idx]}")
        elif segment == "local" and idx < len(prev_text):
            annotated.append(f"{label}:{prev_text[idx]}")
        else:
            annotated.append(label)

    line = reports[line_index]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["char", *annotated])
        for ch, row in zip(line["text"], line["alpha"]):
            writer.writerow([ch, *[repr(float(a)) for a in row]])
    return path


def evaluate_model(
    model: WorkingMemoryModel,
    dataset: PreparedDataset,
    split: str = "test",
    *,
    beam_size: int = 20,
    seed: int = 0,
    hard_constraint: bool = True,
    lexicon: PhonologyLexicon | None = None,
    relevance_map: Mapping[str, Sequence[str]] | None = None,
) -> EvalReport:
    """Generate for every example of a split and score the results.

    BLEU compares each generated poem against the ground-truth poem for
    the same keywords; perplexity is teacher-forced on the split itself.
    """
    examples = dataset.split(split)
    if not examples:
        raise DataError(f"split {split!r} is empty")
    lexicon = lexicon or dataset.lexicon
    relevance_map = relevance_map if relevance_map is not None else dataset.relevance_map
    pp = perplexity(model, examples, np.random.default_rng([seed, 1]))
    hypotheses: list[list[str]] = []
    references: list[list[str]] = []
    keyword_sets: list[tuple[str, ...]] = []
    per_poem: list[dict] = []
    for i, example in enumerate(examples):
        request = GenerationRequest(
            keywords=example.keywords,
            pattern=example.pattern,
            seed=seed * 100003 + i,
            beam_size=beam_size,
            hard_constraint=hard_constraint,
        )
        result = generate_poem(request, model, lexicon)
        reference = list(example.line_texts(dataset.vocab))
        hypotheses.append(result.lines)
        references.append(reference)
        keyword_sets.append(example.keywords)
        per_poem.append({
            "keywords": list(example.keywords),
            "pattern": example.pattern.name,
            "hypothesis": result.lines,
            "reference": reference,
            "log_prob": result.log_prob,
            "category_compliance": result.compliance.category_compliance,
        })
    return EvalReport(
        bleu=bleu_corpus(hypotheses, references),
        perplexity=pp,
        expression_ratio=topic_expression_ratio(
            hypotheses, keyword_sets, relevance_map
        ),
        per_poem=per_poem,
    )


def _pp_by_line_count(model, examples, rng_seed) -> dict[str, float]:
    groups: dict[int, list] = {}
    for ex in examples:
        groups.setdefault(len(ex.lines), []).append(ex)
    return {
        str(n): math.exp(
            dataset_mean_loss(model, members, np.random.default_rng([rng_seed, n]))
        )
        for n, members in sorted(groups.items())
    }


def slot_sweep(
    dataset: PreparedDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    k2_values: Sequence[int],
    *,
    beam_size: int = 5,
    log=None,
) -> list[dict]:
    """Retrain with each history-slot count and tabulate (K2, BLEU, PP).

    Everything but K2 — data, seeds, dimensions, schedule — is held
    fixed, so rows are comparable and the whole sweep is deterministic.
    Each row also carries a perplexity breakdown by poem line count.
    """
    eval_split = dataset.test if dataset.test else dataset.valid or dataset.train
    rows: list[dict] = []
    for k2 in k2_values:
        config = dataclasses.replace(model_config, k2=int(k2))
        embeddings = None
        if dataset.embeddings is not None and dataset.embeddings.shape == (
            config.vocab_size, config.word_dim,
        ):
            embeddings = dataset.embeddings
        model = WorkingMemoryModel(
            config, dataset.vocab, np.random.default_rng(train_config.seed),
            embedding_table=embeddings,
        )
        train_model(model, dataset.train, dataset.valid, train_config)
        pp = perplexity(
            model, eval_split, np.random.default_rng([train_config.seed, 2])
        )
        hypotheses, references = [], []
        for i, example in enumerate(eval_split):
            request = GenerationRequest(
                keywords=example.keywords,
                pattern=example.pattern,
                seed=train_config.seed * 100003 + i,
                beam_size=beam_size,
            )
            result = generate_poem(request, model, dataset.lexicon)
            hypotheses.append(result.lines)
            references.append(list(example.line_texts(dataset.vocab)))
        row = {
            "k2": int(k2),
            "bleu": bleu_corpus(hypotheses, references),
            "perplexity": pp,
            "pp_by_line_count": _pp_by_line_count(
                model, eval_split, train_config.seed
            ),
        }
        rows.append(row)
        if log:
            log(f"k2={k2}: bleu {row['bleu']:.3f}, pp {row['perplexity']:.3f}")
    return rows
