"""Corpus ingestion and preprocessing for the poetry generator.

Everything upstream of the model lives here: the character vocabulary,
the phonology lexicon, genre patterns (tune templates), TextRank keyword
extraction, construction of (keywords, poem) training pairs, and the
skip-gram pretraining used to warm-start the word embedding.

Poems are treated as sequences of character tokens. A corpus file holds
one poem per line with a ``|`` delimiter between poem lines; keywords may
be pre-attached after a tab (space-separated). The phonology lexicon maps
characters to one of 36 categories; category 36 (``FREE``) marks positions
without a constraint and characters missing from the lexicon.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

LINE_DELIMITER = "|"
GENRES = ("quatrain", "iambic", "lyric")

# Phonology categories are small integers; FREE marks unconstrained slots.
N_CATEGORIES = 36
FREE_CATEGORY = 36


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Bidirectional character/id mapping with reserved control ids.

    Ids 0..2 are reserved (padding, unknown, begin-of-sequence); real
    characters start at id 3, ordered by descending corpus frequency with
    code-point order breaking ties.
    """

    PAD = 0
    UNK = 1
    BOS = 2
    RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>")

    def __init__(self, chars: Sequence[str]):
        seen = set()
        for ch in chars:
            if len(ch) != 1:
                raise DataError(f"vocabulary entries must be single characters, got {ch!r}")
            if ch in seen:
                raise DataError(f"duplicate vocabulary character {ch!r}")
            seen.add(ch)
        self._chars = list(self.RESERVED_TOKENS) + list(chars)
        self._ids = {ch: i + len(self.RESERVED_TOKENS) for i, ch in enumerate(chars)}

    def __len__(self) -> int:
        return len(self._chars)

    def __contains__(self, ch: str) -> bool:
        return ch in self._ids

    def id_of(self, ch: str) -> int:
        """Id for a character; unseen characters map to UNK."""
        return self._ids.get(ch, self.UNK)

    def char_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._chars):
            raise DataError(f"token id {idx} out of range for vocabulary of size {len(self._chars)}")
        return self._chars[idx]

    def encode(self, text: str) -> list[int]:
        return [self.id_of(ch) for ch in text]

    def decode(self, ids: Iterable[int], drop_reserved: bool = False) -> str:
        parts = []
        for idx in ids:
            tok = self.char_of(idx)
            if drop_reserved and idx < len(self.RESERVED_TOKENS):
                continue
            parts.append(tok)
        return "".join(parts)

    @property
    def characters(self) -> tuple[str, ...]:
        """Non-reserved characters in id order."""
        return tuple(self._chars[len(self.RESERVED_TOKENS):])

    def to_dict(self) -> dict:
        return {"chars": list(self.characters)}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "Vocabulary":
        return cls(payload["chars"])


def build_vocabulary(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Frequency-ranked character vocabulary over poem texts.

    ``corpus`` is an iterable of poem strings (line delimiters and
    whitespace are not counted). Characters seen fewer than ``min_count``
    times are left out and will encode to UNK.
    """
    counts: Counter[str] = Counter()
    n_poems = 0
    for poem in corpus:
        n_poems += 1
        for ch in poem:
            if ch == LINE_DELIMITER or ch.isspace():
                continue
            counts[ch] += 1
    if n_poems == 0 or not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = [ch for ch, c in counts.items() if c >= min_count]
    kept.sort(key=lambda ch: (-counts[ch], ch))
    return Vocabulary(kept)


def encode_text(line: str, vocab: Vocabulary) -> list[int]:
    """Per-character token ids; out-of-vocabulary characters become UNK."""
    return vocab.encode(line)


# ---------------------------------------------------------------------------
# phonology lexicon
# ---------------------------------------------------------------------------


class PhonologyLexicon:
    """Character to phonology-category table.

    Stored categories are in [0, 35]; lookups for characters missing from
    the table return ``FREE_CATEGORY`` (36), the unconstrained class.
    """

    FREE = FREE_CATEGORY

    def __init__(self, category_of: Mapping[str, int]):
        for ch, cat in category_of.items():
            if len(ch) != 1:
                raise DataError(f"lexicon keys must be single characters, got {ch!r}")
            if not 0 <= int(cat) < N_CATEGORIES:
                raise DataError(f"category for {ch!r} must be in [0, {N_CATEGORIES - 1}], got {cat}")
        self._map = {ch: int(cat) for ch, cat in category_of.items()}
        by_cat: dict[int, list[str]] = {}
        for ch, cat in self._map.items():
            by_cat.setdefault(cat, []).append(ch)
        self._by_cat = {cat: tuple(sorted(chs)) for cat, chs in by_cat.items()}

    def __len__(self) -> int:
        return len(self._map)

    def __contains__(self, ch: str) -> bool:
        return ch in self._map

    def category(self, ch: str) -> int:
        return self._map.get(ch, self.FREE)

    def characters_in_category(self, cat: int) -> tuple[str, ...]:
        """All lexicon characters carrying the given category (sorted)."""
        return self._by_cat.get(cat, ())

    def to_dict(self) -> dict:
        return {"categories": dict(sorted(self._map.items()))}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "PhonologyLexicon":
        return cls(payload["categories"])


def load_lexicon_file(path) -> PhonologyLexicon:
    """Read a lexicon text file: one ``<char> <category-id>`` entry per line."""
    table: dict[str, int] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected '<char> <category>', got {raw!r}")
        ch, cat = parts
        try:
            table[ch] = int(cat)
        except ValueError:
            raise DataError(f"{path}:{lineno}: category {cat!r} is not an integer") from None
    if not table:
        raise DataError(f"lexicon file {path} contains no entries")
    return PhonologyLexicon(table)


# ---------------------------------------------------------------------------
# genre patterns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenrePattern:
    """A tune template: per-position phonology categories plus rhyme slots.

    ``lines[i][j]`` is the category required at position j of line i
    (``FREE_CATEGORY`` for unconstrained positions). ``rhyme_positions``
    lists (line, position) pairs that must share a rhyme class.
    """

    name: str
    genre: str
    lines: tuple[tuple[int, ...], ...]
    rhyme_positions: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self):
        if self.genre not in GENRES:
            raise DataError(f"unknown genre {self.genre!r}; expected one of {GENRES}")
        if len(self.lines) < 2:
            raise DataError(f"pattern {self.name!r} needs at least 2 lines")
        for i, line in enumerate(self.lines):
            if len(line) < 1:
                raise DataError(f"pattern {self.name!r} line {i} is empty")
            for cat in line:
                if not 0 <= cat <= FREE_CATEGORY:
                    raise DataError(f"pattern {self.name!r} has category {cat} out of range")
        for li, pos in self.rhyme_positions:
            if not (0 <= li < len(self.lines) and 0 <= pos < len(self.lines[li])):
                raise DataError(f"pattern {self.name!r} rhyme position ({li},{pos}) out of range")

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def line_lengths(self) -> tuple[int, ...]:
        return tuple(len(line) for line in self.lines)

    @property
    def max_line_length(self) -> int:
        return max(self.line_lengths)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "genre": self.genre,
            "lines": [list(line) for line in self.lines],
            "rhyme_positions": sorted([li, pos] for li, pos in self.rhyme_positions),
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "GenrePattern":
        return cls(
            name=payload["name"],
            genre=payload["genre"],
            lines=tuple(tuple(int(c) for c in line) for line in payload["lines"]),
            rhyme_positions=frozenset((int(li), int(pos)) for li, pos in payload.get("rhyme_positions", [])),
        )


def load_pattern_library(path) -> list[GenrePattern]:
    """Read a JSON pattern library (a list of pattern objects)."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, list):
        raise DataError(f"pattern library {path} must be a JSON list")
    return [GenrePattern.from_dict(entry) for entry in payload]


def _infer_genre(lengths: Sequence[int]) -> str:
    if len(set(lengths)) > 1:
        return "iambic"
    if len(lengths) == 4 and lengths[0] in (5, 7):
        return "quatrain"
    return "lyric"


def derive_genre_pattern(
    lines: Sequence[str],
    lexicon: PhonologyLexicon,
    tune_library: Sequence[GenrePattern] | None = None,
    name: str | None = None,
) -> GenrePattern:
    """Pattern for a poem: a library tune if one matches, else synthesized.

    A library tune matches when line lengths agree and every non-FREE
    category in the tune equals the poem's category at that position.
    Otherwise the poem's own per-character categories become the pattern;
    line-end positions sharing a category form the rhyme set. Characters
    missing from the lexicon get FREE and are counted in a warning.
    """
    if not lines or any(len(line) == 0 for line in lines):
        raise DataError("cannot derive a pattern from empty lines")
    cats = [[lexicon.category(ch) for ch in line] for line in lines]
    n_unknown = sum(1 for line in lines for ch in line if ch not in lexicon)
    if n_unknown:
        logger.warning("derive_genre_pattern: %d character(s) missing from lexicon, using FREE", n_unknown)

    if tune_library:
        for pat in tune_library:
            if pat.line_lengths != tuple(len(line) for line in lines):
                continue
            if all(
                pc == FREE_CATEGORY or pc == c
                for pat_line, cat_line in zip(pat.lines, cats)
                for pc, c in zip(pat_line, cat_line)
            ):
                return pat

    # Rhyme slots: line-end categories that recur across lines.
    end_cats = Counter(line[-1] for line in cats if line[-1] != FREE_CATEGORY)
    rhyme = frozenset(
        (i, len(line) - 1)
        for i, line in enumerate(cats)
        if line[-1] != FREE_CATEGORY and end_cats[line[-1]] >= 2
    )
    lengths = [len(line) for line in lines]
    if name is None:
        name = "auto-" + "-".join(str(n) for n in lengths)
    return GenrePattern(
        name=name,
        genre=_infer_genre(lengths),
        lines=tuple(tuple(line) for line in cats),
        rhyme_positions=rhyme,
    )


@dataclass(frozen=True)
class PatternComplianceReport:
    """Outcome of checking a poem's text against a pattern."""

    length_ok: bool
    n_constrained: int
    n_category_ok: int

    @property
    def category_compliance(self) -> float:
        if self.n_constrained == 0:
            return 1.0
        return self.n_category_ok / self.n_constrained

    @property
    def ok(self) -> bool:
        return self.length_ok and self.n_category_ok == self.n_constrained


def validate_against_pattern(
    lines: Sequence[str], pattern: GenrePattern, lexicon: PhonologyLexicon
) -> PatternComplianceReport:
    """Check line lengths and per-position categories against a pattern.

    FREE positions in the pattern are unconstrained and do not count
    toward the category tally.
    """
    length_ok = tuple(len(line) for line in lines) == pattern.line_lengths
    n_constrained = 0
    n_ok = 0
    for line, pat_line in zip(lines, pattern.lines):
        for ch, pc in zip(line, pat_line):
            if pc == FREE_CATEGORY:
                continue
            n_constrained += 1
            if lexicon.category(ch) == pc:
                n_ok += 1
    return PatternComplianceReport(length_ok=length_ok, n_constrained=n_constrained, n_category_ok=n_ok)


# ---------------------------------------------------------------------------
# poem examples and training pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoemExample:
    """One (keywords, poem) supervision pair.

    ``lines`` holds token-id sequences whose lengths must match the
    attached pattern; keywords are raw strings, between 1 and 4 of them.
    """

    keywords: tuple[str, ...]
    lines: tuple[tuple[int, ...], ...]
    pattern: GenrePattern
    genre: str

    def __post_init__(self):
        if not 1 <= len(self.keywords) <= 4:
            raise DataError(f"examples need 1..4 keywords, got {len(self.keywords)}")
        if self.genre not in GENRES:
            raise DataError(f"unknown genre {self.genre!r}")
        got = tuple(len(line) for line in self.lines)
        if got != self.pattern.line_lengths:
            raise DataError(
                f"line lengths {got} do not match pattern {self.pattern.name!r} lengths {self.pattern.line_lengths}"
            )

    def line_texts(self, vocab: Vocabulary) -> list[str]:
        return [vocab.decode(line) for line in self.lines]

    def to_dict(self) -> dict:
        return {
            "keywords": list(self.keywords),
            "lines": [list(line) for line in self.lines],
            "pattern": self.pattern.name,
            "genre": self.genre,
        }


def build_training_pairs(example: PoemExample) -> list[PoemExample]:
    """Nested keyword-prefix pairs: 1, 2, ... up to all available keywords."""
    pairs = []
    for n in range(1, len(example.keywords) + 1):
        pairs.append(
            PoemExample(
                keywords=example.keywords[:n],
                lines=example.lines,
                pattern=example.pattern,
                genre=example.genre,
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# TextRank keyword extraction
# ---------------------------------------------------------------------------


def _token_stream(line: str, stopwords: frozenset[str], unit: str) -> list[str]:
    # A line is one sentence; stopword characters are dropped before
    # windowing so co-occurrence distances are over content tokens only.
    if unit == "char":
        return [ch for ch in line if ch not in stopwords and not ch.isspace()]
    if unit == "bigram":
        toks = []
        for i in range(len(line) - 1):
            a, b = line[i], line[i + 1]
            if a in stopwords or b in stopwords or a.isspace() or b.isspace():
                continue
            toks.append(a + b)
        return toks
    raise DataError(f"unknown token unit {unit!r}")


def textrank_scores(
    poem_lines: Sequence[str],
    window: int = 2,
    damping: float = 0.85,
    max_iter: int = 100,
    tol: float = 1e-6,
    stopwords: frozenset[str] = frozenset(),
    unit: str = "char",
) -> dict[str, float]:
    """Damped TextRank scores over the poem's co-occurrence graph.

    Nodes are candidate tokens; tokens within ``window`` positions of each
    other in a line's token stream gain an (undirected, weighted) edge.
    Scores start at 1.0 per node, so on a connected graph their total is
    conserved by the update.
    """
    streams = [_token_stream(line, stopwords, unit) for line in poem_lines]
    order: dict[str, int] = {}
    for stream in streams:
        for tok in stream:
            if tok not in order:
                order[tok] = len(order)
    nodes = list(order)
    if not nodes:
        return {}

    index = {tok: i for i, tok in enumerate(nodes)}
    n = len(nodes)
    weights = np.zeros((n, n))  # [n, n] symmetric co-occurrence counts
    for stream in streams:
        for i, tok in enumerate(stream):
            for j in range(i + 1, min(i + window, len(stream))):
                other = stream[j]
                if other == tok:
                    continue
                a, b = index[tok], index[other]
                weights[a, b] += 1.0
                weights[b, a] += 1.0

    out_weight = weights.sum(axis=1)  # [n]
    scores = np.ones(n)
    for _ in range(max_iter):
        contrib = np.divide(scores, out_weight, out=np.zeros(n), where=out_weight > 0)  # [n]
        new_scores = (1.0 - damping) + damping * (weights @ contrib)
        if np.max(np.abs(new_scores - scores)) < tol:
            scores = new_scores
            break
        scores = new_scores
    return {tok: float(scores[index[tok]]) for tok in nodes}


def extract_keywords_textrank(
    poem_lines: Sequence[str],
    k: int,
    window: int = 2,
    damping: float = 0.85,
    max_iter: int = 100,
    tol: float = 1e-6,
    stopwords: frozenset[str] = frozenset(),
    unit: str = "auto",
) -> list[str]:
    """Top-k TextRank keywords for a poem, ties broken by first occurrence.

    With ``unit="auto"`` candidates are character bigrams, falling back to
    single characters when the poem yields fewer than k distinct bigrams.
    If fewer than k candidates exist overall, all of them are returned.
    """
    if not poem_lines:
        raise DataError("cannot extract keywords from an empty poem")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")

    if unit == "auto":
        scores = textrank_scores(poem_lines, window, damping, max_iter, tol, stopwords, unit="bigram")
        if len(scores) < k:
            scores = textrank_scores(poem_lines, window, damping, max_iter, tol, stopwords, unit="char")
    else:
        scores = textrank_scores(poem_lines, window, damping, max_iter, tol, stopwords, unit=unit)
    if not scores:
        return []
    first_seen = {tok: i for i, tok in enumerate(scores)}  # insertion order = first occurrence
    ranked = sorted(scores, key=lambda tok: (-scores[tok], first_seen[tok]))
    return ranked[:k]


# ---------------------------------------------------------------------------
# skip-gram embedding pretraining
# ---------------------------------------------------------------------------


def random_embedding_table(vocab_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Fallback initialization when pretraining is skipped: U(-0.08, 0.08)."""
    return rng.uniform(-0.08, 0.08, size=(vocab_size, dim)).astype(np.float32)


def pretrain_embeddings(
    corpus: Sequence[Sequence[int]],
    dim: int,
    epochs: int,
    window: int,
    negatives: int,
    rng: np.random.Generator,
    vocab_size: int | None = None,
    lr: float = 0.05,
) -> np.ndarray:
    """Skip-gram with negative sampling over token-id lines.

    Returns the mean of the input- and output-vector tables, shape
    [vocab_size, dim], so both direct co-occurrence and shared-context
    structure survive into the table. Training is a plain SGD loop with a
    linearly decaying learning rate; negatives are drawn from the unigram
    distribution raised to 0.75.
    """
    lines = [list(line) for line in corpus if len(line) > 0]
    if not lines:
        raise DataError("cannot pretrain embeddings on an empty corpus")
    if vocab_size is None:
        vocab_size = max(max(line) for line in lines) + 1

    counts = np.zeros(vocab_size)
    for line in lines:
        for tok in line:
            counts[tok] += 1
    noise = counts**0.75
    noise_cdf = np.cumsum(noise / noise.sum())  # [V]

    w_in = ((rng.random((vocab_size, dim)) - 0.5) / dim).astype(np.float64)  # [V, dim]
    w_out = np.zeros((vocab_size, dim))  # [V, dim]

    n_pairs = sum(
        sum(1 for j in range(max(0, i - window), min(len(line), i + window + 1)) if j != i)
        for line in lines
        for i in range(len(line))
    )
    total_steps = max(1, n_pairs * epochs)
    step = 0
    for _ in range(epochs):
        for line in lines:
            for i, center in enumerate(line):
                lo = max(0, i - window)
                hi = min(len(line), i + window + 1)
                for j in range(lo, hi):
                    if j == i:
                        continue
                    target = line[j]
                    cur_lr = lr * max(1e-4, 1.0 - step / total_steps)
                    step += 1
                    v = w_in[center]
                    grad_v = np.zeros(dim)
                    negs = np.searchsorted(noise_cdf, rng.random(negatives))
                    for tok, label in [(target, 1.0)] + [(int(t), 0.0) for t in negs]:
                        if label == 0.0 and tok == target:
                            continue
                        u = w_out[tok]
                        score = 1.0 / (1.0 + np.exp(-np.dot(v, u)))
                        g = cur_lr * (label - score)
                        grad_v += g * u
                        w_out[tok] = u + g * v
                    w_in[center] = v + grad_v
    return ((w_in + w_out) / 2.0).astype(np.float32)


# ---------------------------------------------------------------------------
# corpus files and bundled toy data
# ---------------------------------------------------------------------------


@dataclass
class RawPoem:
    """A poem as read from a corpus file, before encoding."""

    lines: list[str]
    keywords: list[str] = field(default_factory=list)

    @property
    def text(self) -> str:
        return LINE_DELIMITER.join(self.lines)


def parse_corpus_line(raw: str) -> RawPoem:
    body, _, kw_part = raw.partition("\t")
    lines = [seg.strip() for seg in body.strip().split(LINE_DELIMITER)]
    if any(not seg for seg in lines):
        raise DataError(f"poem has an empty line: {raw!r}")
    keywords = kw_part.split() if kw_part else []
    return RawPoem(lines=lines, keywords=keywords)


def read_corpus_file(path) -> list[RawPoem]:
    """Load a corpus file: one poem per line, ``|`` between poem lines."""
    poems = []
    text = Path(path).read_text(encoding="utf-8")
    for raw in text.splitlines():
        if not raw.strip():
            continue
        poems.append(parse_corpus_line(raw))
    if not poems:
        raise DataError(f"corpus file {path} contains no poems")
    return poems


def _data_file(name: str) -> Path:
    return Path(str(resources.files("wm_poet").joinpath("data", name)))


def toy_corpus_path() -> Path:
    return _data_file("toy_corpus.txt")


def toy_lexicon_path() -> Path:
    return _data_file("toy_lexicon.txt")


def toy_patterns_path() -> Path:
    return _data_file("toy_patterns.json")


def load_default_stopwords() -> frozenset[str]:
    text = _data_file("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


# ---------------------------------------------------------------------------
# prepared dataset container
# ---------------------------------------------------------------------------


@dataclass
class PreparedDataset:
    """Everything the trainer and evaluator need, as produced by `prepare`.

    Saved as a directory holding ``dataset.json`` plus an optional raw
    float32 ``embeddings.bin``.
    """

    vocab: Vocabulary
    lexicon: PhonologyLexicon
    patterns: dict[str, GenrePattern]
    train: list[PoemExample]
    valid: list[PoemExample]
    test: list[PoemExample]
    relevance_map: dict[str, list[str]] = field(default_factory=dict)
    embeddings: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[PoemExample]:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise DataError(f"unknown split {name!r}; expected train/valid/test") from None

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "vocab": self.vocab.to_dict(),
            "lexicon": self.lexicon.to_dict(),
            "patterns": {name: pat.to_dict() for name, pat in self.patterns.items()},
            "splits": {
                name: [ex.to_dict() for ex in examples]
                for name, examples in (("train", self.train), ("valid", self.valid), ("test", self.test))
            },
            "relevance_map": {kw: list(words) for kw, words in self.relevance_map.items()},
            "meta": self.meta,
            "embeddings_shape": list(self.embeddings.shape) if self.embeddings is not None else None,
        }
        (out / "dataset.json").write_text(
            json.dumps(payload, ensure_ascii=False, indent=1), encoding="utf-8"
        )
        if self.embeddings is not None:
            (out / "embeddings.bin").write_bytes(
                np.ascontiguousarray(self.embeddings, dtype="<f4").tobytes()
            )

    @classmethod
    def load(cls, in_dir) -> "PreparedDataset":
        root = Path(in_dir)
        manifest = root / "dataset.json"
        if not manifest.exists():
            raise DataError(f"{in_dir} does not look like a prepared dataset (missing dataset.json)")
        payload = json.loads(manifest.read_text(encoding="utf-8"))
        vocab = Vocabulary.from_dict(payload["vocab"])
        lexicon = PhonologyLexicon.from_dict(payload["lexicon"])
        patterns = {name: GenrePattern.from_dict(d) for name, d in payload["patterns"].items()}

        def load_example(d: Mapping) -> PoemExample:
            pat_name = d["pattern"]
            if pat_name not in patterns:
                raise DataError(f"example references unknown pattern {pat_name!r}")
            return PoemExample(
                keywords=tuple(d["keywords"]),
                lines=tuple(tuple(int(t) for t in line) for line in d["lines"]),
                pattern=patterns[pat_name],
                genre=d["genre"],
            )

        splits = {name: [load_example(d) for d in payload["splits"][name]] for name in ("train", "valid", "test")}
        embeddings = None
        shape = payload.get("embeddings_shape")
        if shape is not None:
            raw = (root / "embeddings.bin").read_bytes()
            embeddings = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        return cls(
            vocab=vocab,
            lexicon=lexicon,
            patterns=patterns,
            train=splits["train"],
            valid=splits["valid"],
            test=splits["test"],
            relevance_map={kw: list(ws) for kw, ws in payload.get("relevance_map", {}).items()},
            embeddings=embeddings,
            meta=payload.get("meta", {}),
        )
