"""Synthetic multilingual corpus over toy languages.

Each toy language renders the same concept space through its own disjoint
block of token ids, so translation is an exact relabelling and the language
of any content token is decidable from its id alone.

Token layout for ``N`` languages, ``C`` concepts and ``F`` fillers per
language::

    [0, N*C)                concept c of language l  -> l*C + c
    [N*C, N*C + N*F)        filler f of language l   -> N*C + l*F + f
    PAD, EOS, MASK          shared specials
    tag_0 .. tag_{N-1}      language tags

A document is a sequence of language-neutral *units*: unit ``u < C`` is a
concept, unit ``u >= C`` is filler ``u - C``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SALIENCE_MULTIPLIER = 2654435761
DEFAULT_LANG_CODES = ("en", "es", "ru", "tr")


class Task(str, Enum):
    SUMMARIZE = "summarize"
    TRANSLATE = "translate"
    DENOISE = "denoise"


class DatasetFormatError(ValueError):
    pass


class NoSalientConcepts(ValueError):
    """Signal that a document must be regenerated."""


def is_salient(concept: int) -> bool:
    return ((concept * SALIENCE_MULTIPLIER) % 2**32) % 4 == 0


@dataclass(frozen=True)
class ToyLanguageFamily:
    n_langs: int = 4
    n_concepts: int = 64
    n_fillers: int = 32
    doc_len: tuple[int, int] = (24, 64)
    summary_len: tuple[int, int] = (3, 8)
    filler_rate: float = 0.25
    codes: tuple[str, ...] = DEFAULT_LANG_CODES

    def __post_init__(self):
        if self.n_langs < 2:
            raise ValueError("need at least two languages")
        if len(self.codes) < self.n_langs:
            object.__setattr__(self, "codes", tuple(f"l{i}" for i in range(self.n_langs)))
        lo, hi = self.summary_len
        if not 1 <= lo <= hi <= len(self.salient_concepts):
            raise ValueError("summary_len must fit within the salient concept inventory")
        if self.doc_len[0] < hi:
            raise ValueError("documents must be at least as long as the longest summary")

    # ---- vocabulary ------------------------------------------------------

    @property
    def n_units(self) -> int:
        return self.n_concepts + self.n_fillers

    @property
    def pad_id(self) -> int:
        return self.n_langs * self.n_units

    @property
    def eos_id(self) -> int:
        return self.pad_id + 1

    @property
    def mask_id(self) -> int:
        return self.pad_id + 2

    def tag_id(self, lang: int) -> int:
        return self.pad_id + 3 + lang

    @property
    def vocab_size(self) -> int:
        return self.pad_id + 3 + self.n_langs

    @property
    def salient_concepts(self) -> list[int]:
        return [c for c in range(self.n_concepts) if is_salient(c)]

    def lang_index(self, lang: int | str) -> int:
        if isinstance(lang, str):
            try:
                return self.codes.index(lang)
            except ValueError:
                raise ValueError(f"unknown language code {lang!r}") from None
        if not 0 <= lang < self.n_langs:
            raise ValueError(f"language index {lang} out of range")
        return lang

    def is_special(self, token: int) -> bool:
        return token >= self.pad_id

    def language_of(self, token: int) -> int | None:
        """Owning language of a content token, ``None`` for specials."""
        C, F, N = self.n_concepts, self.n_fillers, self.n_langs
        if token < N * C:
            return token // C
        if token < N * (C + F):
            return (token - N * C) // F
        return None

    def render_unit(self, unit: int, lang: int) -> int:
        C, F, N = self.n_concepts, self.n_fillers, self.n_langs
        if unit < C:
            return lang * C + unit
        return N * C + lang * F + (unit - C)

    def unit_of(self, token: int) -> int:
        C, F, N = self.n_concepts, self.n_fillers, self.n_langs
        if token < N * C:
            return token % C
        if token < N * (C + F):
            return C + (token - N * C) % F
        raise ValueError(f"token {token} is not a content token")

    def render(self, units: Iterable[int], lang: int) -> list[int]:
        return [self.render_unit(u, lang) for u in units]

    def translate(self, tokens: Iterable[int], tgt_lang: int) -> list[int]:
        """Exact token-for-token translation; specials pass through."""
        return [t if self.is_special(t) else self.render_unit(self.unit_of(t), tgt_lang) for t in tokens]

    def to_json(self) -> dict:
        return {
            "n_langs": self.n_langs,
            "n_concepts": self.n_concepts,
            "n_fillers": self.n_fillers,
            "doc_len": list(self.doc_len),
            "summary_len": list(self.summary_len),
            "filler_rate": self.filler_rate,
            "codes": list(self.codes[: self.n_langs]),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ToyLanguageFamily":
        d = dict(d)
        for key in ("doc_len", "summary_len", "codes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Document:
    units: tuple[int, ...]
    lang: int
    tokens: tuple[int, ...]
    salient: tuple[int, ...]  # in order of first appearance


@dataclass(frozen=True)
class ToyExample:
    src: tuple[int, ...]
    tgt: tuple[int, ...]
    src_lang: int
    tgt_lang: int
    task: Task = Task.SUMMARIZE

    def to_json(self) -> dict:
        return {
            "src": list(self.src),
            "tgt": list(self.tgt),
            "src_lang": self.src_lang,
            "tgt_lang": self.tgt_lang,
            "task": self.task.value,
        }


@dataclass(frozen=True)
class FilterRule:
    min_input_units: int = 20
    min_summary_units: int = 10

    def __post_init__(self):
        if self.min_input_units <= 0 or self.min_summary_units <= 0:
            raise ValueError("filter thresholds must be positive")


def salient_in_order(units: Sequence[int], n_concepts: int) -> tuple[int, ...]:
    seen: list[int] = []
    for u in units:
        if u < n_concepts and is_salient(u) and u not in seen:
            seen.append(u)
    return tuple(seen)


def document_from_units(family: ToyLanguageFamily, units: Sequence[int], lang: int) -> Document:
    units = tuple(int(u) for u in units)
    return Document(units, lang, tuple(family.render(units, lang)), salient_in_order(units, family.n_concepts))


def sample_units(family: ToyLanguageFamily, length: int, rng: np.random.Generator) -> list[int]:
    """Language-neutral unit sequence with a bounded number of salient concepts.

    Salient concepts each occur once; the remaining positions are drawn from
    non-salient concepts and fillers.
    """
    salient = family.salient_concepts
    plain = [c for c in range(family.n_concepts) if not is_salient(c)]
    lo, hi = family.summary_len
    k = int(rng.integers(lo, min(hi, length) + 1))
    chosen = rng.choice(salient, size=k, replace=False)
    positions = np.sort(rng.choice(length, size=k, replace=False))
    units: list[int] = []
    for _ in range(length):
        if rng.random() < family.filler_rate:
            units.append(family.n_concepts + int(rng.integers(family.n_fillers)))
        else:
            units.append(int(plain[rng.integers(len(plain))]))
    for pos, c in zip(positions, chosen):
        units[int(pos)] = int(c)
    return units


def generate_document(family: ToyLanguageFamily, lang: int, length: int, seed: int) -> Document:
    if length > family.doc_len[1]:
        raise ValueError(f"length {length} exceeds maximum document length {family.doc_len[1]}")
    rng = np.random.default_rng(seed)
    return document_from_units(family, sample_units(family, length, rng), family.lang_index(lang))


def make_summarization_pair(family: ToyLanguageFamily, doc: Document, tgt_lang: int) -> ToyExample:
    if not doc.salient:
        raise NoSalientConcepts("document has no salient concepts")
    return ToyExample(doc.tokens, tuple(family.render(doc.salient, tgt_lang)), doc.lang, tgt_lang, Task.SUMMARIZE)


def make_translation_pairs(dataset: Sequence[ToyExample]) -> list[ToyExample]:
    """Translation pairs from summarization data sharing an input or a summary.

    Examples with the same source text but targets in different languages give
    short (summary) pairs; examples with the same summary but sources in
    different languages give long (document) pairs. Both directions are kept.
    """
    by_src: dict[tuple, list[ToyExample]] = {}
    by_tgt: dict[tuple, list[ToyExample]] = {}
    for ex in dataset:
        by_src.setdefault((ex.src_lang, ex.src), []).append(ex)
        by_tgt.setdefault((ex.tgt_lang, ex.tgt), []).append(ex)

    out: list[ToyExample] = []
    seen: set[tuple] = set()

    def emit(a: tuple, la: int, b: tuple, lb: int) -> None:
        key = (la, a, lb, b)
        if la != lb and key not in seen:
            seen.add(key)
            out.append(ToyExample(a, b, la, lb, Task.TRANSLATE))

    for group in by_src.values():
        for x in group:
            for y in group:
                emit(x.tgt, x.tgt_lang, y.tgt, y.tgt_lang)
    for group in by_tgt.values():
        for x in group:
            for y in group:
                emit(x.src, x.src_lang, y.src, y.src_lang)
    if not out:
        logger.warning("no translation pairs could be matched")
    return out


def make_denoising_pairs(
    family: ToyLanguageFamily, documents: Sequence[Document], mask_rate: float, seed: int, max_span: int = 3
) -> list[ToyExample]:
    """Span-masked reconstruction pairs; each masked position becomes MASK."""
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    out = []
    for doc in documents:
        n = len(doc.tokens)
        budget = int(round(mask_rate * n))
        masked = np.zeros(n, dtype=bool)
        while masked.sum() < budget:
            span = int(rng.integers(1, max_span + 1))
            span = min(span, budget - int(masked.sum()))
            start = int(rng.integers(0, n - span + 1))
            masked[start : start + span] = True
        src = tuple(family.mask_id if m else t for t, m in zip(doc.tokens, masked))
        out.append(ToyExample(src, doc.tokens, doc.lang, doc.lang, Task.DENOISE))
    return out


def content_length(family: ToyLanguageFamily, tokens: Sequence[int]) -> int:
    return sum(1 for t in tokens if not family.is_special(t))


def filter_short(dataset: Sequence[ToyExample], rule: FilterRule = FilterRule()) -> list[ToyExample]:
    """Drop examples whose input or summary is too short to be trustworthy."""
    return [ex for ex in dataset if len(ex.src) > rule.min_input_units and len(ex.tgt) > rule.min_summary_units]


# ---- corpus assembly -----------------------------------------------------


def _doc_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)]


def generate_unit_pool(family: ToyLanguageFamily, n_docs: int, seed: int) -> list[list[int]]:
    """Language-neutral documents; render them into any language afterwards."""
    pool = []
    for s in _doc_seeds(seed, n_docs):
        rng = np.random.default_rng(s)
        length = int(rng.integers(family.doc_len[0], family.doc_len[1] + 1))
        pool.append(sample_units(family, length, rng))
    return pool


def summarization_set(
    family: ToyLanguageFamily, pool: Sequence[Sequence[int]], directions: Sequence[tuple[int, int]]
) -> list[ToyExample]:
    """Render every pooled document for every (src, tgt) direction."""
    out = []
    for units in pool:
        for s, t in directions:
            out.append(make_summarization_pair(family, document_from_units(family, units, s), t))
    return out


def split_by_direction(dataset: Iterable[ToyExample]) -> dict[tuple[int, int], list[ToyExample]]:
    out: dict[tuple[int, int], list[ToyExample]] = {}
    for ex in dataset:
        out.setdefault((ex.src_lang, ex.tgt_lang), []).append(ex)
    return out


# ---- JSONL persistence ---------------------------------------------------


def save_jsonl(path: str | Path, dataset: Iterable[ToyExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            fh.write(json.dumps(ex.to_json(), separators=(",", ":")) + "\n")


def _parse_record(rec: dict) -> ToyExample:
    src, tgt = rec["src"], rec["tgt"]
    if not all(isinstance(t, int) for t in src) or not all(isinstance(t, int) for t in tgt):
        raise TypeError("src/tgt must be integer lists")
    return ToyExample(tuple(src), tuple(tgt), int(rec["src_lang"]), int(rec["tgt_lang"]), Task(rec["task"]))


def load_jsonl(path: str | Path) -> list[ToyExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(_parse_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out
