"""ROUGE, exact toy-language accuracy, bootstrap percentiles and the pipeline baseline."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .corpus import ToyLanguageFamily
from .model import DecodeConfig, Seq2SeqModel, source_ids

LANG_ID_THRESHOLD = 0.8


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _prf(overlap: float, n_hyp: int, n_ref: int) -> PRF:
    if n_hyp == 0 or n_ref == 0 or overlap == 0:
        return PRF(0.0, 0.0, 0.0)
    p, r = overlap / n_hyp, overlap / n_ref
    return PRF(p, r, 2 * p * r / (p + r))


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def rouge_n(hyp: Sequence, ref: Sequence, n: int) -> PRF:
    if n < 1:
        raise ValueError("n must be >= 1")
    h, r = _ngrams(hyp, n), _ngrams(ref, n)
    overlap = sum(min(c, r[g]) for g, c in h.items())
    return _prf(overlap, sum(h.values()), sum(r.values()))


def lcs_lengths(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """LCS length for every pair in a batch: ``a`` is (..., m), ``b`` is (..., n), batch dims broadcast."""
    a, b = np.asarray(a), np.asarray(b)
    m, n = a.shape[-1], b.shape[-1]
    batch = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    zero = np.zeros(batch, dtype=np.int16)
    prev = [zero] * (n + 1)
    for i in range(m):
        cur = [zero]
        for j in range(n):
            cur.append(np.where(a[..., i] == b[..., j], prev[j] + 1, np.maximum(prev[j + 1], cur[j])))
        prev = cur
    return prev[-1]


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) == 0 or len(b) == 0:
        return 0
    return int(lcs_lengths(np.asarray(list(a))[None], np.asarray(list(b))[None])[0])


def rouge_l(hyp: Sequence, ref: Sequence) -> PRF:
    return _prf(lcs_length(hyp, ref), len(hyp), len(ref))


@dataclass
class LangVerdict:
    correct: bool
    share: float
    empty: bool


def language_verdict(family: ToyLanguageFamily, tokens: Sequence[int], expected: int) -> LangVerdict:
    content = [t for t in tokens if not family.is_special(t)]
    if not content:
        return LangVerdict(False, 0.0, True)
    share = sum(1 for t in content if family.language_of(t) == expected) / len(content)
    return LangVerdict(share >= LANG_ID_THRESHOLD, share, False)


def language_accuracy(family: ToyLanguageFamily, outputs: Sequence[Sequence[int]], expected: Sequence[int]) -> float:
    """Fraction of outputs with at least 80% of content tokens in the expected language."""
    if len(outputs) != len(expected):
        raise ValueError("outputs and expected languages differ in length")
    if not outputs:
        return 0.0
    return sum(language_verdict(family, o, e).correct for o, e in zip(outputs, expected)) / len(outputs)


def bootstrap_ci(scores: Sequence[float], resamples: int = 1000, seed: int = 0) -> dict[str, float]:
    """Percentile bootstrap of the mean: 2.5th, 50th and 97.5th percentiles."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no scores to resample")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    lo, mid, hi = np.percentile(means, [2.5, 50.0, 97.5])
    # Constant inputs must come back exact, not off by an ulp from averaging.
    if np.all(x == x[0]):
        lo = mid = hi = float(x[0])
    return {"p2.5": float(lo), "p50": float(mid), "p97.5": float(hi)}


METRICS = ("rouge1", "rouge2", "rougeL", "lang_acc")


@dataclass
class EvalReport:
    rouge1: float
    rouge2: float
    rougeL: float
    lang_acc: float
    n: int
    n_empty: int = 0
    n_unfinished: int = 0
    ci: dict[str, dict[str, float]] | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        if d["ci"] is None:
            del d["ci"]
        return d


def evaluate_outputs(
    family: ToyLanguageFamily,
    hyps: Sequence[Sequence[int]],
    refs: Sequence[Sequence[int]],
    tgt_langs: Sequence[int],
    unfinished: int = 0,
    bootstrap: int | None = None,
    seed: int = 0,
) -> EvalReport:
    per = {m: [] for m in METRICS}
    empty = 0
    for h, r, lang in zip(hyps, refs, tgt_langs):
        per["rouge1"].append(rouge_n(h, r, 1).f1)
        per["rouge2"].append(rouge_n(h, r, 2).f1)
        per["rougeL"].append(rouge_l(h, r).f1)
        v = language_verdict(family, h, lang)
        per["lang_acc"].append(float(v.correct))
        empty += v.empty
    n = len(hyps)
    means = {m: float(np.mean(v)) if v else 0.0 for m, v in per.items()}
    ci = None
    if bootstrap and n:
        ci = {m: bootstrap_ci(per[m], bootstrap, seed) for m in METRICS}
    return EvalReport(n=n, n_empty=empty, n_unfinished=unfinished, ci=ci, **means)


# ---- generation wrappers and the pipeline baseline -----------------------


class Generator(Protocol):
    def __call__(self, source: Sequence[int], src_lang: int, tgt_lang: int) -> list[int]:
        ...


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class ModelGenerator:
    model: Seq2SeqModel
    family: ToyLanguageFamily
    decode: DecodeConfig

    def __call__(self, source, src_lang, tgt_lang):
        return self.batch([source], [src_lang], [tgt_lang])[0]

    def batch(self, sources, src_langs, tgt_langs) -> list[list[int]]:
        hyps = self.model.generate(
            [source_ids(self.family, s, l) for s, l in zip(sources, src_langs)],
            [self.family.tag_id(t) for t in tgt_langs],
            self.decode,
        )
        return [h.tokens for h in hyps]


@dataclass
class OracleTranslator:
    """Exact relabelling translator available only for toy languages."""

    family: ToyLanguageFamily

    def __call__(self, source, src_lang, tgt_lang):
        return self.family.translate(source, tgt_lang)

    def batch(self, sources, src_langs, tgt_langs):
        return [self(s, a, b) for s, a, b in zip(sources, src_langs, tgt_langs)]


def pipeline_batch(translator, summarizer, sources, src_langs, tgt_langs, pivot: int) -> list[list[int]]:
    """Translate to the pivot, summarize in the pivot, translate back.

    Translation is skipped for sources or targets already in the pivot language.
    """
    n = len(sources)
    stage = "translate-in"
    try:
        need = [i for i in range(n) if src_langs[i] != pivot]
        pivot_src = list(sources)
        if need:
            out = translator.batch([sources[i] for i in need], [src_langs[i] for i in need], [pivot] * len(need))
            for i, o in zip(need, out):
                pivot_src[i] = o
        stage = "summarize"
        summaries = summarizer.batch(pivot_src, [pivot] * n, [pivot] * n)
        stage = "translate-out"
        need = [i for i in range(n) if tgt_langs[i] != pivot]
        if need:
            out = translator.batch([summaries[i] for i in need], [pivot] * len(need), [tgt_langs[i] for i in need])
            for i, o in zip(need, out):
                summaries[i] = o
    except Exception as exc:  # noqa: BLE001 - re-raised with the failing stage attached
        raise StageError(stage, exc) from exc
    return summaries


def pipeline_summarize(translator, summarizer, source, src_lang, tgt_lang, pivot: int = 0) -> list[int]:
    return pipeline_batch(translator, summarizer, [source], [src_lang], [tgt_lang], pivot)[0]
