"""Experiment configs, run manifests and the end-to-end toy pipeline.

A run is pretrain (shared per seed) -> finetune -> decode -> evaluate -> probe.
Everything a report prints is stored in the run's JSON manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .adversarial import AdvConfig, AdvMode, train_with_adversary
from .corpus import (
    ToyExample,
    ToyLanguageFamily,
    document_from_units,
    generate_unit_pool,
    make_denoising_pairs,
    make_summarization_pair,
    make_translation_pairs,
    summarization_set,
)
from .finetune import FinetuneStrategy, Strategy, TrainConfig, train, two_step_finetune
from .metrics import EvalReport, ModelGenerator, evaluate_outputs, language_accuracy
from .model import DecodeConfig, ModelConfig, Seq2SeqModel, load_checkpoint, save_checkpoint, source_ids
from .probing import ProbeConfig, ProbeReport, probe_accuracy, train_probe

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("method", "seed", "direction", "group", "rouge1", "rouge2", "rougeL", "lang_acc", "n")
SUMMARY_COLUMNS = ("method", "group", "rouge1", "rouge2", "rougeL", "lang_acc", "n_seeds")
GROUPS = ("seen-intra", "seen-cross", "unseen")


class ConfigValidationError(ValueError):
    """Carries every problem found in a config, not just the first."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n  " + "\n  ".join(self.problems))


# ---- config sections -------------------------------------------------------


@dataclass
class CorpusConfig:
    n_langs: int = 4
    n_concepts: int = 64
    n_fillers: int = 32
    doc_len: tuple[int, int] = (16, 32)
    summary_len: tuple[int, int] = (3, 8)
    filler_rate: float = 0.25
    n_pretrain_docs: int = 6000
    n_train_docs: int = 3000  # per supervised direction
    n_dev_docs: int = 40
    n_test_docs: int = 60
    n_translation_docs: int = 500
    mask_rate: float = 0.1


@dataclass
class ModelSection:
    d_model: int = 32
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ffn: int = 64
    dropout_rate: float = 0.1
    lang_scale: float = 1.0  # language offset in the aligned embedding init


@dataclass
class DecodeSection:
    beam_size: int = 1
    max_output_len: int = 12
    length_penalty_intra: float = 0.6
    length_penalty_cross: float = 1.0

    def for_direction(self, src: int, tgt: int) -> DecodeConfig:
        alpha = self.length_penalty_intra if src == tgt else self.length_penalty_cross
        return DecodeConfig(self.beam_size, alpha, self.max_output_len)


@dataclass
class AdvSection:
    mode: str = "none"
    adv_weight: float = 1.0
    grl_scale: float = 1.0
    head_lr: float | None = 1e-2  # the head must keep up with a moving encoder; None follows `train`


def _pretrain_defaults() -> TrainConfig:
    return TrainConfig(lr_start=3e-3, lr_end=1e-4, max_steps=1200, eval_every=100, early_stop_patience=4)


def _finetune_defaults() -> TrainConfig:
    return TrainConfig(lr_start=2e-3, lr_end=1e-4, max_steps=1500, eval_every=100, early_stop_patience=3)


SECTIONS: dict[str, type] = {
    "corpus": CorpusConfig,
    "model": ModelSection,
    "pretrain": TrainConfig,
    "train": TrainConfig,
    "translate": TrainConfig,
    "adv": AdvSection,
    "decode": DecodeSection,
    "probe": ProbeConfig,
}
TUPLE_FIELDS = {"doc_len", "summary_len"}


@dataclass
class ExperimentConfig:
    name: str = "baseline"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: TrainConfig = field(default_factory=_pretrain_defaults)
    train: TrainConfig = field(default_factory=_finetune_defaults)
    translate: TrainConfig = field(default_factory=_finetune_defaults)
    strategy: str = "full"
    custom_patterns: tuple[str, ...] = ()
    adv: AdvSection = field(default_factory=AdvSection)
    residual_drop: bool = False
    residual_drop_layer: int | None = None  # None: the middle encoder layer
    two_step: bool = False
    decode: DecodeSection = field(default_factory=DecodeSection)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    train_langs: tuple[str, ...] = ("en", "es", "ru")
    supervised_directions: tuple[tuple[str, str], ...] | None = None  # None: intralingual on train_langs
    eval_directions: tuple[tuple[str, str], ...] | None = None  # None: every direction
    zero_shot: bool = True
    seeds: tuple[int, ...] = (0, 1, 2)

    # ---- derived ---------------------------------------------------------

    def family(self) -> ToyLanguageFamily:
        c = self.corpus
        return ToyLanguageFamily(
            n_langs=c.n_langs,
            n_concepts=c.n_concepts,
            n_fillers=c.n_fillers,
            doc_len=tuple(c.doc_len),
            summary_len=tuple(c.summary_len),
            filler_rate=c.filler_rate,
        )

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig.for_family(
            self.family(),
            d_model=m.d_model,
            n_heads=m.n_heads,
            n_encoder_layers=m.n_encoder_layers,
            n_decoder_layers=m.n_decoder_layers,
            d_ffn=m.d_ffn,
            dropout_rate=m.dropout_rate,
        )

    def drop_layer(self) -> int | None:
        if not self.residual_drop:
            return None
        if self.residual_drop_layer is None:
            return ModelConfig.middle_layer(self.model.n_encoder_layers)
        return self.residual_drop_layer

    def adv_config(self) -> AdvConfig:
        return AdvConfig(AdvMode(self.adv.mode), self.adv.adv_weight, self.adv.grl_scale, self.adv.head_lr)

    def finetune_strategy(self) -> FinetuneStrategy:
        return FinetuneStrategy(Strategy(self.strategy), tuple(self.custom_patterns))

    def lang_ids(self, codes: Iterable[str]) -> list[int]:
        fam = self.family()
        return [fam.lang_index(c) for c in codes]

    def supervised(self) -> list[tuple[int, int]]:
        if self.supervised_directions is None:
            return [(l, l) for l in self.lang_ids(self.train_langs)]
        fam = self.family()
        return [(fam.lang_index(a), fam.lang_index(b)) for a, b in self.supervised_directions]

    def directions(self) -> list[tuple[int, int]]:
        fam = self.family()
        if self.eval_directions is None:
            return [(a, b) for a in range(fam.n_langs) for b in range(fam.n_langs)]
        return [(fam.lang_index(a), fam.lang_index(b)) for a, b in self.eval_directions]

    def finetune_languages(self) -> list[int]:
        langs = {l for d in self.supervised() for l in d}
        return sorted(langs)

    # ---- validation and (de)serialization ---------------------------------

    def problems(self) -> list[str]:
        out = []
        try:
            fam = self.family()
        except ValueError as exc:
            return [f"corpus: {exc}"]
        codes = set(fam.codes[: fam.n_langs])
        for code in self.train_langs:
            if code not in codes:
                out.append(f"train_langs: unknown language code {code!r}")
        for key in ("supervised_directions", "eval_directions"):
            for pair in getattr(self, key) or ():
                if len(pair) != 2:
                    out.append(f"{key}: {pair!r} is not a (src, tgt) pair")
                    continue
                for code in pair:
                    if code not in codes:
                        out.append(f"{key}: unknown language code {code!r}")
        if not self.seeds:
            out.append("seeds: must be nonempty")
        try:
            strategy = self.finetune_strategy()
        except ValueError as exc:
            out.append(f"strategy: {exc}")
            strategy = None
        try:
            adv = self.adv_config()
        except ValueError as exc:
            out.append(f"adv: {exc}")
            adv = None
        if self.residual_drop:
            layer = self.drop_layer()
            if not 0 <= layer < self.model.n_encoder_layers:
                out.append(f"residual_drop_layer: {layer} outside [0, {self.model.n_encoder_layers})")
        if self.two_step:
            if strategy is not None and strategy.kind is not Strategy.QUERY_KEY:
                out.append("two_step: the summarization step uses strategy 'qk'")
            if adv is not None and adv.mode is not AdvMode.NONE:
                out.append("two_step: cannot be combined with an adversary")
        try:
            self.model_config()
        except ValueError as exc:
            out.append(f"model: {exc}")
        if not out and self.zero_shot:
            clash = set(self.directions()) & set(self.supervised())
            if clash and self.eval_directions is not None:
                names = sorted(f"{fam.codes[a]}-{fam.codes[b]}" for a, b in clash)
                out.append(f"eval_directions: zero-shot run evaluates supervised directions {names}")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigValidationError(problems)
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("custom_patterns", "train_langs", "seeds"):
            d[key] = list(d[key])
        for key in ("supervised_directions", "eval_directions"):
            if d[key] is not None:
                d[key] = [list(p) for p in d[key]]
        for key in TUPLE_FIELDS:
            d["corpus"][key] = list(d["corpus"][key])
        return d

    def config_hash(self) -> str:
        """Hash of the canonicalized config; the seed list is not part of a run's identity."""
        d = self.to_json()
        del d["seeds"]
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

    def pretrain_hash(self) -> str:
        d = self.to_json()
        keep = {k: d[k] for k in ("corpus", "model", "pretrain")}
        return hashlib.sha256(json.dumps(keep, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, data: Mapping[str, Any], require_corpus: bool = True) -> "ExperimentConfig":
        """Build a config from a JSON document; unknown or mistyped keys are errors."""
        problems: list[str] = []
        top = {f.name for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key not in top:
                problems.append(f"unknown key {key!r}")
                continue
            if key in SECTIONS:
                section = _build_section(key, SECTIONS[key], value, problems, require=(key == "corpus" and require_corpus))
                if section is not None:
                    kwargs[key] = section
            elif key in ("supervised_directions", "eval_directions"):
                kwargs[key] = None if value is None else tuple(tuple(p) for p in value)
            elif key in ("custom_patterns", "train_langs", "seeds"):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        if require_corpus and "corpus" not in data:
            problems.append("missing section 'corpus'")
        if problems:
            raise ConfigValidationError(problems)
        try:
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigValidationError([str(exc)]) from exc
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigValidationError([f"{path}: not valid JSON ({exc})"]) from exc
        if not isinstance(data, dict):
            raise ConfigValidationError([f"{path}: top level must be an object"])
        return cls.from_json(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _build_section(name: str, cls: type, value: Any, problems: list[str], require: bool):
    if not isinstance(value, dict):
        problems.append(f"{name}: expected an object")
        return None
    known = {f.name for f in fields(cls)}
    before = len(problems)
    for key in value:
        if key not in known:
            problems.append(f"{name}: unknown key {key!r}")
    if require:
        for key in sorted(known - set(value)):
            problems.append(f"{name}: missing field {key!r}")
    if len(problems) > before:
        return None
    kw = {k: tuple(v) if k in TUPLE_FIELDS else v for k, v in value.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
        return None


# ---- data ------------------------------------------------------------------


@dataclass
class ExperimentData:
    family: ToyLanguageFamily
    pretrain: list[ToyExample]
    pretrain_dev: list[ToyExample]
    train: list[ToyExample]
    dev: list[ToyExample]
    test_pool: list[list[int]]
    translation: list[ToyExample]
    translation_dev: list[ToyExample]


def _directed(family: ToyLanguageFamily, pool, directions) -> list[ToyExample]:
    return [
        make_summarization_pair(family, document_from_units(family, u, directions[i % len(directions)][0]), directions[i % len(directions)][1])
        for i, u in enumerate(pool)
    ]


def build_data(cfg: ExperimentConfig, seed: int) -> ExperimentData:
    """All datasets of a run, derived deterministically from the seed."""
    fam = cfg.family()
    c = cfg.corpus
    base = seed * 1000
    pool = generate_unit_pool(fam, c.n_pretrain_docs, seed=base + 1)
    docs = [document_from_units(fam, u, i % fam.n_langs) for i, u in enumerate(pool)]
    denoise = make_denoising_pairs(fam, docs, c.mask_rate, seed=base + 2)
    n_dev = max(1, min(200, len(denoise) // 10))
    sup = cfg.supervised()
    train_data = _directed(fam, generate_unit_pool(fam, c.n_train_docs * len(sup), seed=base + 3), sup)
    dev_data = _directed(fam, generate_unit_pool(fam, c.n_dev_docs * len(sup), seed=base + 4), sup)
    test_pool = generate_unit_pool(fam, c.n_test_docs, seed=base + 5)
    every = [(a, b) for a in range(fam.n_langs) for b in range(fam.n_langs)]
    translation = make_translation_pairs(summarization_set(fam, generate_unit_pool(fam, c.n_translation_docs, seed=base + 7), every))
    translation_dev = make_translation_pairs(summarization_set(fam, generate_unit_pool(fam, 8, seed=base + 8), every))
    return ExperimentData(fam, denoise[:-n_dev], denoise[-n_dev:], train_data, dev_data, test_pool, translation, translation_dev)


# ---- stages ----------------------------------------------------------------


def pretrain_model(cfg: ExperimentConfig, seed: int, data: ExperimentData | None = None, log_path=None) -> Seq2SeqModel:
    """Denoising pretraining over every toy language from an aligned embedding init."""
    data = data or build_data(cfg, seed)
    fam = data.family
    model = Seq2SeqModel(cfg.model_config(), seed=seed)
    model.align_embeddings(fam, seed=seed, lang_scale=cfg.model.lang_scale)
    tc = replace(cfg.pretrain, seed=seed)
    train(model, fam, data.pretrain, data.pretrain_dev, set(model.params), tc, log_path=log_path)
    acc = reconstruction_language_accuracy(model, fam, data.pretrain_dev)
    logger.info("pretrained seed %d: tagged reconstruction language accuracy %.3f", seed, acc)
    return model


def reconstruction_language_accuracy(model: Seq2SeqModel, family: ToyLanguageFamily, dev: Sequence[ToyExample]) -> float:
    gen = ModelGenerator(model, family, DecodeConfig(beam_size=1, max_output_len=family.doc_len[1] + 1))
    hyps = gen.batch([e.src for e in dev], [e.src_lang for e in dev], [e.tgt_lang for e in dev])
    return language_accuracy(family, hyps, [e.tgt_lang for e in dev])


@dataclass
class FinetuneOutcome:
    model: Seq2SeqModel
    trainable: list[str]
    best_step: int
    steps_run: int
    history: list[dict]


def finetune_model(
    cfg: ExperimentConfig, base: Seq2SeqModel, seed: int, data: ExperimentData | None = None, log_path=None
) -> FinetuneOutcome:
    """Finetune a copy of ``base`` as the config says; ``base`` is left untouched."""
    cfg.validate()
    data = data or build_data(cfg, seed)
    fam = data.family
    tc = replace(cfg.train, seed=seed)
    model = base.with_residual_drop(cfg.drop_layer())
    if cfg.two_step:
        res = two_step_finetune(
            model, fam, (data.translation, data.translation_dev), (data.train, data.dev), replace(cfg.translate, seed=seed), tc
        )
        hist = [dict(r, stage="translate") for r in res.translation.history] + [dict(r, stage="summarize") for r in res.summarization.history]
        out = res.summarization
        return FinetuneOutcome(out.model, out.trainable, out.best_step, res.translation.steps_run + out.steps_run, hist)
    adv = cfg.adv_config()
    if adv.mode is AdvMode.NONE:
        out = train(model, fam, data.train, data.dev, cfg.finetune_strategy(), tc, log_path=log_path)
    else:
        out, _ = train_with_adversary(
            model, fam, data.train, data.dev, cfg.finetune_strategy(), tc, adv, cfg.finetune_languages(), log_path=log_path
        )
    return FinetuneOutcome(out.model, out.trainable, out.best_step, out.steps_run, out.history)


def direction_name(family: ToyLanguageFamily, d: tuple[int, int]) -> str:
    return f"{family.codes[d[0]]}-{family.codes[d[1]]}"


def parse_directions(family: ToyLanguageFamily, text: str) -> list[tuple[int, int]]:
    """``"es-en,ru-en"`` -> language-index pairs; unknown codes raise ConfigValidationError."""
    out, problems = [], []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split("-")
        if len(parts) != 2:
            problems.append(f"direction {item!r} is not of the form src-tgt")
            continue
        try:
            out.append((family.lang_index(parts[0]), family.lang_index(parts[1])))
        except (KeyError, ValueError):
            problems.append(f"direction {item!r}: unknown language code")
    if problems:
        raise ConfigValidationError(problems)
    return out


def group_of(d: tuple[int, int], seen_langs: Iterable[int]) -> str:
    """seen = both languages occur in finetuning data; unseen = at least one does not."""
    seen = set(seen_langs)
    if d[0] in seen and d[1] in seen:
        return "seen-intra" if d[0] == d[1] else "seen-cross"
    return "unseen"


def evaluate_model(
    model: Seq2SeqModel,
    cfg: ExperimentConfig,
    data: ExperimentData,
    directions: Sequence[tuple[int, int]],
    bootstrap: int | None = None,
    seed: int = 0,
) -> dict[str, EvalReport]:
    fam = data.family
    out = {}
    for d in directions:
        exs = summarization_set(fam, data.test_pool, [d])
        gen = ModelGenerator(model, fam, cfg.decode.for_direction(*d))
        hyps = model.generate([source_ids(fam, e.src, e.src_lang) for e in exs], [fam.tag_id(d[1])] * len(exs), gen.decode)
        out[direction_name(fam, d)] = evaluate_outputs(
            fam,
            [h.tokens for h in hyps],
            [e.tgt for e in exs],
            [d[1]] * len(exs),
            unfinished=sum(not h.finished for h in hyps),
            bootstrap=bootstrap,
            seed=seed,
        )
    return out


def probe_model(model: Seq2SeqModel, cfg: ExperimentConfig, data: ExperimentData, seed: int) -> ProbeReport:
    """Fresh probe over the finetuning languages on a frozen copy; the model passed in is not modified."""
    frozen = model.clone().freeze()
    langs = cfg.finetune_languages()
    fam = data.family
    train_docs = [e for e in data.train if e.src_lang in langs]
    test = [make_summarization_pair(fam, document_from_units(fam, u, langs[i % len(langs)]), langs[i % len(langs)]) for i, u in enumerate(data.test_pool)]
    probe = train_probe(frozen, fam, train_docs, langs, replace(cfg.probe, seed=seed))
    return probe_accuracy(probe, frozen, fam, test, langs)


# ---- manifests ---------------------------------------------------------------


@dataclass
class RunManifest:
    name: str
    config_hash: str
    seed: int
    checkpoints: dict[str, str]
    trainable: list[str]
    best_step: int
    steps_run: int
    evals: dict[str, dict]
    groups: dict[str, str]
    probe: dict | None
    model_checksum: str
    wall_clock: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Everything except timings, which differ between identical runs."""
        d = self.to_json()
        del d["wall_clock"]
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def report(self, direction: str) -> EvalReport:
        return EvalReport(**self.evals[direction])


def base_checkpoint(cfg: ExperimentConfig, seed: int, workdir: str | Path, data: ExperimentData | None = None) -> Path:
    """Path to the pretrained model for (pretrain settings, seed), training it on first use."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    path = workdir / f"pretrain-{cfg.pretrain_hash()}-s{seed}.ck"
    if not path.exists():
        model = pretrain_model(cfg, seed, data, log_path=workdir / f"pretrain-{cfg.pretrain_hash()}-s{seed}.jsonl")
        save_checkpoint(model, path)
    return path


def run_experiment(
    cfg: ExperimentConfig,
    seed: int,
    workdir: str | Path,
    directions: Sequence[tuple[int, int]] | None = None,
    bootstrap: int | None = None,
    with_probe: bool = True,
) -> RunManifest:
    """Finetune, evaluate and probe one (config, seed); results land in ``workdir``.

    A manifest already present for the same config hash and seed is reused.
    """
    cfg.validate()
    workdir = Path(workdir)
    run_dir = workdir / f"{cfg.name}-{cfg.config_hash()}-s{seed}"
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        return RunManifest.load(manifest_path)
    run_dir.mkdir(parents=True, exist_ok=True)
    clock = {}
    t0 = time.perf_counter()
    data = build_data(cfg, seed)
    base_path = base_checkpoint(cfg, seed, workdir, data)
    clock["pretrain_or_load"] = time.perf_counter() - t0
    base = load_checkpoint(base_path)

    t0 = time.perf_counter()
    outcome = finetune_model(cfg, base, seed, data, log_path=run_dir / "train_log.jsonl")
    save_checkpoint(outcome.model, run_dir / "model.ck")
    clock["finetune"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    directions = cfg.directions() if directions is None else list(directions)
    reports = evaluate_model(outcome.model, cfg, data, directions, bootstrap=bootstrap, seed=seed)
    clock["evaluate"] = time.perf_counter() - t0

    probe = None
    if with_probe and len(cfg.finetune_languages()) >= 2:
        t0 = time.perf_counter()
        probe = probe_model(outcome.model, cfg, data, seed).to_json()
        clock["probe"] = time.perf_counter() - t0

    seen = cfg.finetune_languages()
    fam = data.family
    manifest = RunManifest(
        name=cfg.name,
        config_hash=cfg.config_hash(),
        seed=seed,
        checkpoints={"base": str(Path("..") / base_path.name), "model": "model.ck"},
        trainable=outcome.trainable,
        best_step=outcome.best_step,
        steps_run=outcome.steps_run,
        evals={k: v.to_json() for k, v in reports.items()},
        groups={direction_name(fam, d): group_of(d, seen) for d in directions},
        probe=probe,
        model_checksum=outcome.model.checksum(),
        wall_clock=clock,
    )
    manifest.save(manifest_path)
    cfg.save(run_dir / "config.json")
    return manifest


# ---- recipes and tables ------------------------------------------------------


# Partial finetuning of the QK projections moves few weights and needs a larger step.
QK_LR = 1e-2
# With one language a sharper fit is needed before the decoder stops honouring other tags.
SINGLE_LANGUAGE_LR = 5e-3


def trend_recipe(base: ExperimentConfig | None = None) -> list[ExperimentConfig]:
    """Baseline, CE adversary, balanced adversary, balanced + residual drop, two-step + QK."""
    base = base or ExperimentConfig()
    return [
        replace(base, name="baseline"),
        replace(base, name="ce-adv", adv=replace(base.adv, mode="ce")),
        replace(base, name="balanced-adv", adv=replace(base.adv, mode="balanced")),
        replace(base, name="balanced-adv+rd", adv=replace(base.adv, mode="balanced"), residual_drop=True),
        replace(base, name="two-step+qk", strategy="qk", two_step=True, train=replace(base.train, lr_start=QK_LR)),
    ]


def control_configs(base: ExperimentConfig | None = None) -> dict[str, ExperimentConfig]:
    """Reference runs next to the recipe: QK alone, one finetuning language, and full supervision."""
    base = base or ExperimentConfig()
    codes = base.family().codes[: base.corpus.n_langs]
    return {
        "qk-only": replace(base, name="qk-only", strategy="qk", train=replace(base.train, lr_start=QK_LR)),
        "single-language": replace(
            base, name="single-language", train_langs=base.train_langs[:1], train=replace(base.train, lr_start=SINGLE_LANGUAGE_LR)
        ),
        "supervised": replace(
            base,
            name="supervised",
            train_langs=tuple(codes),
            supervised_directions=tuple((a, b) for a in codes for b in codes),
            zero_shot=False,
        ),
    }


def result_rows(manifests: Iterable[RunManifest]) -> list[dict]:
    rows = []
    for m in manifests:
        for direction, rep in m.evals.items():
            rows.append(
                {
                    "method": m.name,
                    "seed": m.seed,
                    "direction": direction,
                    "group": m.groups[direction],
                    **{k: rep[k] for k in ("rouge1", "rouge2", "rougeL", "lang_acc", "n")},
                }
            )
    return rows


def summary_rows(manifests: Sequence[RunManifest]) -> list[dict]:
    """Per method and direction group: mean over directions, then over seeds."""
    by_key: dict[tuple[str, str], dict[int, list[dict]]] = {}
    order: list[str] = []
    for row in result_rows(manifests):
        if row["method"] not in order:
            order.append(row["method"])
        by_key.setdefault((row["method"], row["group"]), {}).setdefault(row["seed"], []).append(row)
    out = []
    for method in order:
        for group in GROUPS:
            seeds = by_key.get((method, group))
            if not seeds:
                continue
            per_seed = {m: [np.mean([r[m] for r in rows]) for rows in seeds.values()] for m in ("rouge1", "rouge2", "rougeL", "lang_acc")}
            out.append({"method": method, "group": group, **{m: float(np.mean(v)) for m, v in per_seed.items()}, "n_seeds": len(seeds)})
    return out


def write_csv(path: str | Path, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="raise")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def probe_rows(manifests: Iterable[RunManifest]) -> list[dict]:
    rows = []
    for m in manifests:
        if m.probe is None:
            continue
        row = {"method": m.name, "seed": m.seed, "accuracy": m.probe["accuracy"], "chance": m.probe["chance"]}
        row.update({f"acc_{k}": v for k, v in sorted(m.probe["per_language"].items())})
        rows.append(row)
    return rows


# ---- command entry points ----------------------------------------------------


def cmd_generate_corpus(cfg: ExperimentConfig, seed: int, out_dir: str | Path) -> dict[str, Path]:
    from .corpus import save_jsonl

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = build_data(cfg.validate(), seed)
    fam = data.family
    paths = {}
    splits = {
        "pretrain": data.pretrain,
        "pretrain_dev": data.pretrain_dev,
        "train": data.train,
        "dev": data.dev,
        "test": summarization_set(fam, data.test_pool, cfg.directions()),
        "translation": data.translation,
        "translation_dev": data.translation_dev,
    }
    for name, rows in splits.items():
        paths[name] = out_dir / f"{name}.jsonl"
        save_jsonl(paths[name], rows)
    paths["family"] = out_dir / "family.json"
    paths["family"].write_text(json.dumps(fam.to_json(), indent=2) + "\n", encoding="utf-8")
    return paths


def cmd_pretrain(cfg: ExperimentConfig, seed: int, out_path: str | Path) -> Path:
    cfg.validate()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model = pretrain_model(cfg, seed, log_path=out_path.with_suffix(".jsonl"))
    save_checkpoint(model, out_path)
    return out_path


def cmd_finetune(cfg: ExperimentConfig, seed: int, base_path: str | Path, out_dir: str | Path) -> RunManifest:
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = load_checkpoint(base_path)
    t0 = time.perf_counter()
    outcome = finetune_model(cfg, base, seed, log_path=out_dir / "train_log.jsonl")
    save_checkpoint(outcome.model, out_dir / "model.ck")
    manifest = RunManifest(
        name=cfg.name,
        config_hash=cfg.config_hash(),
        seed=seed,
        checkpoints={"base": str(base_path), "model": "model.ck"},
        trainable=outcome.trainable,
        best_step=outcome.best_step,
        steps_run=outcome.steps_run,
        evals={},
        groups={},
        probe=None,
        model_checksum=outcome.model.checksum(),
        wall_clock={"finetune": time.perf_counter() - t0},
    )
    manifest.save(out_dir / "manifest.json")
    cfg.save(out_dir / "config.json")
    return manifest


def cmd_evaluate(
    checkpoint: str | Path,
    cfg: ExperimentConfig,
    seed: int,
    directions: Sequence[tuple[int, int]] | None = None,
    out_csv: str | Path | None = None,
    bootstrap: int | None = None,
) -> list[dict]:
    """Per-direction rows (``TABLE_COLUMNS``) followed by seen/unseen group means."""
    cfg.validate()
    data = build_data(cfg, seed)
    directions = cfg.directions() if directions is None else list(directions)
    rows: list[dict] = []
    if directions:
        model = load_checkpoint(checkpoint)
        reports = evaluate_model(model, cfg, data, directions, bootstrap=bootstrap, seed=seed)
        seen = cfg.finetune_languages()
        for d in directions:
            key = direction_name(data.family, d)
            rep = reports[key]
            rows.append({"method": cfg.name, "seed": seed, "direction": key, "group": group_of(d, seen),
                         "rouge1": rep.rouge1, "rouge2": rep.rouge2, "rougeL": rep.rougeL, "lang_acc": rep.lang_acc, "n": rep.n})
        for g in GROUPS:
            sel = [r for r in rows if r["group"] == g and r["direction"] != "mean"]
            if sel:
                rows.append({"method": cfg.name, "seed": seed, "direction": "mean", "group": g,
                             **{m: float(np.mean([r[m] for r in sel])) for m in ("rouge1", "rouge2", "rougeL", "lang_acc")},
                             "n": sum(r["n"] for r in sel)})
    if out_csv is not None:
        write_csv(out_csv, rows, TABLE_COLUMNS)
    return rows


def cmd_probe(checkpoint: str | Path, cfg: ExperimentConfig, seed: int) -> ProbeReport:
    cfg.validate()
    model = load_checkpoint(checkpoint)
    return probe_model(model, cfg, build_data(cfg, seed), seed)


def cmd_report(
    cfg: ExperimentConfig, workdir: str | Path, out_dir: str | Path, seeds: Sequence[int] | None = None
) -> dict[str, Path]:
    """Run (or reuse) the five-row recipe over the seeds and write CSV tables and figures."""
    from .plotting import plot_probe, plot_summary

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(cfg.seeds if seeds is None else seeds)
    manifests = []
    for row_cfg in trend_recipe(cfg):
        for seed in seeds:
            t0 = time.perf_counter()
            manifests.append(run_experiment(row_cfg, seed, workdir))
            logger.info("%s seed %d done in %.0fs", row_cfg.name, seed, time.perf_counter() - t0)
    summary = summary_rows(manifests)
    probes = probe_rows(manifests)
    paths = {
        "results": out_dir / "results.csv",
        "summary": out_dir / "summary.csv",
        "probe": out_dir / "probe.csv",
        "summary_figure": out_dir / "summary.png",
        "probe_figure": out_dir / "probe.png",
    }
    write_csv(paths["results"], result_rows(manifests), TABLE_COLUMNS)
    write_csv(paths["summary"], summary, SUMMARY_COLUMNS)
    probe_cols = list(dict.fromkeys(k for r in probes for k in r)) or ["method", "seed", "accuracy", "chance"]
    write_csv(paths["probe"], probes, probe_cols)
    plot_summary(summary, paths["summary_figure"])
    plot_probe(probes, paths["probe_figure"])
    return paths
