"""Selective finetuning: parameter masks, Adam, the training loop, two-step finetuning."""

from __future__ import annotations

import fnmatch
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import tensor as T
from .corpus import ToyExample, ToyLanguageFamily
from .model import Batch, Seq2SeqModel, make_batch
from .tensor import Tensor

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class Strategy(str, Enum):
    FULL = "full"
    ENCODER = "encoder"
    LNA = "lna"
    QUERY_KEY = "qk"
    CUSTOM = "custom"


_QK = (
    re.compile(r"^encoder\.layer\d+\.self_attn\.[qk]_proj\."),
    re.compile(r"^decoder\.layer\d+\.cross_attn\.[qk]_proj\."),
)
_LNA = (
    re.compile(r"layernorm"),
    re.compile(r"^encoder\.layer\d+\.self_attn\."),
    re.compile(r"^decoder\.layer\d+\.cross_attn\."),
)


@dataclass(frozen=True)
class FinetuneStrategy:
    kind: Strategy = Strategy.FULL
    patterns: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", Strategy(self.kind))
        if self.kind is Strategy.CUSTOM and not self.patterns:
            raise ConfigError("custom strategy needs at least one name pattern")

    def selects(self, name: str) -> bool:
        if "embed" in name:
            return False
        k = self.kind
        if k is Strategy.FULL:
            return True
        if k is Strategy.ENCODER:
            return name.startswith("encoder.")
        if k is Strategy.QUERY_KEY:
            return any(r.search(name) for r in _QK)
        if k is Strategy.LNA:
            return any(r.search(name) for r in _LNA)
        return any(fnmatch.fnmatchcase(name, p) for p in self.patterns)


def build_mask(strategy: FinetuneStrategy, names: Iterable[str]) -> set[str]:
    """Names of the parameters a strategy is allowed to update."""
    names = list(names)
    mask = {n for n in names if strategy.selects(n)}
    if strategy.kind is Strategy.CUSTOM and not mask:
        raise ConfigError(f"patterns {strategy.patterns} match no parameter")
    return mask


@dataclass
class TrainConfig:
    lr_start: float = 2e-3
    lr_end: float = 5e-7
    max_steps: int = 1000
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    early_stop_patience: int = 5
    eval_every: int | None = None  # None: one pass over the training data
    seed: int = 0

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")

    def lr_at(self, step: int) -> float:
        """Linear interpolation from lr_start (step 1) to lr_end (step max_steps)."""
        if self.max_steps <= 1:
            return self.lr_start
        frac = min(max(step - 1, 0), self.max_steps - 1) / (self.max_steps - 1)
        return self.lr_start + (self.lr_end - self.lr_start) * frac


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, step: int, cfg: TrainConfig, lr: float | None = None) -> None:
    """Bias-corrected Adam with decoupled weight decay; ``step`` is 1-based."""
    if lr is None:
        lr = cfg.lr_at(step)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        if cfg.weight_decay:
            p.data = p.data - (lr * cfg.weight_decay) * p.data
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.data.dtype)


class AuxObjective(Protocol):
    """Extra loss terms hooked into :func:`train` (e.g. an adversarial head)."""

    def loss(self, model: Seq2SeqModel, batch: Batch, enc: Tensor) -> tuple[Tensor | None, dict]:
        ...

    def update(self, step: int, cfg: TrainConfig) -> None:
        ...

    def evaluate(self, model: Seq2SeqModel, batches: Sequence[Batch]) -> dict:
        ...


@dataclass
class TrainResult:
    model: Seq2SeqModel
    history: list[dict]
    trainable: list[str]
    best_step: int
    steps_run: int


def batches_for(family: ToyLanguageFamily, data: Sequence[ToyExample], batch_size: int) -> list[Batch]:
    return [make_batch(family, data[i : i + batch_size]) for i in range(0, len(data), batch_size)]


def dev_loss(model: Seq2SeqModel, batches: Sequence[Batch]) -> float:
    was = model.training
    model.training = False
    total = count = 0.0
    with T.no_grad():
        for b in batches:
            n = float((b.tgt_out != model.config.pad_id).sum())
            total += model.seq2seq_loss(b).item() * n
            count += n
    model.training = was
    return total / count


def _epoch_order(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.permutation(n)


def train(
    model: Seq2SeqModel,
    family: ToyLanguageFamily,
    train_data: Sequence[ToyExample],
    dev_data: Sequence[ToyExample],
    trainable: FinetuneStrategy | Iterable[str],
    cfg: TrainConfig,
    aux: AuxObjective | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train ``model`` in place on the masked parameters; restores the best dev checkpoint.

    Parameters outside the mask have ``requires_grad`` switched off while
    training, so they stay bit-identical.
    """
    if not train_data:
        raise ValueError("empty training data")
    if not dev_data:
        raise ValueError("empty dev data")
    if isinstance(trainable, FinetuneStrategy):
        mask = build_mask(trainable, model.params)
    else:
        mask = set(trainable)
        unknown = mask - set(model.params)
        if unknown:
            raise ConfigError(f"unknown parameters in mask: {sorted(unknown)}")
    live = {k: p for k, p in model.params.items() if k in mask}
    saved_flags = {k: p.requires_grad for k, p in model.params.items()}
    for k, p in model.params.items():
        p.requires_grad = k in mask
        p.grad = None

    rng = np.random.default_rng(cfg.seed)
    model.rng = np.random.default_rng(cfg.seed + 1)
    eval_every = cfg.eval_every or max(1, -(-len(train_data) // cfg.batch_size))
    dev_batches = batches_for(family, dev_data, 64)
    state = AdamState()
    history: list[dict] = []
    best = (dev_loss(model, dev_batches), 0, {k: p.data.copy() for k, p in live.items()})
    bad_evals = 0
    order = _epoch_order(rng, len(train_data))
    cursor = 0
    running: list[float] = []
    step = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(1, cfg.max_steps + 1):
            if cursor >= len(order):
                order = _epoch_order(rng, len(train_data))
                cursor = 0
            idx = order[cursor : cursor + cfg.batch_size]
            cursor += cfg.batch_size
            batch = make_batch(family, [train_data[i] for i in idx])

            model.training = True
            enc = model.encode_batch(batch.src)
            loss = model.seq2seq_loss(batch, enc)
            running.append(loss.item())
            extra_log: dict = {}
            if aux is not None:
                extra, extra_log = aux.loss(model, batch, enc)
                if extra is not None:
                    loss = loss + extra
            loss.backward()
            adam_step(live, state, step, cfg)
            for p in live.values():
                p.grad = None
            if aux is not None:
                aux.update(step, cfg)
            model.training = False

            if step % eval_every == 0 or step == cfg.max_steps:
                d = dev_loss(model, dev_batches)
                rec = {"step": step, "train_loss": float(np.mean(running)), "dev_loss": d, "lr": cfg.lr_at(step)}
                if aux is not None:
                    rec.update(aux.evaluate(model, dev_batches))
                running = []
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if d < best[0]:
                    best = (d, step, {k: p.data.copy() for k, p in live.items()})
                    bad_evals = 0
                else:
                    bad_evals += 1
                    if bad_evals >= cfg.early_stop_patience:
                        logger.info("early stop at step %d (best %d)", step, best[1])
                        break
    finally:
        if log_fh:
            log_fh.close()
        for k, p in model.params.items():
            p.requires_grad = saved_flags[k]
            p.grad = None
        model.training = False
        model.rng = None
    for k, arr in best[2].items():
        model.params[k].data = arr
    return TrainResult(model, history, sorted(mask), best[1], step)


@dataclass
class TwoStepResult:
    translation: TrainResult
    summarization: TrainResult

    @property
    def model(self) -> Seq2SeqModel:
        return self.summarization.model


def two_step_finetune(
    pretrained: Seq2SeqModel,
    family: ToyLanguageFamily,
    translation_data: tuple[Sequence[ToyExample], Sequence[ToyExample]],
    summarization_data: tuple[Sequence[ToyExample], Sequence[ToyExample]],
    cfg_translate: TrainConfig,
    cfg_summarize: TrainConfig,
) -> TwoStepResult:
    """Full finetuning on translation pairs, then query-key finetuning on summarization.

    Each data argument is a ``(train, dev)`` pair. The pretrained model is not
    modified.
    """
    for name, (tr, dv) in (("translation", translation_data), ("summarization", summarization_data)):
        if not tr or not dv:
            raise ValueError(f"{name} data must be nonempty")
    step1 = train(pretrained.clone(), family, *translation_data, FinetuneStrategy(Strategy.FULL), cfg_translate)
    step2 = train(step1.model.clone(), family, *summarization_data, FinetuneStrategy(Strategy.QUERY_KEY), cfg_summarize)
    return TwoStepResult(step1, step2)
