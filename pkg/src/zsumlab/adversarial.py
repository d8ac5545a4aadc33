"""Token-level language classifier on encoder states and the adversarial objectives.

Two ways of pushing language identity out of the encoder:

* ``CrossEntropy``: the classifier's own loss is sent back through a gradient
  reversal node, so the encoder climbs the classification loss.
* ``Balanced``: the encoder minimises KL(P || uniform) of a frozen copy of the
  classifier, which only stops when the prediction is uniform.

The cross-entropy formulation is satisfied by any distribution that puts no
mass on the true language, including one that is confidently wrong.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .finetune import AdamState, TrainConfig, adam_step
from .model import Batch, Seq2SeqModel
from .tensor import GradScale, Tensor

CLAMP_EPS = 1e-9


class AdvMode(str, Enum):
    NONE = "none"
    CROSS_ENTROPY = "ce"
    BALANCED = "balanced"


@dataclass(frozen=True)
class AdvConfig:
    mode: AdvMode = AdvMode.NONE
    adv_weight: float = 1.0
    grl_scale: GradScale = GradScale(1.0)
    head_lr: float | None = None  # None: follow the finetuning schedule

    def __post_init__(self):
        object.__setattr__(self, "mode", AdvMode(self.mode))
        if not self.adv_weight >= 0:
            raise ValueError("adv_weight must be >= 0")
        if self.head_lr is not None and not self.head_lr > 0:
            raise ValueError("head_lr must be positive")
        if not isinstance(self.grl_scale, GradScale):
            object.__setattr__(self, "grl_scale", GradScale(float(self.grl_scale)))


class LanguageClassifierHead:
    """Linear projection from the hidden size to ``n`` languages, then softmax."""

    def __init__(self, d_model: int, n: int, seed: int = 0):
        if n < 2:
            raise ValueError("need at least two language classes")
        rng = np.random.default_rng(seed)
        self.n = n
        self.weight = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, n)).astype(T.default_dtype()), requires_grad=True, name="head.weight")
        self.bias = Tensor(np.zeros(n, dtype=T.default_dtype()), requires_grad=True, name="head.bias")

    @property
    def params(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def logits(self, states: Tensor, frozen: bool = False) -> Tensor:
        w, b = (self.weight.detach(), self.bias.detach()) if frozen else (self.weight, self.bias)
        return states @ w + b

    def __call__(self, states: Tensor, frozen: bool = False) -> Tensor:
        return T.softmax(self.logits(states, frozen), axis=-1)

    def predict(self, states: np.ndarray) -> np.ndarray:
        return (states @ self.weight.data + self.bias.data).argmax(axis=-1)


def _token_weights(mask: np.ndarray | None, shape: tuple[int, ...], dtype) -> np.ndarray:
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no unmasked tokens")
    return mask.astype(dtype) / count


def _labels(true_language, shape) -> np.ndarray:
    y = np.asarray(true_language)
    if y.shape != shape:
        y = np.broadcast_to(y.reshape(y.shape + (1,) * (len(shape) - y.ndim)), shape)
    return y


def ce_classifier_loss(P: Tensor, true_language, mask: np.ndarray | None = None) -> Tensor:
    """Mean over tokens of ``-log p_true`` (clamped at 1e-9)."""
    shape = P.shape[:-1]
    y = _labels(true_language, shape)
    if np.any(y >= P.shape[-1]) or np.any(y < 0):
        raise ValueError("true language outside the classifier's classes")
    w = _token_weights(mask, shape, P.data.dtype)
    return -(T.clamp_log(T.pick(P, y), CLAMP_EPS) * w).sum()


def ce_adversarial_loss(P: Tensor, true_language, mask: np.ndarray | None = None) -> Tensor:
    """Mean over tokens of ``-log(1 - p_true)`` (clamped at 1e-9)."""
    shape = P.shape[:-1]
    y = _labels(true_language, shape)
    w = _token_weights(mask, shape, P.data.dtype)
    return -(T.clamp_log(1.0 - T.pick(P, y), CLAMP_EPS) * w).sum()


def balanced_adversarial_loss(P: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over tokens of KL(P || uniform) = sum_c p_c log(p_c N); label-free."""
    shape = P.shape[:-1]
    n = P.shape[-1]
    w = _token_weights(mask, shape, P.data.dtype)
    terms = P * (T.clamp_log(P, CLAMP_EPS) + math.log(n))
    # accumulate classes in value order so relabelling languages is exactly invariant
    order = np.argsort(terms.data, axis=-1, kind="stable")
    per_token = T.pick(terms, order[..., 0])
    for k in range(1, n):
        per_token = per_token + T.pick(terms, order[..., k])
    return (per_token * w).sum()


class AdversarialObjective:
    """Plugs a language classifier and its adversarial term into :func:`finetune.train`.

    Per step the head is trained on detached encoder states; the encoder only
    sees the adversarial term, which evaluates the head with frozen weights.
    """

    def __init__(self, head: LanguageClassifierHead, adv: AdvConfig, lang_classes: Sequence[int], pad_id: int):
        if adv.mode is AdvMode.NONE:
            raise ValueError("adversarial training needs mode CrossEntropy or Balanced")
        self.head = head
        self.adv = adv
        self.class_of = {lang: i for i, lang in enumerate(lang_classes)}
        self.pad_id = pad_id
        self.state = AdamState()
        if len(self.class_of) != head.n:
            raise ValueError("head size does not match the number of language classes")

    def _targets(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        y = np.array([self.class_of[int(l)] for l in batch.src_lang])
        return y, batch.src != self.pad_id

    def adversarial_term(self, enc: Tensor, y: np.ndarray, mask: np.ndarray) -> Tensor:
        if self.adv.mode is AdvMode.CROSS_ENTROPY:
            P = self.head(T.grad_reverse(enc, self.adv.grl_scale), frozen=True)
            return ce_classifier_loss(P, y, mask)
        return balanced_adversarial_loss(self.head(enc, frozen=True), mask)

    def loss(self, model: Seq2SeqModel, batch: Batch, enc: Tensor):
        y, mask = self._targets(batch)
        clf = ce_classifier_loss(self.head(enc.detach()), y, mask)
        total = clf
        if self.adv.adv_weight > 0:
            total = total + self.adversarial_term(enc, y, mask) * self.adv.adv_weight
        return total, {}

    def update(self, step: int, cfg: TrainConfig) -> None:
        params = self.head.params
        adam_step(params, self.state, step, cfg, lr=self.adv.head_lr)
        for p in params.values():
            p.grad = None

    def evaluate(self, model: Seq2SeqModel, batches: Sequence[Batch]) -> dict:
        correct = total = 0
        adv_sum = 0.0
        with T.no_grad():
            for b in batches:
                enc = model.encode_batch(b.src)
                y, mask = self._targets(b)
                pred = self.head.predict(enc.data)
                correct += int(((pred == y[:, None]) & mask).sum())
                total += int(mask.sum())
                P = self.head(enc)
                term = balanced_adversarial_loss(P, mask) if self.adv.mode is AdvMode.BALANCED else ce_adversarial_loss(P, y, mask)
                adv_sum += term.item() * int(mask.sum())
        return {"classifier_acc": correct / total, "adv_loss": adv_sum / total}


def train_with_adversary(model, family, train_data, dev_data, strategy, cfg: TrainConfig, adv: AdvConfig, lang_classes: Sequence[int], log_path=None, head_seed: int | None = None):
    """Finetune ``model`` with an adversarial language classifier on its encoder output."""
    from .finetune import train

    head = LanguageClassifierHead(model.config.d_model, len(lang_classes), seed=cfg.seed if head_seed is None else head_seed)
    objective = AdversarialObjective(head, adv, lang_classes, model.config.pad_id)
    result = train(model, family, train_data, dev_data, strategy, cfg, aux=objective, log_path=log_path)
    return result, head
