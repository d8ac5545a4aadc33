"""Probing classifiers: how easily can source-language identity be read off frozen encoder outputs?"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .adversarial import LanguageClassifierHead, ce_classifier_loss
from .corpus import ToyExample, ToyLanguageFamily
from .finetune import AdamState, TrainConfig, adam_step
from .model import Seq2SeqModel, pad_rows, source_ids
from .tensor import Tensor


class ModelNotFrozen(RuntimeError):
    pass


@dataclass
class ProbeConfig:
    epochs: int = 3
    batch_tokens: int = 256
    lr: float = 1e-2
    seed: int = 0


@dataclass
class ProbeReport:
    per_language: dict[str, float]
    accuracy: float
    n_tokens: int
    chance: float

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def encoder_features(
    model: Seq2SeqModel, family: ToyLanguageFamily, data: Sequence[ToyExample], batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Non-pad encoder output vectors and the source-language id of each."""
    feats, langs = [], []
    with T.no_grad():
        for i in range(0, len(data), batch_size):
            chunk = data[i : i + batch_size]
            src = pad_rows([source_ids(family, ex.src, ex.src_lang) for ex in chunk], family.pad_id)
            enc = model.encode_batch(src).data
            keep = src != family.pad_id
            feats.append(enc[keep])
            langs.append(np.repeat([ex.src_lang for ex in chunk], keep.sum(axis=1)))
    return np.concatenate(feats), np.concatenate(langs)


def train_probe(
    frozen_model: Seq2SeqModel,
    family: ToyLanguageFamily,
    data: Sequence[ToyExample],
    languages: Sequence[int],
    cfg: ProbeConfig = ProbeConfig(),
) -> LanguageClassifierHead:
    """Fit a fresh linear+softmax language classifier on frozen encoder outputs."""
    if not frozen_model.frozen:
        raise ModelNotFrozen("probing needs a frozen model; call model.freeze() first")
    x, langs = encoder_features(frozen_model, family, data)
    class_of = {l: i for i, l in enumerate(languages)}
    y = np.array([class_of[int(l)] for l in langs])
    return fit_probe(x, y, len(languages), cfg)


def fit_probe(x: np.ndarray, y: np.ndarray, n: int, cfg: ProbeConfig = ProbeConfig()) -> LanguageClassifierHead:
    head = LanguageClassifierHead(x.shape[1], n, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = -(-len(x) // cfg.batch_tokens)
    tcfg = TrainConfig(lr_start=cfg.lr, lr_end=cfg.lr, max_steps=cfg.epochs * steps_per_epoch, weight_decay=0.0)
    state = AdamState()
    step = 0
    xs = x.astype(T.default_dtype())
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), cfg.batch_tokens):
            idx = order[i : i + cfg.batch_tokens]
            step += 1
            loss = ce_classifier_loss(head(Tensor(xs[idx])), y[idx])
            loss.backward()
            adam_step(head.params, state, step, tcfg)
            for p in head.params.values():
                p.grad = None
    return head


def probe_report(probe: LanguageClassifierHead, x: np.ndarray, y: np.ndarray, names: Sequence[str]) -> ProbeReport:
    if len(y) == 0:
        raise ValueError("empty probe test set")
    pred = probe.predict(x)
    per = {}
    for c, name in enumerate(names):
        sel = y == c
        if sel.any():
            per[name] = float((pred[sel] == c).mean())
    return ProbeReport(per, float((pred == y).mean()), int(len(y)), 1.0 / probe.n)


def probe_accuracy(
    probe: LanguageClassifierHead,
    frozen_model: Seq2SeqModel,
    family: ToyLanguageFamily,
    test_data: Sequence[ToyExample],
    languages: Sequence[int],
) -> ProbeReport:
    if not test_data:
        raise ValueError("empty probe test set")
    x, langs = encoder_features(frozen_model, family, test_data)
    class_of = {l: i for i, l in enumerate(languages)}
    y = np.array([class_of[int(l)] for l in langs])
    return probe_report(probe, x, y, [family.codes[l] for l in languages])
