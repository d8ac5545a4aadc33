import json

import numpy as np
import pytest

from zsumlab.adversarial import LanguageClassifierHead
from zsumlab.corpus import ToyLanguageFamily, generate_unit_pool, summarization_set
from zsumlab.model import ModelConfig, Seq2SeqModel
from zsumlab.probing import (
    ModelNotFrozen,
    ProbeConfig,
    encoder_features,
    fit_probe,
    probe_accuracy,
    probe_report,
    train_probe,
)

FAM = ToyLanguageFamily(doc_len=(16, 24))
LANGS = [0, 1, 2]


def small_model(seed=0):
    cfg = ModelConfig.for_family(FAM, d_model=16, n_heads=2, d_ffn=32, n_encoder_layers=1, n_decoder_layers=1)
    return Seq2SeqModel(cfg, seed=seed)


def toy_data(n, seed):
    return summarization_set(FAM, generate_unit_pool(FAM, n, seed=seed), [(l, l) for l in LANGS])


def fixed_head(n, d, predict):
    """Zeroed head, then adjusted in place by ``predict``."""
    head = LanguageClassifierHead(d, n)
    head.weight.data[:] = 0
    head.bias.data[:] = 0
    predict(head)
    return head


class TestFreezeContract:
    def test_unfrozen_model_rejected(self):
        with pytest.raises(ModelNotFrozen):
            train_probe(small_model(), FAM, toy_data(3, seed=0), LANGS)

    def test_parameters_untouched(self):
        m = small_model().freeze()
        before = m.checksum()
        state = {k: v.copy() for k, v in m.state_dict().items()}
        probe = train_probe(m, FAM, toy_data(6, seed=0), LANGS)
        probe_accuracy(probe, m, FAM, toy_data(3, seed=1), LANGS)
        assert m.checksum() == before
        for k, v in m.state_dict().items():
            assert np.array_equal(v, state[k]), k

    def test_deterministic(self):
        m = small_model().freeze()
        data = toy_data(6, seed=0)
        a = train_probe(m, FAM, data, LANGS, ProbeConfig(seed=3))
        b = train_probe(m, FAM, data, LANGS, ProbeConfig(seed=3))
        assert np.array_equal(a.weight.data, b.weight.data)


class TestFeatures:
    def test_pad_excluded(self):
        m = small_model().freeze()
        data = toy_data(4, seed=2)
        x, langs = encoder_features(m, FAM, data, batch_size=5)
        # source = document tokens + EOS + language tag
        assert len(x) == sum(len(ex.src) + 2 for ex in data)
        assert x.shape[1] == 16
        assert sorted(set(langs.tolist())) == LANGS


class TestAccuracy:
    def test_constant_probe_on_balanced_two_languages(self):
        head = fixed_head(2, 1, lambda h: h.bias.data.__setitem__(0, 1.0))
        x = np.zeros((10, 1))
        y = np.array([0, 1] * 5)
        assert probe_report(head, x, y, ["en", "es"]).accuracy == 0.5

    def test_oracle_probe(self):
        head = fixed_head(3, 3, lambda h: h.weight.data.__setitem__(slice(None), np.eye(3)))
        y = np.array([0, 1, 2, 2, 1, 0, 0])
        rep = probe_report(head, np.eye(3)[y], y, ["en", "es", "ru"])
        assert rep.accuracy == 1.0
        assert rep.per_language == {"en": 1.0, "es": 1.0, "ru": 1.0}
        assert rep.chance == pytest.approx(1 / 3)

    def test_empty_test_set(self):
        head = LanguageClassifierHead(4, 2)
        with pytest.raises(ValueError):
            probe_report(head, np.zeros((0, 4)), np.zeros(0, dtype=int), ["en", "es"])
        with pytest.raises(ValueError):
            probe_accuracy(head, small_model().freeze(), FAM, [], [0, 1])

    def test_random_states_near_chance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3000, 16))
        y = rng.integers(0, 4, size=3000)
        head = fit_probe(x[:2000], y[:2000], 4)
        assert abs(probe_report(head, x[2000:], y[2000:], list("abcd")).accuracy - 0.25) <= 0.10

    def test_separable_states_learned(self):
        rng = np.random.default_rng(1)
        # token counts comparable to a real probe run: ~200 optimiser steps over 3 epochs
        y = rng.integers(0, 3, size=18000)
        centres = rng.normal(size=(3, 8)) * 3
        x = centres[y] + rng.normal(size=(18000, 8)) * 0.3
        head = fit_probe(x[:17000], y[:17000], 3)
        assert probe_report(head, x[17000:], y[17000:], list("abc")).accuracy >= 0.99

    def test_report_json(self):
        head = fixed_head(2, 1, lambda h: None)
        rep = probe_report(head, np.zeros((4, 1)), np.array([0, 0, 1, 1]), ["en", "es"])
        assert set(json.loads(rep.dumps())) == {"per_language", "accuracy", "n_tokens", "chance"}
