import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsumlab.corpus import ToyLanguageFamily, generate_unit_pool, make_translation_pairs, summarization_set
from zsumlab.finetune import (
    AdamState,
    ConfigError,
    FinetuneStrategy,
    Strategy,
    TrainConfig,
    adam_step,
    batches_for,
    build_mask,
    dev_loss,
    train,
    two_step_finetune,
)
from zsumlab.model import ModelConfig, Seq2SeqModel
from zsumlab.tensor import Tensor

FAM = ToyLanguageFamily(doc_len=(16, 24))


def small_model(seed=0, layers=2):
    cfg = ModelConfig.for_family(FAM, d_model=16, n_heads=2, d_ffn=32, n_encoder_layers=layers, n_decoder_layers=layers)
    return Seq2SeqModel(cfg, seed=seed)


def toy_data(n, seed, directions=((0, 0), (1, 1))):
    return summarization_set(FAM, generate_unit_pool(FAM, n, seed=seed), list(directions))


NAMES = list(small_model().params)


class TestMasks:
    def test_qk_exact_set(self):
        mask = build_mask(FinetuneStrategy(Strategy.QUERY_KEY), NAMES)
        expected = set()
        for i in range(2):
            for proj in ("q_proj", "k_proj"):
                for kind in ("weight", "bias"):
                    expected.add(f"encoder.layer{i}.self_attn.{proj}.{kind}")
                    expected.add(f"decoder.layer{i}.cross_attn.{proj}.{kind}")
        assert mask == expected
        assert sum(n.endswith(".weight") for n in mask) == 8

    @pytest.mark.parametrize("kind", list(Strategy))
    def test_embeddings_never_selected(self, kind):
        strat = FinetuneStrategy(kind, ("*",) if kind is Strategy.CUSTOM else ())
        assert not any("embed" in n for n in build_mask(strat, NAMES))

    def test_nesting(self):
        full = build_mask(FinetuneStrategy(Strategy.FULL), NAMES)
        lna = build_mask(FinetuneStrategy(Strategy.LNA), NAMES)
        qk = build_mask(FinetuneStrategy(Strategy.QUERY_KEY), NAMES)
        assert full >= lna >= qk
        assert qk < lna
        assert full == {n for n in NAMES if "embed" not in n}

    def test_encoder_only(self):
        enc = build_mask(FinetuneStrategy(Strategy.ENCODER), NAMES)
        assert enc == {n for n in NAMES if n.startswith("encoder.") and "embed" not in n}

    def test_lna_contents(self):
        lna = build_mask(FinetuneStrategy(Strategy.LNA), NAMES)
        assert "decoder.layer0.self_attn_layernorm.weight" in lna
        assert "decoder.layer1.cross_attn.v_proj.weight" in lna
        assert "decoder.layer0.self_attn.q_proj.weight" not in lna
        assert "encoder.layer0.fc1.weight" not in lna

    def test_custom(self):
        mask = build_mask(FinetuneStrategy(Strategy.CUSTOM, ("decoder.layer1.fc*",)), NAMES)
        assert mask == {"decoder.layer1.fc1.weight", "decoder.layer1.fc1.bias", "decoder.layer1.fc2.weight", "decoder.layer1.fc2.bias"}

    def test_custom_errors(self):
        with pytest.raises(ConfigError):
            FinetuneStrategy(Strategy.CUSTOM)
        with pytest.raises(ConfigError):
            build_mask(FinetuneStrategy(Strategy.CUSTOM, ("nothing.*",)), NAMES)


class TestTrainConfig:
    def test_schedule_endpoints(self):
        cfg = TrainConfig(lr_start=1e-3, lr_end=1e-5, max_steps=11)
        assert cfg.lr_at(1) == 1e-3
        assert cfg.lr_at(11) == pytest.approx(1e-5)
        assert cfg.lr_at(6) == pytest.approx((1e-3 + 1e-5) / 2)

    def test_invariants(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_start=1e-5, lr_end=1e-3)
        with pytest.raises(ConfigError):
            TrainConfig(lr_end=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(early_stop_patience=0)


def _param(values):
    t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
    return t


class TestAdam:
    def test_first_step_hand_value(self):
        p = _param([0.0])
        p.grad = np.array([1.0])
        cfg = TrainConfig(lr_start=0.1, lr_end=0.1, weight_decay=0.0)
        adam_step({"p": p}, AdamState(), 1, cfg)
        # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)

    def test_zero_gradient_no_decay_is_noop(self):
        p = _param([0.3, -2.0])
        p.grad = np.zeros(2)
        adam_step({"p": p}, AdamState(), 1, TrainConfig(weight_decay=0.0))
        assert np.array_equal(p.data, [0.3, -2.0])

    def test_decoupled_weight_decay(self):
        p = _param([2.0])
        p.grad = np.zeros(1)
        adam_step({"p": p}, AdamState(), 1, TrainConfig(lr_start=0.1, lr_end=0.1, weight_decay=0.01))
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01))

    def test_nan_gradient_names_parameter(self):
        p = _param([1.0])
        p.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="layer0.weird"):
            adam_step({"layer0.weird": p}, AdamState(), 1, TrainConfig())

    def test_state_only_for_given_params(self):
        a, b = _param([1.0]), _param([1.0])
        a.grad = np.ones(1)
        state = AdamState()
        adam_step({"a": a}, state, 1, TrainConfig())
        assert set(state.m) == set(state.v) == {"a"}

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=12), st.floats(0, 0.1))
    def test_matches_scalar_reference(self, grads, wd):
        cfg = TrainConfig(lr_start=1e-2, lr_end=1e-4, max_steps=len(grads), weight_decay=wd)
        p = _param([0.7])
        state = AdamState()
        theta, m, v = 0.7, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            p.grad = np.array([g])
            adam_step({"p": p}, state, t, cfg)
            lr = cfg.lr_at(t)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= lr * wd * theta
            theta -= lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.data[0] == pytest.approx(theta, rel=1e-6, abs=1e-12)


class TestTrain:
    def test_qk_leaves_everything_else_bit_identical(self):
        m = small_model(seed=1)
        before = m.state_dict()
        data = toy_data(40, seed=1)
        res = train(m, FAM, data, data[:8], FinetuneStrategy(Strategy.QUERY_KEY), TrainConfig(max_steps=15, batch_size=8, eval_every=5, seed=0))
        mask = set(res.trainable)
        changed = {k for k, v in m.state_dict().items() if not np.array_equal(v, before[k])}
        assert changed and changed <= mask
        assert all(np.array_equal(m.state_dict()[k], before[k]) for k in before if k not in mask)
        assert all(p.requires_grad for p in m.params.values())  # flags restored

    def test_full_halves_training_loss(self):
        m = small_model(seed=2)
        data = toy_data(100, seed=2)  # 200 examples
        cfg = TrainConfig(lr_start=1e-2, lr_end=1e-3, max_steps=600, batch_size=16, eval_every=50, early_stop_patience=10, seed=0)
        first = dev_loss(m, batches_for(FAM, data, 64))
        res = train(m, FAM, data, data[:20], FinetuneStrategy(Strategy.FULL), cfg)
        assert dev_loss(m, batches_for(FAM, data, 64)) <= 0.5 * first
        assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]

    def test_deterministic(self):
        data = toy_data(30, seed=3)
        cfg = TrainConfig(max_steps=12, batch_size=8, eval_every=4, seed=5)
        a, b = small_model(seed=4), small_model(seed=4)
        a.config.dropout_rate = b.config.dropout_rate = 0.1
        train(a, FAM, data, data[:6], FinetuneStrategy(Strategy.FULL), cfg)
        train(b, FAM, data, data[:6], FinetuneStrategy(Strategy.FULL), cfg)
        assert a.checksum() == b.checksum()

    def test_returns_best_dev_checkpoint(self):
        m = small_model(seed=5)
        data = toy_data(40, seed=5)
        dev = toy_data(6, seed=6)
        # a huge learning rate makes later evaluations worse than earlier ones
        cfg = TrainConfig(lr_start=0.3, lr_end=0.3, max_steps=30, batch_size=8, eval_every=3, early_stop_patience=100, seed=0)
        res = train(m, FAM, data, dev, FinetuneStrategy(Strategy.FULL), cfg)
        losses = [r["dev_loss"] for r in res.history]
        final = dev_loss(m, batches_for(FAM, dev, 64))
        assert final == pytest.approx(min(losses + [final]), rel=1e-5)
        if res.best_step:
            assert losses[[r["step"] for r in res.history].index(res.best_step)] == pytest.approx(final, rel=1e-5)

    def test_early_stop(self):
        m = small_model(seed=6)
        data = toy_data(20, seed=7)
        cfg = TrainConfig(lr_start=1.0, lr_end=1.0, max_steps=200, batch_size=8, eval_every=1, early_stop_patience=2, seed=0)
        res = train(m, FAM, data, data[:5], FinetuneStrategy(Strategy.FULL), cfg)
        assert res.steps_run < 200

    def test_empty_inputs(self):
        m = small_model()
        data = toy_data(4, seed=0)
        with pytest.raises(ValueError):
            train(m, FAM, [], data, FinetuneStrategy(), TrainConfig(max_steps=1))
        with pytest.raises(ValueError):
            train(m, FAM, data, [], FinetuneStrategy(), TrainConfig(max_steps=1))

    def test_jsonl_log(self, tmp_path):
        m = small_model()
        data = toy_data(16, seed=8)
        log = tmp_path / "log.jsonl"
        train(m, FAM, data, data[:4], FinetuneStrategy(), TrainConfig(max_steps=6, batch_size=8, eval_every=3), log_path=log)
        recs = [json.loads(l) for l in log.read_text().splitlines()]
        assert [r["step"] for r in recs] == [3, 6]
        assert all({"step", "train_loss", "dev_loss", "lr"} <= set(r) for r in recs)


class TestTwoStep:
    def setup_method(self):
        pool = generate_unit_pool(FAM, 6, seed=9)
        self.translation = make_translation_pairs(summarization_set(FAM, pool, [(a, b) for a in range(3) for b in range(3)]))
        self.summ = toy_data(20, seed=10)

    def test_non_qk_equal_step_one(self):
        pre = small_model(seed=7)
        snapshot = pre.state_dict()
        cfg = TrainConfig(max_steps=6, batch_size=8, eval_every=3)
        res = two_step_finetune(pre, FAM, (self.translation, self.translation[:6]), (self.summ, self.summ[:4]), cfg, cfg)
        step1 = res.translation.model.state_dict()
        final = res.summarization.model.state_dict()
        qk = build_mask(FinetuneStrategy(Strategy.QUERY_KEY), final)
        assert all(np.array_equal(final[k], step1[k]) for k in final if k not in qk)
        assert any(not np.array_equal(final[k], step1[k]) for k in qk)
        assert all(np.array_equal(pre.state_dict()[k], snapshot[k]) for k in snapshot)

    def test_zero_step_two_returns_step_one(self):
        pre = small_model(seed=8)
        res = two_step_finetune(
            pre, FAM, (self.translation, self.translation[:6]), (self.summ, self.summ[:4]),
            TrainConfig(max_steps=4, batch_size=8, eval_every=2), TrainConfig(max_steps=0),
        )
        assert res.summarization.model.checksum() == res.translation.model.checksum()

    def test_empty_data(self):
        with pytest.raises(ValueError):
            two_step_finetune(small_model(), FAM, ([], []), (self.summ, self.summ), TrainConfig(), TrainConfig())
