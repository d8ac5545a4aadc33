import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsumlab import tensor as T
from zsumlab.corpus import ToyLanguageFamily, generate_unit_pool, summarization_set
from zsumlab.model import (
    Batch,
    CheckpointFormatError,
    DecodeConfig,
    ModelConfig,
    Seq2SeqModel,
    beam_decode,
    beam_search,
    load_checkpoint,
    make_batch,
    read_checkpoint_tensors,
    save_checkpoint,
)
from zsumlab.tensor import check_gradients

FAM = ToyLanguageFamily(doc_len=(16, 32))


def tiny_config(**kw):
    base = dict(vocab_size=12, pad_id=8, eos_id=9, d_model=8, n_heads=2, d_ffn=16, max_len=10)
    base.update(kw)
    return ModelConfig(**base)


def tiny_batch(rng, B=3, S=6, Tn=4, vocab=8):
    src = rng.integers(0, vocab, size=(B, S))
    src[0, -2:] = 8  # padding
    tgt_in = rng.integers(0, vocab, size=(B, Tn))
    tgt_out = rng.integers(0, vocab, size=(B, Tn))
    tgt_out[1, -1] = 8
    return Batch(src, tgt_in, tgt_out, np.zeros(B, dtype=int))


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            tiny_config(d_model=10, n_heads=4)

    def test_residual_drop_range(self):
        with pytest.raises(ValueError):
            tiny_config(residual_drop_layer=2)

    def test_middle_layer(self):
        assert ModelConfig.middle_layer(12) == 6
        assert ModelConfig.middle_layer(3) == 1

    def test_decode_config(self):
        with pytest.raises(ValueError):
            DecodeConfig(beam_size=0)
        with pytest.raises(ValueError):
            DecodeConfig(length_penalty_alpha=-1.0)


class TestRegistry:
    def test_names_unique_and_complete(self):
        m = Seq2SeqModel(tiny_config())
        names = list(m.params)
        assert len(names) == len(set(names))
        enc = {n for n in names if n.startswith("encoder.")}
        dec = {n for n in names if n.startswith("decoder.")}
        assert enc | dec | {"embed_tokens.weight"} == set(names)
        assert "encoder.layer1.self_attn.q_proj.weight" in names
        assert "decoder.layer0.cross_attn.k_proj.bias" in names
        assert not any("cross_attn" in n for n in enc)

    def test_embeddings_named_embed(self):
        m = Seq2SeqModel(tiny_config())
        embeds = sorted(n for n in m.params if "embed" in n)
        assert embeds == ["decoder.embed_positions.weight", "embed_tokens.weight", "encoder.embed_positions.weight"]


class TestEncode:
    def test_deterministic(self):
        m = Seq2SeqModel(tiny_config(), seed=1)
        a = m.encode([1, 2, 3, 9, 10]).data
        b = m.encode([1, 2, 3, 9, 10]).data
        assert np.array_equal(a, b)

    def test_zero_weights_collapse_to_embedding_path(self):
        m = Seq2SeqModel(tiny_config(), seed=2)
        for name, p in m.params.items():
            if name.startswith("encoder.layer") and "layernorm" not in name:
                p.data = np.zeros_like(p.data)
        ids = np.array([[1, 2, 3, 9, 10]])
        with T.no_grad():
            out = m.encode_batch(ids).data
            x = m._embed("encoder", ids)
            expected = m._ln("encoder.layernorm", x).data
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_out_of_vocab(self):
        m = Seq2SeqModel(tiny_config())
        with pytest.raises(IndexError):
            m.encode([1, 12])

    def test_residual_drop_changes_output_only_from_its_layer(self):
        m = Seq2SeqModel(tiny_config(n_encoder_layers=3), seed=3)
        ids = np.array([[1, 5, 2, 7, 9, 10]])
        with T.no_grad():
            out, layers = m.encode_batch(ids, return_layers=True)
            out_rd, layers_rd = m.with_residual_drop(1).encode_batch(ids, return_layers=True)
        assert np.array_equal(layers[0].data, layers_rd[0].data)
        assert not np.allclose(layers[1].data, layers_rd[1].data)
        assert not np.allclose(out.data, out_rd.data)

    def test_with_residual_drop_leaves_original(self):
        m = Seq2SeqModel(tiny_config())
        m2 = m.with_residual_drop(0)
        assert m.config.residual_drop_layer is None and m2.config.residual_drop_layer == 0


class TestLoss:
    def test_uniform_gives_log_vocab(self):
        m = Seq2SeqModel(tiny_config(), seed=0)
        m.p("decoder.layernorm.weight").data[:] = 0.0
        m.p("decoder.layernorm.bias").data[:] = 0.0
        batch = tiny_batch(np.random.default_rng(0))
        assert m.seq2seq_loss(batch).item() == pytest.approx(math.log(12), abs=1e-5)

    def test_one_hot_gives_zero(self):
        m = Seq2SeqModel(tiny_config(), seed=0)
        E = np.zeros((12, 8))
        E[:8, :8] = np.eye(8)
        E[8:, :] = 0.01
        m.p("embed_tokens.weight").data = E.astype(np.float32)
        m.p("decoder.layernorm.weight").data[:] = 0.0
        m.p("decoder.layernorm.bias").data = (60.0 * np.eye(8)[3]).astype(np.float32)
        src = np.array([[1, 2, 9, 10]])
        batch = Batch(src, np.array([[10, 3, 3]]), np.array([[3, 3, 3]]), np.array([0]))
        assert 0 <= m.seq2seq_loss(batch).item() < 1e-6

    def test_padding_excluded_and_order_invariant(self):
        m = Seq2SeqModel(tiny_config(), seed=4)
        rng = np.random.default_rng(1)
        b = tiny_batch(rng)
        perm = np.array([2, 0, 1])
        shuffled = Batch(b.src[perm], b.tgt_in[perm], b.tgt_out[perm], b.src_lang[perm])
        assert m.seq2seq_loss(b).item() == pytest.approx(m.seq2seq_loss(shuffled).item(), rel=1e-6)
        assert m.seq2seq_loss(b).item() >= 0

    def test_empty_batch(self):
        m = Seq2SeqModel(tiny_config())
        with pytest.raises(ValueError):
            m.seq2seq_loss(Batch(np.zeros((0, 3), int), np.zeros((0, 2), int), np.zeros((0, 2), int), np.zeros(0, int)))


def test_full_model_gradients_match_finite_differences():
    with T.precision("float64"):
        m = Seq2SeqModel(tiny_config(), seed=7)
        batch = tiny_batch(np.random.default_rng(2))
        report = check_gradients(lambda: m.seq2seq_loss(batch), m.params)
    assert report.max_error < 1e-4, {k: v for k, v in report.errors.items() if v >= 1e-4}


def test_make_batch_layout():
    pool = generate_unit_pool(FAM, 2, seed=0)
    exs = summarization_set(FAM, pool, [(0, 2)])
    b = make_batch(FAM, exs)
    for i, ex in enumerate(exs):
        row = [t for t in b.src[i] if t != FAM.pad_id]
        assert row == list(ex.src) + [FAM.eos_id, FAM.tag_id(0)]
        assert b.tgt_in[i, 0] == FAM.tag_id(2)
        out = [t for t in b.tgt_out[i] if t != FAM.pad_id]
        assert out == list(ex.tgt) + [FAM.eos_id]


# ---- beam search over hand-built step functions ------------------------------

A, B, EOS, START = 0, 1, 2, 3


def table_step(first, after, default=(1 / 3, 1 / 3, 1 / 3)):
    """Next-token log-probs from a prefix-keyed table; unknown prefixes get ``default``."""

    def step(prefixes, rows):
        out = np.empty((len(prefixes), 3))
        for i, p in enumerate(prefixes):
            p = tuple(int(t) for t in p[1:])
            dist = first if not p else after.get(p, default)
            with np.errstate(divide="ignore"):
                out[i] = np.log(np.asarray(dist, dtype=np.float64))
        return out

    return step


def exhaustive_best(first, after, max_len, alpha):
    """Best finished sequence by brute force over every token string up to ``max_len``."""
    best = None
    for n in range(1, max_len + 1):
        for body in itertools.product([A, B], repeat=n - 1):
            seq = list(body) + [EOS]
            lp, prefix = 0.0, ()
            for tok in seq:
                dist = first if not prefix else after.get(prefix, [1 / 3] * 3)
                lp += math.log(dist[tok])
                prefix = prefix + (tok,)
            score = lp / (n**alpha) if alpha else lp
            if best is None or score > best[0]:
                best = (score, list(body))
    return best


class TestBeamSearch:
    first = [0.5, 0.4, 0.1]
    after = {(A,): [0.34, 0.33, 0.33], (B,): [0.05, 0.05, 0.9]}

    def test_greedy_is_suboptimal_here(self):
        (g,) = beam_search(table_step(self.first, self.after), [START], EOS, DecodeConfig(1, 0.0, 2))
        assert g.tokens == [A, A] and not g.finished

    def test_beam_two_recovers_exhaustive_optimum(self):
        (h,) = beam_search(table_step(self.first, self.after), [START], EOS, DecodeConfig(2, 0.0, 2))
        score, body = exhaustive_best(self.first, self.after, 2, 0.0)
        assert h.finished and h.tokens == body == [B]
        assert h.score == pytest.approx(score) == pytest.approx(math.log(0.4 * 0.9))

    def test_alpha_zero_is_raw_logprob(self):
        (h,) = beam_search(table_step(self.first, self.after), [START], EOS, DecodeConfig(2, 0.0, 2))
        assert h.score == h.logprob

    def test_length_penalty_normalizes(self):
        (h,) = beam_search(table_step(self.first, self.after), [START], EOS, DecodeConfig(2, 1.0, 2))
        assert h.score == pytest.approx(h.logprob / (len(h.tokens) + 1))

    def test_unfinished_flagged(self):
        never = table_step([0.5, 0.5, 0.0], {}, default=[0.5, 0.5, 0.0])
        (h,) = beam_search(never, [START], EOS, DecodeConfig(3, 1.0, 4))
        assert not h.finished and len(h.tokens) == 4

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4), st.sampled_from([0.0, 0.6, 1.0]))
    def test_never_below_greedy_and_matches_exhaustive_at_full_width(self, seed, k, alpha):
        rng = np.random.default_rng(seed)
        first = rng.dirichlet(np.ones(3))
        after = {}
        for n in (1, 2):
            for p in itertools.product([A, B], repeat=n):
                after[p] = rng.dirichlet(np.ones(3))
        step = table_step(first, after)
        (h,) = beam_search(step, [START], EOS, DecodeConfig(k, alpha, 3))
        (g,) = beam_search(step, [START], EOS, DecodeConfig(1, alpha, 3))
        assert (h.finished, h.score) >= (g.finished, g.score) or math.isclose(h.score, g.score)
        if k >= 4:  # wide enough to keep every live prefix of length <= 2
            best_score, _ = exhaustive_best(first, after, 3, alpha)
            assert h.score == pytest.approx(best_score)


class TestModelDecoding:
    def test_beam_one_equals_manual_greedy(self):
        m = Seq2SeqModel(ModelConfig.for_family(FAM, d_model=16, n_heads=2, d_ffn=32), seed=5)
        src = [3, 70, 5, FAM.eos_id, FAM.tag_id(0)]
        h = beam_decode(m, src, FAM.tag_id(1), DecodeConfig(1, 1.0, 6))
        prefix = [FAM.tag_id(1)]
        with T.no_grad():
            enc = m.encode_batch(np.array([src]))
            for _ in range(6):
                logits = m.decode_batch(enc, np.array([src]), np.array([prefix])).data[0, -1].astype(np.float64)
                logits[FAM.pad_id] = -np.inf
                tok = int(np.argmax(logits))
                if tok == FAM.eos_id:
                    break
                prefix.append(tok)
        assert h.tokens == prefix[1:]

    def test_batched_generation_matches_single(self):
        m = Seq2SeqModel(ModelConfig.for_family(FAM, d_model=16, n_heads=2, d_ffn=32), seed=6)
        srcs = [[3, 70, FAM.eos_id, FAM.tag_id(0)], [1, 2, 3, 4, 5, FAM.eos_id, FAM.tag_id(0)]]
        cfg = DecodeConfig(3, 0.6, 5)
        together = m.generate(srcs, [FAM.tag_id(1)] * 2, cfg)
        for s, h in zip(srcs, together):
            single = m.generate([s], [FAM.tag_id(1)], cfg)[0]
            assert single.tokens == h.tokens
            assert single.score == pytest.approx(h.score, abs=1e-6)


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path):
        m = Seq2SeqModel(tiny_config(residual_drop_layer=1), seed=3)
        a, b = tmp_path / "a.ck", tmp_path / "b.ck"
        save_checkpoint(m, a)
        m2 = load_checkpoint(a)
        save_checkpoint(m2, b)
        assert a.read_bytes() == b.read_bytes()
        assert m2.config == m.config
        assert m2.checksum() == m.checksum()

    def test_layout(self, tmp_path):
        m = Seq2SeqModel(tiny_config())
        path = tmp_path / "m.ck"
        save_checkpoint(m, path)
        raw = path.read_bytes()
        assert raw[:5] == b"LZCK1"
        assert int.from_bytes(raw[5:9], "little") == len(m.params)
        tensors = read_checkpoint_tensors(path)
        assert list(tensors) == list(m.params)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ck"
        save_checkpoint(Seq2SeqModel(tiny_config()), path)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ck"
        save_checkpoint(Seq2SeqModel(tiny_config()), path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_unknown_and_missing_names(self, tmp_path):
        path = tmp_path / "m.ck"
        save_checkpoint(Seq2SeqModel(tiny_config(n_encoder_layers=3)), path, write_config=False)
        with pytest.raises(CheckpointFormatError, match="unknown"):
            load_checkpoint(path, tiny_config())
        save_checkpoint(Seq2SeqModel(tiny_config(n_encoder_layers=1)), path, write_config=False)
        with pytest.raises(CheckpointFormatError, match="missing"):
            load_checkpoint(path, tiny_config())

    def test_loaded_model_decodes_identically(self, tmp_path):
        m = Seq2SeqModel(ModelConfig.for_family(FAM, d_model=16, n_heads=2, d_ffn=32), seed=9)
        path = tmp_path / "m.ck"
        save_checkpoint(m, path)
        m2 = load_checkpoint(path)
        srcs = [[5, 9, 33, FAM.eos_id, FAM.tag_id(2)]]
        cfg = DecodeConfig(2, 1.0, 6)
        assert m.generate(srcs, [FAM.tag_id(2)], cfg)[0].tokens == m2.generate(srcs, [FAM.tag_id(2)], cfg)[0].tokens
