"""Miniature mBART-style encoder-decoder transformer.

Pre-norm layers, learned positions, token embeddings shared between encoder,
decoder and the output projection. Source sequences are ``x </s> <src-tag>``;
decoder inputs start with the target-language tag.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import ToyExample, ToyLanguageFamily
from .tensor import Tensor

MAGIC = b"LZCK1"
NEG_INF = -1e9


class CheckpointFormatError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    pad_id: int
    eos_id: int
    d_model: int = 32
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ffn: int = 64
    max_len: int = 80
    dropout_rate: float = 0.0
    residual_drop_layer: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.residual_drop_layer is not None and not 0 <= self.residual_drop_layer < self.n_encoder_layers:
            raise ValueError(
                f"residual_drop_layer={self.residual_drop_layer} outside [0, {self.n_encoder_layers})"
            )

    @staticmethod
    def middle_layer(n_encoder_layers: int) -> int:
        return n_encoder_layers // 2

    @classmethod
    def for_family(cls, family: ToyLanguageFamily, **kw) -> "ModelConfig":
        kw.setdefault("max_len", family.doc_len[1] + 2)
        return cls(vocab_size=family.vocab_size, pad_id=family.pad_id, eos_id=family.eos_id, **kw)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class DecodeConfig:
    beam_size: int = 5
    length_penalty_alpha: float = 1.0
    max_output_len: int = 16

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.length_penalty_alpha < 0:
            raise ValueError("length penalty must be nonnegative")


@dataclass
class Batch:
    src: np.ndarray  # B x S
    tgt_in: np.ndarray  # B x T
    tgt_out: np.ndarray  # B x T
    src_lang: np.ndarray  # B

    def __len__(self) -> int:
        return self.src.shape[0]


def source_ids(family: ToyLanguageFamily, tokens: Sequence[int], src_lang: int) -> list[int]:
    return list(tokens) + [family.eos_id, family.tag_id(src_lang)]


def pad_rows(rows: Sequence[Sequence[int]], pad: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batch(family: ToyLanguageFamily, examples: Sequence[ToyExample]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    src = pad_rows([source_ids(family, ex.src, ex.src_lang) for ex in examples], family.pad_id)
    tgt_in = pad_rows([[family.tag_id(ex.tgt_lang)] + list(ex.tgt) for ex in examples], family.pad_id)
    tgt_out = pad_rows([list(ex.tgt) + [family.eos_id] for ex in examples], family.pad_id)
    return Batch(src, tgt_in, tgt_out, np.array([ex.src_lang for ex in examples]))


def _attn_mask_keys(ids: np.ndarray, pad: int, dtype) -> np.ndarray:
    return np.where(ids == pad, NEG_INF, 0.0).astype(dtype)[:, None, None, :]


class Seq2SeqModel:
    """Encoder-decoder with an ordered registry of named parameter tensors."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.training = False
        self.rng: np.random.Generator | None = None
        self._init_params(np.random.default_rng(seed))

    # ---- parameters ------------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data.astype(T.default_dtype()), requires_grad=True, name=name)

    def _linear(self, name: str, d_in: int, d_out: int, rng) -> None:
        self._add(f"{name}.weight", rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out)))
        self._add(f"{name}.bias", np.zeros(d_out))

    def _norm(self, name: str, d: int) -> None:
        self._add(f"{name}.weight", np.ones(d))
        self._add(f"{name}.bias", np.zeros(d))

    def _attention(self, name: str, d: int, rng) -> None:
        for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
            self._linear(f"{name}.{proj}", d, d, rng)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d = c.d_model
        self._add("embed_tokens.weight", rng.normal(0.0, 1.0 / math.sqrt(d), (c.vocab_size, d)))
        for side, n in (("encoder", c.n_encoder_layers), ("decoder", c.n_decoder_layers)):
            self._add(f"{side}.embed_positions.weight", rng.normal(0.0, 1.0, (c.max_len, d)))
            self._norm(f"{side}.input_layernorm", d)
            for i in range(n):
                pre = f"{side}.layer{i}"
                self._attention(f"{pre}.self_attn", d, rng)
                self._norm(f"{pre}.self_attn_layernorm", d)
                if side == "decoder":
                    self._attention(f"{pre}.cross_attn", d, rng)
                    self._norm(f"{pre}.cross_attn_layernorm", d)
                self._linear(f"{pre}.fc1", d, c.d_ffn, rng)
                self._linear(f"{pre}.fc2", c.d_ffn, d, rng)
                self._norm(f"{pre}.final_layernorm", d)
            self._norm(f"{side}.layernorm", d)

    def align_embeddings(self, family: ToyLanguageFamily, seed: int = 0, lang_scale: float = 1.0) -> "Seq2SeqModel":
        """Re-initialise token embeddings as shared unit vectors plus per-language offsets.

        Stands in for the cross-lingual overlap a real multilingual vocabulary
        provides: concept ``c`` starts out close to itself in every language.
        """
        d = self.config.d_model
        rng = np.random.default_rng(seed)
        units = rng.normal(0.0, 1.0 / math.sqrt(d), (family.n_units, d))
        langs = rng.normal(0.0, lang_scale / math.sqrt(d), (family.n_langs, d))
        w = self.p("embed_tokens.weight").data.copy()
        for lang in range(family.n_langs):
            for u in range(family.n_units):
                w[family.render_unit(u, lang)] = (units[u] + langs[lang]) / math.sqrt(1.0 + lang_scale**2)
        self.p("embed_tokens.weight").data = w.astype(self.p("embed_tokens.weight").data.dtype)
        return self

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        unknown = set(state) - set(self.params)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = v.astype(self.params[k].data.dtype).copy()

    def clone(self) -> "Seq2SeqModel":
        other = Seq2SeqModel.__new__(Seq2SeqModel)
        other.config = ModelConfig(**asdict(self.config))
        other.params = OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)) for k, v in self.params.items()
        )
        other.training = False
        other.rng = None
        return other

    def freeze(self) -> "Seq2SeqModel":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self) -> "Seq2SeqModel":
        for t in self.params.values():
            t.requires_grad = True
        return self

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def with_residual_drop(self, layer: int | None) -> "Seq2SeqModel":
        out = self.clone()
        out.config = ModelConfig(**{**asdict(self.config), "residual_drop_layer": layer})
        return out

    # ---- building blocks -------------------------------------------------

    def _dropout(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.config.dropout_rate, self.rng, self.training)

    def _linear_fwd(self, name: str, x: Tensor) -> Tensor:
        return x @ self.p(f"{name}.weight") + self.p(f"{name}.bias")

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.p(f"{name}.weight"), self.p(f"{name}.bias"))

    def _mha(self, name: str, xq: Tensor, xkv: Tensor, mask: np.ndarray) -> Tensor:
        h = self.config.n_heads
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        dh = d // h
        q = self._linear_fwd(f"{name}.q_proj", xq).reshape(B, Tq, h, dh).transpose(0, 2, 1, 3)
        k = self._linear_fwd(f"{name}.k_proj", xkv).reshape(B, Tk, h, dh).transpose(0, 2, 3, 1)
        v = self._linear_fwd(f"{name}.v_proj", xkv).reshape(B, Tk, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh)) + mask
        attn = self._dropout(T.softmax(scores, axis=-1))
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self._linear_fwd(f"{name}.out_proj", out)

    def _ffn(self, pre: str, x: Tensor) -> Tensor:
        h = T.gelu(self._linear_fwd(f"{pre}.fc1", x))
        return self._linear_fwd(f"{pre}.fc2", self._dropout(h))

    def _embed(self, side: str, ids: np.ndarray) -> Tensor:
        c = self.config
        if ids.shape[1] > c.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {c.max_len}")
        tok = T.embedding(self.p("embed_tokens.weight"), ids) * math.sqrt(c.d_model)
        pos = T.embedding(self.p(f"{side}.embed_positions.weight"), np.arange(ids.shape[1]))
        return self._dropout(self._ln(f"{side}.input_layernorm", tok + pos))

    # ---- forward ---------------------------------------------------------

    def encode_batch(self, src: np.ndarray, return_layers: bool = False):
        """Encoder states ``B x S x d`` for padded source ids."""
        c = self.config
        src = np.asarray(src)
        if src.ndim != 2:
            raise ValueError("src must be a 2-d id array")
        mask = _attn_mask_keys(src, c.pad_id, T.default_dtype())
        x = self._embed("encoder", src)
        layers = []
        for i in range(c.n_encoder_layers):
            pre = f"encoder.layer{i}"
            h = self._ln(f"{pre}.self_attn_layernorm", x)
            a = self._dropout(self._mha(f"{pre}.self_attn", h, h, mask))
            x = a if c.residual_drop_layer == i else x + a
            x = x + self._dropout(self._ffn(pre, self._ln(f"{pre}.final_layernorm", x)))
            layers.append(x)
        out = self._ln("encoder.layernorm", x)
        return (out, layers) if return_layers else out

    def encode(self, tokens: Sequence[int]) -> Tensor:
        """Encoder states ``S x d`` for one tagged source sequence."""
        out = self.encode_batch(np.asarray([list(tokens)]))
        return T.reshape(out, out.shape[1:])

    def decode_batch(self, enc: Tensor, src: np.ndarray, tgt_in: np.ndarray) -> Tensor:
        """Logits ``B x T x V`` with teacher forcing."""
        c = self.config
        dtype = T.default_dtype()
        Tlen = tgt_in.shape[1]
        causal = np.triu(np.full((Tlen, Tlen), NEG_INF, dtype=dtype), k=1)[None, None]
        self_mask = causal + _attn_mask_keys(tgt_in, c.pad_id, dtype)
        cross_mask = _attn_mask_keys(src, c.pad_id, dtype)
        y = self._embed("decoder", tgt_in)
        for i in range(c.n_decoder_layers):
            pre = f"decoder.layer{i}"
            h = self._ln(f"{pre}.self_attn_layernorm", y)
            y = y + self._dropout(self._mha(f"{pre}.self_attn", h, h, self_mask))
            h = self._ln(f"{pre}.cross_attn_layernorm", y)
            y = y + self._dropout(self._mha(f"{pre}.cross_attn", h, enc, cross_mask))
            y = y + self._dropout(self._ffn(pre, self._ln(f"{pre}.final_layernorm", y)))
        y = self._ln("decoder.layernorm", y)
        return y @ T.transpose(self.p("embed_tokens.weight"))

    def forward(self, batch: Batch, enc: Tensor | None = None) -> Tensor:
        if enc is None:
            enc = self.encode_batch(batch.src)
        return self.decode_batch(enc, batch.src, batch.tgt_in)

    def seq2seq_loss(self, batch: Batch, enc: Tensor | None = None) -> Tensor:
        """Mean token cross-entropy under teacher forcing, padding excluded."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        logits = self.forward(batch, enc)
        return T.cross_entropy(logits, batch.tgt_out, batch.tgt_out != self.config.pad_id)

    # ---- decoding --------------------------------------------------------

    def generate(
        self, sources: Sequence[Sequence[int]], tgt_tags: Sequence[int], cfg: DecodeConfig
    ) -> list["Hypothesis"]:
        """Beam-decode tagged source id sequences; one hypothesis per source."""
        if not sources:
            return []
        was_training = self.training
        self.training = False
        try:
            with T.no_grad():
                src = pad_rows(sources, self.config.pad_id)
                enc = self.encode_batch(src).data

                def step(prefixes: np.ndarray, rows: np.ndarray) -> np.ndarray:
                    logits = self.decode_batch(Tensor(enc[rows]), src[rows], prefixes).data[:, -1, :]
                    logits = logits.astype(np.float64)
                    logits[:, self.config.pad_id] = -np.inf
                    return _log_softmax(logits)

                return beam_search(step, list(tgt_tags), self.config.eos_id, cfg)
        finally:
            self.training = was_training


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


@dataclass
class Hypothesis:
    tokens: list[int]  # generated tokens, without the leading tag and trailing EOS
    logprob: float
    score: float
    finished: bool


def _normalized(logprob: float, length: int, alpha: float) -> float:
    return logprob / (length**alpha) if alpha else logprob


def _search(step_fn, starts: Sequence[int], eos: int, cfg: DecodeConfig) -> list[Hypothesis]:
    k, alpha = cfg.beam_size, cfg.length_penalty_alpha
    n = len(starts)
    beams: list[list[tuple[list[int], float]]] = [[([s], 0.0)] for s in starts]
    finished: list[list[Hypothesis]] = [[] for _ in range(n)]
    done = [False] * n
    for t in range(cfg.max_output_len):
        rows, prefixes, owners = [], [], []
        for b in range(n):
            if done[b]:
                continue
            for j, (toks, _) in enumerate(beams[b]):
                rows.append(b)
                prefixes.append(toks)
                owners.append((b, j))
        if not rows:
            break
        logp = step_fn(np.asarray(prefixes, dtype=np.int64), np.asarray(rows))
        last = t == cfg.max_output_len - 1
        start = 0
        for b in range(n):
            if done[b]:
                continue
            nb = len(beams[b])
            block = logp[start : start + nb]
            scores = np.array([s for _, s in beams[b]])[:, None] + block
            start += nb
            flat = scores.reshape(-1)
            order = np.argsort(-flat, kind="stable")[: 2 * k]
            new: list[tuple[list[int], float]] = []
            for idx in order:
                j, tok = divmod(int(idx), block.shape[1])
                s = float(flat[idx])
                if not np.isfinite(s):
                    continue
                toks = beams[b][j][0]
                if tok == eos:
                    if len(finished[b]) < k:
                        finished[b].append(Hypothesis(toks[1:], s, _normalized(s, t + 1, alpha), True))
                elif len(new) < k:
                    new.append((toks + [tok], s))
                if len(new) >= k and len(finished[b]) >= k:
                    break
            beams[b] = new
            if len(finished[b]) >= k or not new:
                done[b] = True
            elif last:
                done[b] = True
    out = []
    for b in range(n):
        if finished[b]:
            out.append(max(finished[b], key=lambda h: h.score))
        else:
            toks, s = max(beams[b], key=lambda bs: _normalized(bs[1], len(bs[0]) - 1, alpha))
            out.append(Hypothesis(toks[1:], s, _normalized(s, len(toks) - 1, alpha), False))
    return out


def beam_search(
    step_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    starts: Sequence[int],
    eos: int,
    cfg: DecodeConfig,
) -> list[Hypothesis]:
    """Length-normalised beam search over a batch of independent sources.

    ``step_fn(prefixes, rows)`` returns next-token log-probabilities for each
    prefix, where ``rows[i]`` says which source prefix ``i`` belongs to. The
    score of a finished hypothesis is ``logprob / length**alpha`` with length
    counting the EOS. The greedy hypothesis is always a candidate, so the
    result never scores below greedy decoding. Hypotheses that never emit EOS
    within ``max_output_len`` are returned with ``finished=False``.
    """
    best = _search(step_fn, starts, eos, cfg)
    if cfg.beam_size == 1:
        return best
    greedy = _search(step_fn, starts, eos, DecodeConfig(1, cfg.length_penalty_alpha, cfg.max_output_len))
    return [g if (g.finished, g.score) > (h.finished, h.score) else h for h, g in zip(best, greedy)]


def beam_decode(
    model: Seq2SeqModel, source: Sequence[int], target_lang_tag: int, cfg: DecodeConfig
) -> Hypothesis:
    return model.generate([list(source)], [target_lang_tag], cfg)[0]


# ---- checkpoints ---------------------------------------------------------


def save_checkpoint(model: Seq2SeqModel, path: str | Path, write_config: bool = True) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    if write_config:
        Path(str(path) + ".json").write_text(json.dumps(model.config.to_json(), indent=2, sort_keys=True))


def read_checkpoint_tensors(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: invalid tensor name") from exc
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> Seq2SeqModel:
    if config is None:
        side = Path(str(path) + ".json")
        if not side.exists():
            raise CheckpointFormatError(f"{path}: no config given and no {side.name} next to it")
        config = ModelConfig(**json.loads(side.read_text()))
    tensors = read_checkpoint_tensors(path)
    model = Seq2SeqModel(config)
    missing = [k for k in model.params if k not in tensors]
    unknown = [k for k in tensors if k not in model.params]
    if missing or unknown:
        raise CheckpointFormatError(f"{path}: missing={missing} unknown={unknown}")
    for k, arr in tensors.items():
        if arr.shape != model.params[k].shape:
            raise CheckpointFormatError(f"{path}: {k} has shape {arr.shape}, expected {model.params[k].shape}")
        model.params[k].data = arr.astype(T.default_dtype())
    return model
