"""Byte tokenizer, tiny transformer scorers and the checkpoint file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BOS = 256
EOS = 257
PAD = 258
SEP = ord(":")
VOCAB_SIZE = 259

MASK_VALUE = -1e9


class TokenizerError(ValueError):
    pass


class ByteTokenizer:
    """Bytes map to ids 0-255; ``<s>``, ``</s>`` and PAD sit above them."""

    bos, eos, pad, sep = BOS, EOS, PAD, SEP
    vocab_size = VOCAB_SIZE

    def encode(self, text: str | bytes) -> list[int]:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(raw)

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> bytes:
        out = bytearray()
        for i in ids:
            if 0 <= i < 256:
                out.append(i)
            elif i in (BOS, EOS, PAD):
                if not skip_special:
                    raise TokenizerError(f"special token {i} has no byte form")
            else:
                raise TokenizerError(f"unknown token id {i}")
        return bytes(out)


TOKENIZER = ByteTokenizer()


@dataclass(frozen=True)
class QueryDoc:
    query: str
    title: str = ""
    summary: str = ""

    def __post_init__(self):
        if not self.query:
            raise ValueError("QueryDoc.query must be non-empty")


def encode_pair(qd: QueryDoc, max_len: int) -> list[int]:
    """``<s>query:title:summary</s>`` as ids, truncated to ``max_len``.

    Summary bytes are dropped first, then title bytes; the query is never
    truncated and the closing ``</s>`` always survives.
    """
    if max_len < 1:
        raise ValueError("max_len must be positive")
    q = TOKENIZER.encode(qd.query)
    t = TOKENIZER.encode(qd.title)
    s = TOKENIZER.encode(qd.summary)
    budget = max_len - len(q) - 4
    if budget < 0:
        raise TokenizerError(
            f"query of {len(q)} bytes does not fit max_len={max_len} with template overhead"
        )
    t = t[:budget]
    s = s[: budget - len(t)]
    return [BOS, *q, SEP, *t, SEP, *s, EOS]


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int = 256
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if self.kind not in ("decoder", "encoder"):
            raise ValueError(f"kind must be 'decoder' or 'encoder', got {self.kind!r}")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_seq_len < 8:
            raise ValueError("max_seq_len must be at least 8")
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab_size must be {VOCAB_SIZE}")

    @classmethod
    def teacher(cls, **kw) -> ModelConfig:
        return cls(**{"kind": "decoder", "d_model": 64, "n_layers": 4, "n_heads": 4, "d_ff": 256, **kw})

    @classmethod
    def student(cls, **kw) -> ModelConfig:
        return cls(**{"kind": "encoder", "d_model": 32, "n_layers": 2, "n_heads": 2, "d_ff": 128, **kw})

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d
        n = v * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + d + 1
        if self.kind == "decoder":
            n += d * v
        return n


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_seq_len, d))]
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.w1", (d, f)), (p + "mlp.b1", (f,)),
            (p + "mlp.w2", (f, d)), (p + "mlp.b2", (d,)),
        ]  # fmt: skip
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("head.w", (d, 1)), ("head.b", (1,))]
    if cfg.kind == "decoder":
        shapes.append(("lm_head.w", (d, cfg.vocab_size)))
    return shapes


class RankerModel:
    """Pre-LN transformer with a scalar relevance head.

    A ``decoder`` uses a causal mask and pools the hidden state at the final
    ``</s>``; an ``encoder`` attends both ways and pools position 0.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = dict(_param_shapes(config))
        if set(params) != set(expected):
            raise ValueError("parameter names do not match the model config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> RankerModel:
        params = {}
        for name, shape in _param_shapes(config):
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arr = np.ones(shape)
            elif leaf.startswith("b") and len(shape) == 1:
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, std, size=shape)
                if name.endswith(("attn.wo", "mlp.w2")):
                    arr /= math.sqrt(2 * config.n_layers)
            params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
        return cls(config, params)

    @property
    def kind(self) -> str:
        return self.config.kind

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ------------------------------------------------------------

    def _mask(self, lengths: np.ndarray, T: int) -> np.ndarray:
        keys = np.arange(T)[None, :] < lengths[:, None]  # (B, T)
        allowed = np.broadcast_to(keys[:, None, None, :], (len(lengths), 1, T, T))
        if self.kind == "decoder":
            allowed = allowed & np.tril(np.ones((T, T), dtype=bool))[None, None]
        return np.where(allowed, 0.0, MASK_VALUE).astype(nx.get_dtype())

    def _attention(self, h: Tensor, prefix: str, mask: Tensor) -> Tensor:
        P = self.params
        B, T, d = h.shape
        H, dh = self.config.n_heads, self.config.head_dim

        def heads(w, b):
            x = nx.add(nx.matmul(h, P[prefix + w]), P[prefix + b])
            return nx.transpose(nx.reshape(x, (B, T, H, dh)), (0, 2, 1, 3))

        q = heads("wq", "bq")
        k = heads("wk", "bk")
        v = heads("wv", "bv")
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = nx.softmax(nx.add(scores, mask))
        o = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        return nx.add(nx.matmul(o, P[prefix + "wo"]), P[prefix + "bo"])

    def hidden_states(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Final-layer (post layer norm) states, shape (B, T, d_model)."""
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        B, T = ids.shape
        if T > self.config.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}")
        P = self.params
        x = nx.add(nx.embedding_lookup(P["tok_emb"], ids), nx.embedding_lookup(P["pos_emb"], np.arange(T)))
        mask = Tensor(self._mask(lengths, T))
        for i in range(self.config.n_layers):
            p = f"h{i}."
            x = nx.add(x, self._attention(nx.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"]), p + "attn.", mask))
            h = nx.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            h = nx.gelu(nx.add(nx.matmul(h, P[p + "mlp.w1"]), P[p + "mlp.b1"]))
            x = nx.add(x, nx.add(nx.matmul(h, P[p + "mlp.w2"]), P[p + "mlp.b2"]))
        return nx.layer_norm(x, P["ln_f.g"], P["ln_f.b"])

    def pool_positions(self, lengths: np.ndarray) -> np.ndarray:
        if self.kind == "decoder":
            return np.asarray(lengths) - 1
        return np.zeros(len(lengths), dtype=np.int64)

    def score_batch(self, seqs: Sequence[Sequence[int]]) -> Tensor:
        """Scores for a batch of token sequences, shape (B,)."""
        if not seqs:
            raise ValueError("score_batch: empty batch")
        if self.kind == "decoder":
            for s in seqs:
                if not s or s[-1] != EOS:
                    raise ValueError("decoder scoring requires sequences ending in </s>")
        ids, lengths = pad_batch(seqs)
        h = self.hidden_states(ids, lengths)
        pooled = nx.gather_rows(h, self.pool_positions(lengths))
        w = nx.reshape(self.params["head.w"], (self.config.d_model,))
        return nx.add(nx.rowdot(pooled, w), self.params["head.b"])

    def lm_logits(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        if self.kind != "decoder":
            raise ValueError("language-model logits are only defined for the decoder")
        return nx.matmul(self.hidden_states(ids, lengths), self.params["lm_head.w"])


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("empty token sequence")
    ids = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def score_sequences(model: RankerModel, seqs: Sequence[Sequence[int]], batch_size: int = 64) -> np.ndarray:
    """Inference-only scoring, returned in input order.

    Batches hold sequences of one length only: padding changes how the
    attention sums are blocked, and we want every score to equal the one
    :func:`teacher_score` / :func:`student_score` give for that sequence alone.
    """
    out = np.empty(len(seqs), dtype=np.float32)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)
    with nx.no_grad():
        for n in sorted(by_len):
            idx = by_len[n]
            for start in range(0, len(idx), batch_size):
                chunk = idx[start : start + batch_size]
                out[chunk] = model.score_batch([seqs[i] for i in chunk]).data
    return out


def teacher_score(model: RankerModel, seq: Sequence[int]) -> float:
    """Dense head applied to the decoder state at the trailing ``</s>``."""
    if model.kind != "decoder":
        raise ValueError("teacher_score needs a decoder model")
    return float(score_sequences(model, [list(seq)])[0])


def student_score(model: RankerModel, seq: Sequence[int]) -> float:
    """Dense head applied to the encoder state at position 0 (``<s>``)."""
    if model.kind != "encoder":
        raise ValueError("student_score needs an encoder model")
    return float(score_sequences(model, [list(seq)])[0])


# --- checkpoints -----------------------------------------------------------

MAGIC = b"DRNK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    pass


def save_checkpoint(model: RankerModel, path: str | Path) -> None:
    """Header, JSON manifest, then little-endian float32 payloads in manifest order."""
    entries, blobs, offset = [], [], 0
    for name, t in model.params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"config": asdict(model.config), "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> RankerModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    _, version, mlen = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _HEADER.size + mlen
    if start > len(raw):
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[_HEADER.size : start].decode("utf-8"))
        config = ModelConfig(**manifest["config"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointManifestError(f"{path}: unreadable manifest ({exc})") from None

    payload = memoryview(raw)[start:]
    params, expected_offset = {}, 0
    for e in entries:
        try:
            name, shape, off, nbytes = e["name"], tuple(e["shape"]), int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointManifestError(f"{path}: malformed manifest entry {e!r}") from None
        if off != expected_offset or nbytes != 4 * math.prod(shape) or name in params:
            raise CheckpointManifestError(f"{path}: inconsistent manifest entry for {name!r}")
        if off + nbytes > len(payload):
            raise CheckpointTruncatedError(f"{path}: payload for {name!r} exceeds file size")
        arr = np.frombuffer(payload[off : off + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
        expected_offset = off + nbytes
    if expected_offset != len(payload):
        raise CheckpointManifestError(f"{path}: {len(payload) - expected_offset} trailing bytes")
    try:
        return RankerModel(config, params)
    except ValueError as exc:
        raise CheckpointManifestError(f"{path}: {exc}") from None
