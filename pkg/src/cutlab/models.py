"""Tiny pre-norm transformer models sized for CPU desk-scale training.

An encoder classifier pooled at the reserved classification token, and an
encoder-decoder with causal self-attention plus cross-attention for paired
sequence tasks. Both consume (possibly erasure-masked) embedding matrices,
never raw token ids, so augmented views plug in unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embedding import TokenSequence, compose, make_tables
from .objective import cross_entropy
from .tensor import Tensor, affine, concat_cols, layer_norm, no_grad, stack_scalars

INIT_STD = 0.02
ATTN_NEG = -1e9

CHECKPOINT_MAGIC = "cutlab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 2
    d: int = 32
    ffn_width: int = 64
    max_length: int = 32
    vocab_size: int = 16
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")


@dataclass(frozen=True)
class Seq2SeqConfig:
    d: int = 32
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_width: int = 64
    max_src_length: int = 16
    max_tgt_length: int = 16
    src_vocab: int = 16
    tgt_vocab: int = 16

    def __post_init__(self) -> None:
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")


def _weight(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, (rows, cols)), requires_grad=True)


def _bias(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _ln_params(n: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.ones(n), requires_grad=True), Tensor(np.zeros(n), requires_grad=True)


def _attn_params(rng: np.random.Generator, params: dict[str, Tensor], prefix: str, d: int) -> None:
    # No key bias: softmax scores are invariant to a constant shift per query
    # row, so a key bias is an exactly-zero-gradient direction.
    for piece in ("q", "k", "v", "o"):
        params[f"{prefix}.w{piece}"] = _weight(rng, d, d)
        if piece != "k":
            params[f"{prefix}.b{piece}"] = _bias(d)


def _ffn_params(rng: np.random.Generator, params: dict[str, Tensor], prefix: str, d: int, width: int) -> None:
    params[f"{prefix}.w1"] = _weight(rng, d, width)
    params[f"{prefix}.b1"] = _bias(width)
    params[f"{prefix}.w2"] = _weight(rng, width, d)
    params[f"{prefix}.b2"] = _bias(d)


def _ln_entry(params: dict[str, Tensor], prefix: str, d: int) -> None:
    params[f"{prefix}.g"], params[f"{prefix}.b"] = _ln_params(d)


def _attention(
    params: dict[str, Tensor],
    prefix: str,
    x_q: Tensor,
    x_kv: Tensor,
    heads: int,
    mask: Tensor | None = None,
) -> Tensor:
    d = x_q.shape[1]
    dh = d // heads
    q = affine(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = x_kv @ params[f"{prefix}.wk"]
    v = affine(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    outs = []
    scale = 1.0 / math.sqrt(dh)
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = (q.slice_cols(lo, hi) @ k.slice_cols(lo, hi).T) * scale
        if mask is not None:
            scores = scores + mask
        outs.append(scores.softmax() @ v.slice_cols(lo, hi))
    merged = outs[0] if heads == 1 else concat_cols(outs)
    return affine(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ffn(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    hidden = affine(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]).gelu()
    return affine(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _ln(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def causal_mask(length: int) -> Tensor:
    """Additive mask blocking attention to later positions."""
    m = np.triu(np.full((length, length), ATTN_NEG), k=1)
    return Tensor(m)


class EncoderClassifier:
    """Pre-norm transformer encoder pooled at position 0, projected to logits."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.tables = make_tables(rng, config.vocab_size, config.max_length, config.d)
        p: dict[str, Tensor] = {
            "emb.tok": self.tables.token_table,
            "emb.pos": self.tables.position_table,
            "emb.seg": self.tables.segment_table,
        }
        for i in range(config.layers):
            _ln_entry(p, f"enc{i}.ln1", config.d)
            _attn_params(rng, p, f"enc{i}.attn", config.d)
            _ln_entry(p, f"enc{i}.ln2", config.d)
            _ffn_params(rng, p, f"enc{i}.ffn", config.d, config.ffn_width)
        _ln_entry(p, "final_ln", config.d)
        p["head.w"] = _weight(rng, config.d, config.n_classes)
        p["head.b"] = _bias(config.n_classes)
        self.params = p

    def embed(self, seq: TokenSequence) -> Tensor:
        return compose(self.tables, seq)

    def encode(self, W: Tensor) -> Tensor:
        if W.shape[1] != self.config.d:
            raise ValueError(f"embedding width {W.shape[1]} != model width {self.config.d}")
        x = W
        for i in range(self.config.layers):
            h = _ln(self.params, f"enc{i}.ln1", x)
            x = x + _attention(self.params, f"enc{i}.attn", h, h, self.config.heads)
            h = _ln(self.params, f"enc{i}.ln2", x)
            x = x + _ffn(self.params, f"enc{i}.ffn", h)
        return _ln(self.params, "final_ln", x)

    def classify(self, W: Tensor, counter=None) -> Tensor:
        """Logits over classes for one embedding matrix; one forward pass."""
        logits = self.encode(W).row(0) @ self.params["head.w"] + self.params["head.b"]
        if counter is not None:
            counter.forwards += 1
        return logits

    def predict(self, seq: TokenSequence) -> int:
        with no_grad():
            return int(np.argmax(self.classify(self.embed(seq)).data))


class Seq2SeqModel:
    """Encoder-decoder with causal decoder self-attention and cross-attention."""

    def __init__(self, config: Seq2SeqConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.src_tables = make_tables(rng, config.src_vocab, config.max_src_length, config.d, n_segments=0)
        self.tgt_tables = make_tables(rng, config.tgt_vocab, config.max_tgt_length, config.d, n_segments=0)
        p: dict[str, Tensor] = {
            "src_emb.tok": self.src_tables.token_table,
            "src_emb.pos": self.src_tables.position_table,
            "tgt_emb.tok": self.tgt_tables.token_table,
            "tgt_emb.pos": self.tgt_tables.position_table,
        }
        for i in range(config.enc_layers):
            _ln_entry(p, f"enc{i}.ln1", config.d)
            _attn_params(rng, p, f"enc{i}.attn", config.d)
            _ln_entry(p, f"enc{i}.ln2", config.d)
            _ffn_params(rng, p, f"enc{i}.ffn", config.d, config.ffn_width)
        _ln_entry(p, "enc_final_ln", config.d)
        for i in range(config.dec_layers):
            _ln_entry(p, f"dec{i}.ln1", config.d)
            _attn_params(rng, p, f"dec{i}.self", config.d)
            _ln_entry(p, f"dec{i}.ln2", config.d)
            _attn_params(rng, p, f"dec{i}.cross", config.d)
            _ln_entry(p, f"dec{i}.ln3", config.d)
            _ffn_params(rng, p, f"dec{i}.ffn", config.d, config.ffn_width)
        _ln_entry(p, "dec_final_ln", config.d)
        p["vocab.w"] = _weight(rng, config.d, config.tgt_vocab)
        p["vocab.b"] = _bias(config.tgt_vocab)
        self.params = p

    def embed_src(self, ids: list[int]) -> Tensor:
        return compose(self.src_tables, TokenSequence(list(ids)))

    def embed_tgt(self, ids: list[int]) -> Tensor:
        return compose(self.tgt_tables, TokenSequence(list(ids)))

    def encode(self, W_src: Tensor) -> Tensor:
        x = W_src
        for i in range(self.config.enc_layers):
            h = _ln(self.params, f"enc{i}.ln1", x)
            x = x + _attention(self.params, f"enc{i}.attn", h, h, self.config.heads)
            h = _ln(self.params, f"enc{i}.ln2", x)
            x = x + _ffn(self.params, f"enc{i}.ffn", h)
        return _ln(self.params, "enc_final_ln", x)

    def decode_logits(self, enc_out: Tensor, W_tgt_in: Tensor) -> Tensor:
        x = W_tgt_in
        mask = causal_mask(W_tgt_in.shape[0])
        for i in range(self.config.dec_layers):
            h = _ln(self.params, f"dec{i}.ln1", x)
            x = x + _attention(self.params, f"dec{i}.self", h, h, self.config.heads, mask)
            h = _ln(self.params, f"dec{i}.ln2", x)
            x = x + _attention(self.params, f"dec{i}.cross", h, enc_out, self.config.heads)
            h = _ln(self.params, f"dec{i}.ln3", x)
            x = x + _ffn(self.params, f"dec{i}.ffn", h)
        x = _ln(self.params, "dec_final_ln", x)
        return affine(x, self.params["vocab.w"], self.params["vocab.b"])

    def forward(self, W_src: Tensor, W_tgt_in: Tensor, targets: list[int], counter=None) -> Tensor:
        """Per-position teacher-forced cross-entropy; one forward pass.

        W_tgt_in embeds the shifted gold target (possibly erasure-masked);
        targets are always the original gold token ids.
        """
        if W_src.shape[1] != self.config.d or W_tgt_in.shape[1] != self.config.d:
            raise ValueError(
                f"embedding widths ({W_src.shape[1]}, {W_tgt_in.shape[1]}) != model width {self.config.d}"
            )
        if W_tgt_in.shape[0] != len(targets):
            raise ValueError(
                f"decoder input length {W_tgt_in.shape[0]} != target length {len(targets)}"
            )
        logits = self.decode_logits(self.encode(W_src), W_tgt_in)
        losses = [cross_entropy(logits.row(j), targets[j]) for j in range(len(targets))]
        if counter is not None:
            counter.forwards += 1
        return stack_scalars(losses)

    def greedy_decode(self, src_ids: list[int], max_len: int, bos_id: int = 0, eos_id: int = 1) -> list[int]:
        """Deterministic argmax decoding until the end token or max_len."""
        with no_grad():
            enc_out = self.encode(self.embed_src(src_ids))
            out: list[int] = []
            for _ in range(max_len):
                W_tgt = self.embed_tgt([bos_id] + out)
                logits = self.decode_logits(enc_out, W_tgt)
                nxt = int(np.argmax(logits.data[-1]))
                out.append(nxt)
                if nxt == eos_id:
                    break
            return out


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str, params: dict[str, Tensor]) -> None:
    """Write named parameter arrays as hex floats, bit-exactly recoverable."""
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}", str(len(params))]
    for name in sorted(params):
        arr = params[name].data
        dims = " ".join(str(s) for s in arr.shape)
        lines.append(f"{name} {arr.ndim} {dims}".rstrip())
        lines.append(" ".join(float(v).hex() for v in arr.reshape(-1)))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
        raise ValueError(f"not a {CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} file: {path}")
    count = int(lines[1])
    out: dict[str, np.ndarray] = {}
    pos = 2
    for _ in range(count):
        head = lines[pos].split()
        name, ndim = head[0], int(head[1])
        shape = tuple(int(s) for s in head[2 : 2 + ndim])
        values = np.array([float.fromhex(tok) for tok in lines[pos + 1].split()])
        out[name] = values.reshape(shape)
        pos += 2
    return out


def load_state(params: dict[str, Tensor], state: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into model parameters, checking names and shapes."""
    missing = set(params) - set(state)
    extra = set(state) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, tensor in params.items():
        if state[name].shape != tensor.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {state[name].shape} vs model {tensor.data.shape}"
            )
        tensor.data = state[name].astype(np.float64).copy()
