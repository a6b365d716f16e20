"""Small pre-norm transformer LMs whose per-layer key/value memory can be injected.

Two architectures share one parameter container:

* ``decoder`` - a causal LM: ``h_i = LM(z_i, h_<i)``.
* ``encdec``  - a bidirectional encoder plus a causal decoder with
  cross-attention.

Every forward pass returns an :class:`ActivationTrace` holding the key and
value vectors each layer wrote at each position.  Passing a trace back in as
``injected`` makes those slots attendable from the left, which is how both
prefixes and the incremental-decoding cache work.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields
from typing import BinaryIO, Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODEL_MAGIC = b"PFXF"
MODEL_FORMAT_VERSION = 1
ADAPTER_TAG = b"ADPT"
LN_EPS = 1e-5
_NEG = -1e30

ARCHS = ("decoder", "encdec")


class SequenceLengthError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 200
    max_seq_len: int = 128
    arch: str = "decoder"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_width(self) -> int:
        """dim(h_i): key and value for every layer, concatenated."""
        return self.n_layers * 2 * self.d_model


def _layer_shapes(prefix: str, cfg: ModelConfig, cross: bool) -> list[tuple[str, tuple]]:
    d, f = cfg.d_model, cfg.d_ff
    out = [(f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,))]
    for p in ("q", "k", "v", "o"):
        out += [(f"{prefix}.attn.w{p}", (d, d)), (f"{prefix}.attn.b{p}", (d,))]
    if cross:
        out += [(f"{prefix}.lnx.g", (d,)), (f"{prefix}.lnx.b", (d,))]
        for p in ("q", "k", "v", "o"):
            out += [(f"{prefix}.xattn.w{p}", (d, d)), (f"{prefix}.xattn.b{p}", (d,))]
    out += [
        (f"{prefix}.ln2.g", (d,)),
        (f"{prefix}.ln2.b", (d,)),
        (f"{prefix}.ff.w1", (d, f)),
        (f"{prefix}.ff.b1", (f,)),
        (f"{prefix}.ff.w2", (f, d)),
        (f"{prefix}.ff.b2", (d,)),
    ]
    return out


def parameter_layout(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Names and shapes of every model tensor, in checkpoint order."""
    d = cfg.d_model
    out = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_seq_len, d))]
    if cfg.arch == "encdec":
        for j in range(cfg.n_layers):
            out += _layer_shapes(f"enc.{j}", cfg, cross=False)
        out += [("enc.ln_f.g", (d,)), ("enc.ln_f.b", (d,))]
        for j in range(cfg.n_layers):
            out += _layer_shapes(f"dec.{j}", cfg, cross=True)
    else:
        for j in range(cfg.n_layers):
            out += _layer_shapes(f"layers.{j}", cfg, cross=False)
    out += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("lm_head", (d, cfg.vocab_size))]
    return out


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for _, s in parameter_layout(cfg)))


@dataclass
class ModelParameters:
    """Frozen-by-default transformer weights (phi), keyed by layout name."""

    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def set_trainable(self, names: Optional[Sequence[str]] = None) -> None:
        """Mark exactly ``names`` trainable (all when ``None``); freeze the rest."""
        keep = set(self.tensors) if names is None else set(names)
        unknown = keep - set(self.tensors)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        for name, t in self.tensors.items():
            t.requires_grad = name in keep
            t.grad = None

    def freeze(self) -> None:
        self.set_trainable([])

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self.tensors[n].data = arr.copy()

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {n: Tensor(t.data.copy()) for n, t in self.tensors.items()})

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(self.config, {n: Tensor(t.data.astype(dtype)) for n, t in self.tensors.items()})


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParameters:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_layout(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 0.02, size=shape)
        else:
            std = 0.02
            if leaf in ("wo", "w2"):
                std = 0.02 / np.sqrt(2 * cfg.n_layers)
            arr = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(arr.astype(dtype))
    return ModelParameters(cfg, tensors)


# ----------------------------------------------------------------------------
# activation traces
# ----------------------------------------------------------------------------


@dataclass
class ActivationTrace:
    """Per-layer key/value memory for ``S`` attendable slots of ``B`` rows.

    ``keys[j]`` and ``values[j]`` have shape ``(B, S, d_model)`` (heads are
    split inside attention).  ``mask[b, s]`` is False for padding slots.
    ``top[b, s]`` holds the final hidden state of token positions; it is NaN
    at injected prefix slots, which carry no top-layer state.
    """

    keys: list
    values: list
    mask: Optional[np.ndarray] = None
    top: Optional[np.ndarray] = None

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def batch(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0

    @property
    def length(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0

    @property
    def width(self) -> int:
        return self.keys[0].shape[2]

    def valid(self) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        return np.ones((self.batch, self.length), dtype=bool)

    def valid_counts(self) -> np.ndarray:
        return self.valid().sum(axis=1)

    def has_state(self) -> np.ndarray:
        if self.top is None:
            return np.zeros((self.batch, self.length), dtype=bool)
        return ~np.isnan(self.top[..., 0])

    def detach(self) -> "ActivationTrace":
        return ActivationTrace(
            [_data(k) for k in self.keys], [_data(v) for v in self.values], self.mask, self.top
        )

    def row(self, b: int) -> "ActivationTrace":
        sel = slice(b, b + 1)
        return ActivationTrace(
            [_data(k)[sel] for k in self.keys],
            [_data(v)[sel] for v in self.values],
            None if self.mask is None else self.mask[sel],
            None if self.top is None else self.top[sel],
        )

    def expand(self, batch: int) -> "ActivationTrace":
        """Broadcast a batch-1 trace to ``batch`` rows (differentiably)."""
        if self.batch == batch:
            return self
        if self.batch != 1:
            raise ValueError("only batch-1 traces can be expanded")

        def ex(x):
            x = _as_tensor(x)
            return ad.expand(x, (batch,) + x.shape[1:])

        mask = None if self.mask is None else np.repeat(self.mask, batch, axis=0)
        top = None if self.top is None else np.repeat(self.top, batch, axis=0)
        return ActivationTrace([ex(k) for k in self.keys], [ex(v) for v in self.values], mask, top)

    @staticmethod
    def concat(first: Optional["ActivationTrace"], second: "ActivationTrace") -> "ActivationTrace":
        if first is None or first.length == 0:
            return second
        if second.length == 0:
            return first
        if first.n_layers != second.n_layers:
            raise ValueError("traces disagree on layer count")
        keys = [_cat(a, b) for a, b in zip(first.keys, second.keys)]
        values = [_cat(a, b) for a, b in zip(first.values, second.values)]
        mask = None
        if first.mask is not None or second.mask is not None:
            mask = np.concatenate([first.valid(), second.valid()], axis=1)
        top = np.concatenate([_top_or_nan(first), _top_or_nan(second)], axis=1)
        return ActivationTrace(keys, values, mask, top)

    def flatten_rows(self, b: int = 0) -> np.ndarray:
        """Row ``i`` = [k_0; v_0; k_1; v_1; ...] at slot ``i`` (a prefix matrix)."""
        parts = []
        for k, v in zip(self.keys, self.values):
            parts += [_data(k)[b], _data(v)[b]]
        return np.concatenate(parts, axis=-1)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _cat(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ad.concat([_as_tensor(a), _as_tensor(b)], axis=1)
    return np.concatenate([a, b], axis=1)


def _top_or_nan(t: ActivationTrace) -> np.ndarray:
    if t.top is not None:
        return t.top
    dtype = _data(t.keys[0]).dtype
    return np.full((t.batch, t.length, t.width), np.nan, dtype=dtype)


def empty_trace(cfg: ModelConfig, batch: int = 1, dtype=np.float64) -> ActivationTrace:
    z = np.zeros((batch, 0, cfg.d_model), dtype=dtype)
    return ActivationTrace([z] * cfg.n_layers, [z] * cfg.n_layers, None, None)


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, w) + b


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attend(q: Tensor, k, v, bias: np.ndarray, n_heads: int) -> Tensor:
    """Scaled dot-product attention; ``bias`` is an additive (B, T, S) mask."""
    qh = _split_heads(q, n_heads)
    kh = _split_heads(_as_tensor(k), n_heads)
    vh = _split_heads(_as_tensor(v), n_heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = ad.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    scores = scores + bias[:, None, :, :].astype(q.dtype)
    return _merge_heads(ad.matmul(ad.softmax(scores, axis=-1), vh))


def _adapter(x: Tensor, adapters: Optional[dict], name: str) -> Tensor:
    if adapters is None or name not in adapters:
        return x
    a = adapters[name]
    hidden = ad.gelu(_linear(x, a["down"], a["down_b"]))
    return x + _linear(hidden, a["up"], a["up_b"])


def _attn_bias(
    q_valid: np.ndarray,
    k_valid: np.ndarray,
    n_injected: int,
    causal: bool,
) -> np.ndarray:
    """Additive mask (B, T, S+T): injected slots then token slots."""
    b, t = q_valid.shape
    allowed = np.concatenate(
        [np.broadcast_to(k_valid[:, None, :n_injected], (b, t, n_injected)),
         np.broadcast_to(k_valid[:, None, n_injected:], (b, t, k_valid.shape[1] - n_injected))],
        axis=2,
    ).copy()
    if causal:
        tri = np.tril(np.ones((t, t), dtype=bool))
        allowed[:, :, n_injected:] &= tri[None]
    return np.where(allowed, 0.0, _NEG)


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ValueError("tokens must be 1-D or 2-D")
    return arr, False


def _positions(n_injected_valid: np.ndarray, t: int, token_mask: np.ndarray) -> np.ndarray:
    """Default positions: real tokens count up from the number of valid injected slots."""
    steps = np.cumsum(token_mask, axis=1) - 1
    pos = n_injected_valid[:, None] + np.maximum(steps, 0)
    return pos


def embed(params: ModelParameters, tokens: np.ndarray) -> Tensor:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.config.vocab_size):
        raise ValueError("token id out of range")
    return ad.take_rows(params["tok_emb"], tokens)


# ----------------------------------------------------------------------------
# decoder-only LM
# ----------------------------------------------------------------------------


@dataclass
class LMOutput:
    logits: Tensor
    trace: ActivationTrace
    hidden: Tensor

    def __iter__(self):
        yield self.logits
        yield self.trace


def forward_lm(
    params: ModelParameters,
    tokens=None,
    injected: Optional[ActivationTrace] = None,
    *,
    input_embeds: Optional[Tensor] = None,
    token_mask: Optional[np.ndarray] = None,
    positions: Optional[np.ndarray] = None,
    adapters: Optional[dict] = None,
) -> LMOutput:
    """Causal forward pass over ``tokens`` with optional injected key/values.

    Token position ``i`` attends to every valid injected slot and to valid
    tokens at positions ``<= i``.  By default token positions continue after
    the injected slots, so a trace collected from ``w`` followed by a pass over
    ``x`` reproduces a single pass over ``w + x``.

    Returns logits ``(B, T, V)`` (``(T, V)`` for 1-D input) and the full trace
    (injected slots followed by the new token slots).
    """
    cfg = params.config
    if cfg.arch != "decoder":
        raise ValueError("forward_lm requires a decoder-only model")
    if input_embeds is not None:
        x = input_embeds
        if x.ndim == 2:
            x = x.reshape((1,) + x.shape)
            squeeze = True
        else:
            squeeze = False
        bsz, t = x.shape[:2]
    else:
        tok, squeeze = _as_batch(tokens)
        bsz, t = tok.shape
        x = embed(params, tok)
    if injected is not None and injected.length and injected.n_layers != cfg.n_layers:
        raise ValueError("injected trace layer count does not match the model")
    if injected is not None and injected.length:
        injected = injected.expand(bsz)
        n_inj = injected.length
        inj_valid = injected.valid()
    else:
        injected = None
        n_inj = 0
        inj_valid = np.zeros((bsz, 0), dtype=bool)
    tmask = np.ones((bsz, t), dtype=bool) if token_mask is None else np.asarray(token_mask, dtype=bool)
    if positions is None:
        positions = _positions(inj_valid.sum(axis=1), t, tmask)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim == 1:
        positions = np.broadcast_to(positions, (bsz, t))
    if t and positions.max() >= cfg.max_seq_len:
        raise SequenceLengthError(
            f"sequence needs position {int(positions.max())} but max_seq_len={cfg.max_seq_len}"
        )
    h = x + ad.take_rows(params["pos_emb"], positions)
    k_valid = np.concatenate([inj_valid, tmask], axis=1)
    bias = _attn_bias(tmask, k_valid, n_inj, causal=True)

    keys, values = [], []
    for j in range(cfg.n_layers):
        p = f"layers.{j}"
        a = ad.layer_norm(h, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], LN_EPS)
        q = _linear(a, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"])
        k = _linear(a, params[f"{p}.attn.wk"], params[f"{p}.attn.bk"])
        v = _linear(a, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"])
        keys.append(k)
        values.append(v)
        if injected is not None:
            k_all = ad.concat([_as_tensor(injected.keys[j]), k], axis=1)
            v_all = ad.concat([_as_tensor(injected.values[j]), v], axis=1)
        else:
            k_all, v_all = k, v
        att = _attend(q, k_all, v_all, bias, cfg.n_heads)
        att = _linear(att, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
        h = h + _adapter(att, adapters, f"{p}.attn")
        a = ad.layer_norm(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], LN_EPS)
        ff = _linear(ad.gelu(_linear(a, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"])),
                     params[f"{p}.ff.w2"], params[f"{p}.ff.b2"])
        h = h + _adapter(ff, adapters, f"{p}.ff")
    top = ad.layer_norm(h, params["ln_f.g"], params["ln_f.b"], LN_EPS)
    logits = ad.matmul(top, params["lm_head"])
    new = ActivationTrace(keys, values, None if token_mask is None else tmask, top.data.copy())
    trace = ActivationTrace.concat(injected, new)
    if squeeze:
        logits = logits.reshape(logits.shape[1:])
    return LMOutput(logits, trace, top)


def collect_activations(params: ModelParameters, tokens) -> ActivationTrace:
    """Key/value pairs the frozen model writes for ``tokens`` (no gradients)."""
    tok, _ = _as_batch(tokens)
    out = forward_lm(params, tok)
    return out.trace.detach()


def next_token_distribution(params: ModelParameters, trace: ActivationTrace, i: int, row: int = 0) -> np.ndarray:
    """``softmax(W h_i)`` for the top-layer state stored at slot ``i``."""
    if not 0 <= i < trace.length:
        raise IndexError(f"slot {i} outside trace of length {trace.length}")
    if not trace.has_state()[row, i]:
        raise ValueError(f"slot {i} is an injected prefix slot with no top-layer state")
    logits = trace.top[row, i] @ params["lm_head"].data
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


# ----------------------------------------------------------------------------
# encoder-decoder
# ----------------------------------------------------------------------------


@dataclass
class EncDecOutput:
    logits: Tensor
    enc_trace: ActivationTrace
    dec_trace: ActivationTrace
    memory: Tensor
    memory_mask: np.ndarray


def encode(
    params: ModelParameters,
    src,
    injected: Optional[ActivationTrace] = None,
    src_mask: Optional[np.ndarray] = None,
) -> tuple[Tensor, ActivationTrace, np.ndarray]:
    """Bidirectional encoder over ``[prefix; src]``; returns memory for ``src`` slots."""
    cfg = params.config
    tok, _ = _as_batch(src)
    bsz, t = tok.shape
    tmask = np.ones((bsz, t), dtype=bool) if src_mask is None else np.asarray(src_mask, dtype=bool)
    if injected is not None and injected.length:
        injected = injected.expand(bsz)
        n_inj, inj_valid = injected.length, injected.valid()
    else:
        injected, n_inj, inj_valid = None, 0, np.zeros((bsz, 0), dtype=bool)
    positions = _positions(inj_valid.sum(axis=1), t, tmask)
    if t and positions.max() >= cfg.max_seq_len:
        raise SequenceLengthError("encoder input exceeds max_seq_len")
    h = embed(params, tok) + ad.take_rows(params["pos_emb"], positions)
    k_valid = np.concatenate([inj_valid, tmask], axis=1)
    bias = _attn_bias(tmask, k_valid, n_inj, causal=False)
    keys, values = [], []
    for j in range(cfg.n_layers):
        p = f"enc.{j}"
        a = ad.layer_norm(h, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], LN_EPS)
        q = _linear(a, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"])
        k = _linear(a, params[f"{p}.attn.wk"], params[f"{p}.attn.bk"])
        v = _linear(a, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"])
        keys.append(k)
        values.append(v)
        if injected is not None:
            k = ad.concat([_as_tensor(injected.keys[j]), k], axis=1)
            v = ad.concat([_as_tensor(injected.values[j]), v], axis=1)
        att = _linear(_attend(q, k, v, bias, cfg.n_heads), params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
        h = h + att
        a = ad.layer_norm(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], LN_EPS)
        h = h + _linear(ad.gelu(_linear(a, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"])),
                        params[f"{p}.ff.w2"], params[f"{p}.ff.b2"])
    memory = ad.layer_norm(h, params["enc.ln_f.g"], params["enc.ln_f.b"], LN_EPS)
    trace = ActivationTrace.concat(injected, ActivationTrace(keys, values, None if src_mask is None else tmask, memory.data.copy()))
    return memory, trace, tmask


def decode(
    params: ModelParameters,
    tgt,
    memory: Tensor,
    memory_mask: np.ndarray,
    injected: Optional[ActivationTrace] = None,
    tgt_mask: Optional[np.ndarray] = None,
) -> LMOutput:
    """Causal decoder over ``[prefix'; past; tgt]`` with cross-attention to ``memory``."""
    cfg = params.config
    tok, squeeze = _as_batch(tgt)
    bsz, t = tok.shape
    tmask = np.ones((bsz, t), dtype=bool) if tgt_mask is None else np.asarray(tgt_mask, dtype=bool)
    if injected is not None and injected.length:
        injected = injected.expand(bsz)
        n_inj, inj_valid = injected.length, injected.valid()
    else:
        injected, n_inj, inj_valid = None, 0, np.zeros((bsz, 0), dtype=bool)
    if memory.shape[0] != bsz:
        memory = ad.expand(memory, (bsz,) + memory.shape[1:])
        memory_mask = np.broadcast_to(memory_mask, (bsz, memory_mask.shape[1]))
    positions = _positions(inj_valid.sum(axis=1), t, tmask)
    if t and positions.max() >= cfg.max_seq_len:
        raise SequenceLengthError("decoder input exceeds max_seq_len")
    h = embed(params, tok) + ad.take_rows(params["pos_emb"], positions)
    bias = _attn_bias(tmask, np.concatenate([inj_valid, tmask], axis=1), n_inj, causal=True)
    xbias = np.where(np.broadcast_to(memory_mask[:, None, :], (bsz, t, memory_mask.shape[1])), 0.0, _NEG)
    keys, values = [], []
    for j in range(cfg.n_layers):
        p = f"dec.{j}"
        a = ad.layer_norm(h, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], LN_EPS)
        q = _linear(a, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"])
        k = _linear(a, params[f"{p}.attn.wk"], params[f"{p}.attn.bk"])
        v = _linear(a, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"])
        keys.append(k)
        values.append(v)
        if injected is not None:
            k = ad.concat([_as_tensor(injected.keys[j]), k], axis=1)
            v = ad.concat([_as_tensor(injected.values[j]), v], axis=1)
        h = h + _linear(_attend(q, k, v, bias, cfg.n_heads), params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
        a = ad.layer_norm(h, params[f"{p}.lnx.g"], params[f"{p}.lnx.b"], LN_EPS)
        xq = _linear(a, params[f"{p}.xattn.wq"], params[f"{p}.xattn.bq"])
        xk = _linear(memory, params[f"{p}.xattn.wk"], params[f"{p}.xattn.bk"])
        xv = _linear(memory, params[f"{p}.xattn.wv"], params[f"{p}.xattn.bv"])
        h = h + _linear(_attend(xq, xk, xv, xbias, cfg.n_heads), params[f"{p}.xattn.wo"], params[f"{p}.xattn.bo"])
        a = ad.layer_norm(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], LN_EPS)
        h = h + _linear(ad.gelu(_linear(a, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"])),
                        params[f"{p}.ff.w2"], params[f"{p}.ff.b2"])
    top = ad.layer_norm(h, params["ln_f.g"], params["ln_f.b"], LN_EPS)
    logits = ad.matmul(top, params["lm_head"])
    trace = ActivationTrace.concat(injected, ActivationTrace(keys, values, None if tgt_mask is None else tmask, top.data.copy()))
    if squeeze:
        logits = logits.reshape(logits.shape[1:])
    return LMOutput(logits, trace, top)


def forward_encdec(
    params: ModelParameters,
    src_tokens,
    tgt_tokens,
    enc_injected: Optional[ActivationTrace] = None,
    dec_injected: Optional[ActivationTrace] = None,
    *,
    src_mask: Optional[np.ndarray] = None,
    tgt_mask: Optional[np.ndarray] = None,
) -> EncDecOutput:
    if params.config.arch != "encdec":
        raise ValueError("forward_encdec requires an encoder-decoder model")
    memory, enc_trace, mmask = encode(params, src_tokens, enc_injected, src_mask)
    out = decode(params, tgt_tokens, memory, mmask, dec_injected, tgt_mask)
    return EncDecOutput(out.logits, enc_trace, out.trace, memory, mmask)


# ----------------------------------------------------------------------------
# checkpoint I/O
# ----------------------------------------------------------------------------
# Layout (all integers little-endian u32, all floats little-endian f32):
#   b"PFXF" | version | n_layers d_model n_heads d_ff vocab_size max_seq_len arch
#   for each tensor in parameter_layout order: ndim | dims... | row-major data
#   optional adapter section: b"ADPT" | bottleneck | n_tensors | (name_len name ndim dims... data)*

_CONFIG_FIELDS = ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len")


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_array(fh: BinaryIO) -> np.ndarray:
    (ndim,) = _unpack(fh, "<I")
    shape = _unpack(fh, f"<{ndim}I")
    n = int(np.prod(shape)) if ndim else 1
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise CheckpointError("truncated tensor data")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def _unpack(fh: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError("unexpected end of checkpoint")
    return struct.unpack(fmt, raw)


def save_model(path, params: ModelParameters, adapters: Optional["AdapterSection"] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_model(params, adapters))


def dump_model(params: ModelParameters, adapters: Optional["AdapterSection"] = None) -> bytes:
    cfg = params.config
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_FORMAT_VERSION))
    buf.write(struct.pack("<6I", *(getattr(cfg, f) for f in _CONFIG_FIELDS)))
    buf.write(struct.pack("<I", ARCHS.index(cfg.arch)))
    for name, shape in parameter_layout(cfg):
        arr = params[name].data
        if arr.shape != shape:
            raise CheckpointError(f"{name} has shape {arr.shape}, expected {shape}")
        write_array(buf, arr)
    if adapters is not None:
        buf.write(ADAPTER_TAG)
        buf.write(struct.pack("<II", adapters.bottleneck, len(adapters.tensors)))
        for name, arr in adapters.tensors.items():
            enc = name.encode("utf-8")
            buf.write(struct.pack("<I", len(enc)))
            buf.write(enc)
            write_array(buf, arr)
    return buf.getvalue()


@dataclass
class AdapterSection:
    bottleneck: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def load_model(path, dtype=np.float64) -> tuple[ModelParameters, Optional[AdapterSection]]:
    with open(path, "rb") as fh:
        return parse_model(fh.read(), dtype)


def parse_model(raw: bytes, dtype=np.float64) -> tuple[ModelParameters, Optional[AdapterSection]]:
    fh = io.BytesIO(raw)
    if fh.read(4) != MODEL_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (version,) = _unpack(fh, "<I")
    if version != MODEL_FORMAT_VERSION:
        raise CheckpointError(f"unsupported model checkpoint version {version}")
    vals = _unpack(fh, "<6I")
    (arch,) = _unpack(fh, "<I")
    if arch >= len(ARCHS):
        raise CheckpointError(f"unknown arch code {arch}")
    cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, vals)), arch=ARCHS[arch])
    tensors = {}
    for name, shape in parameter_layout(cfg):
        arr = read_array(fh)
        if arr.shape != shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape}, expected {shape}")
        tensors[name] = Tensor(arr.astype(dtype))
    adapters = None
    tag = fh.read(4)
    if tag == ADAPTER_TAG:
        bottleneck, n = _unpack(fh, "<II")
        adapters = AdapterSection(bottleneck)
        for _ in range(n):
            (ln,) = _unpack(fh, "<I")
            name = fh.read(ln).decode("utf-8")
            adapters.tensors[name] = read_array(fh).astype(dtype)
    elif tag:
        raise CheckpointError(f"unknown trailing section {tag!r}")
    return ModelParameters(cfg, tensors), adapters


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
