"""Trainable prefixes: flat and MLP-reparametrized, plus the two ablations.

A prefix is a ``(prefix_len, n_layers * 2 * d_model)`` matrix.  Row ``i`` holds
the key and value every layer sees at virtual slot ``i``; nothing is computed
at those slots, they are copied straight into attention.  The reparametrized
form produces the same matrix as ``MLP(P')`` and is collapsed to the flat form
before export.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    ActivationTrace,
    CheckpointError,
    ModelConfig,
    ModelParameters,
    _unpack,
    collect_activations,
    forward_lm,
)

PREFIX_MAGIC = b"PFXP"
PREFIX_FORMAT_VERSION = 1
DEFAULT_REPARAM_WIDTH = 64


class Placement(enum.IntEnum):
    PREFIX = 0
    INFIX = 1
    ENCDEC_DOUBLE = 2


@dataclass
class Reparam:
    """``P = W2 tanh(P' W1 + b1) + b2``."""

    small: Tensor  # P', (prefix_len, k)
    w1: Tensor  # (k, k)
    b1: Tensor
    w2: Tensor  # (k, kv_width)
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"prefix.small": self.small, "prefix.w1": self.w1, "prefix.b1": self.b1,
                "prefix.w2": self.w2, "prefix.b2": self.b2}

    @property
    def width(self) -> int:
        return self.small.shape[1]

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors().values())


class PrefixParameters:
    """One prefix for a model with ``n_layers`` layers of width ``d_model``.

    Exactly one of two modes is active.  In flat mode ``flat`` is the trained
    matrix.  In reparam mode ``flat`` is ``None`` and the matrix is recomputed
    from ``reparam`` on every call to :meth:`matrix`.
    """

    def __init__(
        self,
        prefix_len: int,
        n_layers: int,
        d_model: int,
        flat: Optional[Tensor] = None,
        reparam: Optional[Reparam] = None,
        placement: Placement = Placement.PREFIX,
    ):
        if (flat is None) == (reparam is None):
            raise ValueError("exactly one of flat / reparam must be given")
        self.prefix_len = int(prefix_len)
        self.n_layers = int(n_layers)
        self.d_model = int(d_model)
        self.flat = flat
        self.reparam = reparam
        self.placement = Placement(placement)
        width = self.kv_width
        if flat is not None and flat.shape != (self.prefix_len, width):
            raise ValueError(f"flat prefix has shape {flat.shape}, expected {(self.prefix_len, width)}")
        if reparam is not None:
            if reparam.small.shape[0] != self.prefix_len or reparam.w2.shape[1] != width:
                raise ValueError("reparam shapes inconsistent with prefix_len / model width")

    @property
    def kv_width(self) -> int:
        return self.n_layers * 2 * self.d_model

    @property
    def is_flat(self) -> bool:
        return self.flat is not None

    def parameters(self) -> dict[str, Tensor]:
        if self.flat is not None:
            return {"prefix.flat": self.flat}
        return self.reparam.tensors()

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def n_stored(self) -> int:
        return self.prefix_len * self.kv_width

    def set_trainable(self, flag: bool = True) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag

    def matrix(self) -> Tensor:
        if self.flat is not None:
            return self.flat
        r = self.reparam
        hidden = ad.tanh(ad.matmul(r.small, r.w1) + r.b1)
        return ad.matmul(hidden, r.w2) + r.b2

    def compatible_with(self, cfg: ModelConfig) -> bool:
        return self.n_layers == cfg.n_layers and self.d_model == cfg.d_model

    def copy(self) -> "PrefixParameters":
        if self.flat is not None:
            return PrefixParameters(self.prefix_len, self.n_layers, self.d_model,
                                    flat=Tensor(self.flat.data.copy()), placement=self.placement)
        r = self.reparam
        return PrefixParameters(
            self.prefix_len, self.n_layers, self.d_model,
            reparam=Reparam(*(Tensor(t.data.copy()) for t in (r.small, r.w1, r.b1, r.w2, r.b2))),
            placement=self.placement,
        )


def materialize(params: PrefixParameters) -> ActivationTrace:
    """Reshape the prefix matrix into per-layer (1, P, d_model) keys and values."""
    m = params.matrix()
    p, d, n = params.prefix_len, params.d_model, params.n_layers
    if m.shape != (p, n * 2 * d):
        raise ValueError(f"prefix matrix has shape {m.shape}, expected {(p, n * 2 * d)}")
    blocks = m.reshape(1, p, n * 2, d)
    keys = [blocks[:, :, 2 * j, :] for j in range(n)]
    values = [blocks[:, :, 2 * j + 1, :] for j in range(n)]
    if not m.requires_grad:
        keys = [k.data for k in keys]
        values = [v.data for v in values]
    return ActivationTrace(keys, values, None, None)


def drop_reparametrization(params: PrefixParameters) -> PrefixParameters:
    """Evaluate the MLP once and return a flat prefix with the same matrix."""
    if params.is_flat:
        raise ValueError("prefix is already flat")
    flat = params.matrix().data.copy()
    return PrefixParameters(params.prefix_len, params.n_layers, params.d_model,
                            flat=Tensor(flat), placement=params.placement)


def init_random(
    prefix_len: int,
    cfg: ModelConfig,
    seed: int = 0,
    scale: float = 1.0,
    placement: Placement = Placement.PREFIX,
) -> PrefixParameters:
    """Flat prefix with entries drawn from Uniform(0, 1) * scale."""
    rng = np.random.default_rng(seed)
    flat = rng.uniform(0.0, 1.0, size=(prefix_len, cfg.kv_width)) * scale
    return PrefixParameters(prefix_len, cfg.n_layers, cfg.d_model, flat=Tensor(flat), placement=placement)


def init_reparam(
    prefix_len: int,
    cfg: ModelConfig,
    seed: int = 0,
    width: int = DEFAULT_REPARAM_WIDTH,
    small_scale: float = 0.1,
    placement: Placement = Placement.PREFIX,
) -> PrefixParameters:
    """Reparametrized prefix: P' ~ Uniform(0, 1) * small_scale, MLP with fan-in scaling."""
    rng = np.random.default_rng(seed)
    k, out = width, cfg.kv_width
    small = rng.uniform(0.0, 1.0, size=(prefix_len, k)) * small_scale
    w1 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, k))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, out))
    r = Reparam(Tensor(small), Tensor(w1), Tensor(np.zeros(k)), Tensor(w2), Tensor(np.zeros(out)))
    return PrefixParameters(prefix_len, cfg.n_layers, cfg.d_model, reparam=r, placement=placement)


def init_from_tokens(tokens, model: ModelParameters, prefix_len: Optional[int] = None) -> PrefixParameters:
    """Flat prefix holding the activations the frozen model computes for ``tokens``."""
    tokens = list(tokens)
    if prefix_len is not None and prefix_len != len(tokens):
        raise ValueError(f"prefix_len={prefix_len} but {len(tokens)} tokens given")
    if not tokens:
        raise ValueError("need at least one token")
    trace = collect_activations(model, tokens)
    cfg = model.config
    return PrefixParameters(len(tokens), cfg.n_layers, cfg.d_model, flat=Tensor(trace.flatten_rows(0)))


def from_trace(trace: ActivationTrace, row: int = 0) -> PrefixParameters:
    """Lift the key/values stored in ``trace`` into a flat prefix."""
    flat = trace.flatten_rows(row)
    return PrefixParameters(trace.length, trace.n_layers, trace.width, flat=Tensor(flat.copy()))


# ----------------------------------------------------------------------------
# embedding-only ablation
# ----------------------------------------------------------------------------


@dataclass
class EmbeddingPrefix:
    """Free input-embedding rows run through the frozen transformer like real tokens."""

    rows: Tensor  # (prefix_len, d_model)

    @property
    def prefix_len(self) -> int:
        return self.rows.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"prefix.emb": self.rows}

    @classmethod
    def from_tokens(cls, tokens, model: ModelParameters) -> "EmbeddingPrefix":
        ids = np.asarray(list(tokens), dtype=np.int64)
        return cls(Tensor(model["tok_emb"].data[ids].copy()))

    @classmethod
    def random(cls, prefix_len: int, cfg: ModelConfig, seed: int = 0, scale: float = 0.02) -> "EmbeddingPrefix":
        rng = np.random.default_rng(seed)
        return cls(Tensor(rng.normal(0.0, scale, size=(prefix_len, cfg.d_model))))


def embedding_prefix_trace(emb: EmbeddingPrefix, model: ModelParameters, batch: int = 1) -> ActivationTrace:
    """Key/values the frozen model computes at the embedding-prefix slots."""
    rows = emb.rows.reshape(1, emb.prefix_len, emb.rows.shape[1])
    out = forward_lm(model, input_embeds=rows)
    return out.trace.expand(batch) if batch != 1 else out.trace


def embedding_only_forward(emb: EmbeddingPrefix, tokens, model: ModelParameters):
    """Logits for ``tokens`` with ``emb`` rows entering layer 0 ahead of them."""
    if emb.prefix_len == 0:
        return forward_lm(model, tokens).logits
    return forward_lm(model, tokens, embedding_prefix_trace(emb, model)).logits


def lift_embedding_prefix(emb: EmbeddingPrefix, model: ModelParameters) -> PrefixParameters:
    """The flat prefix whose injected key/values equal what ``emb`` induces."""
    trace = embedding_prefix_trace(emb, model).detach()
    return from_trace(trace)


# ----------------------------------------------------------------------------
# infix
# ----------------------------------------------------------------------------


def infix_forward(params: PrefixParameters, x_tokens, y_tokens, model: ModelParameters):
    """Logits over ``[x; Infix; y]`` for the x and y positions.

    x is run first with no knowledge of the infix; the infix slots are then
    appended to x's key/values and y attends to both.  Returns
    ``(x_logits, y_logits)``.
    """
    x_out = forward_lm(model, x_tokens)
    ctx = x_out.trace
    if params.prefix_len:
        ctx = ActivationTrace.concat(ctx, materialize(params).expand(ctx.batch))
    y_out = forward_lm(model, y_tokens, ctx)
    return x_out.logits, y_out.logits


# ----------------------------------------------------------------------------
# checkpoint I/O
# ----------------------------------------------------------------------------
# b"PFXP" | version | prefix_len | n_layers | d_model | placement     (u32 LE)
# [ENCDEC_DOUBLE only: decoder prefix_len (u32)]
# matrix rows, f32 LE row-major (encoder matrix then decoder matrix for ENCDEC_DOUBLE)


def dump_prefix(params: PrefixParameters, decoder: Optional[PrefixParameters] = None) -> bytes:
    if not params.is_flat or (decoder is not None and not decoder.is_flat):
        raise ValueError("drop_reparametrization before saving; reparam weights are never serialized")
    buf = io.BytesIO()
    buf.write(PREFIX_MAGIC)
    buf.write(struct.pack("<5I", PREFIX_FORMAT_VERSION, params.prefix_len, params.n_layers,
                          params.d_model, int(params.placement)))
    if params.placement == Placement.ENCDEC_DOUBLE:
        if decoder is None:
            raise ValueError("ENCDEC_DOUBLE checkpoints need the decoder prefix")
        buf.write(struct.pack("<I", decoder.prefix_len))
    buf.write(np.ascontiguousarray(params.flat.data, dtype="<f4").tobytes())
    if params.placement == Placement.ENCDEC_DOUBLE:
        buf.write(np.ascontiguousarray(decoder.flat.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_prefix(path, params: PrefixParameters, decoder: Optional[PrefixParameters] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_prefix(params, decoder))


def parse_prefix(raw: bytes, dtype=np.float64):
    """Returns a flat prefix, or an (encoder, decoder) pair for ENCDEC_DOUBLE."""
    fh = io.BytesIO(raw)
    if fh.read(4) != PREFIX_MAGIC:
        raise CheckpointError("not a prefix checkpoint (bad magic)")
    version, plen, n_layers, d_model, placement = _unpack(fh, "<5I")
    if version != PREFIX_FORMAT_VERSION:
        raise CheckpointError(f"unsupported prefix checkpoint version {version}")
    try:
        placement = Placement(placement)
    except ValueError as exc:
        raise CheckpointError(f"unknown placement {placement}") from exc
    dec_len = _unpack(fh, "<I")[0] if placement == Placement.ENCDEC_DOUBLE else None
    width = n_layers * 2 * d_model

    def read_matrix(rows):
        n = rows * width * 4
        data = fh.read(n)
        if len(data) != n:
            raise CheckpointError("truncated prefix matrix")
        flat = np.frombuffer(data, dtype="<f4").reshape(rows, width).astype(dtype)
        return PrefixParameters(rows, n_layers, d_model, flat=Tensor(flat), placement=placement)

    enc = read_matrix(plen)
    if dec_len is not None:
        dec = read_matrix(dec_len)
        out = (enc, dec)
    else:
        out = enc
    if fh.read(1):
        raise CheckpointError("trailing bytes after prefix matrix")
    return out


def load_prefix(path, dtype=np.float64):
    with open(path, "rb") as fh:
        return parse_prefix(fh.read(), dtype)
