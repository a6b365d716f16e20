"""Tuning strategies and the model wrapper they produce.

:func:`apply_strategy` turns a pretrained :class:`ModelParameters` plus a
:class:`TuningStrategy` into a :class:`TunedModel`: the trainable tensors, the
modified forward pass used for the loss, and the incremental decoding
interface (``start`` / ``step``) used by greedy and beam search.

Full and top-2 fine-tuning work on a private copy of the weights, so the
shared frozen model is never modified by any strategy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    ActivationTrace,
    AdapterSection,
    ModelConfig,
    ModelParameters,
    count_parameters,
    decode,
    encode,
    forward_lm,
    parameter_layout,
)
from .prefix import (
    EmbeddingPrefix,
    Placement,
    PrefixParameters,
    drop_reparametrization,
    embedding_prefix_trace,
    init_random,
    init_reparam,
    materialize,
)

KINDS = ("finetune", "finetune_top2", "adapter", "prefix", "embedding")


@dataclass(frozen=True)
class TuningStrategy:
    kind: str
    prefix_len: int = 0
    placement: Placement = Placement.PREFIX
    reparam: bool = True
    bottleneck: int = 0
    dec_prefix_len: Optional[int] = None  # ENCDEC_DOUBLE only; defaults to prefix_len

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if self.kind == "adapter" and self.bottleneck < 1:
            raise ValueError("adapter bottleneck must be >= 1")
        if self.kind in ("prefix", "embedding") and self.prefix_len < 0:
            raise ValueError("prefix_len must be >= 0")

    @classmethod
    def fine_tune_all(cls) -> "TuningStrategy":
        return cls("finetune")

    @classmethod
    def fine_tune_top2(cls) -> "TuningStrategy":
        return cls("finetune_top2")

    @classmethod
    def adapter(cls, bottleneck: int) -> "TuningStrategy":
        return cls("adapter", bottleneck=bottleneck)

    @classmethod
    def prefix_tune(cls, prefix_len: int = 10, placement: Placement = Placement.PREFIX,
                    reparam: bool = True, dec_prefix_len: Optional[int] = None) -> "TuningStrategy":
        return cls("prefix", prefix_len=prefix_len, placement=Placement(placement), reparam=reparam,
                   dec_prefix_len=dec_prefix_len)

    @classmethod
    def embedding_only(cls, prefix_len: int = 10) -> "TuningStrategy":
        return cls("embedding", prefix_len=prefix_len)

    @property
    def label(self) -> str:
        if self.kind == "adapter":
            return f"adapter-{self.bottleneck}"
        if self.kind == "embedding":
            return f"emb-{self.prefix_len}"
        if self.kind == "prefix":
            tag = {Placement.PREFIX: "prefix", Placement.INFIX: "infix",
                   Placement.ENCDEC_DOUBLE: "prefix2"}[self.placement]
            return f"{tag}-{self.prefix_len}"
        return self.kind

    @property
    def freezes_lm(self) -> bool:
        return self.kind in ("adapter", "prefix", "embedding")


# ----------------------------------------------------------------------------
# adapters
# ----------------------------------------------------------------------------


def adapter_sites(cfg: ModelConfig) -> list[str]:
    if cfg.arch != "decoder":
        raise ValueError("adapters are implemented for decoder-only models")
    return [f"layers.{j}.{s}" for j in range(cfg.n_layers) for s in ("attn", "ff")]


def init_adapters(cfg: ModelConfig, bottleneck: int, seed: int = 0, dtype=np.float64) -> dict:
    """Houlsby-style residual bottlenecks; zero up-projection makes them the identity."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    out = {}
    for site in adapter_sites(cfg):
        out[site] = {
            "down": Tensor(rng.normal(0.0, 0.02, size=(d, bottleneck)).astype(dtype)),
            "down_b": Tensor(np.zeros(bottleneck, dtype=dtype)),
            "up": Tensor(np.zeros((bottleneck, d), dtype=dtype)),
            "up_b": Tensor(np.zeros(d, dtype=dtype)),
        }
    return out


def adapter_tensors(adapters: dict) -> dict[str, Tensor]:
    return {f"{site}.adapter.{k}": t for site, parts in adapters.items() for k, t in parts.items()}


def adapters_to_section(adapters: dict, bottleneck: int) -> AdapterSection:
    return AdapterSection(bottleneck, {n: t.data for n, t in adapter_tensors(adapters).items()})


def adapters_from_section(section: AdapterSection) -> dict:
    out: dict = {}
    for name, arr in section.tensors.items():
        site, _, part = name.partition(".adapter.")
        out.setdefault(site, {})[part] = Tensor(arr)
    return out


# ----------------------------------------------------------------------------
# parameter accounting
# ----------------------------------------------------------------------------


def top2_names(cfg: ModelConfig) -> list[str]:
    stack = "dec" if cfg.arch == "encdec" else "layers"
    top = {f"{stack}.{cfg.n_layers - 1}.", f"{stack}.{max(cfg.n_layers - 2, 0)}."}
    names = [n for n, _ in parameter_layout(cfg) if any(n.startswith(t) for t in top)]
    return names + ["ln_f.g", "ln_f.b", "lm_head"]


def adapter_count(cfg: ModelConfig, bottleneck: int) -> int:
    d = cfg.d_model
    return len(adapter_sites(cfg)) * (2 * d * bottleneck + bottleneck + d)


def count_trainable(strategy: TuningStrategy, cfg: ModelConfig) -> tuple[int, float]:
    """Task-specific scalars a strategy stores, and their fraction of the model.

    Prefix strategies count the exported flat prefix (the reparametrization is
    training-only, see :func:`count_reparam_training`).
    """
    total = count_parameters(cfg)
    k = strategy.kind
    if k == "finetune":
        n = total
    elif k == "finetune_top2":
        shapes = dict(parameter_layout(cfg))
        n = int(sum(np.prod(shapes[name]) for name in top2_names(cfg)))
    elif k == "adapter":
        n = adapter_count(cfg, strategy.bottleneck)
    elif k == "prefix":
        n = strategy.prefix_len * cfg.kv_width
        if strategy.placement == Placement.ENCDEC_DOUBLE:
            dec = strategy.prefix_len if strategy.dec_prefix_len is None else strategy.dec_prefix_len
            n += dec * cfg.kv_width
    elif k == "embedding":
        n = strategy.prefix_len * cfg.d_model
    else:  # pragma: no cover - guarded by TuningStrategy
        raise ValueError(k)
    return int(n), n / total


def count_reparam_training(prefix_len: int, cfg: ModelConfig, width: int) -> int:
    return prefix_len * width + width * width + width + width * cfg.kv_width + cfg.kv_width


def match_adapter_bottleneck(target: int, cfg: ModelConfig, max_bottleneck: Optional[int] = None) -> int:
    """Bottleneck whose adapter count is closest to ``target`` (ties -> smaller)."""
    hi = max_bottleneck or cfg.d_model
    best, best_gap = 1, None
    for b in range(1, hi + 1):
        gap = abs(adapter_count(cfg, b) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = b, gap
    return best


# ----------------------------------------------------------------------------
# batches
# ----------------------------------------------------------------------------


@dataclass
class Batch:
    """Right-padded decoder-only layout: inputs ``x + [sep] + y``, labels shifted by one."""

    src: np.ndarray  # (B, Ts) right-padded source ids
    src_len: np.ndarray
    tgt_in: np.ndarray  # (B, Ty) [sep] + y, right-padded
    tgt_out: np.ndarray  # (B, Ty) y + [eos]
    tgt_mask: np.ndarray  # (B, Ty) valid target positions

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(examples: Sequence, sep_id: int, eos_id: int, pad_id: int) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    if any(len(e.target) == 0 for e in examples):
        raise ValueError("every example needs a nonempty target")
    bsz = len(examples)
    ts = max(len(e.source) for e in examples)
    ty = max(len(e.target) for e in examples) + 1
    src = np.full((bsz, ts), pad_id, dtype=np.int64)
    tin = np.full((bsz, ty), pad_id, dtype=np.int64)
    tout = np.full((bsz, ty), pad_id, dtype=np.int64)
    tmask = np.zeros((bsz, ty), dtype=bool)
    src_len = np.zeros(bsz, dtype=np.int64)
    for b, e in enumerate(examples):
        src[b, : len(e.source)] = e.source
        src_len[b] = len(e.source)
        n = len(e.target) + 1
        tin[b, :n] = (sep_id,) + tuple(e.target)
        tout[b, :n] = tuple(e.target) + (eos_id,)
        tmask[b, :n] = True
    return Batch(src, src_len, tin, tout, tmask)


def joined(batch: Batch, pad_id: int):
    """Concatenate source and target halves per row (no inner padding)."""
    bsz = batch.size
    lens = batch.src_len + batch.tgt_mask.sum(axis=1)
    t = int(lens.max())
    tokens = np.full((bsz, t), pad_id, dtype=np.int64)
    labels = np.full((bsz, t), pad_id, dtype=np.int64)
    tgt_mask = np.zeros((bsz, t), dtype=bool)
    tok_mask = np.zeros((bsz, t), dtype=bool)
    for b in range(bsz):
        s = int(batch.src_len[b])
        n = int(batch.tgt_mask[b].sum())
        tokens[b, :s] = batch.src[b, :s]
        tokens[b, s: s + n] = batch.tgt_in[b, :n]
        labels[b, : s - 1] = batch.src[b, 1:s]
        labels[b, s - 1] = batch.tgt_in[b, 0] if s else pad_id
        labels[b, s: s + n] = batch.tgt_out[b, :n]
        tgt_mask[b, s: s + n] = True
        tok_mask[b, : s + n] = True
    return tokens, labels, tgt_mask, tok_mask


# ----------------------------------------------------------------------------
# tuned model
# ----------------------------------------------------------------------------


@dataclass
class DecodeState:
    trace: ActivationTrace
    memory: Optional[Tensor] = None
    memory_mask: Optional[np.ndarray] = None


class TunedModel:
    """A pretrained model under one tuning strategy."""

    def __init__(
        self,
        model: ModelParameters,
        strategy: TuningStrategy,
        *,
        prefix: Optional[PrefixParameters] = None,
        dec_prefix: Optional[PrefixParameters] = None,
        emb_prefix: Optional[EmbeddingPrefix] = None,
        adapters: Optional[dict] = None,
        sep_id: int = 2,
        eos_id: int = 1,
        pad_id: int = 0,
    ):
        self.model = model
        self.strategy = strategy
        self.prefix = prefix
        self.dec_prefix = dec_prefix
        self.emb_prefix = emb_prefix
        self.adapters = adapters
        self.sep_id, self.eos_id, self.pad_id = sep_id, eos_id, pad_id

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    # -- parameter sets --------------------------------------------------

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.model.trainable())
        if self.prefix is not None:
            out.update({f"enc.{k}" if self.dec_prefix is not None else k: v
                        for k, v in self.prefix.parameters().items()})
        if self.dec_prefix is not None:
            out.update({f"dec.{k}": v for k, v in self.dec_prefix.parameters().items()})
        if self.emb_prefix is not None:
            out.update(self.emb_prefix.parameters())
        if self.adapters is not None:
            out.update(adapter_tensors(self.adapters))
        return {k: v for k, v in out.items() if v.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.model if not t.requires_grad}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.trainable().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        params = self.trainable()
        for n, arr in snap.items():
            params[n].data = arr.copy()

    # -- conditioning ------------------------------------------------------

    def _context(self, batch: int) -> Optional[ActivationTrace]:
        """Injected slots that precede the source for prefix-style strategies."""
        k = self.strategy.kind
        if k == "prefix" and self.strategy.placement == Placement.PREFIX and self.prefix.prefix_len:
            return materialize(self.prefix).expand(batch)
        if k == "embedding" and self.emb_prefix.prefix_len:
            return embedding_prefix_trace(self.emb_prefix, self.model, batch)
        return None

    def _infix(self, batch: int) -> Optional[ActivationTrace]:
        if self.strategy.kind == "prefix" and self.strategy.placement == Placement.INFIX and self.prefix.prefix_len:
            return materialize(self.prefix).expand(batch)
        return None

    def _enc_dec_prefixes(self, batch: int):
        enc = dec = None
        if self.strategy.kind == "prefix":
            if self.prefix is not None and self.prefix.prefix_len:
                enc = materialize(self.prefix).expand(batch)
            if self.dec_prefix is not None and self.dec_prefix.prefix_len:
                dec = materialize(self.dec_prefix).expand(batch)
        return enc, dec

    # -- training forward ----------------------------------------------------

    def batch_logits(self, batch: Batch, loss_on: str = "target"):
        """(logits, labels, mask) for a padded batch.

        ``loss_on="target"`` masks everything but y and eos; ``"all"`` trains
        every real next-token prediction (the pretraining objective).
        """
        bsz = batch.size
        if self.config.arch == "encdec":
            enc, dec = self._enc_dec_prefixes(bsz)
            src_mask = np.arange(batch.src.shape[1])[None, :] < batch.src_len[:, None]
            memory, _, mmask = encode(self.model, batch.src, enc, src_mask)
            out = decode(self.model, batch.tgt_in, memory, mmask, dec, batch.tgt_mask)
            return out.logits, batch.tgt_out, batch.tgt_mask
        if self.strategy.kind == "prefix" and self.strategy.placement == Placement.INFIX:
            src_mask = np.arange(batch.src.shape[1])[None, :] < batch.src_len[:, None]
            ctx = forward_lm(self.model, batch.src, token_mask=src_mask, adapters=self.adapters).trace
            infix = self._infix(bsz)
            if infix is not None:
                ctx = ActivationTrace.concat(ctx, infix)
            out = forward_lm(self.model, batch.tgt_in, ctx, token_mask=batch.tgt_mask, adapters=self.adapters)
            return out.logits, batch.tgt_out, batch.tgt_mask
        tokens, labels, tgt_mask, tok_mask = joined(batch, self.pad_id)
        out = forward_lm(self.model, tokens, self._context(bsz), token_mask=tok_mask, adapters=self.adapters)
        if loss_on == "all":
            mask = tok_mask.copy()
            mask[np.arange(bsz), tok_mask.sum(axis=1) - 1] = tgt_mask[np.arange(bsz), tok_mask.sum(axis=1) - 1]
            return out.logits, labels, mask
        return out.logits, labels, tgt_mask

    def loss(self, batch: Batch, loss_on: str = "target") -> Tensor:
        logits, labels, mask = self.batch_logits(batch, loss_on)
        return ad.cross_entropy(logits, labels, mask)

    # -- incremental decoding --------------------------------------------------

    def start(self, source: Sequence[int]):
        """Consume the conditioning and ``[sep]``; returns (next-token logits, state)."""
        src = np.asarray(list(source), dtype=np.int64)[None, :]
        sep = np.array([[self.sep_id]], dtype=np.int64)
        if self.config.arch == "encdec":
            enc, dec = self._enc_dec_prefixes(1)
            memory, _, mmask = encode(self.model, src, enc)
            out = decode(self.model, sep, memory, mmask, dec)
            return out.logits.data[0, -1], DecodeState(out.trace.detach(), memory, mmask)
        if self.strategy.kind == "prefix" and self.strategy.placement == Placement.INFIX:
            ctx = forward_lm(self.model, src, adapters=self.adapters).trace
            infix = self._infix(1)
            if infix is not None:
                ctx = ActivationTrace.concat(ctx, infix)
            out = forward_lm(self.model, sep, ctx, adapters=self.adapters)
        else:
            tokens = np.concatenate([src, sep], axis=1)
            out = forward_lm(self.model, tokens, self._context(1), adapters=self.adapters)
        return out.logits.data[0, -1], DecodeState(out.trace.detach())

    def step(self, state: DecodeState, token: int):
        tok = np.array([[int(token)]], dtype=np.int64)
        if self.config.arch == "encdec":
            out = decode(self.model, tok, state.memory, state.memory_mask, state.trace)
            return out.logits.data[0, -1], DecodeState(out.trace.detach(), state.memory, state.memory_mask)
        out = forward_lm(self.model, tok, state.trace, adapters=self.adapters)
        return out.logits.data[0, -1], DecodeState(out.trace.detach())

    # -- export ------------------------------------------------------------

    def exported_prefix(self) -> PrefixParameters:
        if self.prefix is None:
            raise ValueError(f"strategy {self.strategy.label} has no prefix")
        return self.prefix if self.prefix.is_flat else drop_reparametrization(self.prefix)

    def exported_dec_prefix(self) -> Optional[PrefixParameters]:
        if self.dec_prefix is None:
            return None
        return self.dec_prefix if self.dec_prefix.is_flat else drop_reparametrization(self.dec_prefix)

    def with_prefix(self, prefix: PrefixParameters, dec_prefix: Optional[PrefixParameters] = None) -> "TunedModel":
        strategy = replace(self.strategy, kind="prefix", prefix_len=prefix.prefix_len, placement=prefix.placement,
                           reparam=not prefix.is_flat)
        return TunedModel(self.model, strategy, prefix=prefix, dec_prefix=dec_prefix,
                          sep_id=self.sep_id, eos_id=self.eos_id, pad_id=self.pad_id)


def apply_strategy(
    model: ModelParameters,
    strategy: TuningStrategy,
    *,
    seed: int = 0,
    special_ids: tuple = (2, 1, 0),
    prefix: Optional[PrefixParameters] = None,
    dec_prefix: Optional[PrefixParameters] = None,
    emb_prefix: Optional[EmbeddingPrefix] = None,
    reparam_width: Optional[int] = None,
) -> TunedModel:
    """Set up the trainable parameters and forward modification for ``strategy``.

    ``special_ids`` is ``(sep, eos, pad)``.  Explicit ``prefix`` /
    ``emb_prefix`` arguments override the default initializations.
    """
    cfg = model.config
    sep, eos, pad = special_ids
    kw = dict(sep_id=sep, eos_id=eos, pad_id=pad)
    k = strategy.kind
    if k == "finetune":
        tuned = model.copy()
        tuned.set_trainable()
        return TunedModel(tuned, strategy, **kw)
    if k == "finetune_top2":
        tuned = model.copy()
        tuned.set_trainable(top2_names(cfg))
        return TunedModel(tuned, strategy, **kw)
    model.freeze()
    dtype = model.dtype
    if k == "adapter":
        adapters = init_adapters(cfg, strategy.bottleneck, seed, dtype)
        for t in adapter_tensors(adapters).values():
            t.requires_grad = True
        return TunedModel(model, strategy, adapters=adapters, **kw)
    if k == "embedding":
        if cfg.arch != "decoder":
            raise ValueError("embedding-only ablation is implemented for decoder-only models")
        emb = emb_prefix if emb_prefix is not None else EmbeddingPrefix.random(strategy.prefix_len, cfg, seed)
        emb.rows.data = emb.rows.data.astype(dtype)
        emb.rows.requires_grad = True
        return TunedModel(model, strategy, emb_prefix=emb, **kw)
    # prefix
    placement = strategy.placement
    if placement == Placement.ENCDEC_DOUBLE and cfg.arch != "encdec":
        raise ValueError("ENCDEC_DOUBLE placement needs an encoder-decoder model")
    if placement != Placement.ENCDEC_DOUBLE and cfg.arch != "decoder":
        raise ValueError(f"{placement.name} placement needs a decoder-only model")

    def make(plen, s):
        if strategy.reparam:
            extra = {} if reparam_width is None else {"width": reparam_width}
            p = init_reparam(plen, cfg, seed=s, placement=placement, **extra)
        else:
            p = init_random(plen, cfg, seed=s, scale=1.0, placement=placement)
        return p

    if prefix is None:
        prefix = make(strategy.prefix_len, seed)
    if placement == Placement.ENCDEC_DOUBLE and dec_prefix is None:
        dplen = strategy.prefix_len if strategy.dec_prefix_len is None else strategy.dec_prefix_len
        dec_prefix = make(dplen, seed + 7919)
    for p in (prefix, dec_prefix):
        if p is None:
            continue
        if not p.compatible_with(cfg):
            raise ValueError("prefix shape does not match the model")
        for t in p.parameters().values():
            t.data = t.data.astype(dtype)
        p.set_trainable(True)
    return TunedModel(model, strategy, prefix=prefix, dec_prefix=dec_prefix, **kw)


def parse_strategy(name: str, prefix_len: int = 10, bottleneck: int = 0, reparam: bool = True) -> TuningStrategy:
    """CLI names: finetune, finetune_top2 (ft-top2), adapter, prefix, infix, prefix2, embedding (emb)."""
    name = name.lower().replace("-", "_")
    if name in ("finetune", "fine_tune", "ft"):
        return TuningStrategy.fine_tune_all()
    if name in ("finetune_top2", "ft_top2", "top2"):
        return TuningStrategy.fine_tune_top2()
    if name == "adapter":
        return TuningStrategy.adapter(bottleneck)
    if name == "prefix":
        return TuningStrategy.prefix_tune(prefix_len, Placement.PREFIX, reparam)
    if name == "infix":
        return TuningStrategy.prefix_tune(prefix_len, Placement.INFIX, reparam)
    if name in ("prefix2", "encdec_prefix"):
        return TuningStrategy.prefix_tune(prefix_len, Placement.ENCDEC_DOUBLE, reparam)
    if name in ("embedding", "emb"):
        return TuningStrategy.embedding_only(prefix_len)
    raise ValueError(f"unknown strategy {name!r}")
