"""Many task prefixes served against one shared frozen model.

A batch may mix tasks: every row gets the key/values of its own task's
prefix, padded on the right of the prefix block and masked, followed by the
left-padded source and ``[sep]``.  Positions are counted per row over valid
slots only, so each row sees exactly what a standalone run would see.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .model import ActivationTrace, ModelParameters, count_parameters, dump_model, forward_lm
from .prefix import Placement, PrefixParameters, dump_prefix, load_prefix, materialize, parse_prefix

F32_BYTES = 4


class RegistryError(KeyError):
    pass


@dataclass
class RequestResult:
    task_id: str
    tokens: tuple = ()
    error: Optional[str] = None
    logits: Optional[list] = None  # per generated step, (V,) arrays

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class StorageReport:
    model_scalars: int
    model_bytes: int
    task_scalars: dict = field(default_factory=dict)
    task_bytes: dict = field(default_factory=dict)
    task_file_bytes: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return self.model_bytes + sum(self.task_bytes.values())

    def ratio(self, task_id: str) -> float:
        """Shared model bytes per byte of this task's prefix."""
        return self.model_bytes / self.task_bytes[task_id]

    def fraction(self, task_id: str) -> float:
        return self.task_bytes[task_id] / self.model_bytes

    def finetune_total_bytes(self) -> int:
        """Bytes if every task kept its own fine-tuned model copy instead."""
        return self.model_bytes * max(len(self.task_bytes), 1)

    def rows(self) -> list[dict]:
        out = [{"item": "shared_model", "scalars": self.model_scalars, "bytes": self.model_bytes,
                "fraction_of_model": 1.0}]
        for t in sorted(self.task_bytes):
            out.append({"item": f"prefix:{t}", "scalars": self.task_scalars[t], "bytes": self.task_bytes[t],
                        "fraction_of_model": self.fraction(t)})
        out.append({"item": "finetune_per_task", "scalars": self.model_scalars, "bytes": self.model_bytes,
                    "fraction_of_model": 1.0})
        return out


class PrefixRegistry:
    """task_id -> flat prefix, all sharing ``model``.

    Writers (register/remove) take an exclusive lock; a batch snapshots the
    prefixes it needs under the same lock, so a concurrent removal never
    changes an in-flight batch.
    """

    def __init__(self, model: ModelParameters, sep_id: int = 2, eos_id: int = 1, pad_id: int = 0):
        if model.config.arch != "decoder":
            raise ValueError("the registry serves decoder-only models")
        self.model = model
        self.sep_id, self.eos_id, self.pad_id = sep_id, eos_id, pad_id
        self._prefixes: dict[str, PrefixParameters] = {}
        self._traces: dict[str, ActivationTrace] = {}
        self._lock = threading.Lock()

    def __contains__(self, task_id: str) -> bool:
        return task_id in self._prefixes

    def __len__(self) -> int:
        return len(self._prefixes)

    @property
    def tasks(self) -> list[str]:
        return sorted(self._prefixes)

    def register(self, task_id: str, checkpoint: Union[PrefixParameters, bytes, str, os.PathLike]) -> None:
        if isinstance(checkpoint, PrefixParameters):
            prefix = checkpoint.copy()
        elif isinstance(checkpoint, (bytes, bytearray)):
            prefix = parse_prefix(bytes(checkpoint), dtype=self.model.dtype)
        else:
            prefix = load_prefix(checkpoint, dtype=self.model.dtype)
        if isinstance(prefix, tuple):
            if prefix[1] is not None:
                raise ValueError("encoder-decoder prefixes cannot be served here")
            prefix = prefix[0]
        if not prefix.is_flat:
            raise ValueError("register a flat prefix (drop the reparametrization first)")
        if prefix.placement != Placement.PREFIX:
            raise ValueError(f"cannot serve a {prefix.placement.name} prefix")
        if not prefix.compatible_with(self.model.config):
            raise ValueError(f"prefix for task {task_id!r} does not match the model shape")
        prefix.set_trainable(False)
        trace = materialize(prefix)
        with self._lock:
            if task_id in self._prefixes:
                raise ValueError(f"task {task_id!r} is already registered")
            self._prefixes[task_id] = prefix
            self._traces[task_id] = trace

    def remove(self, task_id: str) -> None:
        with self._lock:
            if task_id not in self._prefixes:
                raise RegistryError(task_id)
            del self._prefixes[task_id]
            del self._traces[task_id]

    def get(self, task_id: str) -> PrefixParameters:
        try:
            return self._prefixes[task_id]
        except KeyError:
            raise RegistryError(task_id) from None

    def storage_report(self) -> StorageReport:
        cfg = self.model.config
        n_model = count_parameters(cfg)
        rep = StorageReport(n_model, n_model * F32_BYTES)
        for t, p in self._prefixes.items():
            rep.task_scalars[t] = p.n_stored()
            rep.task_bytes[t] = p.n_stored() * F32_BYTES
            rep.task_file_bytes[t] = len(dump_prefix(p))
        return rep

    def model_file_bytes(self) -> int:
        return len(dump_model(self.model))

    # ------------------------------------------------------------------
    # serving
    # ------------------------------------------------------------------

    def batched_infer(
        self,
        requests: Sequence[tuple],
        max_len: int = 48,
        keep_logits: bool = False,
        batch_size: Optional[int] = None,
    ) -> list[RequestResult]:
        """Greedy-decode ``(task_id, source_ids)`` requests, in input order.

        Unknown task ids produce a per-request error; the other rows still run.
        """
        results = [RequestResult(t) for t, _ in requests]
        with self._lock:
            traces = {t: self._traces[t] for t, _ in requests if t in self._traces}
        live = []
        for i, (t, src) in enumerate(requests):
            if t not in traces:
                results[i].error = f"unknown task id {t!r}"
            else:
                live.append(i)
        step = batch_size or max(len(live), 1)
        for s in range(0, len(live), step):
            chunk = live[s: s + step]
            outs = self._greedy_batch([traces[requests[i][0]] for i in chunk],
                                      [list(requests[i][1]) for i in chunk], max_len, keep_logits)
            for i, (toks, lg) in zip(chunk, outs):
                results[i].tokens = toks
                results[i].logits = lg
        return results

    def _greedy_batch(self, traces: list, sources: list, max_len: int, keep_logits: bool):
        bsz = len(traces)
        cfg = self.model.config
        dtype = self.model.dtype
        pmax = max(t.length for t in traces)
        keys = [np.zeros((bsz, pmax, cfg.d_model), dtype=dtype) for _ in range(cfg.n_layers)]
        values = [np.zeros((bsz, pmax, cfg.d_model), dtype=dtype) for _ in range(cfg.n_layers)]
        pmask = np.zeros((bsz, pmax), dtype=bool)
        for b, tr in enumerate(traces):
            n = tr.length
            pmask[b, :n] = True
            for j in range(cfg.n_layers):
                keys[j][b, :n] = np.asarray(tr.keys[j].data if hasattr(tr.keys[j], "data") else tr.keys[j])[0]
                values[j][b, :n] = np.asarray(tr.values[j].data if hasattr(tr.values[j], "data") else tr.values[j])[0]
        injected = ActivationTrace(keys, values, pmask, None) if pmax else None

        tmax = max(len(s) for s in sources) + 1
        tokens = np.full((bsz, tmax), self.pad_id, dtype=np.int64)
        tmask = np.zeros((bsz, tmax), dtype=bool)
        for b, src in enumerate(sources):
            seq = src + [self.sep_id]
            tokens[b, tmax - len(seq):] = seq
            tmask[b, tmax - len(seq):] = True
        out = forward_lm(self.model, tokens, injected, token_mask=tmask)
        logits = out.logits.data[:, -1]
        state = out.trace.detach()

        gen: list[list[int]] = [[] for _ in range(bsz)]
        kept: list[list] = [[] for _ in range(bsz)]
        done = np.zeros(bsz, dtype=bool)
        for t in range(max_len):
            nxt = np.argmax(logits, axis=1)
            for b in range(bsz):
                if done[b]:
                    continue
                if keep_logits:
                    kept[b].append(logits[b].copy())
                if nxt[b] == self.eos_id:
                    done[b] = True
                else:
                    gen[b].append(int(nxt[b]))
            if done.all() or t + 1 == max_len:
                break
            feed = np.where(done, self.eos_id, nxt)[:, None]
            out = forward_lm(self.model, feed, state, token_mask=~done[:, None])
            logits = out.logits.data[:, -1]
            state = out.trace.detach()
        return [(tuple(g), k if keep_logits else None) for g, k in zip(gen, kept)]


def read_requests(path) -> list[tuple[str, str]]:
    """``task_id<TAB>source`` per line; blank lines skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"line {lineno}: expected task_id<TAB>source")
            task, src = line.split("\t", 1)
            out.append((task, src))
    return out
