"""Synthetic E2E/WebNLG-style table-to-text data.

A table is a list of ``(key, value)`` fields whose first field is always
``name``.  Each category exposes its own subset of field types, so categories
differ in what their tables talk about.  Targets are realized from the fields
by one of several *styles*; a style fixes the head word, the per-field phrase
and the field order, so a target is a deterministic function of
``(fields, style)``.

The frozen LM is pretrained on a mixture of styles (optionally announced by an
instruction ``write <style-word>``).  A downstream task asks for one style with
no instruction, which is what a prefix has to supply.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

PAD, EOS, SEP = "<pad>", "<eos>", "<sep>"
COLON, BAR, STOP, AND, WRITE = ":", "|", ".", "and", "write"
SPECIALS = [PAD, EOS, SEP, COLON, BAR, STOP, AND, WRITE]

FIELD_KEYS = [
    "name", "food", "area", "price", "rating", "near", "family", "venue",
    "owner", "year", "city", "genre", "team", "league", "country", "language",
]
N_NAME_VALUES = 10
N_FIELD_VALUES = 5

STYLE_WORDS = ["plain", "formal", "brief", "casual"]
CONNECTIVES = [
    "is", "has", "with", "serves", "offers", "in", "the", "a", "near", "by",
    "from", "of", "located", "rated", "priced", "known", "for", "at", "run",
    "built", "plays", "speaks", "found", "called", "its", "sits", "beside",
    "close", "to", "under", "over", "style", "kind", "type", "made", "since",
    "around", "within", "along", "holds",
]
# "task-irrelevant" real words used by the initialization study
FILLER_WORDS = ["elephant", "banana", "divide", "purple", "river", "window", "seven", "cloud", "stone", "music"]

SCHEMA_VERSION = 1


class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class GenerationExample:
    fields: tuple  # ((key, value), ...)
    target: tuple  # target tokens
    category: str
    id: str
    style: int = 0

    def __post_init__(self):
        if not self.fields:
            raise ValueError("an example needs at least one field")
        if not self.target:
            raise ValueError("target must be nonempty")


class Vocab:
    """Bijective token <-> id map padded to a fixed size."""

    def __init__(self, tokens: Sequence[str], size: Optional[int] = None):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if size is not None:
            if len(tokens) > size:
                raise ValueError(f"{len(tokens)} tokens do not fit vocab_size={size}")
            tokens += [f"<unused{i}>" for i in range(size - len(tokens))]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode(self, toks: Iterable[str]) -> list[int]:
        try:
            return [self.index[t] for t in toks]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]


def field_values(key: str) -> list[str]:
    n = N_NAME_VALUES if key == "name" else N_FIELD_VALUES
    return [f"{key}{i}" for i in range(n)]


@dataclass
class TaskSpec:
    """Everything needed to generate and realize synthetic tables."""

    seed: int = 0
    n_categories: int = 14
    n_unseen: int = 5
    fields_per_category: int = 7
    n_styles: int = 4
    task_style: int = 3
    vocab_size: int = 200
    categories: list = field(default_factory=list)
    category_fields: dict = field(default_factory=dict)
    phrases: dict = field(default_factory=dict)  # (style, key) -> (before, after)
    heads: list = field(default_factory=list)
    joiners: list = field(default_factory=list)
    orders: list = field(default_factory=list)  # per style: key -> rank

    @property
    def n_field_types(self) -> int:
        return len(FIELD_KEYS)

    @property
    def seen_categories(self) -> list[str]:
        return self.categories[: self.n_categories - self.n_unseen]

    @property
    def unseen_categories(self) -> list[str]:
        return self.categories[self.n_categories - self.n_unseen:]

    def vocab(self) -> Vocab:
        toks = list(SPECIALS) + STYLE_WORDS[: self.n_styles]
        toks += FIELD_KEYS
        for k in FIELD_KEYS:
            toks += field_values(k)
        toks += [w for w in CONNECTIVES if w not in toks]
        toks += [w for w in FILLER_WORDS if w not in toks]
        return Vocab(toks, self.vocab_size)

    def instruction(self, style: int) -> list[str]:
        return [WRITE, STYLE_WORDS[style]]

    def realize(self, fields: Sequence[tuple], style: int) -> list[str]:
        name = dict(fields)["name"]
        rest = [(k, v) for k, v in fields if k != "name"]
        rest.sort(key=lambda kv: self.orders[style][kv[0]])
        out = [name, self.heads[style]]
        for i, (k, v) in enumerate(rest):
            if i:
                out.append(self.joiners[style])
            before, after = self.phrases[(style, k)]
            out += list(before) + [v] + list(after)
        out.append(STOP)
        return out


def make_task_spec(seed: int = 0, **overrides) -> TaskSpec:
    spec = TaskSpec(seed=seed, **overrides)
    if not 0 < spec.n_unseen < spec.n_categories:
        raise ValueError("need at least one seen and one unseen category")
    if spec.n_styles > len(STYLE_WORDS) or not 0 <= spec.task_style < spec.n_styles:
        raise ValueError("bad style configuration")
    rng = np.random.default_rng(seed)
    others = FIELD_KEYS[1:]
    spec.categories = [f"cat{i}" for i in range(spec.n_categories)]
    for c in spec.categories:
        picked = rng.choice(len(others), size=spec.fields_per_category, replace=False)
        spec.category_fields[c] = [others[i] for i in sorted(picked)]
    heads = ["is", "has", "offers", "sits"]
    joiners = [AND, "with", "by", "its"]
    for s in range(spec.n_styles):
        spec.heads.append(heads[s])
        spec.joiners.append(joiners[s])
        order = list(rng.permutation(len(others)))
        spec.orders.append({k: int(order[i]) for i, k in enumerate(others)})
        for k in others:
            n_before = int(rng.integers(1, 3))
            n_after = int(rng.integers(0, 2))
            words = rng.choice(len(CONNECTIVES), size=n_before + n_after, replace=False)
            words = [CONNECTIVES[w] for w in words]
            spec.phrases[(s, k)] = (tuple(words[:n_before]), tuple(words[n_before:]))
    return spec


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------

POOLS = ("downstream", "pretrain", "any")


def _pool_of(fields: Sequence[tuple]) -> str:
    key = "|".join(f"{k}={v}" for k, v in fields).encode("utf-8")
    return "downstream" if zlib.crc32(key) % 8 == 0 else "pretrain"


def sample_fields(spec: TaskSpec, category: str, rng: np.random.Generator) -> tuple:
    keys = spec.category_fields[category]
    n_other = int(rng.integers(2, 8))  # 3..8 fields including name
    n_other = min(n_other, len(keys))
    chosen = sorted(rng.choice(len(keys), size=n_other, replace=False))
    fields = [("name", field_values("name")[int(rng.integers(N_NAME_VALUES))])]
    for i in chosen:
        k = keys[i]
        fields.append((k, field_values(k)[int(rng.integers(N_FIELD_VALUES))]))
    return tuple(fields)


def generate_synthetic(
    spec: TaskSpec,
    n: int,
    seed: int,
    *,
    style: Optional[int] = None,
    categories: Optional[Sequence[str]] = None,
    pool: str = "downstream",
    style_weights: Optional[Sequence[float]] = None,
) -> list[GenerationExample]:
    """``n`` examples, deterministic in ``seed``.

    ``pool`` splits the space of tables in two by a hash of the fields, so the
    pretraining corpus and downstream data never share a table.  ``style``
    defaults to the task style; pass ``-1`` to sample from ``style_weights``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if pool not in POOLS:
        raise ValueError(f"pool must be one of {POOLS}")
    rng = np.random.default_rng(seed)
    cats = list(categories) if categories is not None else list(spec.categories)
    style = spec.task_style if style is None else style
    weights = None
    if style == -1:
        w = np.ones(spec.n_styles) if style_weights is None else np.asarray(style_weights, dtype=float)
        weights = w / w.sum()
    out = []
    while len(out) < n:
        cat = cats[int(rng.integers(len(cats)))]
        fields = sample_fields(spec, cat, rng)
        s = int(rng.choice(spec.n_styles, p=weights)) if weights is not None else style
        if pool != "any" and _pool_of(fields) != pool:
            continue
        out.append(GenerationExample(fields, tuple(spec.realize(fields, s)), cat, f"{seed}-{len(out)}", s))
    return out


def linearize(example: GenerationExample) -> list[str]:
    """``key : value | key : value ...`` in stored field order."""
    out = []
    for i, (k, v) in enumerate(example.fields):
        if i:
            out.append(BAR)
        out += [k, COLON, v]
    return out


def parse_linearized(tokens: Sequence[str]) -> tuple:
    fields, seg = [], []
    for tok in list(tokens) + [BAR]:
        if tok == BAR:
            if len(seg) != 3 or seg[1] != COLON:
                raise ValueError(f"malformed segment {seg!r}")
            fields.append((seg[0], seg[2]))
            seg = []
        else:
            seg.append(tok)
    return tuple(fields)


def split_seen_unseen(
    dataset: Sequence[GenerationExample],
    unseen_categories: Iterable[str],
    dev_fraction: float = 0.0,
    seed: int = 0,
):
    """(train, dev, test): train/dev from seen categories, test from unseen ones."""
    unseen = set(unseen_categories)
    if not unseen:
        raise ValueError("need at least one unseen category")
    seen_ex = [e for e in dataset if e.category not in unseen]
    test = [e for e in dataset if e.category in unseen]
    if not seen_ex or not test:
        raise ValueError("seen/unseen split leaves an empty side")
    n_dev = int(round(dev_fraction * len(seen_ex)))
    order = np.random.default_rng(seed).permutation(len(seen_ex))
    dev = [seen_ex[i] for i in sorted(order[:n_dev])]
    train = [seen_ex[i] for i in sorted(order[n_dev:])]
    if not train:
        raise ValueError("seen/unseen split leaves no training data")
    return train, dev, test


# ----------------------------------------------------------------------------
# line-delimited JSON I/O
# ----------------------------------------------------------------------------
# line 1: {"schema": "prefixtune.dataset", "version": 1}
# then one object per example:
#   {"id": str, "category": str, "style": int, "fields": [[k, v], ...], "target": [tok, ...]}


def dumps_dataset(dataset: Iterable[GenerationExample]) -> str:
    lines = [json.dumps({"schema": "prefixtune.dataset", "version": SCHEMA_VERSION})]
    for e in dataset:
        lines.append(json.dumps({
            "id": e.id, "category": e.category, "style": e.style,
            "fields": [list(f) for f in e.fields], "target": list(e.target),
        }))
    return "\n".join(lines) + "\n"


def save_dataset(path, dataset: Iterable[GenerationExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_dataset(dataset))


def loads_dataset(text: str) -> list[GenerationExample]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(lineno, f"invalid JSON ({exc.msg})") from None
        if lineno == 1 and isinstance(rec, dict) and "schema" in rec:
            if rec.get("version") != SCHEMA_VERSION:
                raise DatasetFormatError(lineno, f"unsupported schema version {rec.get('version')}")
            continue
        try:
            fields = tuple((str(k), str(v)) for k, v in rec["fields"])
            out.append(GenerationExample(fields, tuple(str(t) for t in rec["target"]),
                                         str(rec["category"]), str(rec["id"]), int(rec.get("style", 0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(lineno, f"malformed record ({exc})") from None
    return out


def load_dataset(path) -> list[GenerationExample]:
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read())


# ----------------------------------------------------------------------------
# model-facing encoding
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodedExample:
    source: tuple  # ids of x
    target: tuple  # ids of y (no eos)


def encode_examples(examples: Iterable[GenerationExample], vocab: Vocab, instruction=()) -> list[EncodedExample]:
    instruction = list(instruction)
    return [EncodedExample(tuple(vocab.encode(instruction + linearize(e))), tuple(vocab.encode(e.target)))
            for e in examples]


def pretraining_corpus(
    spec: TaskSpec,
    n: int,
    seed: int,
    instruction_prob: float = 0.5,
    untagged_weights: Sequence[float] = (0.4, 0.3, 0.2, 0.1),
) -> list[EncodedExample]:
    """General-purpose corpus: every category, every style, disjoint tables.

    With probability ``instruction_prob`` an example announces its style with
    ``write <style-word>`` and the style is uniform; otherwise the style is
    drawn from ``untagged_weights`` and not announced.
    """
    vocab = spec.vocab()
    rng = np.random.default_rng(seed)
    w = np.asarray(untagged_weights[: spec.n_styles], dtype=float)
    w = w / w.sum()
    out = []
    examples = generate_synthetic(spec, n, seed, pool="pretrain", style=0)
    for e in examples:
        tagged = rng.random() < instruction_prob
        s = int(rng.integers(spec.n_styles)) if tagged else int(rng.choice(spec.n_styles, p=w))
        x = (spec.instruction(s) if tagged else []) + linearize(e)
        out.append(EncodedExample(tuple(vocab.encode(x)), tuple(vocab.encode(spec.realize(e.fields, s)))))
    return out
