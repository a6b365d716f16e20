"""Experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import FIELD_KEYS, FILLER_WORDS, GenerationExample, TaskSpec, Vocab, encode_examples, \
    generate_synthetic, make_task_spec, pretraining_corpus, split_seen_unseen
from .decoding import BeamConfig, decode_all
from .metrics import MetricReport, evaluate
from .model import ModelConfig, ModelParameters, init_parameters
from .prefix import Placement, init_from_tokens, init_random
from .strategies import TunedModel, TuningStrategy, apply_strategy, count_trainable, match_adapter_bottleneck, \
    parse_strategy
from .training import RunLog, TrainConfig, TrainResult, dev_size, subsample_lowdata, train

log = logging.getLogger("prefixtune")

DEV_FRACTION = 0.3


@dataclass
class Setup:
    spec: TaskSpec
    vocab: Vocab
    model: ModelParameters

    @property
    def ids(self) -> tuple:
        return (self.vocab.sep_id, self.vocab.eos_id, self.vocab.pad_id)


def dtype_of(cfg: ExperimentConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def model_config(cfg: ExperimentConfig, spec: TaskSpec) -> ModelConfig:
    return ModelConfig(cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff, spec.vocab_size, cfg.max_seq_len)


def pretrain(cfg: ExperimentConfig, spec: Optional[TaskSpec] = None, on_step=None) -> tuple[ModelParameters, RunLog]:
    """Train the full LM on the style-mixed corpus; the result is the frozen model."""
    spec = spec or make_task_spec(cfg.task_seed)
    vocab = spec.vocab()
    corpus = pretraining_corpus(spec, cfg.pretrain_examples, cfg.seed + 1)
    model = init_parameters(model_config(cfg, spec), cfg.seed, dtype=np.float32)
    tuned = apply_strategy(model, TuningStrategy.fine_tune_all(), special_ids=(vocab.sep_id, vocab.eos_id, vocab.pad_id))
    tc = TrainConfig(epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch, learning_rate=cfg.pretrain_lr,
                     warmup_steps=cfg.pretrain_warmup, seed=cfg.seed, loss_on=cfg.pretrain_loss)
    res = train(tuned, corpus, tc, on_step=on_step)
    res.model.model.freeze()
    return res.model.model, res.log


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------


def task_pool(spec: TaskSpec, n: int, seed: int, categories=None) -> list[GenerationExample]:
    """Downstream examples in the task style with no table repeated."""
    out, seen = [], set()
    k = 0
    while len(out) < n:
        for e in generate_synthetic(spec, max(n, 64), seed * 1000 + k, categories=categories):
            if e.fields not in seen:
                seen.add(e.fields)
                out.append(e)
                if len(out) == n:
                    break
        k += 1
    return out


def train_test_pools(spec: TaskSpec, n_train: int, n_test: int, seed: int, categories=None):
    pool = task_pool(spec, n_train + n_test, seed, categories)
    return pool[:n_train], pool[n_train:]


def reference_sets(examples: Sequence[GenerationExample]) -> list[list]:
    """All targets in ``examples`` that share a table, per example."""
    by_table: dict = {}
    for e in examples:
        by_table.setdefault(e.fields, []).append(list(e.target))
    return [by_table[e.fields] for e in examples]


# ----------------------------------------------------------------------------
# tuning and evaluation
# ----------------------------------------------------------------------------


def beam_config(cfg: ExperimentConfig, vocab: Vocab) -> BeamConfig:
    return BeamConfig(cfg.beam_size, cfg.length_norm, cfg.max_decode_len, vocab.eos_id)


def train_config(cfg: ExperimentConfig, seed: Optional[int] = None) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                       prefix_len=cfg.prefix_len, seed=cfg.seed if seed is None else seed,
                       warmup_steps=cfg.warmup_steps, early_stop_patience=cfg.patience,
                       weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip, max_steps=cfg.max_steps)


def make_strategy(name: str, cfg: ExperimentConfig, mcfg: ModelConfig, prefix_len: Optional[int] = None) -> TuningStrategy:
    plen = cfg.prefix_len if prefix_len is None else prefix_len
    bottleneck = cfg.bottleneck
    if name == "adapter" and not bottleneck:
        target = count_trainable(TuningStrategy.prefix_tune(plen), mcfg)[0]
        bottleneck = match_adapter_bottleneck(target, mcfg)
    return parse_strategy(name, prefix_len=plen, bottleneck=bottleneck, reparam=cfg.reparam)


def frozen(setup: Setup) -> TunedModel:
    """The untuned LM behind the same decoding interface."""
    sep, eos, pad = setup.ids
    return TunedModel(setup.model, TuningStrategy.fine_tune_all(), sep_id=sep, eos_id=eos, pad_id=pad)


def generate(tuned: TunedModel, examples: Sequence[GenerationExample], vocab: Vocab, beam: BeamConfig) -> list[list]:
    sources = [e.source for e in encode_examples(examples, vocab)]
    return [vocab.decode(t) for t in decode_all(tuned, sources, beam)]


def score(tuned: TunedModel, examples: Sequence[GenerationExample], vocab: Vocab, beam: BeamConfig) -> MetricReport:
    return evaluate(generate(tuned, examples, vocab, beam), reference_sets(examples))


def tune(
    setup: Setup,
    strategy: TuningStrategy,
    train_ex: Sequence[GenerationExample],
    dev_ex: Sequence[GenerationExample],
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    **init,
) -> TrainResult:
    seed = cfg.seed if seed is None else seed
    model = setup.model.astype(dtype_of(cfg)) if setup.model.dtype != dtype_of(cfg) else setup.model
    tuned = apply_strategy(model, strategy, seed=seed, special_ids=setup.ids, reparam_width=cfg.reparam_width, **init)
    data = encode_examples(train_ex, setup.vocab)
    dev = encode_examples(dev_ex, setup.vocab) if dev_ex else None
    metric = None
    if cfg.dev_metric == "bleu" and dev_ex:
        greedy_cfg = BeamConfig(1, 0.0, cfg.max_decode_len, setup.vocab.eos_id)
        metric = lambda t: score(t, dev_ex, setup.vocab, greedy_cfg).bleu  # noqa: E731
    return train(tuned, data, train_config(cfg, seed), dev, metric)


def _tokens_for_init(kind: str, spec: TaskSpec, n: int) -> list[str]:
    if kind == "relevant":
        words = spec.instruction(spec.task_style) + FIELD_KEYS
    elif kind == "irrelevant":
        words = list(FILLER_WORDS)
    else:
        raise ValueError(kind)
    return [words[i % len(words)] for i in range(n)]


# ----------------------------------------------------------------------------
# grid drivers; each returns CSV-ready rows
# ----------------------------------------------------------------------------


def _pmap(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _lowdata_job(job):
    setup, cfg, name, run, test_ex, beam = job
    strat = make_strategy(name, cfg, setup.model.config)
    res = tune(setup, strat, run.train, run.dev, cfg.with_updates(learning_rate=cfg.lr_for(name)),
               seed=cfg.seed + run.seed)
    rep = score(res.model, test_ex, setup.vocab, beam)
    return {"strategy": strat.label, "size": run.size, "seed": run.seed, "subset": run.subset,
            "best_dev_metric": res.log.best_dev_metric, "test_metric": rep.bleu,
            "trainable_params": res.log.trainable_params}


def run_lowdata(setup: Setup, cfg: ExperimentConfig) -> list[dict]:
    sizes = cfg.int_list("sizes")
    need = max(cfg.n_subsets * (s + dev_size(s)) for s in sizes)
    pool, test_ex = train_test_pools(setup.spec, need, cfg.test_size, cfg.data_seed)
    beam = beam_config(cfg, setup.vocab)
    runs = subsample_lowdata(pool, sizes, cfg.n_subsets, cfg.n_seeds, cfg.seed)
    jobs = [(setup, cfg, name, run, test_ex, beam) for name in cfg.str_list("strategies") for run in runs]
    rows = _pmap(_lowdata_job, jobs, cfg.workers)
    base = score(frozen(setup), test_ex, setup.vocab, beam).bleu
    rows += [{"strategy": "frozen", "size": s, "seed": "", "subset": "", "best_dev_metric": None,
              "test_metric": base, "trainable_params": 0} for s in sizes]
    return rows


def lowdata_means(rows: Sequence[dict]) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["size"]), []).append(r["test_metric"])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def run_extrapolate(setup: Setup, cfg: ExperimentConfig) -> list[dict]:
    spec = setup.spec
    seen_pool, seen_test = train_test_pools(spec, cfg.train_size, cfg.test_size, cfg.data_seed,
                                            categories=spec.seen_categories)
    unseen_test = task_pool(spec, cfg.test_size, cfg.data_seed + 7, categories=spec.unseen_categories)
    train_ex, dev_ex, test_unseen = split_seen_unseen(seen_pool + unseen_test, spec.unseen_categories,
                                                      DEV_FRACTION, cfg.seed)
    leaked = {e.category for e in train_ex + dev_ex} & set(spec.unseen_categories)
    if leaked:
        raise AssertionError(f"unseen categories in training data: {sorted(leaked)}")
    beam = beam_config(cfg, setup.vocab)
    rows = [{"strategy": "frozen",
             "seen_bleu": score(frozen(setup), seen_test, setup.vocab, beam).bleu,
             "unseen_bleu": score(frozen(setup), test_unseen, setup.vocab, beam).bleu,
             "trainable_params": 0}]
    for name in cfg.str_list("strategies"):
        strat = make_strategy(name, cfg, setup.model.config)
        res = tune(setup, strat, train_ex, dev_ex, cfg.with_updates(learning_rate=cfg.lr_for(name)))
        rows.append({"strategy": strat.label,
                     "seen_bleu": score(res.model, seen_test, setup.vocab, beam).bleu,
                     "unseen_bleu": score(res.model, test_unseen, setup.vocab, beam).bleu,
                     "trainable_params": res.log.trainable_params})
    return rows


def run_init_study(setup: Setup, cfg: ExperimentConfig) -> list[dict]:
    """Flat prefixes from random values, task-relevant words or unrelated words."""
    n = cfg.init_train_size
    pool, test_ex = train_test_pools(setup.spec, n + dev_size(n), cfg.test_size, cfg.data_seed)
    train_ex, dev_ex = pool[:n], pool[n:]
    beam = beam_config(cfg, setup.vocab)
    plen = cfg.prefix_len
    flat_cfg = cfg.with_updates(reparam=False)
    rows = []
    for kind in ("random", "relevant", "irrelevant"):
        strat = TuningStrategy.prefix_tune(plen, Placement.PREFIX, reparam=False)
        if kind == "random":
            p = init_random(plen, setup.model.config, seed=cfg.seed)
            words = []
        else:
            words = _tokens_for_init(kind, setup.spec, plen)
            p = init_from_tokens(setup.vocab.encode(words), setup.model)
        res = tune(setup, strat, train_ex, dev_ex, flat_cfg, prefix=p)
        rows.append({"init": kind, "words": " ".join(words), "prefix_len": plen,
                     "test_bleu": score(res.model, test_ex, setup.vocab, beam).bleu,
                     "best_dev_metric": res.log.best_dev_metric})
    return rows


def run_ablate(setup: Setup, cfg: ExperimentConfig) -> list[dict]:
    """Prefix vs embedding-only vs infix at lengths 1, 10, 20."""
    pool, test_ex = train_test_pools(setup.spec, cfg.train_size + dev_size(cfg.train_size), cfg.test_size,
                                     cfg.data_seed)
    train_ex, dev_ex = pool[: cfg.train_size], pool[cfg.train_size:]
    beam = beam_config(cfg, setup.vocab)
    variants = [("prefix", cfg.prefix_len, TuningStrategy.prefix_tune(cfg.prefix_len, reparam=cfg.reparam))]
    variants += [(f"emb-{n}", n, TuningStrategy.embedding_only(n)) for n in (1, 10, 20)]
    variants += [(f"infix-{n}", n, TuningStrategy.prefix_tune(n, Placement.INFIX, cfg.reparam)) for n in (1, 10, 20)]
    rows = []
    for label, n, strat in variants:
        res = tune(setup, strat, train_ex, dev_ex, cfg)
        rep = score(res.model, test_ex, setup.vocab, beam)
        rows.append({"variant": label, "length": n, "bleu": rep.bleu, "rougeL": rep.rougeL,
                     "exact_match": rep.exact_match, "trainable_params": res.log.trainable_params})
    return rows


def run_sweep(setup: Setup, cfg: ExperimentConfig) -> list[dict]:
    """One prefix-tuning run per length on fixed data and seed."""
    pool, test_ex = train_test_pools(setup.spec, cfg.train_size + dev_size(cfg.train_size), cfg.test_size,
                                     cfg.data_seed)
    train_ex, dev_ex = pool[: cfg.train_size], pool[cfg.train_size:]
    beam = beam_config(cfg, setup.vocab)
    rows = []
    for n in cfg.int_list("lengths"):
        strat = TuningStrategy.prefix_tune(n, reparam=cfg.reparam)
        res = tune(setup, strat, train_ex, dev_ex, cfg)
        rows.append({"prefix_len": n,
                     "dev_bleu": score(res.model, dev_ex, setup.vocab, beam).bleu,
                     "test_bleu": score(res.model, test_ex, setup.vocab, beam).bleu,
                     "trainable_params": res.log.trainable_params})
    return rows
