"""Command-line entry point: ``prefixtune <subcommand> [options]``.

Every subcommand resolves an :class:`ExperimentConfig` from defaults, an
optional ``--config`` file, ``--set key=value`` overrides and its own flags
(in that order), writes the resolved config into ``--out``, and exits
nonzero with a message on any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from . import experiments as ex
from .config import ConfigError, ExperimentConfig
from .data import load_dataset, make_task_spec, save_dataset
from .metrics import REPORT_COLUMNS, evaluate, report_csv, report_row
from .model import load_model, save_model
from .prefix import lift_embedding_prefix, load_prefix, save_prefix
from .registry import PrefixRegistry, read_requests
from .strategies import (TunedModel, TuningStrategy, adapters_from_section, adapters_to_section)
from .training import SUMMARY_COLUMNS, summary_csv

log = logging.getLogger("prefixtune")

# flag -> config key
FLAG_KEYS = {
    "seed": "seed", "dtype": "dtype", "workers": "workers", "strategy": "strategy", "prefix_len": "prefix_len",
    "lr": "learning_rate", "epochs": "epochs", "batch_size": "batch_size", "max_steps": "max_steps",
    "bottleneck": "bottleneck", "beam_size": "beam_size", "length_norm": "length_norm",
    "lengths": "lengths", "sizes": "sizes", "strategies": "strategies", "train_size": "train_size",
    "test_size": "test_size", "patience": "patience",
}


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", required=out_required, help="output directory for this run")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prefix-len", dest="prefix_len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--beam-size", dest="beam_size", type=int)
    p.add_argument("--length-norm", dest="length_norm", type=float)
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prefixtune", description="prefix-tuning experiments on a small numpy transformer")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the frozen LM on the style-mixed corpus")
    _add_common(p)

    p = sub.add_parser("make-data", help="write a synthetic task dataset (JSONL)")
    _add_common(p, out_required=False)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--file", required=True, help="dataset path to write")
    p.add_argument("--split", choices=["all", "seen", "unseen"], default="all")

    p = sub.add_parser("train", help="tune the frozen LM with one strategy")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--strategy")
    p.add_argument("--train-data", dest="train_data", help="JSONL dataset; synthetic if omitted")
    p.add_argument("--dev-data", dest="dev_data")

    p = sub.add_parser("eval", help="decode a test set and write a metric report CSV")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--model", help="model checkpoint (may carry adapters)")
    p.add_argument("--prefix", help="prefix checkpoint")
    p.add_argument("--data", help="JSONL test set; synthetic if omitted")
    p.add_argument("--predictions", help="score these outputs (one per line) instead of decoding")

    for name, helptext in [
        ("sweep-prefix-length", "metric vs prefix length"),
        ("lowdata", "low-data grid over sizes x subsets x seeds"),
        ("extrapolate", "train on seen categories, test on unseen ones"),
        ("init-study", "random vs real-word prefix initialization"),
        ("ablate", "embedding-only and infix variants"),
    ]:
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_train_flags(p)
        p.add_argument("--model", required=True)
        p.add_argument("--lengths")
        p.add_argument("--sizes")
        p.add_argument("--strategies")

    p = sub.add_parser("serve-batch", help="mixed-task batched greedy inference")
    _add_common(p, out_required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--prefix", action="append", default=[], metavar="TASK=PATH", required=True)
    p.add_argument("--requests", required=True, help="file of task_id<TAB>source lines")
    p.add_argument("--max-len", dest="max_len", type=int, default=48)
    p.add_argument("--output", help="write outputs here instead of stdout")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    sets = {}
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = v.strip()
    cfg = cfg.with_updates(**sets)
    flags = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS and v is not None}
    return cfg.with_updates(**flags)


def _prepare_out(args, cfg: ExperimentConfig) -> Optional[str]:
    out = getattr(args, "out", None)
    if out:
        os.makedirs(out, exist_ok=True)
        cfg.save(os.path.join(out, "config.txt"))
    return out


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _setup(cfg: ExperimentConfig, model_path: str) -> ex.Setup:
    if not os.path.exists(model_path):
        raise FileNotFoundError(f"model checkpoint not found: {model_path}")
    spec = make_task_spec(cfg.task_seed)
    model, _ = load_model(model_path, dtype=ex.dtype_of(cfg))
    model.freeze()
    return ex.Setup(spec, spec.vocab(), model)


def _columns(rows: Sequence[dict]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    return cols


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    every = max(cfg.pretrain_examples // cfg.pretrain_batch // 10, 1)
    model, runlog = ex.pretrain(cfg, on_step=lambda s, l: s % every == 0 and log.info("step %d loss %.4f", s, l))
    save_model(os.path.join(out, "model.pfxf"), model)
    runlog.save(os.path.join(out, "runlog.jsonl"))
    print(os.path.join(out, "model.pfxf"))
    return 0


def cmd_make_data(args, cfg: ExperimentConfig) -> int:
    spec = make_task_spec(cfg.task_seed)
    cats = {"all": None, "seen": spec.seen_categories, "unseen": spec.unseen_categories}[args.split]
    save_dataset(args.file, ex.task_pool(spec, args.n, cfg.data_seed, categories=cats))
    return 0


def _train_dev(cfg: ExperimentConfig, setup: ex.Setup, args):
    if args.train_data:
        train_ex = load_dataset(args.train_data)
        dev_ex = load_dataset(args.dev_data) if args.dev_data else []
    else:
        n_dev = int(round(ex.DEV_FRACTION * cfg.train_size))
        pool = ex.task_pool(setup.spec, cfg.train_size + n_dev, cfg.data_seed)
        train_ex, dev_ex = pool[: cfg.train_size], pool[cfg.train_size:]
    return train_ex, dev_ex


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    setup = _setup(cfg, args.model)
    train_ex, dev_ex = _train_dev(cfg, setup, args)
    strat = ex.make_strategy(cfg.strategy, cfg, setup.model.config)
    res = ex.tune(setup, strat, train_ex, dev_ex, cfg)
    res.log.save(os.path.join(out, "runlog.jsonl"))
    tuned = res.model
    if strat.kind == "prefix":
        path = os.path.join(out, "prefix.pfxp")
        save_prefix(path, tuned.exported_prefix())
    elif strat.kind == "embedding":
        # the lifted flat prefix reproduces the embedding-only forward exactly
        path = os.path.join(out, "prefix.pfxp")
        save_prefix(path, lift_embedding_prefix(tuned.emb_prefix, tuned.model))
    elif strat.kind == "adapter":
        path = os.path.join(out, "model.pfxf")
        save_model(path, tuned.model, adapters_to_section(tuned.adapters, strat.bottleneck))
    else:
        path = os.path.join(out, "model.pfxf")
        save_model(path, tuned.model)
    _write(os.path.join(out, "summary.csv"), summary_csv([{
        "strategy": strat.label, "size": len(train_ex), "seed": cfg.seed, "subset": 0,
        "best_dev_metric": res.log.best_dev_metric, "test_metric": None,
        "trainable_params": res.log.trainable_params}]))
    print(path)
    return 0


def _tuned_for_eval(cfg: ExperimentConfig, args) -> tuple[ex.Setup, TunedModel]:
    setup = _setup(cfg, args.model)
    sep, eos, pad = setup.ids
    _, adapters = load_model(args.model, dtype=ex.dtype_of(cfg))
    if args.prefix:
        prefix = load_prefix(args.prefix, dtype=ex.dtype_of(cfg))
        if isinstance(prefix, tuple):
            raise ValueError("encoder-decoder prefixes need an encoder-decoder model")
        strat = TuningStrategy.prefix_tune(prefix.prefix_len, prefix.placement, reparam=False)
        return setup, TunedModel(setup.model, strat, prefix=prefix, sep_id=sep, eos_id=eos, pad_id=pad)
    if adapters is not None:
        return setup, TunedModel(setup.model, TuningStrategy.adapter(adapters.bottleneck),
                                 adapters=adapters_from_section(adapters), sep_id=sep, eos_id=eos, pad_id=pad)
    return setup, ex.frozen(setup)


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    spec = make_task_spec(cfg.task_seed)
    data = load_dataset(args.data) if args.data else ex.task_pool(spec, cfg.test_size, cfg.data_seed + 1)
    if not data:
        raise ValueError("empty test set")
    refs = ex.reference_sets(data)
    if args.predictions:
        with open(args.predictions, encoding="utf-8") as fh:
            preds = [line.split() for line in fh.read().splitlines()]
        if len(preds) != len(data):
            raise ValueError(f"{len(preds)} predictions for {len(data)} examples")
    else:
        if not args.model:
            raise ValueError("eval needs --model or --predictions")
        setup, tuned = _tuned_for_eval(cfg, args)
        preds = ex.generate(tuned, data, setup.vocab, ex.beam_config(cfg, setup.vocab))
        _write(os.path.join(out, "predictions.txt"), "".join(" ".join(p) + "\n" for p in preds))
    report = evaluate(preds, refs)
    _write(os.path.join(out, "metrics.csv"), report_csv([report_row(report)], REPORT_COLUMNS))
    print(json.dumps(report_row(report)))
    return 0


def _grid(runner, filename: str, columns=None):
    def cmd(args, cfg: ExperimentConfig) -> int:
        out = _prepare_out(args, cfg)
        setup = _setup(cfg, args.model)
        rows = runner(setup, cfg)
        _write(os.path.join(out, filename), report_csv(rows, columns or _columns(rows)))
        print(os.path.join(out, filename))
        return 0
    return cmd


def cmd_serve_batch(args, cfg: ExperimentConfig) -> int:
    setup = _setup(cfg, args.model)
    reg = PrefixRegistry(setup.model, *setup.ids)
    for item in args.prefix:
        if "=" not in item:
            raise ValueError(f"--prefix expects TASK=PATH, got {item!r}")
        task, path = item.split("=", 1)
        reg.register(task, path)
    raw = read_requests(args.requests)
    lines: list[Optional[str]] = [None] * len(raw)
    reqs, idx = [], []
    for i, (task, src) in enumerate(raw):
        try:
            reqs.append((task, setup.vocab.encode(src.split())))
            idx.append(i)
        except KeyError as exc:
            lines[i] = f"{task}\tERROR: {exc.args[0]}"
    for i, r in zip(idx, reg.batched_infer(reqs, max_len=args.max_len)):
        lines[i] = f"{r.task_id}\t" + (" ".join(setup.vocab.decode(r.tokens)) if r.ok else f"ERROR: {r.error}")
    text = "".join(line + "\n" for line in lines)
    if args.output:
        _write(args.output, text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "make-data": cmd_make_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-prefix-length": _grid(ex.run_sweep, "sweep.csv"),
    "lowdata": _grid(ex.run_lowdata, "lowdata.csv", SUMMARY_COLUMNS),
    "extrapolate": _grid(ex.run_extrapolate, "extrapolate.csv"),
    "init-study": _grid(ex.run_init_study, "init_study.csv"),
    "ablate": _grid(ex.run_ablate, "ablate.csv"),
    "serve-batch": cmd_serve_batch,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"prefixtune {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
