"""Command-line entry point: ``sparta <subcommand> [flags]``.

Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 data/format error.
Every run echoes its resolved configuration to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .adapter import (SparsityConfig, index_set_bytes, load_sparse_delta, sample_for_budget,
                      sample_indices, save_sparse_delta)
from .analysis import (DEFAULT_TOL, align_heads, check_pair, format_rank_table, random_drop,
                       rank_report)
from .baselines import AdapterSpec, load_lora, merge_lora, save_lora
from .checkpoint import load_checkpoint, save_checkpoint
from .data import filter_train, load_splits, make_synthetic_task, save_splits, TASKS, Vocab
from .errors import ConfigError, SpartaError
from .fileio import atomic_write_bytes, atomic_write_text, read_container
from .memory import SPARSITY_COLUMNS, memory_report, render_table
from .model import ModelConfig, ParamType, init_params, parse_types, swap_head
from .train import (LR_GRID, TARGET_SETS, TrainConfig, ablate_targets, evaluate,
                    format_ablation, sweep, train)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _floats(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"


# -- shared flag groups -------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--model", required=False, help="base checkpoint")
    p.add_argument("--data", required=False, help="directory with train/dev/test.jsonl")
    p.add_argument("--method", choices=["sparta", "lora", "dora", "full", "head"], default="sparta")
    p.add_argument("--density", type=float, default=None)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=16.0)
    p.add_argument("--targets", default=None, help="e.g. 'all', 'wv,wo', 'mlp'")
    p.add_argument("--budget", type=int, default=None, help="trainable count; sets the density")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--max-grad-norm", type=float, default=None)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--max-tokens", type=float, default=256,
                   help="drop longer training examples (dev/test untouched)")
    p.add_argument("--head-init", choices=["random", "vocab"], default="random")
    p.add_argument("--class-tokens", default=None, help="comma-separated words for --head-init vocab")


def _train_config(a):
    spec = AdapterSpec(a.method, density=a.density, rank=a.rank, alpha=a.alpha,
                       targets=a.targets, budget=a.budget)
    return TrainConfig(adapter=spec, batch_size=a.batch_size, max_epochs=a.max_epochs,
                       max_steps=a.max_steps, lr=a.lr, weight_decay=a.weight_decay,
                       dropout=a.dropout, max_grad_norm=a.max_grad_norm, patience=a.patience,
                       eval_every=a.eval_every, seed=a.seed)


def _require(a, *names):
    missing = [n for n in names if getattr(a, n.replace("-", "_")) is None]
    if missing:
        raise UsageError("missing required flag(s): " + ", ".join("--" + m for m in missing))


def _load_task(a):
    """Base model with a classification head, plus tokenized splits."""
    _require(a, "model", "data")
    base, meta = load_checkpoint(a.model, with_meta=True)
    vocab = Vocab.from_dict(meta["vocab"]) if "vocab" in meta else None
    splits = load_splits(a.data, vocab=vocab)
    max_tokens = None if a.max_tokens in (None, float("inf")) or a.max_tokens <= 0 else int(a.max_tokens)
    splits, report = filter_train(splits, max_tokens)
    c = splits.num_classes
    if base[base.head_name].shape[0] != c or base.config.num_classes is None:
        ids = None
        if a.head_init == "vocab":
            words = (a.class_tokens.split(",") if a.class_tokens
                     else splits.meta.get("class_words") or [])
            try:
                ids = [splits.vocab.word_id(w.strip()) for w in words]
            except KeyError as exc:
                raise ConfigError(f"class token {exc} is not a vocabulary word") from exc
        base = swap_head(base, c, a.head_init, ids, seed=a.seed)
    return base, splits, report


def _adapter_path(out, method):
    return os.path.join(out, {"sparta": "adapter.sdelta", "lora": "adapter.lora",
                              "dora": "adapter.lora"}.get(method, "model.ckpt"))


def _save_result(res, base, out, a):
    path = _adapter_path(out, res.spec.method)
    rt = res.runtime
    if res.spec.method == "sparta":
        save_sparse_delta(path, rt.index_set, rt.delta, base.fingerprint(), head=res.head,
                          mode=a.delta_mode, value_dtype=a.value_dtype)
    elif res.spec.method in ("lora", "dora"):
        save_lora(path, rt.adapter, base.fingerprint(), head=res.head, method=res.spec.method)
    else:
        save_checkpoint(path, rt.work)
    return path


# -- subcommands --------------------------------------------------------------

def cmd_init_model(a):
    vocab = Vocab()
    if a.vocab_from:
        vocab = load_splits(a.vocab_from).vocab
    v = a.vocab_size or len(vocab)
    if v < len(vocab):
        raise ConfigError(f"vocab size {v} smaller than the data vocabulary {len(vocab)}")
    cfg = ModelConfig(vocab_size=v, hidden_dim=a.heads * a.head_dim, num_layers=a.layers,
                      num_heads=a.heads, head_dim=a.head_dim, mlp_dim=a.mlp_dim,
                      max_seq_len=a.max_seq_len, num_kv_heads=a.kv_heads)
    params = init_params(cfg, a.seed)
    save_checkpoint(a.out, params, meta={"vocab": vocab.to_dict(), "seed": a.seed})
    print(f"wrote {a.out}: n={params.n} fingerprint={params.fingerprint()[:16]}")


def cmd_make_data(a):
    sizes = tuple(int(x) for x in a.sizes.split(","))
    if len(sizes) != 3:
        raise UsageError("--sizes needs train,dev,test")
    splits = make_synthetic_task(a.task, sizes, a.seed)
    save_splits(a.out, splits)
    print(f"wrote {a.out}: {splits.counts()} classes={splits.num_classes}")


def cmd_train(a):
    base, splits, report = _load_task(a)
    cfg = _train_config(a)
    os.makedirs(a.out, exist_ok=True)
    lines = []

    def log(rec):
        line = json.dumps({"event": "eval", **asdict(rec)}, sort_keys=True)
        lines.append(line)
        print(line)

    res = train(base, splits, cfg, log=log)
    path = _save_result(res, base, a.out, a)
    summary = {"config": cfg.to_dict(), "length_filter": report, "adapter": os.path.basename(path),
               "metrics": res.metrics.to_dict()}
    atomic_write_text(os.path.join(a.out, "metrics.jsonl"), "".join(x + "\n" for x in lines))
    atomic_write_text(os.path.join(a.out, "summary.json"), _dump(summary))
    print(json.dumps({"event": "summary", "trainable": res.metrics.trainable,
                      "best_step": res.metrics.best_step, "test": asdict(res.metrics.test)
                      if res.metrics.test else None,
                      "wall_clock_s": round(res.metrics.wall_clock, 3)}, sort_keys=True))


def _apply_adapter(base, adapter_path):
    header, _ = read_container(adapter_path)
    kind = header["kind"]
    if kind == "sparse-delta":
        phi, delta, head, _ = load_sparse_delta(adapter_path, base)
        merged_params = base.copy()
        from .adapter import merge
        merge(merged_params, phi, delta)
    elif kind == "lora":
        adapter, head, _ = load_lora(adapter_path)
        merged_params = merge_lora(base, adapter)
    elif kind == "checkpoint":
        return load_checkpoint(adapter_path)
    else:
        raise ConfigError(f"unsupported adapter kind {kind!r}")
    if head is not None:
        if merged_params[merged_params.head_name].shape != head.shape:
            merged_params = swap_head(merged_params, head.shape[0])
        merged_params[merged_params.head_name] = head
    return merged_params


def cmd_merge(a):
    base = load_checkpoint(a.model)
    out = _apply_adapter(base, a.adapter)
    save_checkpoint(a.out, out)
    print(f"wrote {a.out}")


def cmd_eval(a):
    base, splits, _ = _load_task(a)
    params = _apply_adapter(base, a.adapter) if a.adapter else base
    split = getattr(splits, a.split)
    res = evaluate(params, split)
    print(json.dumps({"split": a.split, **asdict(res)}, sort_keys=True))


def cmd_sample_indices(a):
    params = load_checkpoint(a.model)
    if a.budget is not None:
        phi = sample_for_budget(params, parse_types(a.targets), a.budget, a.seed)
    else:
        if a.density is None:
            raise UsageError("give --density or --budget")
        phi = sample_indices(params, SparsityConfig(a.density, parse_types(a.targets), a.seed))
    atomic_write_bytes(a.out, index_set_bytes(phi, params.fingerprint()))
    print(json.dumps({"m": phi.m, "density": phi.density, "seed": phi.seed,
                      "digest": phi.digest()}, sort_keys=True))


def _load_pair(pt_path, ft_path):
    pt, ft, dropped = align_heads(load_checkpoint(pt_path), load_checkpoint(ft_path))
    if dropped:
        print("note: head shapes differ (task head vs base head); comparing the other tensors",
              file=sys.stderr)
    return pt, ft


def cmd_analyze_rank(a):
    pt, ft = _load_pair(a.pt, a.ft)
    report = rank_report(pt, ft, a.tol)
    sys.stdout.write(format_rank_table(report, a.per_tensor))
    if a.json:
        atomic_write_text(a.json, _dump(report.to_dict()))


def _read_dense(path):
    """Dense deltas from ``.npy``/``.npz`` or any container file (checkpoints included)."""
    if path.endswith(".npy"):
        return {"delta": np.load(path)}
    if path.endswith(".npz"):
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    _, arrays = read_container(path)
    return {k: v for k, v in arrays.items() if v.dtype == np.float32 and v.ndim in (1, 2)}


def cmd_drop(a):
    if a.delta:
        deltas = _read_dense(a.delta)
        fingerprint = ""
    else:
        _require(a, "pt", "ft")
        pt, ft = _load_pair(a.pt, a.ft)
        check_pair(pt, ft)
        deltas = {k: ft[k].astype(np.float64) - v for k, v in pt.items()}
        deltas = {k: v.astype(np.float32) for k, v in deltas.items() if v.ndim in (1, 2)}
        fingerprint = pt.fingerprint()
    phi, delta = random_drop(deltas, a.p, a.rescale, a.seed)
    size = save_sparse_delta(a.out, phi, delta, fingerprint, value_dtype=a.value_dtype)
    total = sum(v.size for v in deltas.values())
    print(json.dumps({"kept": phi.m, "total": total, "bytes": size}, sort_keys=True))


def cmd_memory_report(a):
    if a.n is None:
        sys.stdout.write(render_table())
        reports = [memory_report(n, 1 - s, b) for b in (16, 32) for n in (2e9, 7e9)
                   for s in SPARSITY_COLUMNS]
    else:
        ks = _floats(a.density) if a.density else [1 - s for s in _floats(a.sparsity or "")]
        if not ks:
            ks = [1 - s for s in SPARSITY_COLUMNS]
        reports = [memory_report(n, k, a.bits) for n in _floats(a.n) for k in ks]
        print(f"{'n':>10} {'density':>8} {'sparsity':>8} {'bits':>4} {'storage':>8} "
              f"{'full_ft':>8} {'sparta':>8} {'adapter':>8} {'savings':>8} breakeven")
        for r in reports:
            v = r.view()
            print(f"{r.n:>10.3g} {r.k:>8.4g} {1 - r.k:>8.4g} {r.bits_per_value:>4} "
                  f"{v['storage_gb']:>7g}G {v['fullft_gb']:>7g}G {v['sparta_gb']:>7g}G "
                  f"{v['extra_adapter_gb']:>7g}G {r.savings_fraction:>8.1%} {r.breakeven}")
    if a.json:
        atomic_write_text(a.json, _dump([r.to_dict() for r in reports]))


def cmd_ablate_targets(a):
    _require(a, "budget")
    base, splits, _ = _load_task(a)
    cfg = _train_config(a)
    seeds = [int(s) for s in a.seeds.split(",")]
    sets = TARGET_SETS
    if a.sets:
        sets = tuple((s.strip(), s.strip()) for s in a.sets.split(";") if s.strip())
    rows = ablate_targets(base, splits, a.budget, cfg, sets, seeds)
    sys.stdout.write(format_ablation(rows))
    if a.out:
        atomic_write_text(a.out, _dump(rows))


def _sweep_one(args):
    base, splits, cfg, lr = args
    from dataclasses import replace as _replace
    return sweep(base, splits, _replace(cfg, lr=lr), lrs=[lr])[0][0]


def cmd_sweep(a):
    base, splits, _ = _load_task(a)
    cfg = _train_config(a)
    lrs = _floats(a.lrs)
    if a.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(a.jobs) as pool:
            results = list(pool.map(_sweep_one, [(base, splits, cfg, lr) for lr in lrs]))
        best = min(results, key=lambda r: r["best_dev_loss"])
    else:
        results, best = sweep(base, splits, cfg, lrs)
    for r in results:
        print(json.dumps(r, sort_keys=True))
    print(json.dumps({"best_lr": best["lr"]}))
    if a.out:
        atomic_write_text(a.out, _dump({"results": results, "best": best}))


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sparta", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None, help="JSON file; keys mirror flags")
        sp.set_defaults(func=fn)
        return sp

    sp = add("init-model", cmd_init_model, "create a random base checkpoint")
    sp.add_argument("--vocab-from", default=None, help="data directory whose vocabulary to use")
    sp.add_argument("--vocab-size", type=int, default=None)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--head-dim", type=int, default=8)
    sp.add_argument("--kv-heads", type=int, default=None)
    sp.add_argument("--mlp-dim", type=int, default=64)
    sp.add_argument("--max-seq-len", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("make-data", cmd_make_data, "write a synthetic classification task as JSONL")
    sp.add_argument("--task", choices=TASKS, default="keyword-sentiment")
    sp.add_argument("--sizes", default="512,128,128")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "fine-tune a base model")
    _add_train_flags(sp)
    sp.add_argument("--delta-mode", choices=["explicit", "seed"], default="explicit")
    sp.add_argument("--value-dtype", choices=["bf16", "f32"], default="bf16")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "evaluate a model, optionally with an adapter")
    _add_train_flags(sp)
    sp.add_argument("--adapter", default=None)
    sp.add_argument("--split", choices=["train", "dev", "test"], default="test")

    sp = add("sample-indices", cmd_sample_indices, "sample and save an index set")
    sp.add_argument("--model", required=True)
    sp.add_argument("--density", type=float, default=None)
    sp.add_argument("--budget", type=int, default=None)
    sp.add_argument("--targets", default="all")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("merge", cmd_merge, "fold an adapter into a standalone checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--out", required=True)

    sp = add("analyze-rank", cmd_analyze_rank, "rank of W_FT - W_PT per 2-D tensor")
    sp.add_argument("--pt", required=True)
    sp.add_argument("--ft", required=True)
    sp.add_argument("--tol", type=float, default=DEFAULT_TOL)
    sp.add_argument("--per-tensor", action="store_true")
    sp.add_argument("--json", default=None)

    sp = add("drop", cmd_drop, "randomly drop entries of a dense delta")
    sp.add_argument("--delta", default=None, help="checkpoint-format file of dense deltas")
    sp.add_argument("--pt", default=None)
    sp.add_argument("--ft", default=None)
    sp.add_argument("-p", type=float, required=True)
    sp.add_argument("--rescale", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--value-dtype", choices=["bf16", "f32"], default="bf16")
    sp.add_argument("--out", required=True)

    sp = add("memory-report", cmd_memory_report, "training-memory table")
    sp.add_argument("--n", default=None, help="parameter count(s), e.g. 2e9,7e9")
    sp.add_argument("--density", default=None)
    sp.add_argument("--sparsity", default=None)
    sp.add_argument("--bits", type=int, default=16)
    sp.add_argument("--json", default=None)

    sp = add("ablate-targets", cmd_ablate_targets, "fixed-budget target-set ablation")
    _add_train_flags(sp)
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--sets", default=None, help="';'-separated target sets (default: all 13)")
    sp.add_argument("--out", default=None)

    sp = add("sweep", cmd_sweep, "learning-rate sweep")
    _add_train_flags(sp)
    sp.add_argument("--lrs", default=",".join(str(x) for x in LR_GRID))
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", default=None)
    return p


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    return None


def parse_args(argv):
    """Parse, then re-parse with config-file values as defaults (explicit flags win)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = _subparser(parser, args.command)
        with open(args.config, encoding="utf-8") as fh:
            values = json.load(fh)
        known = {a.dest for a in sp._actions}
        norm = {k.lstrip("-").replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(norm) - known - {"config"})
        if unknown:
            sp.error(f"unknown config keys: {', '.join(unknown)}")
        for action in sp._actions:
            if action.dest in norm:
                action.required = False
        sp.set_defaults(**norm)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print("config: " + json.dumps(resolved, sort_keys=True, default=str), file=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SpartaError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
