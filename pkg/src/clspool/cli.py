"""Batch experiment driver.

Subcommands::

    train      one (head, seed) fine-tuning run; writes checkpoint + metrics JSON
    compare    heads x seeds grid; mean/std/delta tables and CSV
    ablate-k   pooled-head depth sweep over k
    lowres     compare at several training-set sizes
    gradcheck  finite-difference check through every head kind
    eval       score a saved checkpoint on a task or data file

Exit codes: 0 success, 2 usage/configuration error, 1 runtime error. Flags
override config-file values (flat ``key=value`` lines); the env var
CLSPOOL_SEED supplies the default seed. Every table and CSV is a deterministic
function of (config, seeds): rows follow the given head/seed order, and
parallel workers (--jobs) only change wall time, not output bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from io import StringIO
from pathlib import Path

import numpy as np

from . import arraycore as ac
from .data import (
    SyntheticTaskSpec,
    TASK_PRESETS,
    gen_synthetic,
    load_jsonl,
    load_vocab,
    subsample,
)
from .encoder import EncoderConfig
from .heads import ConfigurationError, HeadKind, head_forward, parse_head_spec
from .metrics import EvalResult, SeedAggregate, aggregate_seeds
from .training import (
    Model,
    TrainConfig,
    TrainingError,
    build_model,
    evaluate,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 1

METRIC_ORDER = ("accuracy", "f1", "mcc", "spearman")
METRIC_LABELS = {"accuracy": "Acc.", "f1": "F1", "mcc": "MCC", "spearman": "Sp."}

GRADCHECK_TOLERANCE = {64: 1e-4, 32: 1e-2}


class CliError(Exception):
    """Usage-level problem; maps to exit code 2."""


@dataclass
class RunReport:
    """Aggregate of one head across seeds, plus its gap to the baseline head."""

    task: str
    head_spec: str
    per_seed: dict[str, list[float]]            # metric -> values in seed order
    aggregates: dict[str, SeedAggregate]
    delta: dict[str, float] = field(default_factory=dict)
    wall_time_s: float = 0.0


@dataclass
class ExperimentConfig:
    task: str | None = None
    data: str | None = None
    eval_data: str | None = None
    vocab: str | None = None
    heads: list[str] = field(default_factory=lambda: ["baseline"])
    seeds: list[int] = field(default_factory=lambda: [0])
    epochs: int = 4
    lr: float = 2e-5
    batch_size: int = 32
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    dropout: float = 0.1
    train_size: int = 2000
    eval_size: int = 500
    vocab_size: int = 50
    seq_len: int = 16
    data_seed: int = 0
    num_layers: int = 4
    d_model: int = 32
    enc_heads: int = 4
    max_seq_len: int = 64
    out: str = "runs"
    jobs: int = 1


def _experiment_from_args(args) -> ExperimentConfig:
    exp = ExperimentConfig()
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in file_values.items():
        _apply_config_entry(exp, key, value)
    overrides = {
        "task": args.task, "data": args.data,
        "eval_data": getattr(args, "eval_data", None),
        "vocab": getattr(args, "vocab", None),
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
        "warmup_ratio": args.warmup_ratio, "weight_decay": args.weight_decay,
        "dropout": getattr(args, "dropout", None),
        "train_size": getattr(args, "train_size", None),
        "eval_size": getattr(args, "eval_size", None),
        "vocab_size": getattr(args, "vocab_size", None),
        "seq_len": getattr(args, "seq_len", None),
        "data_seed": getattr(args, "data_seed", None),
        "num_layers": getattr(args, "num_layers", None),
        "d_model": getattr(args, "d_model", None),
        "enc_heads": getattr(args, "enc_heads", None),
        "out": args.out, "jobs": getattr(args, "jobs", None),
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(exp, key, value)
    if getattr(args, "head", None):
        exp.heads = list(args.head)
    if getattr(args, "seed", None):
        exp.seeds = list(args.seed)
    elif "seeds" not in file_values and os.environ.get("CLSPOOL_SEED"):
        exp.seeds = [int(os.environ["CLSPOOL_SEED"])]
    return exp


_INT_KEYS = {"epochs", "batch_size", "train_size", "eval_size", "vocab_size",
             "seq_len", "data_seed", "num_layers", "d_model", "enc_heads",
             "max_seq_len", "jobs"}
_FLOAT_KEYS = {"lr", "warmup_ratio", "weight_decay", "dropout"}


def _apply_config_entry(exp: ExperimentConfig, key: str, value: str) -> None:
    if key == "heads":
        exp.heads = [h.strip() for h in value.split(",") if h.strip()]
    elif key == "seeds":
        exp.seeds = [int(s) for s in value.split(",")]
    elif key in _INT_KEYS:
        setattr(exp, key, int(value))
    elif key in _FLOAT_KEYS:
        setattr(exp, key, float(value))
    elif key in ("task", "data", "eval_data", "vocab", "out"):
        setattr(exp, key, value)
    else:
        raise CliError(f"config file: unknown key '{key}'")


def _read_config_file(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError(f"cannot read config file: {err}")
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"config file line {line_no}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def _load_datasets(exp: ExperimentConfig):
    """Returns (train_set, eval_set, task_name, loss_kind)."""
    if exp.task:
        if exp.task not in TASK_PRESETS:
            raise CliError(f"unknown task '{exp.task}'; choose from: "
                           + ", ".join(sorted(TASK_PRESETS)))
        kind, task_type, _ = TASK_PRESETS[exp.task]
        spec = SyntheticTaskSpec(kind=kind, vocab_size=exp.vocab_size,
                                 seq_len=(exp.seq_len, exp.seq_len),
                                 train_size=exp.train_size,
                                 eval_size=exp.eval_size, seed=exp.data_seed)
        train_set, eval_set = gen_synthetic(spec)
        loss = "cross_entropy" if task_type == "classification" else "squared_error"
        return train_set, eval_set, exp.task, loss
    if exp.data:
        vocab = load_vocab(exp.vocab) if exp.vocab else None
        train_set = load_jsonl(exp.data, vocab, max_len=exp.max_seq_len)
        if not exp.eval_data:
            raise CliError("--data also needs --eval-data")
        eval_set = load_jsonl(exp.eval_data, vocab, max_len=exp.max_seq_len)
        labels_int = all(isinstance(ex.label, int) for ex in train_set + eval_set)
        loss = "cross_entropy" if labels_int else "squared_error"
        return train_set, eval_set, Path(exp.data).stem, loss
    raise CliError("no input: pass --task NAME or --data PATH")


def _train_config(exp: ExperimentConfig, head_spec: str, seed: int,
                  loss: str) -> TrainConfig:
    head = parse_head_spec(head_spec)
    if head.uses_depth and head.k > exp.num_layers:
        raise CliError(f"head '{head_spec}': k={head.k} exceeds num_layers="
                       f"{exp.num_layers}")
    enc = EncoderConfig(vocab_size=exp.vocab_size, num_layers=exp.num_layers,
                        d_model=exp.d_model, num_heads_encoder=exp.enc_heads,
                        max_seq_len=exp.max_seq_len, dropout=exp.dropout)
    return TrainConfig(encoder=enc, head=head, learning_rate=exp.lr,
                       epochs=exp.epochs, batch_size=exp.batch_size,
                       warmup_ratio=exp.warmup_ratio,
                       weight_decay=exp.weight_decay, seed=seed, loss=loss)


def _slug(head_spec: str) -> str:
    return "".join(ch if ch.isalnum() else "-" for ch in head_spec)


def _run_one(exp: ExperimentConfig, head_spec: str, seed: int,
             train_set, eval_set, task: str, loss: str) -> dict:
    cfg = _train_config(exp, head_spec, seed, loss)
    try:
        _, result = train(cfg, train_set, eval_set)
    except TrainingError as err:
        # grid commands mark the failed cell and keep going
        return {"task": task, "head": head_spec, "seed": seed,
                "metrics": {}, "error": str(err), "wall_time_s": 0.0}
    return {
        "task": task,
        "head": head_spec,
        "seed": seed,
        "metrics": result.eval_metrics,
        "train_metrics": result.train_metrics,
        "final_loss": result.final_loss,
        "n_train": result.n_train,
        "n_eval": result.n_eval,
        "wall_time_s": result.wall_time_s,
    }


def _grid_worker(payload) -> dict:
    exp_dict, head_spec, seed, subsample_n = payload
    exp = ExperimentConfig(**exp_dict)
    train_set, eval_set, task, loss = _load_datasets(exp)
    if subsample_n is not None:
        train_set = subsample(train_set, subsample_n, exp.data_seed)
    return _run_one(exp, head_spec, seed, train_set, eval_set, task, loss)


def _run_grid(exp: ExperimentConfig, heads: list[str], seeds: list[int],
              out_dir: Path, subsample_n: int | None = None) -> list[dict]:
    """All (head, seed) runs, assembled in deterministic order."""
    for spec in heads:
        _train_config(exp, spec, 0, "cross_entropy")  # validate before any run
    pairs = [(spec, seed) for spec in heads for seed in seeds]
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    def persist(record: dict) -> dict:
        name = f"{_slug(record['head'])}__seed{record['seed']}.json"
        (runs_dir / name).write_text(json.dumps(record, indent=2, sort_keys=True),
                                     encoding="utf-8")
        return record

    if exp.jobs > 1:
        payloads = [(exp.__dict__.copy(), spec, seed, subsample_n)
                    for spec, seed in pairs]
        with ProcessPoolExecutor(max_workers=exp.jobs) as pool:
            records = [persist(r) for r in pool.map(_grid_worker, payloads)]
    else:
        train_set, eval_set, task, loss = _load_datasets(exp)
        if subsample_n is not None:
            train_set = subsample(train_set, subsample_n, exp.data_seed)
        records = [persist(_run_one(exp, spec, seed, train_set, eval_set, task, loss))
                   for spec, seed in pairs]
    return records


def build_reports(records: list[dict], heads: list[str],
                  baseline_spec: str = "baseline") -> list[RunReport]:
    """Fold per-run records into per-head RunReports with baseline deltas.

    Failed runs (records carrying an "error" key) contribute no values; a head
    whose runs all failed ends up with empty aggregates and renders as n/a.
    """
    reports = []
    for spec in heads:
        rows = [r for r in records if r["head"] == spec and "error" not in r]
        rows.sort(key=lambda r: r["seed"])
        per_seed: dict[str, list[float]] = {}
        for row in rows:
            for metric, value in row["metrics"].items():
                EvalResult(metric, value, row.get("n_eval", 0))  # range check
                per_seed.setdefault(metric, []).append(value)
        aggregates = {m: aggregate_seeds(vals) if len(vals) > 1
                      else SeedAggregate(tuple(vals), vals[0], 0.0)
                      for m, vals in per_seed.items()}
        reports.append(RunReport(
            task=rows[0]["task"] if rows else "",
            head_spec=spec,
            per_seed=per_seed,
            aggregates=aggregates,
            wall_time_s=sum(r["wall_time_s"] for r in rows),
        ))
    base = next((r for r in reports if r.head_spec == baseline_spec), None)
    if base is not None:
        for report in reports:
            report.delta = {
                m: report.aggregates[m].mean - base.aggregates[m].mean
                for m in report.aggregates if m in base.aggregates}
    return reports


def _metric_columns(reports: list[RunReport]) -> list[str]:
    present = {m for r in reports for m in r.aggregates}
    return [m for m in METRIC_ORDER if m in present]


def format_mean_table(reports: list[RunReport]) -> str:
    """Aligned text in the layout of the per-task results table: one row per
    head, one column per metric, final Delta row = best variant - baseline."""
    cols = _metric_columns(reports)
    width = max(len(r.head_spec) for r in reports) + 2
    lines = ["Model".ljust(width) + "".join(METRIC_LABELS[m].rjust(10) for m in cols)]
    for r in reports:
        lines.append(r.head_spec.ljust(width)
                     + "".join(f"{r.aggregates[m].mean:10.4f}" if m in r.aggregates
                               else "n/a".rjust(10) for m in cols))
    base = next((r for r in reports if r.head_spec == "baseline"), None)
    variants = [r for r in reports if r.head_spec != "baseline"]
    if base is not None and base.aggregates and variants:
        cells = []
        for m in cols:
            best = max((r.aggregates[m].mean for r in variants
                        if m in r.aggregates), default=None)
            cells.append(f"{best - base.aggregates[m].mean:10.4f}"
                         if best is not None and m in base.aggregates
                         else "n/a".rjust(10))
        lines.append("Delta".ljust(width) + "".join(cells))
    else:
        lines.append("(no baseline head present; Delta row omitted)")
    return "\n".join(lines) + "\n"


def format_std_table(reports: list[RunReport]) -> str:
    """Seed standard deviations in the layout of the stability table."""
    cols = _metric_columns(reports)
    width = max(len(r.head_spec) for r in reports) + 2
    lines = ["Model".ljust(width) + "".join(METRIC_LABELS[m].rjust(12) for m in cols)]
    for r in reports:
        lines.append(r.head_spec.ljust(width)
                     + "".join(f"{r.aggregates[m].std:12.2e}" if m in r.aggregates
                               else "n/a".rjust(12) for m in cols))
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    buffer = StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buffer.getvalue(), encoding="utf-8")


def write_compare_csv(path: Path, reports: list[RunReport], seeds: list[int]) -> None:
    cols = _metric_columns(reports)
    header = ["head", "metric"] + [f"seed_{s}" for s in seeds] + ["mean", "std", "delta"]
    rows = []
    for r in reports:
        for m in cols:
            if m not in r.aggregates:
                continue
            agg = r.aggregates[m]
            delta = r.delta.get(m, "")
            rows.append([r.head_spec, m] + [repr(v) for v in agg.values]
                        + [repr(agg.mean), repr(agg.std),
                           repr(delta) if delta != "" else ""])
    _write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    exp = _experiment_from_args(args)
    if len(exp.heads) != 1:
        raise CliError("train runs a single head; pass exactly one --head")
    if len(exp.seeds) != 1:
        raise CliError("train runs a single seed; pass exactly one --seed")
    head_spec, seed = exp.heads[0], exp.seeds[0]
    train_set, eval_set, task, loss = _load_datasets(exp)
    cfg = _train_config(exp, head_spec, seed, loss)
    out_dir = Path(exp.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, result = train(cfg, train_set, eval_set)
    stem = f"{_slug(head_spec)}__seed{seed}"
    save_checkpoint(out_dir / f"{stem}.ckpt", model, cfg)
    record = {
        "task": task, "head": head_spec, "seed": seed,
        "metrics": result.eval_metrics, "train_metrics": result.train_metrics,
        "final_loss": result.final_loss, "n_train": result.n_train,
        "n_eval": result.n_eval, "wall_time_s": result.wall_time_s,
        "checkpoint": f"{stem}.ckpt",
    }
    (out_dir / f"{stem}.json").write_text(
        json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    print(json.dumps(record["metrics"], sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    exp = _experiment_from_args(args)
    if len(exp.heads) < 2:
        raise CliError("compare needs at least two --head values")
    out_dir = Path(exp.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = _run_grid(exp, exp.heads, exp.seeds, out_dir)
    reports = build_reports(records, exp.heads)
    mean_table = format_mean_table(reports)
    std_table = format_std_table(reports)
    (out_dir / "compare.txt").write_text(mean_table, encoding="utf-8")
    (out_dir / "stddev.txt").write_text(std_table, encoding="utf-8")
    write_compare_csv(out_dir / "compare.csv", reports, exp.seeds)
    print(mean_table)
    print("Seed standard deviations:")
    print(std_table)
    failed = [r for r in records if "error" in r]
    for r in failed:
        print(f"run failed: head={r['head']} seed={r['seed']}: {r['error']}",
              file=sys.stderr)
    return RUNTIME_ERROR if failed else 0


def cmd_ablate_k(args) -> int:
    exp = _experiment_from_args(args)
    ks = args.k or list(range(1, exp.num_layers + 1))
    for k in ks:
        if not 1 <= k <= exp.num_layers:
            raise CliError(f"ablate-k: k={k} outside [1, {exp.num_layers}]")
    num_heads = args.heads or 4
    base_kind = args.pool or "maxseq+mha"
    if base_kind not in ("maxseq+mha", "meanseq+mha", "normseq+mha"):
        raise CliError(f"ablate-k: cannot sweep k for head kind '{base_kind}'")
    heads = [f"{base_kind}:k={k},h={num_heads}" for k in ks]
    out_dir = Path(exp.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = _run_grid(exp, heads, exp.seeds, out_dir)
    reports = build_reports(records, heads)
    cols = _metric_columns(reports)
    lines = ["k".ljust(6) + "".join(METRIC_LABELS[m].rjust(10) for m in cols)]
    for k, report in zip(ks, reports):
        lines.append(f"k = {k}".ljust(6)
                     + "".join(f"{report.aggregates[m].mean:10.4f}" for m in cols))
    table = "\n".join(lines) + "\n"
    (out_dir / "ablate_k.txt").write_text(table, encoding="utf-8")
    write_compare_csv(out_dir / "ablate_k.csv", reports, exp.seeds)
    print(table)
    return 0


def cmd_lowres(args) -> int:
    exp = _experiment_from_args(args)
    if not args.size:
        raise CliError("lowres needs at least one --size (int or 'full')")
    sizes = []
    for raw in args.size:
        if raw == "full":
            sizes.append(None)
        else:
            value = int(raw)
            if value < 1:
                raise CliError(f"lowres: size must be >= 1, got {value}")
            sizes.append(value)
    out_dir = Path(exp.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for size in sizes:
        label = "full" if size is None else str(size)
        sub_dir = out_dir / f"size_{label}"
        records = _run_grid(exp, exp.heads, exp.seeds, sub_dir, subsample_n=size)
        reports = build_reports(records, exp.heads)
        (sub_dir / "compare.txt").write_text(format_mean_table(reports),
                                             encoding="utf-8")
        for report in reports:
            for metric in _metric_columns([report]):
                agg = report.aggregates[metric]
                delta = report.delta.get(metric, "")
                rows.append([label, report.head_spec, metric, repr(agg.mean),
                             repr(agg.std), repr(delta) if delta != "" else ""])
    _write_csv(out_dir / "lowres.csv", ["size", "head", "metric", "mean", "std", "delta"],
               rows)
    print((out_dir / "lowres.csv").read_text())
    return 0


def gradcheck_model(bits: int, seed: int = 13) -> tuple[Model, np.ndarray, np.ndarray]:
    """Toy model + probe input for finite-difference checks.

    All weights are redrawn at a generic scale (sigma 0.25 matrices, perturbed
    layer-norm affines): the training-scale init leaves attention gradients
    below what central differences can resolve, and identity layer-norm
    affines make every token vector's norm exactly sqrt(d), parking the
    norm-select head on a knife edge where any perturbation flips selections.
    """
    dtype = np.float64 if bits == 64 else np.float32
    enc = EncoderConfig(vocab_size=16, num_layers=4, d_model=32,
                        num_heads_encoder=4, max_seq_len=8, dropout=0.0)
    cfg = TrainConfig(encoder=enc, head=HeadKind("mha"), learning_rate=1e-3,
                      seed=seed)
    model = build_model(cfg, n_classes=2, dtype=dtype)
    rng = np.random.default_rng([seed, 3])
    for name, p in model.named_parameters():
        if p.data.ndim == 2:
            p.data[:] = rng.normal(0.0, 0.25, p.data.shape).astype(dtype)
        elif "gain" in name:
            p.data[:] = (1.0 + rng.normal(0.0, 0.25, p.data.shape)).astype(dtype)
        else:
            p.data[:] = rng.normal(0.0, 0.25, p.data.shape).astype(dtype)
    ids = np.concatenate([[1], rng.integers(4, 16, size=6), [0]])
    mask = np.array([1.0] * 7 + [0.0])
    return model, ids, mask


GRADCHECK_HEAD_SPECS = ("baseline", "maxcls:k=3", "mha:h=4", "maxseq+mha:k=3,h=4",
                        "meanseq+mha:k=3,h=4", "normseq+mha:k=3,h=4")


def _head_loss(model: Model, kind: HeadKind, ids, mask):
    from .encoder import encode

    stack = encode(model.enc, ids, mask)
    return ac.sum_all(head_forward(kind, stack, model.head))


def _gradcheck_32bit(seed: int) -> dict[str, float]:
    """f32 reverse-mode gradients against f64-twin central differences.

    Float32 finite differences cannot resolve small gradients at all, so the
    numeric side runs on a float64 model holding the exact same parameter
    values; the result measures how far f32 forward/backward rounding drifts
    from the true derivatives.
    """
    model32, ids, mask = gradcheck_model(32, seed)
    model64, _, _ = gradcheck_model(64, seed)
    pairs = list(zip(model32.named_parameters(), model64.named_parameters()))
    for (_, p32), (_, p64) in pairs:
        p64.data = p32.data.astype(np.float64)
    rng = np.random.default_rng(seed)
    errors = {}
    for spec in GRADCHECK_HEAD_SPECS:
        kind = parse_head_spec(spec)
        for (_, p32), _ in pairs:
            p32.zero_grad()
        ac.backward(_head_loss(model32, kind, ids, mask))
        worst = 0.0
        for (_, p32), (_, p64) in pairs:
            grads = np.zeros_like(p32.data) if p32.grad is None else p32.grad
            flat64 = p64.data.reshape(-1)
            a_flat = grads.reshape(-1)
            n_coords = flat64.shape[0]
            coords = (rng.choice(n_coords, size=4, replace=False)
                      if n_coords > 4 else range(n_coords))
            for i in coords:
                orig = flat64[i]
                flat64[i] = orig + 1e-5
                f_plus = _head_loss(model64, kind, ids, mask).item()
                flat64[i] = orig - 1e-5
                f_minus = _head_loss(model64, kind, ids, mask).item()
                flat64[i] = orig
                numeric = (f_plus - f_minus) / 2e-5
                denom = max(1e-8, abs(a_flat[i]) + abs(numeric))
                worst = max(worst, abs(a_flat[i] - numeric) / denom)
        errors[spec] = worst
    return errors


def cmd_gradcheck(args) -> int:
    bits = args.bits or 64
    if bits == 32:
        print("warning: 32-bit mode; tolerance loosens to 1e-2", file=sys.stderr)
    tolerance = GRADCHECK_TOLERANCE[bits]
    seed = (args.seed or [13])[0]
    if bits == 32:
        errors = _gradcheck_32bit(seed)
    else:
        model, ids, mask = gradcheck_model(64, seed)
        params = [p for _, p in model.named_parameters()]
        errors = {}
        for spec in GRADCHECK_HEAD_SPECS:
            kind = parse_head_spec(spec)
            errors[spec] = ac.grad_check(
                lambda: _head_loss(model, kind, ids, mask), params, step=1e-5,
                max_coords_per_param=4, rng=np.random.default_rng(seed))
    all_ok = True
    for spec, err in errors.items():
        ok = err < tolerance
        all_ok &= ok
        print(f"{spec:24s} max-rel-err {err:.3e}  {'PASS' if ok else 'FAIL'}")
    return 0 if all_ok else 1


def cmd_eval(args) -> int:
    if not args.ckpt:
        raise CliError("eval needs --ckpt PATH")
    exp = _experiment_from_args(args)
    model, cfg = model_from_checkpoint(args.ckpt)
    _, eval_set, task, _ = _load_datasets(exp)
    metrics = evaluate(model, eval_set)
    print(json.dumps({"task": task, "head": cfg.head.spec(), "metrics": metrics},
                     sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--task", help="synthetic task: " + ", ".join(sorted(TASK_PRESETS)))
    sub.add_argument("--data", help="training set JSONL")
    sub.add_argument("--eval-data", dest="eval_data", help="evaluation set JSONL")
    sub.add_argument("--vocab", help="vocabulary file (one token per line)")
    sub.add_argument("--head", action="append", help="head spec, repeatable")
    sub.add_argument("--seed", action="append", type=int, help="run seed, repeatable")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--warmup-ratio", dest="warmup_ratio", type=float)
    sub.add_argument("--weight-decay", dest="weight_decay", type=float)
    sub.add_argument("--dropout", type=float)
    sub.add_argument("--train-size", dest="train_size", type=int)
    sub.add_argument("--eval-size", dest="eval_size", type=int)
    sub.add_argument("--vocab-size", dest="vocab_size", type=int)
    sub.add_argument("--seq-len", dest="seq_len", type=int)
    sub.add_argument("--data-seed", dest="data_seed", type=int)
    sub.add_argument("--num-layers", dest="num_layers", type=int)
    sub.add_argument("--d-model", dest="d_model", type=int)
    sub.add_argument("--enc-heads", dest="enc_heads", type=int)
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--jobs", type=int, help="parallel (head, seed) workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clspool",
        description="Train and compare [CLS] aggregation heads on toy tasks.")
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="one (head, seed) run")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_cmp = subs.add_parser("compare", help="heads x seeds grid with tables")
    _add_common(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_abl = subs.add_parser("ablate-k", help="sweep pooling depth k")
    _add_common(p_abl)
    p_abl.add_argument("--k", action="append", type=int, help="k value, repeatable")
    p_abl.add_argument("--heads", type=int, help="attention heads in the pooled head")
    p_abl.add_argument("--pool", help="pooled head kind to sweep (default maxseq+mha)")
    p_abl.set_defaults(func=cmd_ablate_k)

    p_low = subs.add_parser("lowres", help="compare across training-set sizes")
    _add_common(p_low)
    p_low.add_argument("--size", action="append",
                       help="training size (int or 'full'), repeatable")
    p_low.set_defaults(func=cmd_lowres)

    p_gc = subs.add_parser("gradcheck", help="finite-difference check per head kind")
    p_gc.add_argument("--bits", type=int, choices=(32, 64))
    p_gc.add_argument("--seed", action="append", type=int)
    p_gc.set_defaults(func=cmd_gradcheck)

    p_eval = subs.add_parser("eval", help="score a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--ckpt", help="checkpoint path")
    p_eval.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (CliError, ConfigurationError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return USAGE_ERROR
    except (TrainingError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return RUNTIME_ERROR


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
