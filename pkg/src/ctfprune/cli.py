"""Command-line entry point: train, ablate, bench, dump-masks, export.

Configuration is a flat ``key=value`` text file (``#`` starts a comment);
every key can also be given on the command line as ``--key value``, which
wins over the file.  ``ctfprune train --help`` lists the keys.

Run directories land under ``--out``, else ``$CTFPRUNE_OUT``, else ``./runs``.
A finished run directory holds::

    config.txt     resolved configuration (a valid config file) plus provenance
    metrics.csv    one row per epoch
    checkpoint.bin latent weights and sigma
    masks/         one binarized mask grid per prunable layer
    bench.csv      dense vs compact timing and FLOP counts

Exit codes: 0 success, 2 usage, 3 data or file format, 4 divergence or a
mask that cannot be compacted.
"""

import argparse
import csv
import hashlib
import io
import os
import statistics
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data_io, gcn, sparse_exec
from .errors import (ConfigError, CtfError, DimensionError, DivergenceError, FormatError, InputError,
                     NonFiniteError, StructuralError)
from .mask_param import binarize, read_mask_file, write_mask_file
from .pruning_trainer import BudgetConfig, TrainConfig, train, write_metrics

ENV_OUT = "CTFPRUNE_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAIL = 0, 2, 3, 4

BENCH_COLUMNS = ("mode", "rate", "dense_ms", "compact_ms", "wallclock_speedup", "flop_speedup",
                 "structured_fraction", "accuracy")
SUMMARY_COLUMNS = ("row", "mode", "rate", "lam", "seeds", "failed", "achieved_rate", "train_acc", "test_acc",
                   "flop_speedup", "wallclock_speedup", "structured_fraction")


@dataclass
class DataConfig:
    data: str = "synth"  # "synth" or a CSV path
    frames: int = 8
    synth_classes: int = 2
    synth_per_class: int = 20
    synth_joints: int = 6
    synth_noise: float = 0.05
    data_seed: int = 0
    split_fraction: float = 0.5
    split_seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("frames must be positive")
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split_fraction must lie in (0, 1)")


@dataclass
class RunOptions:
    name: str = ""
    bench_batch: int = 64
    bench_reps: int = 30
    bench_threads: int = 1  # 0 leaves the BLAS pool alone
    ablate_seeds: str = "0"
    ablate_rates: str = "0.9,0.95,0.98"

    def __post_init__(self):
        if self.bench_batch < 1:
            raise ConfigError("bench_batch must be positive")
        if self.bench_reps < 10:
            raise ConfigError("bench_reps must be at least 10")
        if self.bench_threads < 0:
            raise ConfigError("bench_threads must be non-negative")
        _int_list(self.ablate_seeds, "ablate_seeds")
        _float_list(self.ablate_rates, "ablate_rates")


_DATA_DERIVED = ("nodes", "features", "classes")
SECTIONS = (
    ("train", TrainConfig, ()),
    ("budget", BudgetConfig, ()),
    ("model", gcn.GcnConfig, _DATA_DERIVED),
    ("data", DataConfig, ()),
    ("run", RunOptions, ()),
)


def _schema():
    out = {}
    for section, cls, skip in SECTIONS:
        for f in fields(cls):
            if f.name in skip:
                continue
            if f.name in out:
                raise RuntimeError(f"config key {f.name!r} defined twice")
            out[f.name] = (section, f.type, f.default)
    return out


SCHEMA = _schema()


def _int_list(text, key):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers") from None


def _float_list(text, key):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of numbers") from None


def _coerce(key, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(SCHEMA))}")
    kind = SCHEMA[key][1]
    if not isinstance(text, str):
        return kind(text)
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def read_config(path):
    """Parse a key=value file into {key: typed value}."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def resolve(config_path=None, overrides=None):
    """Defaults, then the file, then the overrides; returns a full typed dict."""
    values = {key: default for key, (_, _, default) in SCHEMA.items()}
    if config_path:
        values.update(read_config(config_path))
    for key, value in (overrides or {}).items():
        values[key] = _coerce(key, value)
    return values


def _section(values, name):
    cls = next(c for s, c, _ in SECTIONS if s == name)
    return {f.name: values[f.name] for f in fields(cls) if f.name in values}


@dataclass
class Settings:
    values: dict
    train: TrainConfig
    budget: BudgetConfig
    data: DataConfig
    run: RunOptions
    model_kwargs: dict


def build_settings(values):
    return Settings(
        values=dict(values),
        train=TrainConfig(**_section(values, "train")),
        budget=BudgetConfig(**_section(values, "budget")),
        data=DataConfig(**_section(values, "data")),
        run=RunOptions(**_section(values, "run")),
        model_kwargs=_section(values, "model"),
    )


def format_config(values):
    """Render a full config as key=value lines, grouped by section."""
    lines = []
    for section, cls, skip in SECTIONS:
        lines.append(f"# [{section}]")
        for f in fields(cls):
            if f.name not in skip:
                lines.append(f"{f.name}={values[f.name]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- data/model


@dataclass
class Prepared:
    config: gcn.GcnConfig
    train: tuple
    test: tuple
    data_digest: str


def prepare(settings):
    dc = settings.data
    if dc.data == "synth":
        ds = data_io.synth_generate(dc.synth_classes, dc.synth_per_class, dc.synth_joints, dc.frames,
                                    dc.synth_noise, dc.data_seed)
        digest = hashlib.sha256(repr(sorted(ds.meta.items())).encode()).hexdigest()
    else:
        path = Path(dc.data)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read data file {path}: {exc.strerror}") from None
        ds = data_io.load_csv(path)
        digest = hashlib.sha256(raw).hexdigest()
    tr, te = data_io.split(ds, dc.split_fraction, dc.split_seed)
    cfg = gcn.GcnConfig(nodes=ds.joints, features=3 * dc.frames, classes=ds.classes, **settings.model_kwargs)
    T = dc.frames
    return Prepared(cfg, (data_io.to_signals(tr, T), tr.labels), (data_io.to_signals(te, T), te.labels), digest)


def _gate(tcfg):
    return dict(aggregate=tcfg.coarse_aggregate, power=tcfg.gate_power, eps=tcfg.gate_eps)


def pruned_weights(model, tcfg, binary):
    """Effective weights under the run's mode with ``binary`` masks applied."""
    masks = model.masks(**_gate(tcfg)) if tcfg.mode != "none" else None
    soft = model.effective(tcfg.mode, masks)
    out = {}
    for name, w in soft.items():
        if name in binary and binary[name].shape != w.shape:
            raise StructuralError(f"{name}: mask {binary[name].shape} does not fit weights {w.shape}")
        out[name] = w.data * binary[name] if name in binary else w.data.copy()
    return out


def binary_masks(model, tcfg):
    masks = model.masks(**_gate(tcfg)) if tcfg.mode != "none" else {}
    out = {}
    for name in gcn.LAYER_NAMES:
        if name in masks:
            out[name] = binarize(masks[name].select(gcn.MODE_FIELD[tcfg.mode]), tcfg.threshold).mask
        else:
            out[name] = np.ones(model.layers[name].latent.shape)
    return out


def compact_from(cfg, weights, binary, mode):
    layouts = cfg.layouts()
    summaries = {name: sparse_exec.analyze_mask(binary[name], layouts[name]) for name in gcn.LAYER_NAMES}
    # fine masks keep every tensor at full size (the "none" speedup case) and
    # an unpruned model has nothing to compact
    cm = sparse_exec.compact_model(cfg, weights, summaries, structural=mode in ("coarse", "ctf"))
    return cm, summaries


def run_bench(cfg, weights, binary, mode, run_opts, test, seed=0):
    """One bench row (as a dict of strings) plus the BenchResult."""
    cm, summaries = compact_from(cfg, weights, binary, mode)
    dense = sparse_exec.compact_model(cfg, weights, {}, structural=False)
    rng = np.random.default_rng(seed)
    batch = rng.normal(size=(run_opts.bench_batch, cfg.features, cfg.nodes))
    threads = run_opts.bench_threads or None
    res = sparse_exec.benchmark(dense, cm, batch, run_opts.bench_reps, threads=threads)
    signals, labels = test
    acc = float((gcn.predict(sparse_exec.compact_forward(cm, signals)) == labels).mean()) if len(labels) else float("nan")
    sf = sparse_exec.structured_fraction(summaries)
    return res, sf, acc


def _fmt(v):
    return "none" if v is None else repr(float(v))


def write_bench(path, mode, rate, res, sf, acc):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        w.writerow((mode, repr(float(rate)), repr(res.dense_ms), repr(res.compact_ms), _fmt(res.wallclock_speedup),
                    _fmt(res.flop_speedup), repr(float(sf)), repr(float(acc))))


# ---------------------------------------------------------------- run dirs


def output_root(cli_out=None):
    return Path(cli_out or os.environ.get(ENV_OUT) or "runs")


def default_name(s):
    if s.train.mode == "none":
        return f"none_s{s.train.seed}"
    return f"{s.train.mode}_r{s.budget.rate:g}_lam{s.budget.lam:g}_s{s.train.seed}"


@dataclass
class RunOutcome:
    directory: Path
    achieved_rate: float
    train_acc: float
    test_acc: float
    bench: object = None
    structured_fraction: float = float("nan")
    bench_acc: float = float("nan")


def train_run(settings, directory):
    """Train, then write every run-directory artifact; returns a RunOutcome.

    The bench step runs last, so a mask that cannot be compacted still leaves
    config, metrics, checkpoint and masks behind before StructuralError
    propagates.
    """
    prep = prepare(settings)
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    config_text = format_config(settings.values)
    digest = hashlib.sha256((config_text + prep.data_digest).encode()).hexdigest()
    manifest = (config_text + f"# seed={settings.train.seed}\n# input_hash=sha256:{digest}\n"
                "# layout=config.txt metrics.csv checkpoint.bin masks/<layer>.mask bench.csv\n")
    (directory / "config.txt").write_text(manifest)

    model = gcn.GcnModel(prep.config, np.random.default_rng(settings.train.seed))
    state = train(model, prep.train, prep.test, settings.train, settings.budget)
    write_metrics(directory / "metrics.csv", state.history)
    r = state.result
    t = settings.train
    gcn.save_checkpoint(directory / "checkpoint.bin", model, state.epoch,
                        {"mode": t.mode, "coarse_aggregate": t.coarse_aggregate, "gate_power": t.gate_power,
                         "gate_eps": t.gate_eps, "threshold": t.threshold})
    prunable = prep.config.prunable()
    for name in gcn.LAYER_NAMES:
        if prunable[name]:
            write_mask_file(directory / "masks" / f"{name}.mask", r.binary_masks[name])
    out = RunOutcome(directory, r.achieved_rate, r.train_acc, r.test_acc)
    res, sf, acc = run_bench(prep.config, r.weights, r.binary_masks, t.mode, settings.run, prep.test)
    write_bench(directory / "bench.csv", t.mode, settings.budget.rate, res, sf, acc)
    out.bench, out.structured_fraction, out.bench_acc = res, sf, acc
    return out


def load_run(directory):
    """(settings, model, binary masks) from a run directory."""
    directory = Path(directory)
    if not (directory / "config.txt").is_file():
        raise FormatError(f"{directory} is not a run directory (no config.txt)")
    settings = build_settings(resolve(directory / "config.txt"))
    model, _ = gcn.load_checkpoint(directory / "checkpoint.bin")
    binary = {}
    for name in gcn.LAYER_NAMES:
        path = directory / "masks" / f"{name}.mask"
        binary[name] = read_mask_file(path) if path.is_file() else np.ones(model.layers[name].latent.shape)
    return settings, model, binary


# ---------------------------------------------------------------- commands


def cmd_train(args, values):
    s = build_settings(values)
    directory = output_root(args.out) / (s.run.name or default_name(s))
    out = train_run(s, directory)
    b = out.bench
    print(f"run: {directory}")
    print(f"achieved_rate={out.achieved_rate:.4f} train_acc={out.train_acc:.4f} test_acc={out.test_acc:.4f}")
    print(f"flop_speedup={b.speedup_text('flop')} wallclock_speedup={b.speedup_text('wallclock')} "
          f"structured_fraction={out.structured_fraction:.4f}")
    return EXIT_OK


def ablation_rows(settings):
    """(label, overrides) for baseline, lam=0 band-stop and the mode x rate grid."""
    rates = _float_list(settings.run.ablate_rates, "ablate_rates")
    rows = [("baseline", {"mode": "none"}),
            ("bandstop_lam0", {"mode": "fine", "lam": 0.0, "warmup_epochs": 0})]
    for mode in ("coarse", "fine", "ctf"):
        for rate in rates:
            rows.append((f"{mode}_{rate:g}", {"mode": mode, "rate": rate}))
    return rows


def _median(xs):
    xs = [x for x in xs if x is not None]
    return statistics.median(xs) if xs else None


def cmd_ablate(args, values):
    base = build_settings(values)
    root = output_root(args.out) / (base.run.name or "ablate")
    seeds = _int_list(base.run.ablate_seeds, "ablate_seeds")
    if not seeds:
        raise ConfigError("ablate_seeds is empty")
    summary = []
    for label, over in ablation_rows(base):
        outcomes, failed = [], 0
        for seed in seeds:
            cell = dict(values, seed=seed, name=f"{label}_s{seed}", **over)
            try:
                outcomes.append(train_run(build_settings(cell), root / "cells" / f"{label}_s{seed}"))
            except (DivergenceError, StructuralError) as exc:
                failed += 1
                print(f"{label} seed {seed}: {type(exc).__name__}: {exc}", file=sys.stderr)
        mode = over["mode"]
        lam = None if mode == "none" else over.get("lam", base.budget.lam)
        rate = over.get("rate")
        med = lambda f: _median([f(o) for o in outcomes])
        flop = med(lambda o: o.bench.flop_speedup)
        wall = med(lambda o: o.bench.wallclock_speedup)
        row = {
            "row": label, "mode": mode, "rate": "-" if rate is None else f"{rate:g}", "lam": "-" if lam is None else f"{lam:g}",
            "seeds": str(len(seeds)), "failed": str(failed),
            "achieved_rate": _num(med(lambda o: o.achieved_rate)),
            "train_acc": _num(med(lambda o: o.train_acc)),
            "test_acc": _num(med(lambda o: o.test_acc)),
            "flop_speedup": "none" if outcomes and flop is None else _num(flop),
            "wallclock_speedup": "none" if outcomes and wall is None else _num(wall),
            "structured_fraction": _num(med(lambda o: o.structured_fraction)),
        }
        summary.append(row)
        print(",".join(row[c] for c in SUMMARY_COLUMNS), flush=True)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    print(f"summary: {root / 'summary.csv'}")
    return EXIT_OK


def _num(v):
    return "nan" if v is None else f"{v:.6g}"


def cmd_bench(args):
    settings, model, binary = load_run(args.run)
    prep = prepare(settings)
    if model.config != prep.config:
        raise StructuralError("checkpoint architecture does not match the run configuration")
    if args.masks:
        binary = {name: read_mask_file(Path(args.masks) / f"{name}.mask") if (Path(args.masks) / f"{name}.mask").is_file()
                  else binary[name] for name in gcn.LAYER_NAMES}
    weights = pruned_weights(model, settings.train, binary)
    res, sf, acc = run_bench(prep.config, weights, binary, settings.train.mode, settings.run, prep.test)
    target = Path(args.output) if args.output else Path(args.run) / "bench.csv"
    write_bench(target, settings.train.mode, settings.budget.rate, res, sf, acc)
    print(target.read_text(), end="")
    return EXIT_OK


def _resolve_checkpoint(path):
    path = Path(path)
    return path / "checkpoint.bin" if path.is_dir() else path


def cmd_dump(args):
    ckpt = _resolve_checkpoint(args.source)
    model, info = gcn.load_checkpoint(ckpt)
    extra = info["extra"]
    mode = extra.get("mode", "none")
    tcfg = TrainConfig(mode=mode, coarse_aggregate=extra.get("coarse_aggregate", "saturating"),
                       gate_power=int(extra.get("gate_power", 4)), gate_eps=float(extra.get("gate_eps", 1e-3)),
                       threshold=float(extra.get("threshold", 0.5)))
    out_dir = Path(args.output) if args.output else ckpt.parent / "dump"
    out_dir.mkdir(parents=True, exist_ok=True)
    layouts = model.config.layouts()
    prunable = model.config.prunable()
    if args.real and mode != "none":
        soft = model.masks(**_gate(tcfg))
    binary = binary_masks(model, tcfg)
    for name in gcn.LAYER_NAMES:
        if not prunable[name]:
            continue
        if args.real and mode != "none":
            write_mask_file(out_dir / f"{name}.txt", soft[name].select(gcn.MODE_FIELD[mode]).data, real=True)
        else:
            write_mask_file(out_dir / f"{name}.txt", binary[name])
        summ = sparse_exec.analyze_mask(binary[name], layouts[name])
        diag = [b for b in summ.dead_blocks if b[0] == b[1]]
        kept = int(binary[name].sum())
        print(f"{name}: kept {kept}/{binary[name].size}, dead blocks {len(summ.dead_blocks)} "
              f"(diagonal {len(diag)}), dead rows {len(summ.dead_rows)}, dead cols {len(summ.dead_cols)}")
    print(f"masks: {out_dir}")
    return EXIT_OK


def cmd_export(args):
    settings, model, binary = load_run(args.run)
    weights = pruned_weights(model, settings.train, binary)
    cm, _ = compact_from(model.config, weights, binary, settings.train.mode)
    arrays = {"nodes": cm.nodes}
    for stage in cm.heads:
        arrays.update(_matrix_arrays(f"head{stage.head}", stage.kernel))
        arrays[f"head{stage.head}_feats"] = stage.feats
    arrays.update(_matrix_arrays("conv", cm.conv))
    arrays.update(_matrix_arrays("dense", cm.dense))
    target = Path(args.output) if args.output else Path(args.run) / "compact.npz"
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    target.write_bytes(buf.getvalue())
    desc = cm.describe()
    print(" ".join(f"{k}={v}" for k, v in desc.items()))
    print(f"compact model: {target}")
    return EXIT_OK


def _matrix_arrays(prefix, m):
    """Core block and residual triples in original tensor coordinates.

    Head kernels hold the transposed adjacency: rows are source nodes.
    """
    cols = m.col_map[m.out]
    return {f"{prefix}_core": m.core, f"{prefix}_core_rows": m.row_map[m.core_rows],
            f"{prefix}_core_cols": cols[m.core_cols],
            f"{prefix}_res_rows": m.row_map[m.res_rows], f"{prefix}_res_cols": cols[m.res_cols],
            f"{prefix}_res_vals": m.res_vals}


# ---------------------------------------------------------------- parsing


def _add_config_options(p):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--out", help=f"output root (default ${ENV_OUT} or ./runs)")
    group = p.add_argument_group("configuration keys")
    for key, (section, kind, default) in SCHEMA.items():
        flags = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
        group.add_argument(*flags, dest=f"key_{key}", metavar=kind.__name__.upper(),
                           help=f"[{section}] default {default}")


def build_parser():
    parser = argparse.ArgumentParser(prog="ctfprune", description="Coarse-to-fine mask pruning for GCNs.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_config_options(sub.add_parser("train", help="train one configuration into a run directory"))
    _add_config_options(sub.add_parser("ablate", help="baseline, lam=0 band-stop and the mode x rate grid"))
    p = sub.add_parser("bench", help="time dense vs compact forward for a run directory")
    p.add_argument("run")
    p.add_argument("--masks", help="directory of <layer>.mask files (default: the run's masks/)")
    p.add_argument("--output", help="bench CSV path (default: <run>/bench.csv)")
    p = sub.add_parser("dump-masks", help="write binarized mask grids from a checkpoint")
    p.add_argument("source", help="run directory or checkpoint file")
    p.add_argument("--output", help="directory for the grids (default: <run>/dump)")
    p.add_argument("--real", action="store_true", help="write soft mask values instead of 0/1")
    p = sub.add_parser("export", help="write the compact model of a run as .npz")
    p.add_argument("run")
    p.add_argument("--output", help="target file (default: <run>/compact.npz)")
    return parser


def _exit_for(exc):
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, (FormatError, InputError)):
        return EXIT_DATA
    if isinstance(exc, (DivergenceError, StructuralError, DimensionError, NonFiniteError)):
        return EXIT_FAIL
    return EXIT_FAIL


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}; valid keys: {', '.join(sorted(SCHEMA))}")
    try:
        if args.command in ("train", "ablate"):
            overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_") and v is not None}
            values = resolve(args.config, overrides)
            return (cmd_train if args.command == "train" else cmd_ablate)(args, values)
        handler = {"bench": cmd_bench, "dump-masks": cmd_dump, "export": cmd_export}[args.command]
        return handler(args)
    except CtfError as exc:
        code = _exit_for(exc)
        print(f"ctfprune: error: {exc}", file=sys.stderr)
        state = getattr(exc, "state", None)
        if state:
            print("ctfprune: diagnostic: " + " ".join(f"{k}={v}" for k, v in state.items()), file=sys.stderr)
        return code
    except FileNotFoundError as exc:
        print(f"ctfprune: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
