"""Command-line entry point: ``blockprune {train,prune,bench,compare}``.

Exit codes: 0 success, 2 usage/config/input-format error, 3 runtime failure.
Results go to stdout; reasons for failure go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from . import config as C
from .bench import emit_curve, measure_latency
from .data import (
    CIFAR10_MEAN,
    CIFAR10_STD,
    CorruptRecordError,
    DataFormatError,
    Dataset,
    load_cifar10_binary,
    normalize,
    split,
    synth_dataset,
)
from .params import CheckpointError
from .pruning import (
    BudgetError,
    brute_force,
    check_brute_force_budget,
    greedy_prune,
    sequential_baseline,
    srinit_prune,
)
from .trainer import PRESETS as PRESETS_TRAIN
from .trainer import TrainingDiverged, preset_config, train
from .zoo import (
    PRESETS as MODEL_PRESETS,
    Network,
    NetworkSpec,
    build_network,
    count_flops,
    load_spec,
    preset_spec,
    prune_set,
    save_spec,
    valid_blocks,
)

log = logging.getLogger("blockprune")

METHODS = ("greedy", "sequential", "srinit", "brute")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


# -- resolution helpers ----------------------------------------------------------


def _spec_for(cfg: dict[str, str]) -> NetworkSpec:
    model = cfg["model"]
    if model in MODEL_PRESETS:
        return preset_spec(model)
    ckpt = cfg["checkpoint"]
    path = Path(model) if model else Path(ckpt).with_suffix(".netspec")
    if not path.is_file():
        raise UsageError(f"key 'model': {model!r} is neither a preset ({', '.join(MODEL_PRESETS)}) nor a spec file")
    return load_spec(path)


def _datasets(cfg: dict[str, str]) -> tuple[Dataset, Dataset]:
    source = cfg["data"]
    split_seed = C.get_int(cfg, "split_seed")
    fraction = C.get_float(cfg, "val_fraction")
    if source == "synth":
        shape = tuple(int(v) for v in cfg["synth_shape"].split(","))
        ds = synth_dataset(
            C.get_int(cfg, "synth_classes"), C.get_int(cfg, "synth_per_class"), shape, C.get_int(cfg, "synth_seed")
        )
        return split(ds, (1 - fraction, fraction), split_seed)
    if source == "cifar10":
        if not cfg["cifar10_train"]:
            raise UsageError("data = cifar10 requires key 'cifar10_train' (comma-separated batch files)")
        paths = _existing(cfg, "cifar10_train")
        ds = normalize(load_cifar10_binary(paths), CIFAR10_MEAN, CIFAR10_STD)
        if cfg["cifar10_val"]:
            val = normalize(load_cifar10_binary(_existing(cfg, "cifar10_val"), "val"), CIFAR10_MEAN, CIFAR10_STD)
            return ds, val
        return split(ds, (1 - fraction, fraction), split_seed)
    raise UsageError(f"key 'data' must be 'synth' or 'cifar10', got {source!r}")


def _existing(cfg, key) -> list[str]:
    paths = [p.strip() for p in cfg[key].split(",") if p.strip()]
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"key {key!r}: file not found: {p}")
    return paths


def _load_network(cfg: dict[str, str], spec: NetworkSpec) -> Network:
    ckpt = cfg["checkpoint"]
    if not ckpt:
        raise UsageError("key 'checkpoint' is required")
    if not Path(ckpt).is_file():
        raise UsageError(f"key 'checkpoint': file not found: {ckpt}")
    net = build_network(spec, C.get_int(cfg, "seed"))
    try:
        net.load(ckpt)
    except (CheckpointError, ValueError) as exc:
        raise UsageError(f"key 'checkpoint': {exc}") from exc
    return net


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: dict[str, str]) -> None:
    lines = [f"command = {command}"]
    lines += [f"config.{k} = {cfg[k]}" for k in sorted(cfg)]
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name != "manifest.txt":
            lines.append(f"sha256.{p.name} = {_sha256(p)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_network(net: Network, out: Path, stem: str) -> None:
    net.save(out / f"{stem}.ckpt")
    save_spec(net.spec, out / f"{stem}.netspec")


# -- commands ----------------------------------------------------------------------


def cmd_train(cfg: dict[str, str]) -> int:
    spec = _spec_for(cfg)
    train_ds, val_ds = _datasets(cfg)
    overrides = {}
    for key, conv in (("epochs", int), ("lr0", float), ("batch_size", int)):
        if cfg[key]:
            overrides[key] = conv(cfg[key])
    if "epochs" in overrides:
        base = PRESETS_TRAIN.get(cfg["train_preset"])
        if base is not None:
            overrides["milestones"] = tuple(m for m in base.milestones if m < overrides["epochs"])
    try:
        tcfg = preset_config(cfg["train_preset"], seed=C.get_int(cfg, "seed"), **overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"training config: {exc}") from exc
    net = build_network(spec, C.get_int(cfg, "seed"))
    report = train(net, train_ds, val_ds, tcfg)
    out = _out_dir(cfg)
    _save_network(net, out, "model")
    report.to_csv(out / "train_report.csv")
    _write_manifest(out, "train", cfg)
    print(f"trained {tcfg.epochs} epochs: val_acc={report.final_val_acc:.4f} params={net.param_count()}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _validate_prune(cfg, spec) -> tuple[str, int]:
    method = cfg["method"]
    if method not in METHODS:
        raise UsageError(f"key 'method' must be one of {', '.join(METHODS)}, got {method!r}")
    n_valid = len(valid_blocks(spec))
    if method == "brute":
        try:
            check_brute_force_budget(n_valid)
        except BudgetError as exc:
            raise UsageError(str(exc)) from exc
    k = C.get_int(cfg, "k") if cfg["k"] else n_valid
    if not 0 <= k <= n_valid:
        raise UsageError(f"key 'k' must lie in [0, {n_valid}] for this model, got {k}")
    if cfg["finetune"] not in ("off", "final", "each"):
        raise UsageError(f"key 'finetune' must be off, final or each, got {cfg['finetune']!r}")
    return method, k


def _latency_fn(cfg):
    runs = C.get_int(cfg, "step_latency_runs")
    if runs <= 0:
        return None
    warmup = C.get_int(cfg, "warmup")
    return lambda net: measure_latency(net, runs=runs, warmup=warmup)


def _run_method(method, net, k, cfg, train_ds, val_ds, out: Path | None):
    kwargs = dict(
        finetune=cfg["finetune"],
        ft_preset=cfg["ft_preset"],
        train_ds=train_ds,
        latency_fn=_latency_fn(cfg),
    )
    if out is not None:
        kwargs["on_step"] = lambda j, pruned: _save_network(pruned, out, f"{method}_step{j}")
    if method == "greedy":
        return greedy_prune(net, val_ds, k, workers=C.get_int(cfg, "workers"), **kwargs)
    if method == "sequential":
        return sequential_baseline(net, k, val_ds, **kwargs)
    return srinit_prune(net, val_ds, k, trials=C.get_int(cfg, "trials"), seed=C.get_int(cfg, "seed"), **kwargs)


def _write_brute(result, net, out: Path) -> None:
    result.to_csv(out / "brute_force.csv")
    lines = ["k,subset,accuracy,params,flops"]
    for k in sorted(result.best):
        subset, acc = result.best[k]
        pruned = prune_set(net, subset)
        lines.append(f"{k},{';'.join(map(str, subset))},{acc:.6g},{pruned.param_count()},{count_flops(pruned.spec)}")
    (out / "brute_best.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def cmd_prune(cfg: dict[str, str]) -> int:
    spec = _spec_for(cfg)
    method, k = _validate_prune(cfg, spec)
    net = _load_network(cfg, spec)
    train_ds, val_ds = _datasets(cfg)
    out = _out_dir(cfg)
    if method == "brute":
        result = brute_force(net, val_ds, k, workers=C.get_int(cfg, "workers"))
        _write_brute(result, net, out)
        for kk in sorted(result.best):
            subset, acc = result.best[kk]
            print(f"k={kk} best={list(subset)} acc={acc:.4f}")
    else:
        traj = _run_method(method, net, k, cfg, train_ds, val_ds, out)
        emit_curve(traj, out / "trajectory.csv")
        for j, table in enumerate(traj.importance, 1):
            table.to_csv(out / f"importance_step{j}.csv")
        print(f"{method}: removed {traj.removed}")
        for s in traj.steps:
            print(f"  block {s.removed}: acc={s.acc_raw:.4f} params={s.params_remaining} flops={s.flops_remaining}")
    _write_manifest(out, "prune", cfg)
    return EXIT_OK


def cmd_bench(cfg: dict[str, str]) -> int:
    spec = _spec_for(cfg)
    runs, warmup = C.get_int(cfg, "runs"), C.get_int(cfg, "warmup")
    if runs < 1 or warmup < 0:
        raise UsageError("key 'runs' must be >= 1 and 'warmup' >= 0")
    net = _load_network(cfg, spec)
    report = measure_latency(net, runs=runs, warmup=warmup)
    out = _out_dir(cfg)
    text = report.to_text() + f"params={net.param_count()}\nflops={count_flops(net.spec)}\n"
    (out / "latency.txt").write_text(text, encoding="utf-8", newline="\n")
    _write_manifest(out, "bench", cfg)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(cfg: dict[str, str]) -> int:
    """All three heuristics plus the exhaustive optimum on one checkpoint."""
    spec = _spec_for(cfg)
    n_valid = len(valid_blocks(spec))
    try:
        check_brute_force_budget(n_valid)
    except BudgetError as exc:
        raise UsageError(str(exc)) from exc
    net = _load_network(cfg, spec)
    train_ds, val_ds = _datasets(cfg)
    out = _out_dir(cfg)
    result = brute_force(net, val_ds, workers=C.get_int(cfg, "workers"))
    _write_brute(result, net, out)
    lines = ["k,brute,greedy,sequential,srinit"]
    trajs = {}
    for method in ("greedy", "sequential", "srinit"):
        trajs[method] = _run_method(method, net, n_valid, cfg, train_ds, val_ds, None)
        emit_curve(trajs[method], out / f"curve_{method}.csv")
    for kk in range(n_valid + 1):
        accs = [
            trajs[m].base_accuracy if kk == 0 else trajs[m].steps[kk - 1].acc_raw
            for m in ("greedy", "sequential", "srinit")
        ]
        lines.append(f"{kk},{result.best_accuracy(kk):.6g}," + ",".join(f"{a:.6g}" for a in accs))
    (out / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    _write_manifest(out, "compare", cfg)
    sys.stdout.write((out / "comparison.csv").read_text())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "bench": cmd_bench, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockprune", description="Block-level pruning of residual networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--k", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--runs", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key (repeatable)"
        )
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    overrides: dict[str, str | None] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_USAGE
        overrides[key.strip()] = value.strip()
    for key in ("method", "k", "seed", "runs", "out"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = str(value)
    try:
        cfg = C.resolve(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (UsageError, C.ConfigError, DataFormatError, BudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, CorruptRecordError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
