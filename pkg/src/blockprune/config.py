"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Command-line flags override file values. Recognized keys and defaults are in
:data:`DEFAULTS`; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from pathlib import Path

DEFAULTS: dict[str, str] = {
    # model: preset name (desk, mini, resnet20, resnet56) or path to a .netspec file
    "model": "desk",
    "checkpoint": "",
    # data: synth | cifar10
    "data": "synth",
    "cifar10_train": "",
    "cifar10_val": "",
    "synth_classes": "4",
    "synth_per_class": "256",
    "synth_shape": "3,16,16",
    "synth_seed": "0",
    "val_fraction": "0.2",
    "split_seed": "0",
    "seed": "0",
    "train_preset": "desk",
    "epochs": "",
    "lr0": "",
    "batch_size": "",
    # prune
    "method": "greedy",
    "k": "",
    "finetune": "off",
    "ft_preset": "desk",
    "trials": "3",
    "workers": "1",
    "step_latency_runs": "0",
    # bench
    "runs": "1000",
    "warmup": "50",
    "out": "out",
}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve(path: str | None, overrides: dict[str, str | None]) -> dict[str, str]:
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = str(value)
    return cfg


def get_int(cfg: dict[str, str], key: str) -> int:
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"key {key!r} must be an integer, got {cfg[key]!r}") from None


def get_float(cfg: dict[str, str], key: str) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"key {key!r} must be a number, got {cfg[key]!r}") from None


def dumps(cfg: dict[str, str]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
