"""Residual classification networks, the valid block set, and block removal.

Blocks carry global indices assigned once at spec construction: the stem is
index 1, stage blocks follow in order, and the head takes the last index.
Removing blocks never renumbers the survivors, so an index names the same
block in every pruned descendant of a network.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .blocks import (
    Block,
    BlockKind,
    BlockSpec,
    BlockSpecError,
    block_flops,
    block_param_count,
    build_block,
    forward_block,
    is_shape_preserving,
    output_shape,
)
from .params import ParamStore, load_checkpoint, save_checkpoint, state_hash
from .rng import Rng, derive_seed
from .tensor import ShapeError, Tensor, no_grad

SPEC_FORMAT = "blockprune-netspec/1"


class PruneError(ValueError):
    """The requested block may not be removed."""


@dataclass(frozen=True)
class NetworkSpec:
    stem: BlockSpec
    stages: tuple[tuple[BlockSpec, ...], ...]
    head: BlockSpec
    num_classes: int
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self._check_chain()

    def _check_chain(self) -> None:
        if self.head.kind is not BlockKind.FullyConnected:
            raise BlockSpecError(f"head must be FullyConnected, got {self.head.kind.value}")
        if self.head.out_channels != self.num_classes:
            raise BlockSpecError(f"head produces {self.head.out_channels} outputs but num_classes={self.num_classes}")
        shape = self.input_shape
        seen: set[int] = set()
        for spec in self.all_blocks():
            if spec.index in seen:
                raise BlockSpecError(f"duplicate block index {spec.index}")
            seen.add(spec.index)
            if spec.kind is not BlockKind.FullyConnected and spec.in_channels != shape[0]:
                raise BlockSpecError(
                    f"channel chain broken at block {spec.index}: expects {spec.in_channels} input channels, "
                    f"predecessor produces {shape[0]}"
                )
            try:
                shape = output_shape(spec, shape)
            except ShapeError as exc:
                raise BlockSpecError(str(exc)) from exc

    def all_blocks(self) -> list[BlockSpec]:
        return [self.stem, *self.body(), self.head]

    def body(self) -> list[BlockSpec]:
        return [b for stage in self.stages for b in stage]

    def block(self, index: int) -> BlockSpec:
        for b in self.all_blocks():
            if b.index == index:
                return b
        raise KeyError(f"no block with index {index}")

    def input_shapes(self) -> dict[int, tuple[int, ...]]:
        """Per-block input shape (C, H, W) at the declared input resolution."""
        shapes = {}
        shape = self.input_shape
        for spec in self.all_blocks():
            shapes[spec.index] = shape
            shape = output_shape(spec, shape)
        return shapes

    def without(self, indices) -> "NetworkSpec":
        drop = set(indices)
        stages = tuple(tuple(b for b in stage if b.index not in drop) for stage in self.stages)
        return replace(self, stages=stages)


def resnet_spec(
    depth_per_stage,
    widths,
    num_classes: int = 10,
    input_shape=(3, 32, 32),
    norm: bool = True,
) -> NetworkSpec:
    """CIFAR-style ResNet: 3x3 stem, residual stages, global pool + linear head."""
    depth_per_stage, widths = list(depth_per_stage), list(widths)
    if not depth_per_stage or len(depth_per_stage) != len(widths):
        raise BlockSpecError("depth_per_stage and widths must be non-empty lists of equal length")
    if min(depth_per_stage) < 1:
        raise BlockSpecError("every stage needs at least one block")
    index = 1
    stem = BlockSpec(BlockKind.Basic, input_shape[0], widths[0], 1, index=index, stage=-1, norm=norm)
    stages = []
    cin = widths[0]
    for sigma, (depth, width) in enumerate(zip(depth_per_stage, widths)):
        stage = []
        for j in range(depth):
            index += 1
            stride = 2 if (j == 0 and sigma > 0) else 1
            if cin == width and stride == 1:
                kind = BlockKind.Residual
            else:
                kind = BlockKind.ResidualProj
            stage.append(BlockSpec(kind, cin, width, stride, index=index, stage=sigma, norm=norm))
            cin = width
        stages.append(stage)
    index += 1
    head = BlockSpec(
        BlockKind.FullyConnected, cin, num_classes, index=index, stage=-1, global_pool=True, activation=False
    )
    return NetworkSpec(stem, stages, head, num_classes, tuple(input_shape))


PRESETS = {
    "resnet20": dict(depth_per_stage=[3, 3, 3], widths=[16, 32, 64], num_classes=10, input_shape=(3, 32, 32)),
    "resnet56": dict(depth_per_stage=[9, 9, 9], widths=[16, 32, 64], num_classes=10, input_shape=(3, 32, 32)),
    "desk": dict(depth_per_stage=[3, 3, 3], widths=[8, 16, 32], num_classes=4, input_shape=(3, 16, 16)),
    "mini": dict(depth_per_stage=[2, 2, 2], widths=[8, 16, 32], num_classes=4, input_shape=(3, 16, 16)),
}


def preset_spec(name: str, **overrides) -> NetworkSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return resnet_spec(**{**PRESETS[name], **overrides})


# -- networks ---------------------------------------------------------------


def _prefix(spec: BlockSpec, role: str) -> str:
    if role == "stage":
        return f"stage{spec.stage}.block{spec.index}."
    return f"{role}.block{spec.index}."


@dataclass
class Network:
    spec: NetworkSpec
    stem: Block
    blocks: list[Block]
    head: Block

    def all_blocks(self) -> list[Block]:
        return [self.stem, *self.blocks, self.head]

    def _named(self):
        yield self.stem, _prefix(self.stem.spec, "stem")
        for b in self.blocks:
            yield b, _prefix(b.spec, "stage")
        yield self.head, _prefix(self.head.spec, "head")

    @property
    def params(self) -> ParamStore:
        return ParamStore(entry for b, pre in self._named() for entry in b.params.prefixed(pre))

    def block(self, index: int) -> Block:
        for b in self.all_blocks():
            if b.spec.index == index:
                return b
        raise KeyError(f"no block with index {index}")

    def state(self) -> list[tuple[str, int, np.ndarray]]:
        return [(pre + name, role, arr) for b, pre in self._named() for name, role, arr in b.state()]

    def state_hash(self) -> str:
        return state_hash(self.state())

    def load_state(self, entries) -> None:
        mine = {name: (role, arr) for name, role, arr in self.state()}
        given = {name: (role, arr) for name, role, arr in entries}
        if set(mine) != set(given):
            missing = sorted(set(mine) - set(given))[:3]
            extra = sorted(set(given) - set(mine))[:3]
            raise ValueError(f"checkpoint does not match network (missing {missing}, unexpected {extra})")
        for name, (role, arr) in mine.items():
            src = given[name][1]
            if src.shape != arr.shape:
                raise ValueError(f"checkpoint entry {name!r} has shape {src.shape}, network expects {arr.shape}")
            arr[...] = src

    def save(self, path) -> None:
        save_checkpoint(path, self.state())

    def load(self, path) -> None:
        self.load_state(load_checkpoint(path))

    def param_count(self) -> int:
        return self.params.num_scalars()

    def forward(self, batch: Tensor, training: bool = False) -> Tensor:
        return forward(self, batch, training)

    __call__ = forward

    def copy(self) -> "Network":
        return copy.deepcopy(self)


def build_network(spec: NetworkSpec, rng: Rng | int) -> Network:
    """Build every block; block ``i`` draws from the stream ``derive_seed(seed, "block", i)``."""
    seed = rng.seed if isinstance(rng, Rng) else int(rng)
    make = lambda s: build_block(s, block_rng(seed, s.index))  # noqa: E731
    return Network(spec, make(spec.stem), [make(s) for s in spec.body()], make(spec.head))


def block_rng(seed: int, index: int) -> Rng:
    return Rng(derive_seed(seed, "block", index))


def forward(net: Network, batch: Tensor, training: bool = False) -> Tensor:
    expected = net.spec.input_shape
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise ShapeError(f"network expects a batch of shape [N,{','.join(map(str, expected))}], got {batch.shape}")
    x = batch
    for b in net.all_blocks():
        x = forward_block(b, x, training)
    return x


def valid_blocks(spec: NetworkSpec) -> list[int]:
    """Sorted indices of removable blocks: stage blocks that are neither first in
    their stage nor bridging (i.e. they preserve the activation shape)."""
    out = []
    for stage in spec.stages:
        for pos, b in enumerate(stage):
            if pos > 0 and is_shape_preserving(b):
                out.append(b.index)
    return sorted(out)


def _why_invalid(spec: NetworkSpec, i: int) -> str:
    if i == spec.stem.index:
        return f"block {i} is the stem"
    if i == spec.head.index:
        return f"block {i} is the classification head"
    for stage in spec.stages:
        for pos, b in enumerate(stage):
            if b.index == i:
                if pos == 0:
                    return f"block {i} is the first block of stage {b.stage}"
                return f"block {i} is a bridging block ({b.kind.value} {b.in_channels}->{b.out_channels}, stride {b.stride})"
    return f"block {i} does not exist in this network"


def prune(net: Network, i: int) -> Network:
    """Return a copy of ``net`` without block ``i``; ``net`` itself is untouched."""
    return prune_set(net, [i])


def prune_set(net: Network, indices) -> Network:
    drop = sorted(set(int(i) for i in indices))
    valid = set(valid_blocks(net.spec))
    for i in drop:
        if i not in valid:
            raise PruneError(f"cannot prune: {_why_invalid(net.spec, i)}")
    keep = [b for b in net.blocks if b.spec.index not in drop]
    return Network(
        net.spec.without(drop),
        copy.deepcopy(net.stem),
        copy.deepcopy(keep),
        copy.deepcopy(net.head),
    )


def count_flops(spec: NetworkSpec) -> int:
    shapes = spec.input_shapes()
    return sum(block_flops(b, shapes[b.index][1:]) for b in spec.all_blocks())


def count_params(spec: NetworkSpec) -> int:
    return sum(block_param_count(b) for b in spec.all_blocks())


# -- spec text format ---------------------------------------------------------

_FIELDS = [
    ("kind", str),
    ("in", int),
    ("out", int),
    ("stride", int),
    ("norm", bool),
    ("expansion", int),
    ("growth_rate", int),
    ("num_layers", int),
    ("branch_widths", tuple),
    ("global_pool", bool),
    ("activation", bool),
]
_ATTR = {"in": "in_channels", "out": "out_channels"}


def _block_line(role: str, b: BlockSpec) -> str:
    parts = [role, f"index={b.index}"]
    if role == "block":
        parts.append(f"stage={b.stage}")
    parts += [
        f"kind={b.kind.value}",
        f"in={b.in_channels}",
        f"out={b.out_channels}",
        f"stride={b.stride}",
        f"norm={str(b.norm).lower()}",
    ]
    if b.kind in (BlockKind.MobileNetV2S1, BlockKind.MobileNetV2S2):
        parts.append(f"expansion={b.expansion}")
    if b.kind is BlockKind.Dense:
        parts += [f"growth_rate={b.growth_rate}", f"num_layers={b.num_layers}"]
    if b.kind is BlockKind.Inception:
        parts.append("branch_widths=" + ",".join(map(str, b.inception_widths)))
    if b.kind is BlockKind.FullyConnected:
        parts += [f"global_pool={str(b.global_pool).lower()}", f"activation={str(b.activation).lower()}"]
    return " ".join(parts)


def dumps_spec(spec: NetworkSpec) -> str:
    lines = [
        f"format = {SPEC_FORMAT}",
        f"num_classes = {spec.num_classes}",
        "input_shape = " + ",".join(map(str, spec.input_shape)),
        _block_line("stem", spec.stem),
    ]
    lines += [_block_line("block", b) for b in spec.body()]
    lines.append(_block_line("head", spec.head))
    return "\n".join(lines) + "\n"


def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_block(tokens: list[str], lineno: int) -> BlockSpec:
    kw = {}
    for tok in tokens:
        if "=" not in tok:
            raise ValueError(f"line {lineno}: expected key=value, got {tok!r}")
        key, val = tok.split("=", 1)
        if key in ("index", "stage", "in", "out", "stride", "expansion", "growth_rate", "num_layers"):
            kw[_ATTR.get(key, key)] = int(val)
        elif key in ("norm", "global_pool", "activation"):
            kw[key] = _parse_bool(val)
        elif key == "kind":
            kw["kind"] = BlockKind(val)
        elif key == "branch_widths":
            kw[key] = tuple(int(v) for v in val.split(","))
        else:
            raise ValueError(f"line {lineno}: unknown block key {key!r}")
    return BlockSpec(**kw)


def loads_spec(text: str) -> NetworkSpec:
    header: dict[str, str] = {}
    stem = head = None
    body: list[BlockSpec] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        role, _, rest = line.partition(" ")
        if role in ("stem", "block", "head"):
            b = _parse_block(rest.split(), lineno)
            if role == "stem":
                stem = replace(b, stage=-1)
            elif role == "head":
                head = replace(b, stage=-1)
            else:
                body.append(b)
        elif "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
            header[key] = val
        else:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}")
    if header.get("format") != SPEC_FORMAT:
        raise ValueError(f"expected format = {SPEC_FORMAT}, got {header.get('format')!r}")
    if stem is None or head is None:
        raise ValueError("network spec needs exactly one stem and one head line")
    stage_ids = sorted({b.stage for b in body})
    stages = [[b for b in body if b.stage == s] for s in stage_ids]
    return NetworkSpec(
        stem,
        stages,
        head,
        int(header["num_classes"]),
        tuple(int(v) for v in header["input_shape"].split(",")),
    )


def save_spec(spec: NetworkSpec, path) -> None:
    Path(path).write_text(dumps_spec(spec), encoding="utf-8", newline="\n")


def load_spec(path) -> NetworkSpec:
    return loads_spec(Path(path).read_text(encoding="utf-8"))


def evaluate_accuracy(net: Network, ds, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    correct = 0
    with no_grad():
        for start in range(0, len(ds), batch_size):
            x = Tensor(ds.images[start : start + batch_size])
            logits = forward(net, x, training=False).data
            correct += int(np.sum(np.argmax(logits, axis=1) == ds.labels[start : start + batch_size]))
    return correct / len(ds)
