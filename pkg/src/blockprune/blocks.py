"""The ten convolutional block types, with shape, parameter and MAC accounting.

Layouts (``bn`` is present only when ``spec.norm``; without it every conv
carries a bias instead):

* FullyConnected: [global average pool] -> linear -> [relu]
* Basic:          conv3x3/s -> bn -> relu
* Pooling:        conv3x3 -> bn -> maxpool(s, s) -> relu
* Residual:       relu(x + bn(conv3x3(relu(bn(conv3x3(x))))))
* ResidualProj:   as Residual, shortcut = bn(conv1x1/s(x)), first conv strided
* Dense:          L layers of bn -> relu -> conv3x3 (growth g), each input is the
                  concatenation of the block input and all earlier layer outputs
* MobileNetV1:    dw3x3/s -> bn -> relu -> conv1x1 -> bn -> relu
* MobileNetV2S1:  conv1x1 (expand t) -> bn -> relu -> dw3x3 -> bn -> relu
                  -> conv1x1 -> bn, plus identity shortcut when Cin == Cout
* MobileNetV2S2:  as V2S1 with a stride-2 depthwise conv and no shortcut
* Inception:      concat of conv1x1 | conv1x1 -> conv3x3 | conv1x1 -> conv5x5
                  | maxpool3x3 -> conv1x1, each conv followed by bn -> relu

MAC counts include convolutions and linear layers only; normalization,
activations, pooling and additions count as zero.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import functional as F
from .params import ParamStore
from .rng import Rng
from .tensor import DTYPE, ShapeError, Tensor


class BlockSpecError(ValueError):
    """A block's declared geometry is inconsistent."""


class BlockKind(str, enum.Enum):
    FullyConnected = "FullyConnected"
    Basic = "Basic"
    Pooling = "Pooling"
    Residual = "Residual"
    ResidualProj = "ResidualProj"
    Dense = "Dense"
    MobileNetV1 = "MobileNetV1"
    MobileNetV2S1 = "MobileNetV2S1"
    MobileNetV2S2 = "MobileNetV2S2"
    Inception = "Inception"


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    in_channels: int
    out_channels: int
    stride: int = 1
    index: int = 0
    stage: int = 0
    norm: bool = True
    expansion: int = 6
    growth_rate: int = 0
    num_layers: int = 0
    branch_widths: tuple[int, int, int, int] | None = None
    global_pool: bool = False
    activation: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind(self.kind))
        if self.branch_widths is not None:
            object.__setattr__(self, "branch_widths", tuple(int(b) for b in self.branch_widths))
        _validate(self)

    def with_index(self, index: int, stage: int | None = None) -> "BlockSpec":
        return replace(self, index=index, stage=self.stage if stage is None else stage)

    @property
    def inception_widths(self) -> tuple[int, int, int, int]:
        if self.branch_widths is not None:
            return self.branch_widths
        q, r = divmod(self.out_channels, 4)
        return (q + r, q, q, q)


def _validate(s: BlockSpec) -> None:
    k = s.kind
    for name in ("in_channels", "out_channels", "stride"):
        v = getattr(s, name)
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise BlockSpecError(f"{k.value}: {name} must be a positive integer, got {v!r}")
    if k is BlockKind.Residual and (s.in_channels != s.out_channels or s.stride != 1):
        raise BlockSpecError(
            f"Residual requires in_channels == out_channels and stride 1 "
            f"(got {s.in_channels}->{s.out_channels}, stride {s.stride}); use ResidualProj"
        )
    if k is BlockKind.ResidualProj and s.in_channels == s.out_channels and s.stride == 1:
        raise BlockSpecError("ResidualProj requires in_channels != out_channels or stride > 1; use Residual")
    if k is BlockKind.Pooling and s.stride < 2:
        raise BlockSpecError(f"Pooling block needs a pooling stride >= 2, got {s.stride}")
    if k is BlockKind.Dense:
        if s.stride != 1:
            raise BlockSpecError(f"Dense block must have stride 1, got {s.stride}")
        if s.growth_rate < 1 or s.num_layers < 1:
            raise BlockSpecError("Dense block needs growth_rate >= 1 and num_layers >= 1")
        if s.out_channels != s.in_channels + s.num_layers * s.growth_rate:
            raise BlockSpecError(
                f"Dense block out_channels must equal in_channels + num_layers*growth_rate = "
                f"{s.in_channels + s.num_layers * s.growth_rate}, got {s.out_channels}"
            )
    if k is BlockKind.MobileNetV1 and s.stride > 2:
        raise BlockSpecError(f"MobileNetV1 stride must be 1 or 2, got {s.stride}")
    if k is BlockKind.MobileNetV2S1 and s.stride != 1:
        raise BlockSpecError(f"MobileNetV2S1 requires stride 1, got {s.stride}")
    if k is BlockKind.MobileNetV2S2 and s.stride != 2:
        raise BlockSpecError(f"MobileNetV2S2 requires stride 2, got {s.stride}")
    if k in (BlockKind.MobileNetV2S1, BlockKind.MobileNetV2S2) and s.expansion < 1:
        raise BlockSpecError(f"MobileNetV2 expansion must be >= 1, got {s.expansion}")
    if k is BlockKind.Inception:
        widths = s.inception_widths
        if len(widths) != 4 or min(widths) < 1:
            raise BlockSpecError(f"Inception needs four positive branch widths, got {widths}")
        if sum(widths) != s.out_channels:
            raise BlockSpecError(f"Inception branch widths {widths} must sum to out_channels {s.out_channels}")
    if k is BlockKind.FullyConnected and s.stride != 1:
        raise BlockSpecError("FullyConnected block has no stride")


# -- geometry -------------------------------------------------------------


def _strided(n: int, stride: int) -> int:
    # extent after a k x k conv with padding k//2 (k odd) or a 1x1 conv, at the given stride
    return (n - 1) // stride + 1


def output_shape(spec: BlockSpec, input_shape: tuple[int, int, int]) -> tuple[int, ...]:
    """Shape (C, H, W) produced for a single (C, H, W) input; (D,) for FullyConnected."""
    c, h, w = input_shape
    if c != spec.in_channels and spec.kind is not BlockKind.FullyConnected:
        raise ShapeError(f"{spec.kind.value} block {spec.index}: expects {spec.in_channels} input channels, got {c}")
    k = spec.kind
    if k is BlockKind.FullyConnected:
        feats = c if spec.global_pool else c * h * w
        if feats != spec.in_channels:
            raise ShapeError(f"FullyConnected block {spec.index}: expects {spec.in_channels} features, got {feats}")
        return (spec.out_channels,)
    if k is BlockKind.Pooling:
        s = spec.stride
        if h < s or w < s:
            raise ShapeError(f"Pooling block {spec.index}: input {h}x{w} smaller than pooling window {s}")
        return (spec.out_channels, h // s, w // s)
    return (spec.out_channels, _strided(h, spec.stride), _strided(w, spec.stride))


def is_shape_preserving(spec: BlockSpec) -> bool:
    """True iff every input shape passes through the block unchanged."""
    k = spec.kind
    if k in (BlockKind.FullyConnected, BlockKind.Pooling, BlockKind.Dense, BlockKind.ResidualProj):
        return False
    if k is BlockKind.MobileNetV2S2:
        return False
    return spec.in_channels == spec.out_channels and spec.stride == 1


# -- counting ---------------------------------------------------------------


def _conv_params(cin: int, cout: int, k: int, bias: bool) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def _bn_params(c: int, norm: bool) -> int:
    return 2 * c if norm else 0


def block_param_count(spec: BlockSpec) -> int:
    """Closed-form number of trainable scalars in ``build_block(spec)``."""
    k, cin, cout, nb = spec.kind, spec.in_channels, spec.out_channels, spec.norm
    bias = not nb
    if k is BlockKind.FullyConnected:
        return cin * cout + cout
    if k in (BlockKind.Basic, BlockKind.Pooling):
        return _conv_params(cin, cout, 3, bias) + _bn_params(cout, nb)
    if k in (BlockKind.Residual, BlockKind.ResidualProj):
        n = _conv_params(cin, cout, 3, bias) + _conv_params(cout, cout, 3, bias) + 2 * _bn_params(cout, nb)
        if k is BlockKind.ResidualProj:
            n += _conv_params(cin, cout, 1, bias) + _bn_params(cout, nb)
        return n
    if k is BlockKind.Dense:
        g = spec.growth_rate
        total = 0
        for j in range(spec.num_layers):
            c = cin + j * g
            total += _bn_params(c, nb) + _conv_params(c, g, 3, bias)
        return total
    if k is BlockKind.MobileNetV1:
        dw = cin * 9 + (cin if bias else 0)
        return dw + _bn_params(cin, nb) + _conv_params(cin, cout, 1, bias) + _bn_params(cout, nb)
    if k in (BlockKind.MobileNetV2S1, BlockKind.MobileNetV2S2):
        hid = cin * spec.expansion
        dw = hid * 9 + (hid if bias else 0)
        return (
            _conv_params(cin, hid, 1, bias)
            + _bn_params(hid, nb)
            + dw
            + _bn_params(hid, nb)
            + _conv_params(hid, cout, 1, bias)
            + _bn_params(cout, nb)
        )
    if k is BlockKind.Inception:
        b1, b2, b3, b4 = spec.inception_widths
        return (
            _conv_params(cin, b1, 1, bias)
            + _bn_params(b1, nb)
            + _conv_params(cin, b2, 1, bias)
            + _bn_params(b2, nb)
            + _conv_params(b2, b2, 3, bias)
            + _bn_params(b2, nb)
            + _conv_params(cin, b3, 1, bias)
            + _bn_params(b3, nb)
            + _conv_params(b3, b3, 5, bias)
            + _bn_params(b3, nb)
            + _conv_params(cin, b4, 1, bias)
            + _bn_params(b4, nb)
        )
    raise AssertionError(k)


def block_flops(spec: BlockSpec, input_hw: tuple[int, int]) -> int:
    """Multiply-accumulate count of one forward pass on a single image."""
    h, w = input_hw
    k, cin, cout, s = spec.kind, spec.in_channels, spec.out_channels, spec.stride
    if k is BlockKind.FullyConnected:
        return cin * cout
    ho, wo = _strided(h, s), _strided(w, s)
    if k is BlockKind.Basic:
        return 9 * cin * cout * ho * wo
    if k is BlockKind.Pooling:
        return 9 * cin * cout * h * w
    if k in (BlockKind.Residual, BlockKind.ResidualProj):
        n = 9 * cin * cout * ho * wo + 9 * cout * cout * ho * wo
        if k is BlockKind.ResidualProj:
            n += cin * cout * ho * wo
        return n
    if k is BlockKind.Dense:
        g = spec.growth_rate
        return sum(9 * (cin + j * g) * g * h * w for j in range(spec.num_layers))
    if k is BlockKind.MobileNetV1:
        return 9 * cin * ho * wo + cin * cout * ho * wo
    if k in (BlockKind.MobileNetV2S1, BlockKind.MobileNetV2S2):
        hid = cin * spec.expansion
        return cin * hid * h * w + 9 * hid * ho * wo + hid * cout * ho * wo
    if k is BlockKind.Inception:
        b1, b2, b3, b4 = spec.inception_widths
        return (
            cin * b1 * ho * wo
            + cin * b2 * h * w
            + 9 * b2 * b2 * ho * wo
            + cin * b3 * h * w
            + 25 * b3 * b3 * ho * wo
            + cin * b4 * ho * wo
        )
    raise AssertionError(k)


# -- construction -------------------------------------------------------------


@dataclass
class Block:
    spec: BlockSpec
    params: ParamStore = field(default_factory=ParamStore)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return forward_block(self, x, training)

    __call__ = forward

    def copy(self) -> "Block":
        return copy.deepcopy(self)

    def state(self) -> list[tuple[str, int, np.ndarray]]:
        out = [(name, 0, t.data) for name, t in self.params]
        out += [(name, 1, arr) for name, arr in self.buffers.items()]
        return out


class _Builder:
    def __init__(self, block: Block, rng: Rng):
        self.block = block
        self.rng = rng
        self.bias = not block.spec.norm

    def conv(self, name: str, cin: int, cout: int, k: int) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self.block.params.add(f"{name}.weight", Tensor(self.rng.normal((cout, cin, k, k), std)))
        if self.bias:
            self.block.params.add(f"{name}.bias", Tensor(np.zeros(cout, DTYPE)))

    def dwconv(self, name: str, c: int, k: int) -> None:
        std = np.sqrt(2.0 / (k * k))
        self.block.params.add(f"{name}.weight", Tensor(self.rng.normal((c, 1, k, k), std)))
        if self.bias:
            self.block.params.add(f"{name}.bias", Tensor(np.zeros(c, DTYPE)))

    def bn(self, name: str, c: int) -> None:
        if not self.block.spec.norm:
            return
        self.block.params.add(f"{name}.weight", Tensor(np.ones(c, DTYPE)))
        self.block.params.add(f"{name}.bias", Tensor(np.zeros(c, DTYPE)))
        self.block.buffers[f"{name}.running_mean"] = np.zeros(c, DTYPE)
        self.block.buffers[f"{name}.running_var"] = np.ones(c, DTYPE)

    def fc(self, name: str, din: int, dout: int) -> None:
        std = np.sqrt(2.0 / din)
        self.block.params.add(f"{name}.weight", Tensor(self.rng.normal((dout, din), std)))
        self.block.params.add(f"{name}.bias", Tensor(np.zeros(dout, DTYPE)))


def build_block(spec: BlockSpec, rng: Rng) -> Block:
    """Instantiate ``spec`` with He-normal conv/linear weights, zero biases, unit BN."""
    block = Block(spec)
    b = _Builder(block, rng)
    k, cin, cout = spec.kind, spec.in_channels, spec.out_channels
    if k is BlockKind.FullyConnected:
        b.fc("fc", cin, cout)
    elif k in (BlockKind.Basic, BlockKind.Pooling):
        b.conv("conv", cin, cout, 3)
        b.bn("bn", cout)
    elif k in (BlockKind.Residual, BlockKind.ResidualProj):
        b.conv("conv1", cin, cout, 3)
        b.bn("bn1", cout)
        b.conv("conv2", cout, cout, 3)
        b.bn("bn2", cout)
        if k is BlockKind.ResidualProj:
            b.conv("shortcut", cin, cout, 1)
            b.bn("shortcut_bn", cout)
    elif k is BlockKind.Dense:
        for j in range(spec.num_layers):
            c = cin + j * spec.growth_rate
            b.bn(f"layer{j}.bn", c)
            b.conv(f"layer{j}.conv", c, spec.growth_rate, 3)
    elif k is BlockKind.MobileNetV1:
        b.dwconv("dw", cin, 3)
        b.bn("dw_bn", cin)
        b.conv("pw", cin, cout, 1)
        b.bn("pw_bn", cout)
    elif k in (BlockKind.MobileNetV2S1, BlockKind.MobileNetV2S2):
        hid = cin * spec.expansion
        b.conv("expand", cin, hid, 1)
        b.bn("expand_bn", hid)
        b.dwconv("dw", hid, 3)
        b.bn("dw_bn", hid)
        b.conv("project", hid, cout, 1)
        b.bn("project_bn", cout)
    elif k is BlockKind.Inception:
        b1, b2, b3, b4 = spec.inception_widths
        b.conv("branch1", cin, b1, 1)
        b.bn("branch1_bn", b1)
        b.conv("branch3_reduce", cin, b2, 1)
        b.bn("branch3_reduce_bn", b2)
        b.conv("branch3", b2, b2, 3)
        b.bn("branch3_bn", b2)
        b.conv("branch5_reduce", cin, b3, 1)
        b.bn("branch5_reduce_bn", b3)
        b.conv("branch5", b3, b3, 5)
        b.bn("branch5_bn", b3)
        b.conv("pool_proj", cin, b4, 1)
        b.bn("pool_proj_bn", b4)
    return block


# -- forward --------------------------------------------------------------


class _Runner:
    def __init__(self, block: Block, training: bool):
        self.p = block.params
        self.buf = block.buffers
        self.norm = block.spec.norm
        self.training = training

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.p[f"{name}.weight"]
        bias = self.p[f"{name}.bias"] if f"{name}.bias" in self.p else None
        return F.conv2d(x, w, bias, stride=stride, padding=w.shape[2] // 2)

    def dwconv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.p[f"{name}.weight"]
        out = F.depthwise_conv2d(x, w, stride=stride, padding=w.shape[2] // 2)
        if f"{name}.bias" in self.p:
            out = out + self.p[f"{name}.bias"].reshape(1, -1, 1, 1)
        return out

    def bn(self, name: str, x: Tensor) -> Tensor:
        if not self.norm:
            return x
        return F.batchnorm2d(
            x,
            self.p[f"{name}.weight"],
            self.p[f"{name}.bias"],
            self.buf[f"{name}.running_mean"],
            self.buf[f"{name}.running_var"],
            self.training,
        )


def forward_block(block: Block, x: Tensor, training: bool = False) -> Tensor:
    spec = block.spec
    k = spec.kind
    if k is not BlockKind.FullyConnected and (x.ndim != 4 or x.shape[1] != spec.in_channels):
        raise ShapeError(
            f"{k.value} block {spec.index}: input must be [N,{spec.in_channels},H,W], got shape {x.shape}"
        )
    r = _Runner(block, training)
    s = spec.stride
    if k is BlockKind.FullyConnected:
        h = F.global_avgpool(x) if spec.global_pool else (F.flatten(x) if x.ndim != 2 else x)
        out = F.linear(h, block.params["fc.weight"], block.params["fc.bias"])
        return F.relu(out) if spec.activation else out
    if k is BlockKind.Basic:
        return F.relu(r.bn("bn", r.conv("conv", x, s)))
    if k is BlockKind.Pooling:
        return F.relu(F.maxpool2d(r.bn("bn", r.conv("conv", x)), s, s))
    if k in (BlockKind.Residual, BlockKind.ResidualProj):
        h = F.relu(r.bn("bn1", r.conv("conv1", x, s)))
        h = r.bn("bn2", r.conv("conv2", h))
        shortcut = x if k is BlockKind.Residual else r.bn("shortcut_bn", r.conv("shortcut", x, s))
        return F.relu(shortcut + h)
    if k is BlockKind.Dense:
        feats = [x]
        for j in range(spec.num_layers):
            inp = feats[0] if j == 0 else F.concat(feats, axis=1)
            feats.append(r.conv(f"layer{j}.conv", F.relu(r.bn(f"layer{j}.bn", inp))))
        return F.concat(feats, axis=1)
    if k is BlockKind.MobileNetV1:
        h = F.relu(r.bn("dw_bn", r.dwconv("dw", x, s)))
        return F.relu(r.bn("pw_bn", r.conv("pw", h)))
    if k in (BlockKind.MobileNetV2S1, BlockKind.MobileNetV2S2):
        h = F.relu(r.bn("expand_bn", r.conv("expand", x)))
        h = F.relu(r.bn("dw_bn", r.dwconv("dw", h, s)))
        h = r.bn("project_bn", r.conv("project", h))
        if k is BlockKind.MobileNetV2S1 and spec.in_channels == spec.out_channels:
            h = x + h
        return h
    if k is BlockKind.Inception:
        p1 = F.relu(r.bn("branch1_bn", r.conv("branch1", x, s)))
        p2 = F.relu(r.bn("branch3_reduce_bn", r.conv("branch3_reduce", x)))
        p2 = F.relu(r.bn("branch3_bn", r.conv("branch3", p2, s)))
        p3 = F.relu(r.bn("branch5_reduce_bn", r.conv("branch5_reduce", x)))
        p3 = F.relu(r.bn("branch5_bn", r.conv("branch5", p3, s)))
        p4 = F.maxpool2d(x, 3, s, 1)
        p4 = F.relu(r.bn("pool_proj_bn", r.conv("pool_proj", p4)))
        return F.concat([p1, p2, p3, p4], axis=1)
    raise AssertionError(k)


def zero_branch(block: Block) -> None:
    """Silence a Residual block's branch so the block computes relu(x)."""
    if block.spec.kind is not BlockKind.Residual:
        raise BlockSpecError(f"zero_branch needs a Residual block, got {block.spec.kind.value}")
    block.params["conv2.weight"].data[...] = 0
    for name in ("conv2.bias", "bn2.weight", "bn2.bias"):
        if name in block.params:
            block.params[name].data[...] = 0
