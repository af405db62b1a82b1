"""Seven-level anisotropic and isotropic 3D U-nets.

Level layout (1-based, encoder 1-3, bottleneck 4, decoder 5-7)::

    conv1a conv1b -pool-> conv2a conv2b -pool-> conv3a conv3b -pool-> conv4a conv4b
                                                                          |
    conv7a conv7b <-up7- conv6a conv6b <-up6- conv5a conv5b <-up5---------+

Each decoder level concatenates its upsampled input (first) with the
``conv(8-i)b`` skip activation (second). Every conv is followed by an optional
instance normalisation and a ReLU. The head is two 1x1x1 convolutions with a
ReLU in between, then a channel softmax.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, FormatError, ShapeError, UsageError
from .ops import ConvKernel
from .optim import glorot_uniform_init
from .tensor import Tensor, default_dtype

DEFAULT_WIDTHS = (64, 128, 256, 512, 256, 128, 64)
TAP_NAMES = tuple(f"conv{i}b" for i in range(1, 8)) + ("head",)
CHECKPOINT_MAGIC = "zoneseg-checkpoint"

Triple = Tuple[int, int, int]


def parse_scale(value) -> float:
    """Accept ``0.25``, ``"1/4"`` or ``"0.25"``."""
    if isinstance(value, str):
        value = float(Fraction(value))
    value = float(value)
    if not value > 0:
        raise ConfigError(f"width_scale must be positive, got {value}")
    return value


@dataclass(frozen=True)
class LevelSpec:
    index: int
    conv_dims: Tuple[int, int]
    width: int
    pool_window: Optional[Triple] = None
    upsample_factor: Optional[Triple] = None


@dataclass
class NetworkSpec:
    """Declarative description of one U-net variant.

    ``iso_order`` picks which conv of each iso level is 2D: ``"3d2d"`` makes
    the second one in-plane, ``"2d3d"`` the first.
    """

    variant: str = "aniso"
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    labels: int = 3
    width_scale: float = 1.0
    normalization: bool = True
    iso_order: str = "3d2d"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.width_scale = parse_scale(self.width_scale)
        if self.variant not in ("aniso", "iso"):
            raise ConfigError(f"variant must be 'aniso' or 'iso', got {self.variant!r}")
        if self.labels not in (3, 6):
            raise ConfigError(f"labels must be 3 or 6, got {self.labels}")
        if len(self.widths) != 7 or any(w < 1 for w in self.widths):
            raise ConfigError(f"need 7 positive widths, got {self.widths}")
        if any(self.widths[i] != self.widths[6 - i] for i in range(3)):
            raise ConfigError(f"widths must be mirror-symmetric, got {self.widths}")
        if self.iso_order not in ("3d2d", "2d3d"):
            raise ConfigError(f"iso_order must be '3d2d' or '2d3d', got {self.iso_order!r}")

    @property
    def effective_widths(self) -> Tuple[int, ...]:
        return tuple(max(1, int(math.floor(w * self.width_scale + 0.5))) for w in self.widths)

    def levels(self) -> List[LevelSpec]:
        w = self.effective_widths
        if self.variant == "aniso":
            dims = [(2, 2), (2, 2), (3, 3), (3, 3), (3, 3), (2, 2), (2, 2)]
            pools = [(1, 2, 2), (1, 2, 2), (2, 2, 2)]
        else:
            pair = (3, 2) if self.iso_order == "3d2d" else (2, 3)
            dims = [pair] * 7
            pools = [(2, 2, 2)] * 3
        ups = list(reversed(pools))
        out = []
        for i in range(7):
            out.append(
                LevelSpec(
                    index=i + 1,
                    conv_dims=dims[i],
                    width=w[i],
                    pool_window=pools[i] if i < 3 else None,
                    upsample_factor=ups[i - 4] if i > 3 else None,
                )
            )
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def required_input_multiple(spec: NetworkSpec) -> Triple:
    """Per-axis (D, H, W) divisor every input extent must satisfy."""
    md = mh = mw = 1
    for level in spec.levels():
        if level.pool_window:
            pd, ph, pw = level.pool_window
            md, mh, mw = md * pd, mh * ph, mw * pw
    return md, mh, mw


def cumulative_pool(spec: NetworkSpec, level_index: int) -> Triple:
    """Downsampling factor (D, H, W) of the activations at a 1-based level."""
    depth = level_index if level_index <= 4 else 8 - level_index
    md = mh = mw = 1
    for level in spec.levels()[: depth - 1]:
        pd, ph, pw = level.pool_window
        md, mh, mw = md * pd, mh * ph, mw * pw
    return md, mh, mw


def _kernel_extent(conv_dim: int) -> Triple:
    return (1, 3, 3) if conv_dim == 2 else (3, 3, 3)


def _layer_plan(spec: NetworkSpec):
    """Ordered ``(name, kind, out_ch, in_ch, extent)`` for every parametrised layer."""
    levels = spec.levels()
    w = [lv.width for lv in levels]
    plan = []
    in_ch = 1
    for lv in levels:
        i = lv.index
        if lv.upsample_factor:
            plan.append((f"up{i}", "up", w[i - 1], w[i - 2], lv.upsample_factor))
            in_ch = w[i - 1] + w[7 - i]
        plan.append((f"conv{i}a", "conv", lv.width, in_ch, _kernel_extent(lv.conv_dims[0])))
        plan.append((f"conv{i}b", "conv", lv.width, lv.width, _kernel_extent(lv.conv_dims[1])))
        in_ch = lv.width
    plan.append(("head1", "head", w[6], w[6], (1, 1, 1)))
    plan.append(("head2", "head", spec.labels, w[6], (1, 1, 1)))
    return plan


def parameter_count(spec: NetworkSpec) -> int:
    """Closed-form count of weights, biases and normalisation scale/shift."""
    total = 0
    for _, kind, out_ch, in_ch, extent in _layer_plan(spec):
        total += out_ch * in_ch * int(np.prod(extent)) + out_ch
        if kind == "conv" and spec.normalization:
            total += 2 * out_ch
    return total


class Model:
    """A built network: its spec, the seed it was drawn from and named parameters."""

    def __init__(self, spec: NetworkSpec, seed: int, params: "OrderedDict[str, Tensor]"):
        self.spec = spec
        self.seed = seed
        self.params = params
        self.levels = spec.levels()
        self.kernels: Dict[str, ConvKernel] = {}
        for name, *_ in _layer_plan(spec):
            self.kernels[name] = ConvKernel(params[f"{name}.weight"], params[f"{name}.bias"])

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def decay_mask(self) -> List[bool]:
        return [name.endswith(".weight") for name in self.params]

    def _conv_block(self, x: Tensor, name: str) -> Tensor:
        x = ops.conv3d(x, self.kernels[name])
        if self.spec.normalization:
            x = ops.instance_norm(x, self.params[f"{name}.norm.gamma"], self.params[f"{name}.norm.beta"])
        return ops.relu(x)

    def check_input(self, shape: Sequence[int]) -> None:
        if len(shape) != 4 or shape[0] != 1:
            raise ShapeError(f"expected a (1, D, H, W) image tensor, got shape {tuple(shape)}")
        for axis, extent, m in zip(("depth", "height", "width"), shape[1:], required_input_multiple(self.spec)):
            if extent % m:
                raise ShapeError(f"input {axis} {extent} is not a multiple of {m} for the {self.spec.variant} network")

    def forward(self, image: Tensor, capture: Iterable[str] = ()) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Run the network on one volume.

        Returns:
            Per-voxel label probabilities ``(labels, D, H, W)`` and a dict of the
            requested tap activations (post-ReLU).
        """
        capture = set(capture)
        unknown = capture - set(TAP_NAMES)
        if unknown:
            raise UsageError(f"unknown tap(s) {sorted(unknown)}; choose from {TAP_NAMES}")
        if not isinstance(image, Tensor):
            image = Tensor(image)
        self.check_input(image.shape)
        captured: Dict[str, Tensor] = {}
        skips: Dict[int, Tensor] = {}
        x = image
        for lv in self.levels:
            i = lv.index
            if lv.upsample_factor:
                x = ops.upsample_transposed(x, lv.upsample_factor, self.kernels[f"up{i}"])
                x = ops.concat_channels(x, skips[8 - i])
            x = self._conv_block(x, f"conv{i}a")
            x = self._conv_block(x, f"conv{i}b")
            if f"conv{i}b" in capture:
                captured[f"conv{i}b"] = x
            if lv.pool_window:
                skips[i] = x
                x = ops.maxpool(x, lv.pool_window)
        x = ops.relu(ops.conv3d(x, self.kernels["head1"]))
        if "head" in capture:
            captured["head"] = x
        probs = ops.softmax_channels(ops.conv3d(x, self.kernels["head2"]))
        return probs, captured

    __call__ = forward


def build_network(spec: NetworkSpec, seed: int = 0, dtype=None) -> Model:
    """Allocate and Glorot-initialise every kernel; biases start at 0, norm scales at 1."""
    dtype = np.dtype(dtype or default_dtype())
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for index, (name, kind, out_ch, in_ch, extent) in enumerate(_layer_plan(spec)):
        shape = (out_ch, in_ch) + tuple(extent)
        w = glorot_uniform_init(shape, [int(seed), index], dtype=dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight", dtype=dtype)
        params[f"{name}.bias"] = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias", dtype=dtype)
        if kind == "conv" and spec.normalization:
            params[f"{name}.norm.gamma"] = Tensor(np.ones(out_ch), requires_grad=True, name=f"{name}.norm.gamma", dtype=dtype)
            params[f"{name}.norm.beta"] = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.norm.beta", dtype=dtype)
    return Model(spec, seed, params)


def forward(model: Model, image: Tensor, capture: Iterable[str] = ()):
    return model.forward(image, capture)


def save_checkpoint(model: Model, path) -> None:
    """Write header length (u64 LE), JSON header, then float32 LE buffers in header order."""
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        buf = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "spec": _spec_json(model.spec),
        "seed": model.seed,
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for chunk in chunks:
            fh.write(chunk)


def _spec_json(spec: NetworkSpec) -> dict:
    d = asdict(spec)
    d["widths"] = list(spec.widths)
    return d


def load_checkpoint(path, dtype=None) -> Model:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError("checkpoint shorter than its length prefix", len(blob))
    (hlen,) = struct.unpack_from("<Q", blob, 0)
    if 8 + hlen > len(blob):
        raise FormatError(f"header length {hlen} runs past end of file", 8)
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}", 8) from exc
    if header.get("format") != CHECKPOINT_MAGIC:
        raise FormatError("not a zoneseg checkpoint", 8)
    model = build_network(NetworkSpec.from_dict(header["spec"]), header["seed"], dtype=dtype)
    base = 8 + hlen
    entries = {e["name"]: e for e in header["tensors"]}
    if set(entries) != set(model.params):
        raise FormatError("checkpoint tensor names do not match the network spec", 8)
    for name, p in model.params.items():
        e = entries[name]
        start = base + e["offset"]
        if tuple(e["shape"]) != p.shape or start + e["nbytes"] > len(blob):
            raise FormatError(f"tensor {name} has a bad shape or is truncated", start)
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])), offset=start)
        p.data[...] = arr.reshape(p.shape)
    return model
