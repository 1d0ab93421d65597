"""DConNet, VeDConNet and the additive fusion head.

Both extractors are five blocks of 3x3 conv + ReLU layers, each block ending
in a 2x2 max pool.  DConNet uses two convs per block; VeDConNet uses two in
the first two blocks and four in the last three.  Their outputs are summed,
then passed through one more 3x3 conv + ReLU.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

import numpy as np

from . import nn
from .errors import ContractError, DimensionError

DEFAULT_BLOCK_FILTERS = (64, 128, 256, 512, 512)
DCONNET_CONVS = (2, 2, 2, 2, 2)
VEDCONNET_CONVS = (2, 2, 4, 4, 4)
DOWNSAMPLE = 2 ** 5


def parse_scale(value: Any) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 16)
    return Fraction(value)


@dataclass(frozen=True)
class BackboneConfig:
    block_filters: tuple[int, ...] = DEFAULT_BLOCK_FILTERS
    width_scale: Fraction = Fraction(1, 8)
    input_dims: tuple[int, int, int] = (64, 64, 3)

    def __post_init__(self):
        object.__setattr__(self, "block_filters", tuple(int(f) for f in self.block_filters))
        object.__setattr__(self, "width_scale", parse_scale(self.width_scale))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if len(self.block_filters) != 5:
            raise ContractError(f"expected 5 block filter counts, got {len(self.block_filters)}")
        if self.width_scale <= 0:
            raise ContractError("width_scale must be positive")
        if min(self.scaled_filters) < 1:
            raise ContractError(f"width_scale {self.width_scale} leaves a block with no filters")
        h, w, _ = self.input_dims
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ContractError(f"input {h}x{w} is not divisible by {DOWNSAMPLE}")

    @property
    def scaled_filters(self) -> tuple[int, ...]:
        return tuple(int(f * self.width_scale) for f in self.block_filters)

    @property
    def feature_dims(self) -> tuple[int, int, int]:
        h, w, _ = self.input_dims
        return h // DOWNSAMPLE, w // DOWNSAMPLE, self.scaled_filters[-1]


@dataclass
class Backbone:
    """A stack of conv/ReLU blocks, each closed by a 2x2 max pool."""

    name: str
    convs_per_block: tuple[int, ...]
    filters: tuple[int, ...]
    in_channels: int = 3
    layers: list[tuple[str, str]] = field(init=False)

    def __post_init__(self):
        self.layers = []
        for b, (n_conv, _) in enumerate(zip(self.convs_per_block, self.filters), start=1):
            for c in range(1, n_conv + 1):
                self.layers.append(("conv", f"{self.name}.block{b}.conv{c}"))
                self.layers.append(("relu", ""))
            self.layers.append(("pool", ""))

    @property
    def num_convs(self) -> int:
        return sum(1 for kind, _ in self.layers if kind == "conv")

    @property
    def num_pools(self) -> int:
        return sum(1 for kind, _ in self.layers if kind == "pool")

    @property
    def out_channels(self) -> int:
        return self.filters[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.in_channels
        for (n_conv, cout), b in zip(zip(self.convs_per_block, self.filters), range(1, 6)):
            for c in range(1, n_conv + 1):
                base = f"{self.name}.block{b}.conv{c}"
                shapes[base + ".weight"] = (3, 3, cin, cout)
                shapes[base + ".bias"] = (cout,)
                cin = cout
        return shapes


def dconnet(cfg: BackboneConfig) -> Backbone:
    return Backbone("dconnet", DCONNET_CONVS, cfg.scaled_filters, cfg.input_dims[2])


def vedconnet(cfg: BackboneConfig) -> Backbone:
    return Backbone("vedconnet", VEDCONNET_CONVS, cfg.scaled_filters, cfg.input_dims[2])


def init_conv_params(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator,
                     dtype=np.float32) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = nn.he_uniform(rng, shape, fan_in, dtype)
    return params


def backbone_forward(net: Backbone, params: dict[str, np.ndarray], x: np.ndarray,
                     input_dims: tuple[int, int, int] | None = None):
    """Run one extractor; returns ``(features, cache)`` for the backward pass."""
    if x.ndim != 4:
        raise DimensionError(f"image batch must be rank 4, got {x.shape}")
    if input_dims is not None and tuple(x.shape[1:]) != tuple(input_dims):
        raise DimensionError(f"image dims {x.shape[1:]} do not match config {input_dims}")
    cache = []
    for kind, name in net.layers:
        if kind == "conv":
            w, b = params[name + ".weight"], params[name + ".bias"]
            cols = nn.im2col(x, 3, 3)
            cache.append((x, cols))
            x = nn.conv2d_forward(x, w, b, cols=cols)
        elif kind == "relu":
            cache.append(x)
            x = nn.relu(x)
        else:
            x, arg = nn.maxpool2(x)
            cache.append(arg)
    return x, cache


def backbone_backward(net: Backbone, params: dict[str, np.ndarray], cache: list,
                      grad: np.ndarray, need_input_grad: bool = False):
    grads = {}
    for (kind, name), saved in zip(reversed(net.layers), reversed(cache)):
        if kind == "conv":
            x, cols = saved
            first = name.endswith("block1.conv1")
            if first and not need_input_grad:
                g2 = grad.reshape(-1, grad.shape[-1])
                w = params[name + ".weight"]
                grads[name + ".weight"] = (cols.reshape(-1, cols.shape[-1]).T @ g2).reshape(w.shape)
                grads[name + ".bias"] = g2.sum(axis=0)
                grad = None
            else:
                grad, gw, gb = nn.conv2d_backward(x, params[name + ".weight"], grad, cols=cols)
                grads[name + ".weight"], grads[name + ".bias"] = gw, gb
        elif kind == "relu":
            grad = nn.relu_backward(saved, grad)
        else:
            grad = nn.maxpool2_backward(saved, grad)
    return grad, grads


@dataclass
class FusionHead:
    """Sum two equal-shaped maps, then smooth with 3x3 conv + ReLU."""

    in_channels: int
    out_channels: int
    name: str = "fusion"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {f"{self.name}.conv.weight": (3, 3, self.in_channels, self.out_channels),
                f"{self.name}.conv.bias": (self.out_channels,)}


def fuse(f1: np.ndarray, f2: np.ndarray, head: FusionHead, params: dict[str, np.ndarray]):
    """Return ``(ReLU(conv(f1 + f2)), cache)``."""
    if f1.shape != f2.shape:
        raise DimensionError(f"cannot fuse feature maps {f1.shape} and {f2.shape}")
    if f1.shape[-1] != head.in_channels:
        raise DimensionError(f"fusion head expects {head.in_channels} channels, got {f1.shape[-1]}")
    summed = nn.add(f1, f2)
    w, b = params[f"{head.name}.conv.weight"], params[f"{head.name}.conv.bias"]
    cols = nn.im2col(summed, 3, 3)
    pre = nn.conv2d_forward(summed, w, b, cols=cols)
    return nn.relu(pre), (summed, cols, pre)


def fuse_backward(head: FusionHead, params: dict[str, np.ndarray], cache, grad: np.ndarray):
    summed, cols, pre = cache
    grad = nn.relu_backward(pre, grad)
    g_sum, gw, gb = nn.conv2d_backward(summed, params[f"{head.name}.conv.weight"], grad, cols=cols)
    g1, g2 = nn.add_backward(g_sum)
    return g1, g2, {f"{head.name}.conv.weight": gw, f"{head.name}.conv.bias": gb}


class FusedExtractor:
    """Both extractors plus the fusion head, sharing one parameter dict."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        self.dconnet = dconnet(cfg)
        self.vedconnet = vedconnet(cfg)
        c = self.dconnet.out_channels
        self.head = FusionHead(c, int(DEFAULT_BLOCK_FILTERS[-1] * cfg.width_scale))

    @property
    def out_channels(self) -> int:
        return self.head.out_channels

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        shapes.update(self.dconnet.param_shapes())
        shapes.update(self.vedconnet.param_shapes())
        shapes.update(self.head.param_shapes())
        return shapes

    def forward(self, params: dict[str, np.ndarray], images: np.ndarray):
        f1, c1 = backbone_forward(self.dconnet, params, images, self.cfg.input_dims)
        f2, c2 = backbone_forward(self.vedconnet, params, images, self.cfg.input_dims)
        out, ch = fuse(f1, f2, self.head, params)
        return out, (c1, c2, ch)

    def backward(self, params: dict[str, np.ndarray], cache, grad: np.ndarray,
                 need_input_grad: bool = False):
        c1, c2, ch = cache
        g1, g2, grads = fuse_backward(self.head, params, ch, grad)
        gx1, grads1 = backbone_backward(self.dconnet, params, c1, g1, need_input_grad)
        gx2, grads2 = backbone_backward(self.vedconnet, params, c2, g2, need_input_grad)
        grads.update(grads1)
        grads.update(grads2)
        gx = gx1 + gx2 if need_input_grad else None
        return gx, grads


def extract_fused_features(model, images: np.ndarray) -> np.ndarray:
    """Forward-only fused feature map for a detector model."""
    return model.extractor.forward(model.params, images)[0]
