"""Layer set for the classifier and the autoencoder.

All spatial layers use NCHW layout. Every layer knows its output shape as a
function of the (batch-free) input shape, and checks its input before running.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor, apply, get_dtype, relu as _relu, sigmoid as _sigmoid

LAYER_KINDS = ("conv2d", "transposed-conv2d", "maxpool2d", "upsample2x", "dense", "relu",
               "sigmoid", "flatten", "unflatten")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.hyper}


def same_padding(k: int) -> int:
    return (k - 1) // 2


# -- patch machinery ---------------------------------------------------------------
# Patches are laid out channel-major, (C*k*k, B*ho*wo), so the copies move whole
# image rows at a time; this is several times faster than a patch-minor layout.

def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(B,C,Hp,Wp) padded input -> (C*k*k, B*ho*wo) patch matrix."""
    b, c = xp.shape[:2]
    cols = np.empty((c, k, k, b, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]
    return cols.reshape(c * k * k, b * ho * wo)


def _col2im(cols: np.ndarray, shape, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into a (B,C,Hp,Wp) grid."""
    b, c, hp, wp = shape
    patches = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += patches[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _to_cm(g: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> (C, B*H*W)."""
    b, c = g.shape[:2]
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c, -1)


def _from_cm(m: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    """(C, B*H*W) -> contiguous (B,C,H,W)."""
    return np.ascontiguousarray(m.reshape(-1, b, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; ``w`` is (out, in, k, k)."""
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    s, p = stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    out += b.data[:, None]
    xp_shape = xp.shape

    def back(g):
        g2 = _to_cm(g)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ g2, xp_shape, k, s, ho, wo)
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    return apply(_from_cm(out, bsz, ho, wo), (x, w, b), back, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution (gradient of conv2d w.r.t. its input); ``w`` is (in, out, k, k)."""
    bsz, c, h, wd = x.shape
    _, o, k, _ = w.shape
    s, p = stride, padding
    hf = (h - 1) * s + k
    wf = (wd - 1) * s + k
    xc = _to_cm(x.data)
    wmat = w.data.reshape(c, -1)
    full = _col2im(wmat.T @ xc, (bsz, o, hf, wf), k, s, h, wd)
    out = full[:, :, p : hf - p, p : wf - p] if p else full
    out = out + b.data[None, :, None, None]

    def back(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _im2col(gfull, k, s, h, wd)
        gw = (xc @ gcols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gx = _from_cm(wmat @ gcols, bsz, h, wd) if x.requires_grad else None
        return gx, gw, gb

    return apply(np.ascontiguousarray(out), (x, w, b), back, "conv_transpose2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    bsz, c, h, w = x.shape
    ho, wo = h // size, w // size
    xd = x.data[:, :, : ho * size, : wo * size]
    taps = [xd[:, :, i::size, j::size] for i in range(size) for j in range(size)]
    out = taps[0].copy()
    for t in taps[1:]:
        np.maximum(out, t, out=out)

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        # ties route the gradient to the first maximal tap only
        for n, t in enumerate(taps):
            hit = (t == out) & ~taken
            taken |= hit
            i, j = divmod(n, size)
            gx[:, :, i : ho * size : size, j : wo * size : size] = g * hit
        return (gx,)

    return apply(out, (x,), back, "maxpool2d")


def upsample2x(x: Tensor) -> Tensor:
    bsz, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return apply(out, (x,), lambda g: (g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x`` (B, in) times ``w`` (out, in) transposed, plus bias."""
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def back(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return apply(out, (x, w, b), back, "dense")


# -- layer objects -----------------------------------------------------------

class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind, self.hyper())

    def hyper(self) -> dict:
        return {}

    def output_shape(self, shape: tuple) -> tuple:
        return tuple(shape)

    def check(self, shape: tuple) -> None:
        self.output_shape(shape)

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def init(self, rng: np.random.Generator) -> None:
        pass


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(get_dtype())


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding=None):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = same_padding(kernel) if padding is None else padding
        self.params = {
            "weight": Tensor(np.zeros((out_ch, in_ch, kernel, kernel)), requires_grad=True),
            "bias": Tensor(np.zeros(out_ch), requires_grad=True),
        }

    def hyper(self):
        return {"in": self.in_ch, "out": self.out_ch, "kernel": self.kernel, "stride": self.stride,
                "padding": self.padding}

    def init(self, rng):
        k = self.kernel
        self.params["weight"].data[...] = _he(rng, (self.out_ch, self.in_ch, k, k), self.in_ch * k * k)
        self.params["bias"].data[...] = 0

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_ch:
            raise ShapeError(f"expected ({self.in_ch}, H, W), got {tuple(shape)}")
        _, h, w = shape
        k, s, p = self.kernel, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"input {tuple(shape)} smaller than kernel {k}")
        return (self.out_ch, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def __call__(self, x):
        return conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)


class ConvTranspose2d(Layer):
    kind = "transposed-conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 2, stride: int = 2, padding: int = 0):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride, self.padding = in_ch, out_ch, kernel, stride, padding
        self.params = {
            "weight": Tensor(np.zeros((in_ch, out_ch, kernel, kernel)), requires_grad=True),
            "bias": Tensor(np.zeros(out_ch), requires_grad=True),
        }

    def hyper(self):
        return {"in": self.in_ch, "out": self.out_ch, "kernel": self.kernel, "stride": self.stride,
                "padding": self.padding}

    def init(self, rng):
        k, s = self.kernel, self.stride
        # each output pixel sees in_ch * (k/s)^2 taps
        fan_in = max(1, self.in_ch * (k // s) ** 2)
        self.params["weight"].data[...] = _he(rng, (self.in_ch, self.out_ch, k, k), fan_in)
        self.params["bias"].data[...] = 0

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_ch:
            raise ShapeError(f"expected ({self.in_ch}, H, W), got {tuple(shape)}")
        _, h, w = shape
        k, s, p = self.kernel, self.stride, self.padding
        return (self.out_ch, (h - 1) * s + k - 2 * p, (w - 1) * s + k - 2 * p)

    def __call__(self, x):
        return conv_transpose2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def hyper(self):
        return {"size": self.size}

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"expected (C, H, W), got {tuple(shape)}")
        c, h, w = shape
        if h % self.size or w % self.size:
            raise ShapeError(f"extents {h}x{w} not divisible by pool size {self.size}")
        return (c, h // self.size, w // self.size)

    def __call__(self, x):
        return maxpool2d(x, self.size)


class Upsample2x(Layer):
    kind = "upsample2x"

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"expected (C, H, W), got {tuple(shape)}")
        c, h, w = shape
        return (c, 2 * h, 2 * w)

    def __call__(self, x):
        return upsample2x(x)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.params = {
            "weight": Tensor(np.zeros((out_features, in_features)), requires_grad=True),
            "bias": Tensor(np.zeros(out_features), requires_grad=True),
        }

    def hyper(self):
        return {"in": self.in_features, "out": self.out_features}

    def init(self, rng):
        self.params["weight"].data[...] = _he(rng, (self.out_features, self.in_features), self.in_features)
        self.params["bias"].data[...] = 0

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"expected ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def __call__(self, x):
        return dense(x, self.params["weight"], self.params["bias"])


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x):
        return _relu(x)


class Sigmoid(Layer):
    kind = "sigmoid"

    def __call__(self, x):
        return _sigmoid(x)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def __call__(self, x):
        return x.reshape(x.shape[0], -1)


class Unflatten(Layer):
    kind = "unflatten"

    def __init__(self, shape):
        super().__init__()
        self.target = tuple(int(s) for s in shape)

    def hyper(self):
        return {"shape": list(self.target)}

    def output_shape(self, shape):
        if tuple(shape) != (int(np.prod(self.target)),):
            raise ShapeError(f"expected ({int(np.prod(self.target))},), got {tuple(shape)}")
        return self.target

    def __call__(self, x):
        return x.reshape((x.shape[0],) + self.target)


_BUILDERS = {
    "conv2d": lambda h: Conv2d(h["in"], h["out"], h.get("kernel", 3), h.get("stride", 1), h.get("padding")),
    "transposed-conv2d": lambda h: ConvTranspose2d(h["in"], h["out"], h.get("kernel", 2), h.get("stride", 2),
                                                   h.get("padding", 0)),
    "maxpool2d": lambda h: MaxPool2d(h.get("size", 2)),
    "upsample2x": lambda h: Upsample2x(),
    "dense": lambda h: Dense(h["in"], h["out"]),
    "relu": lambda h: ReLU(),
    "sigmoid": lambda h: Sigmoid(),
    "flatten": lambda h: Flatten(),
    "unflatten": lambda h: Unflatten(h["shape"]),
}


def layer_from_spec(spec: LayerSpec | dict) -> Layer:
    if isinstance(spec, dict):
        h = dict(spec)
        spec = LayerSpec(h.pop("kind"), h)
    return _BUILDERS[spec.kind](spec.hyper)


class Sequential:
    """An ordered layer list with a fixed per-sample input shape."""

    def __init__(self, layers: Iterable[Layer], input_shape: tuple):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = self._infer_shapes()

    def _infer_shapes(self) -> list[tuple]:
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return shapes

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    def init(self, rng: np.random.Generator) -> "Sequential":
        for layer in self.layers:
            layer.init(rng)
        return self

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out.append((f"{i}.{layer.kind}.{name}", p))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def specs(self) -> list[dict]:
        return [layer.spec.to_dict() for layer in self.layers]

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                             f"expected input (B, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        for layer in self.layers:
            x = layer(x)
        return x

    __call__ = forward


def forward(model: Sequential, x) -> Tensor:
    """Run ``model`` on ``x`` (array or Tensor)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    return model.forward(x)
