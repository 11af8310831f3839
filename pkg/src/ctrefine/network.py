"""Residual network architectures for FBP-volume refinement.

Three variants share one layer recipe: a first conv+ReLU, a stack of
conv+batchnorm+ReLU layers, and a final conv that emits the residual
estimate. The reconstruction subtracts that residual from the input.

* ``2d`` - one slice in, one residual slice out, 3x3 kernels.
* ``2.5d`` - a window of neighboring slices enters as input channels of a
  2D network; still a single residual slice out.
* ``3d`` - the window is a true volumetric axis with 3x3x3 kernels and a
  single feature channel at input/output; residual covers the window.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import storage
from .storage import CHECKPOINT_MAGIC, FormatError, ShapeMismatchError
from .tensor_ops import (
    BatchNormState,
    ConvKernel,
    ShapeError,
    batchnorm_forward,
    conv_forward,
    default_dtype,
    make_batchnorm,
    relu_forward,
)

KINDS = ("2d", "2.5d", "3d")
WINDOWS = (3, 5, 7)


@dataclass(frozen=True)
class NetworkVariant:
    kind: str
    window: int = 1
    depth: int = 17
    width: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown variant kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "2d":
            if self.window != 1:
                raise ShapeError("2d variant requires window == 1")
        elif self.window not in WINDOWS:
            raise ShapeError(f"{self.kind} variant requires window in {WINDOWS}, got {self.window}")
        if self.depth < 3:
            raise ShapeError(f"depth must be >= 3, got {self.depth}")
        if self.width < 1:
            raise ShapeError(f"width must be >= 1, got {self.width}")

    @property
    def spatial_rank(self) -> int:
        return 3 if self.kind == "3d" else 2

    @property
    def in_channels(self) -> int:
        # 2.5d feeds window slices through the channel axis; 3d keeps a
        # single channel and puts the window on a volumetric axis.
        return 1 if self.kind == "3d" else self.window

    def label(self) -> str:
        return self.kind if self.kind == "2d" else f"{self.kind}(w={self.window})"


@dataclass
class Layer:
    kernel: ConvKernel
    bn: BatchNormState | None = None


@dataclass
class NetworkParams:
    variant: NetworkVariant
    layers: list[Layer]
    step: int = 0
    seed: int = 0

    @property
    def precision(self) -> np.dtype:
        return self.layers[0].kernel.weights.dtype


def build_network(variant: NetworkVariant, seed: int) -> NetworkParams:
    """Construct the layer stack with seeded He-scaled Gaussian weights.

    Biases start at zero and batch-norm at identity, so a fresh network is
    a deterministic function of (variant, seed) at the active precision.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    dt = default_dtype()
    extent = (3,) * variant.spatial_rank
    layers: list[Layer] = []
    for i in range(variant.depth):
        cin = variant.in_channels if i == 0 else variant.width
        cout = 1 if i == variant.depth - 1 else variant.width
        fan_in = cin * int(np.prod(extent))
        w = (rng.standard_normal((cout, cin) + extent) * np.sqrt(2.0 / fan_in)).astype(dt)
        kernel = ConvKernel(weights=w, bias=np.zeros(cout, dtype=dt))
        bn = make_batchnorm(cout) if 0 < i < variant.depth - 1 else None
        layers.append(Layer(kernel=kernel, bn=bn))
    return NetworkParams(variant=variant, layers=layers, step=0, seed=seed)


def _check_input(variant: NetworkVariant, x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Normalize input to a batched array; returns (batched_x, was_batched)."""
    x = np.asarray(x)
    if variant.kind == "3d":
        if x.ndim == 4:
            xb, batched = x[None], False
        elif x.ndim == 5:
            xb, batched = x, True
        else:
            raise ShapeError(f"3d variant expects (1, window, H, W) input, got rank {x.ndim}")
        if xb.shape[1] != 1 or xb.shape[2] != variant.window:
            raise ShapeError(
                f"3d input must be (1, {variant.window}, H, W) per sample, got {xb.shape[1:]}"
            )
    else:
        if x.ndim == 3:
            xb, batched = x[None], False
        elif x.ndim == 4:
            xb, batched = x, True
        else:
            raise ShapeError(f"{variant.kind} variant expects (window, H, W) input, got rank {x.ndim}")
        if xb.shape[1] != variant.window:
            raise ShapeError(
                f"{variant.kind} input needs {variant.window} slice channels, got {xb.shape[1]}"
            )
    return xb, batched


def forward(params: NetworkParams, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Run the stack and return the residual estimate.

    Single samples give ``(H, W)`` for 2d/2.5d and ``(window, H, W)`` for
    3d; batches keep their leading axis plus a singleton channel. Train
    mode uses batch statistics in the normalization layers but discards
    the running-stat updates (the trainer owns those).
    """
    xb, batched = _check_input(params.variant, x)
    depth = len(params.layers)
    for i, layer in enumerate(params.layers):
        xb = conv_forward(xb, layer.kernel)
        if layer.bn is not None:
            xb, _ = batchnorm_forward(xb, layer.bn, mode=mode)
        if i < depth - 1:
            xb = relu_forward(xb)
    return xb if batched else xb[0, 0]


def reconstruct(y: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Apply the learned correction: reconstruction = input - residual."""
    y = np.asarray(y)
    residual = np.asarray(residual)
    if y.shape != residual.shape:
        raise ShapeError(f"input shape {y.shape} != residual shape {residual.shape}")
    return y - residual


# ---------------------------------------------------------------------------
# parameter traversal (used by the trainer and the checkpoints)


def parameter_entries(params: NetworkParams) -> list[tuple[str, np.ndarray]]:
    """Trainable arrays in a fixed order: per layer weights, bias, then
    gamma/beta when the layer is normalized. Running stats are excluded."""
    entries = []
    for i, layer in enumerate(params.layers):
        entries.append((f"layer{i}.weights", layer.kernel.weights))
        entries.append((f"layer{i}.bias", layer.kernel.bias))
        if layer.bn is not None:
            entries.append((f"layer{i}.gamma", layer.bn.gamma))
            entries.append((f"layer{i}.beta", layer.bn.beta))
    return entries


def with_parameters(params: NetworkParams, arrays: list[np.ndarray]) -> NetworkParams:
    """Rebuild the network with replacement trainable arrays (same order as
    :func:`parameter_entries`); running statistics are carried over."""
    layers = []
    it = iter(arrays)
    for layer in params.layers:
        kernel = ConvKernel(weights=next(it), bias=next(it))
        bn = None
        if layer.bn is not None:
            bn = replace(layer.bn, gamma=next(it), beta=next(it))
        layers.append(Layer(kernel=kernel, bn=bn))
    return replace(params, layers=layers)


def with_running_stats(params: NetworkParams, stats: list[tuple[np.ndarray, np.ndarray] | None]) -> NetworkParams:
    """Return params with per-layer (running_mean, running_var) replaced."""
    layers = []
    for layer, st in zip(params.layers, stats):
        if layer.bn is None or st is None:
            layers.append(layer)
        else:
            layers.append(Layer(kernel=layer.kernel, bn=replace(layer.bn, running_mean=st[0], running_var=st[1])))
    return replace(params, layers=layers)


# ---------------------------------------------------------------------------
# checkpoints


def _blob_arrays(params: NetworkParams) -> list[np.ndarray]:
    arrays = []
    for layer in params.layers:
        arrays.append(layer.kernel.weights)
        arrays.append(layer.kernel.bias)
        if layer.bn is not None:
            arrays += [layer.bn.gamma, layer.bn.beta, layer.bn.running_mean, layer.bn.running_var]
    return arrays


def save_checkpoint(params: NetworkParams, path) -> None:
    """Persist manifest + raw little-endian scalar blob; round trips are bit-exact."""
    v = params.variant
    dt = params.precision
    code = "<f4" if dt == np.dtype(np.float32) else "<f8"
    fields = [
        ("kind", v.kind),
        ("window", str(v.window)),
        ("depth", str(v.depth)),
        ("width", str(v.width)),
        ("precision", "float32" if code == "<f4" else "float64"),
        ("step", str(params.step)),
        ("seed", str(params.seed)),
        ("blob_dtype", code),
    ]
    for i, layer in enumerate(params.layers):
        shape = " ".join(str(s) for s in layer.kernel.weights.shape)
        bn = 0 if layer.bn is None else 1
        fields.append((f"layer{i}", f"{shape} bn {bn}"))
    blobs = [a.astype(code) for a in _blob_arrays(params)]
    storage.write_container(path, CHECKPOINT_MAGIC, fields, blobs)


def load_checkpoint(path) -> NetworkParams:
    fields, blob = storage.read_container(path, CHECKPOINT_MAGIC)
    try:
        kind = fields["kind"]
        window = int(fields["window"])
        depth = int(fields["depth"])
        width = int(fields["width"])
        step = int(fields["step"])
        seed = int(fields["seed"])
        code = fields["blob_dtype"]
        declared_layers = []
        for i in range(depth):
            tokens = fields[f"layer{i}"].split()
            bn_pos = tokens.index("bn")
            shape = tuple(int(t) for t in tokens[:bn_pos])
            declared_layers.append((shape, tokens[bn_pos + 1] == "1"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad checkpoint manifest ({exc})") from exc

    try:
        variant = NetworkVariant(kind=kind, window=window, depth=depth, width=width)
    except ShapeError as exc:
        raise ShapeMismatchError(f"{path}: manifest declares an invalid variant ({exc})") from exc
    expected = _expected_shapes(variant)
    declared = [shape for shape, _ in declared_layers]
    if declared != expected or any(
        has_bn != (0 < i < depth - 1) for i, (_, has_bn) in enumerate(declared_layers)
    ):
        raise ShapeMismatchError(
            f"{path}: declared layer shapes do not match a {variant.label()} depth-{depth} stack"
        )

    itemsize = np.dtype(code).itemsize
    offset = 0
    layers = []
    for i, (shape, has_bn) in enumerate(declared_layers):
        n_w = int(np.prod(shape))
        w = storage.blob_to_array(blob, code, n_w, path, offset).reshape(shape).copy()
        offset += n_w
        b = storage.blob_to_array(blob, code, shape[0], path, offset).copy()
        offset += shape[0]
        bn = None
        if has_bn:
            vecs = []
            for _ in range(4):
                vecs.append(storage.blob_to_array(blob, code, shape[0], path, offset).copy())
                offset += shape[0]
            bn = BatchNormState(gamma=vecs[0], beta=vecs[1], running_mean=vecs[2], running_var=vecs[3])
        layers.append(Layer(kernel=ConvKernel(weights=w, bias=b), bn=bn))
    if len(blob) > offset * itemsize:
        raise ShapeMismatchError(f"{path}: blob larger than the declared parameter count")
    return NetworkParams(variant=variant, layers=layers, step=step, seed=seed)


def _expected_shapes(variant: NetworkVariant) -> list[tuple]:
    extent = (3,) * variant.spatial_rank
    shapes = []
    for i in range(variant.depth):
        cin = variant.in_channels if i == 0 else variant.width
        cout = 1 if i == variant.depth - 1 else variant.width
        shapes.append((cout, cin) + extent)
    return shapes
