"""Full-volume reconstruction by residual correction.

The 2D variant refines each slice independently on whole slices (no
patching at test time). The 2.5D and 3D variants slide a window of w
neighboring slices along z with stride 1; 2.5D emits one slice per
window, 3D emits a w-slice residual block of which only the middle slice
is kept. Volume edges are handled by replicating the first/last slice so
every one of the Z input slices receives an output.

Inputs here are window-normalized intensities; HU conversion belongs to
the caller.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .network import NetworkParams, forward, reconstruct
from .tensor_ops import ShapeError


def _window_indices(z: int, window: int) -> np.ndarray:
    """Stride-1 window center indices with replicate padding at the edges:
    row i lists the window slices feeding output slice i."""
    half = window // 2
    return np.clip(np.arange(z)[:, None] + np.arange(-half, half + 1)[None, :], 0, z - 1)


def infer_volume(params: NetworkParams, y: np.ndarray, chunk: int = 4,
                 residual_fn=None) -> np.ndarray:
    """Reconstruct a normalized (Z, H, W) volume; output has identical dims.

    ``residual_fn`` substitutes the network forward pass (same batched
    calling convention) — an instrumentation hook used to verify window
    centering independently of any trained weights.
    """
    y = np.asarray(y)
    if y.ndim != 3 or y.shape[0] < 1:
        raise ShapeError(f"expected a (Z, H, W) volume with Z >= 1, got shape {y.shape}")
    v = params.variant
    support = params.layers[0].kernel.spatial_extent[-1]
    if y.shape[1] < support or y.shape[2] < support:
        raise ShapeError(
            f"slice dims {y.shape[1:]} are below the kernel support {support}x{support}"
        )
    if chunk < 1:
        raise ShapeError(f"chunk must be >= 1, got {chunk}")
    run = (lambda xb: forward(params, xb, mode="infer")) if residual_fn is None else residual_fn

    z = y.shape[0]
    windows = y[_window_indices(z, v.window)]  # (Z, window, H, W)
    if v.kind == "3d":
        windows = windows[:, None]  # (Z, 1, window, H, W)
    out = np.empty_like(y)
    mid = v.window // 2
    for i in range(0, z, chunk):
        residual = run(windows[i : i + chunk])
        if v.kind == "3d":
            out[i : i + chunk] = reconstruct(y[i : i + chunk], residual[:, 0, mid])
        else:
            out[i : i + chunk] = reconstruct(y[i : i + chunk], residual[:, 0])
    return out


@dataclass
class TimingStats:
    mean_s: float
    min_s: float
    samples: list[float]

    @property
    def repeats(self) -> int:
        return len(self.samples)


def time_inference(params: NetworkParams, y: np.ndarray, repeats: int = 3,
                   chunk: int = 4) -> TimingStats:
    """Wall-clock stats for infer_volume alone; one warm-up run excluded."""
    if repeats < 3:
        raise ShapeError(f"repeats must be >= 3, got {repeats}")
    infer_volume(params, y, chunk=chunk)  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        infer_volume(params, y, chunk=chunk)
        samples.append(time.perf_counter() - t0)
    return TimingStats(mean_s=float(np.mean(samples)), min_s=float(min(samples)),
                       samples=samples)
