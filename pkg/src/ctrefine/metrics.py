"""HU-masked image-quality metrics and per-slice CSV/plot reporting.

Convention used throughout (and declared in every emitted summary): the
voxel mask is evaluated in Hounsfield units on the reference volume,
while the squared error itself is computed on window-normalized values
(HU window -> [0, 1]). PSNR is 10*log10(1/MSE) in dB.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .storage import VolumeHU
from .tensor_ops import ShapeError

DEFAULT_MASK_HU = (700.0, 1500.0)
DEFAULT_WINDOW_HU = (0.0, 2000.0)

REPORT_COLUMNS = "method,slice,psnr_db,mse,masked_voxels"


class EmptyMaskError(ValueError):
    """No voxel of the reference falls inside the mask range."""


def _voxels(volume) -> np.ndarray:
    return volume.voxels if isinstance(volume, VolumeHU) else np.asarray(volume)


def masked_mse(x, x_ref, mask_range=DEFAULT_MASK_HU,
               normalization_window=DEFAULT_WINDOW_HU) -> tuple[float, int]:
    """Mean squared error over reference voxels inside ``mask_range`` (HU).

    Returns (mse, masked_voxel_count). The error is averaged on
    window-normalized values so PSNR lands on a [0, 1] intensity scale.
    """
    xv = _voxels(x)
    rv = _voxels(x_ref)
    if xv.shape != rv.shape:
        raise ShapeError(f"volume shapes differ: {xv.shape} vs {rv.shape}")
    lo, hi = mask_range
    mask = (rv >= lo) & (rv <= hi)
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise EmptyMaskError(f"no reference voxels in [{lo}, {hi}] HU")
    wlo, whi = normalization_window
    if wlo >= whi:
        raise ShapeError(f"normalization window must satisfy lo < hi, got {normalization_window}")
    scale = 1.0 / (whi - wlo)
    diff = (rv[mask].astype(np.float64) - xv[mask].astype(np.float64)) * scale
    return float(np.mean(diff * diff)), count


def psnr(mse: float) -> float:
    """10*log10(1/mse) in dB; mse == 0 maps to the +inf sentinel."""
    if mse < 0:
        raise ValueError(f"mse must be non-negative, got {mse}")
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


@dataclass
class SliceRow:
    method: str
    slice_index: int
    psnr_db: float
    mse: float
    masked_voxels: int


@dataclass
class MethodSummary:
    method: str
    mean_psnr_db: float  # mean of finite per-slice PSNRs
    volume_psnr_db: float  # PSNR of the pooled whole-volume masked MSE
    max_improvement_db: float  # vs the FBP baseline, per-slice
    mean_improvement_db: float
    min_improvement_db: float
    infinite_slices: int  # per-slice rows excluded from the means


@dataclass
class TimingEntry:
    method: str
    mean_s: float
    min_s: float
    repeats: int


@dataclass
class MetricsReport:
    rows: list[SliceRow]
    summary: list[MethodSummary]
    normalization_window: tuple[float, float] = DEFAULT_WINDOW_HU
    mask_range: tuple[float, float] = DEFAULT_MASK_HU
    timing: list[TimingEntry] = field(default_factory=list)


def per_slice_report(methods: dict, x_ref, fbp, mask_range=DEFAULT_MASK_HU,
                     normalization_window=DEFAULT_WINDOW_HU) -> MetricsReport:
    """Per-slice masked PSNR for each labeled volume, with improvement
    statistics against the FBP baseline.

    Rows are ordered by (method label, slice). Slices whose mask is empty
    are omitted rather than reported as zero error. Per-slice and pooled
    volume-level PSNR are different statistics; the summary carries both.
    """
    ref = _voxels(x_ref)
    fbp_v = _voxels(fbp)
    if fbp_v.shape != ref.shape:
        raise ShapeError(f"fbp dims {fbp_v.shape} do not match reference {ref.shape}")
    vols = {}
    for label, vol in methods.items():
        v = _voxels(vol)
        if v.shape != ref.shape:
            raise ShapeError(f"method {label!r} dims {v.shape} do not match reference {ref.shape}")
        vols[label] = v

    def slice_psnrs(v):
        out = {}
        for z in range(ref.shape[0]):
            try:
                mse, count = masked_mse(v[z], ref[z], mask_range, normalization_window)
            except EmptyMaskError:
                continue
            out[z] = (psnr(mse), mse, count)
        return out

    baseline = slice_psnrs(fbp_v)
    rows = []
    summary = []
    for label in sorted(vols):
        per_slice = slice_psnrs(vols[label])
        for z in sorted(per_slice):
            p, mse, count = per_slice[z]
            rows.append(SliceRow(method=label, slice_index=z, psnr_db=p, mse=mse,
                                 masked_voxels=count))
        finite = [p for p, _, _ in per_slice.values() if np.isfinite(p)]
        infinite = len(per_slice) - len(finite)
        improvements = [per_slice[z][0] - baseline[z][0]
                        for z in per_slice if z in baseline]
        finite_impr = [d for d in improvements if np.isfinite(d)]
        try:
            vol_mse, _ = masked_mse(vols[label], ref, mask_range, normalization_window)
            vol_psnr = psnr(vol_mse)
        except EmptyMaskError:
            vol_psnr = float("nan")
        summary.append(MethodSummary(
            method=label,
            mean_psnr_db=float(np.mean(finite)) if finite else float("nan"),
            volume_psnr_db=vol_psnr,
            max_improvement_db=float(max(improvements)) if improvements else float("nan"),
            mean_improvement_db=float(np.mean(finite_impr)) if finite_impr else float("nan"),
            min_improvement_db=float(min(improvements)) if improvements else float("nan"),
            infinite_slices=infinite,
        ))
    return MetricsReport(rows=rows, summary=summary,
                         normalization_window=normalization_window, mask_range=mask_range)


def _fmt(value: float) -> str:
    if np.isinf(value):
        return "inf" if value > 0 else "-inf"
    if np.isnan(value):
        return "nan"
    return f"{value:.6f}"


def emit_report(report: MetricsReport, path, with_plots: bool = False,
                canvas: tuple[int, int] = (800, 600)) -> list[str]:
    """Write the per-slice CSV (schema: method,slice,psnr_db,mse,masked_voxels),
    a *_summary.csv sidecar declaring the metric convention, optional
    *_timing.csv, and optionally a per-slice PSNR chart as a binary PPM."""
    path = os.fspath(path)
    written = []
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(REPORT_COLUMNS + "\n")
            for r in report.rows:
                fh.write(f"{r.method},{r.slice_index},{_fmt(r.psnr_db)},{_fmt(r.mse)},"
                         f"{r.masked_voxels}\n")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    written.append(path)

    stem = path[: -len(".csv")] if path.endswith(".csv") else path
    summary_path = f"{stem}_summary.csv"
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("method,mean_psnr_db,volume_psnr_db,max_improvement_db,"
                 "mean_improvement_db,min_improvement_db,infinite_slices,"
                 "window_lo_hu,window_hi_hu,mask_lo_hu,mask_hi_hu\n")
        wlo, whi = report.normalization_window
        mlo, mhi = report.mask_range
        for s in report.summary:
            fh.write(f"{s.method},{_fmt(s.mean_psnr_db)},{_fmt(s.volume_psnr_db)},"
                     f"{_fmt(s.max_improvement_db)},{_fmt(s.mean_improvement_db)},"
                     f"{_fmt(s.min_improvement_db)},{s.infinite_slices},"
                     f"{wlo:g},{whi:g},{mlo:g},{mhi:g}\n")
    written.append(summary_path)

    if report.timing:
        timing_path = f"{stem}_timing.csv"
        with open(timing_path, "w", encoding="utf-8") as fh:
            fh.write("method,mean_s,min_s,repeats\n")
            for t in report.timing:
                fh.write(f"{t.method},{_fmt(t.mean_s)},{_fmt(t.min_s)},{t.repeats}\n")
        written.append(timing_path)

    if with_plots:
        written.append(_plot_psnr(report, f"{stem}_psnr.ppm", canvas))
    return written


def _plot_psnr(report: MetricsReport, path: str, canvas: tuple[int, int]) -> str:
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    w, h = canvas
    dpi = 100
    fig, ax = plt.subplots(figsize=(w / dpi, h / dpi), dpi=dpi)
    for label in sorted({r.method for r in report.rows}):
        pts = [(r.slice_index, r.psnr_db) for r in report.rows
               if r.method == label and np.isfinite(r.psnr_db)]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=label)
    ax.set_xlabel("slice")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(loc="best", fontsize="small")
    fig.canvas.draw()
    buf = np.asarray(fig.canvas.buffer_rgba())[..., :3]
    plt.close(fig)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{buf.shape[1]} {buf.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(buf, dtype=np.uint8).tobytes())
    return path
