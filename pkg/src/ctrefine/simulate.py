"""Synthetic CT data source: ellipse phantoms in HU, parallel-beam
projection, filtered backprojection, and training-patch extraction.

Sparse projection views plus sinogram noise give the reconstructed
volumes the streak/noise artifact classes the networks are trained to
remove; the noiseless phantom plays the role of the high-quality
reference reconstruction.

Geometry convention: every slice is square and spans [-1, 1] x [-1, 1];
pixel centers sit at ``-1 + (i + 0.5) * 2 / n``. Projection values are
line integrals in those unit coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .storage import VolumeHU, write_container, read_container, blob_to_array
from .storage import FormatError, ShapeMismatchError
from .tensor_ops import ShapeError, seeded_rng

log = logging.getLogger(__name__)

AUG_TAGS = ("none", "fliph", "flipv", "rot90", "rot180", "rot270")


@dataclass
class Ellipse:
    center: tuple[float, float]  # (cx, cy) in unit field-of-view coords
    semi_axes: tuple[float, float]  # (a, b), both > 0
    rotation: float  # radians
    value: float  # HU


@dataclass
class Phantom:
    """Painted ellipse stack; later ellipses overwrite earlier ones."""

    ellipses: list[Ellipse]
    background_hu: float = 0.0


@dataclass
class Sinogram:
    angles: np.ndarray  # strictly increasing, in [0, pi)
    detectors: int
    values: np.ndarray  # (n_angles, detectors) line integrals
    image_size: int  # side length of the originating square slice

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=np.float64)
        if a.size == 0:
            raise ShapeError("angle list is empty")
        if np.any(np.diff(a) <= 0) or a[0] < 0 or a[-1] >= np.pi:
            raise ShapeError("angles must be strictly increasing within [0, pi)")
        self.angles = a
        v = np.asarray(self.values)
        if v.shape != (a.size, self.detectors):
            raise ShapeError(f"values must be (n_angles, detectors), got {v.shape}")


# ---------------------------------------------------------------------------
# phantoms


def _pixel_centers(n: int) -> np.ndarray:
    return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)


def ellipse_contains(ellipse: Ellipse, x, y) -> np.ndarray:
    """Analytic membership test in unit coordinates (used as its own oracle)."""
    cx, cy = ellipse.center
    c, s = np.cos(ellipse.rotation), np.sin(ellipse.rotation)
    dx, dy = np.asarray(x) - cx, np.asarray(y) - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    a, b = ellipse.semi_axes
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def rasterize_phantom(phantom: Phantom, shape: tuple[int, int], supersample: int = 4) -> np.ndarray:
    """Paint the ellipse stack onto a pixel grid.

    Pixels are supersampled and averaged, so boundary pixels carry
    partial-volume values instead of a jagged binary edge; set
    ``supersample=1`` for exact nearest-membership rasterization.
    """
    h, w = shape
    ss = max(1, int(supersample))
    xs = _pixel_centers(w * ss)[None, :]
    ys = _pixel_centers(h * ss)[:, None]
    img = np.full((h * ss, w * ss), phantom.background_hu, dtype=np.float64)
    for e in phantom.ellipses:
        img = np.where(ellipse_contains(e, xs, ys), e.value, img)
    return img.reshape(h, ss, w, ss).mean(axis=(1, 3)).astype(np.float32)


def generate_phantom_volume(seed: int, dims: tuple[int, int, int]) -> tuple[list[Phantom], VolumeHU]:
    """Random ellipse phantom with smooth z-variation.

    Ellipse parameters drift sinusoidally across slices so neighboring
    slices correlate, giving the window-based variants depth information
    to exploit. Values stay within [0, 2000] HU. Returns one Phantom per
    slice plus the rasterized ground-truth volume.
    """
    z, h, w = dims
    if z < 8 or h < 32 or w < 32:
        raise ShapeError(f"dims must be at least (8, 32, 32), got {dims}")
    rng = np.random.Generator(np.random.Philox(key=seed))

    # body ellipse + soft-tissue structures (inside the masked HU band)
    # + a couple of dense inclusions that cause streaks under sparse views
    bases = []
    bases.append(dict(r=0.0, angle=0.0, a=rng.uniform(0.62, 0.72), b=rng.uniform(0.55, 0.68),
                      rot=rng.uniform(0, np.pi), hu=rng.uniform(950, 1050)))
    for _ in range(int(rng.integers(3, 6))):
        bases.append(dict(r=rng.uniform(0.0, 0.38), angle=rng.uniform(0, 2 * np.pi),
                          a=rng.uniform(0.08, 0.22), b=rng.uniform(0.08, 0.22),
                          rot=rng.uniform(0, np.pi), hu=rng.uniform(750, 1450)))
    for _ in range(int(rng.integers(1, 3))):
        bases.append(dict(r=rng.uniform(0.1, 0.4), angle=rng.uniform(0, 2 * np.pi),
                          a=rng.uniform(0.04, 0.09), b=rng.uniform(0.04, 0.09),
                          rot=rng.uniform(0, np.pi), hu=rng.uniform(1750, 1980)))

    # per-ellipse smooth drift along z
    drift = [dict(cyc=rng.uniform(0.5, 1.5), phase=rng.uniform(0, 2 * np.pi),
                  dc=rng.uniform(0.02, 0.05), ds=rng.uniform(0.0, 0.08),
                  dhu=rng.uniform(10, 45)) for _ in bases]

    phantoms = []
    slices = np.empty((z, h, w), dtype=np.float32)
    for iz in range(z):
        t = iz / max(z - 1, 1)
        ellipses = []
        for base, d in zip(bases, drift):
            wobble = np.sin(2 * np.pi * d["cyc"] * t + d["phase"])
            r = base["r"] + d["dc"] * wobble
            cx, cy = r * np.cos(base["angle"]), r * np.sin(base["angle"])
            scale = 1.0 + d["ds"] * wobble
            hu = float(np.clip(base["hu"] + d["dhu"] * wobble, 0.0, 2000.0))
            ellipses.append(Ellipse(center=(cx, cy),
                                    semi_axes=(base["a"] * scale, base["b"] * scale),
                                    rotation=base["rot"], value=hu))
        phantom = Phantom(ellipses=ellipses)
        phantoms.append(phantom)
        slices[iz] = rasterize_phantom(phantom, (h, w))
    return phantoms, VolumeHU(voxels=slices)


# ---------------------------------------------------------------------------
# projection and reconstruction


def radon(image: np.ndarray, angles, detectors: int, oversample: int = 2) -> Sinogram:
    """Parallel-beam line integrals by sampled ray accumulation.

    Rays are sampled with bilinear interpolation (zero outside the image),
    making the transform exactly linear in the pixel values.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ShapeError(f"slice must be square 2D, got shape {img.shape}")
    angles = np.asarray(angles, dtype=np.float64)
    n = img.shape[0]
    if detectors < 1:
        raise ShapeError(f"detector count must be positive, got {detectors}")

    n_t = oversample * max(n, detectors)
    dt = 2.0 / n_t
    s = -1.0 + (np.arange(detectors) + 0.5) * (2.0 / detectors)
    t = -1.0 + (np.arange(n_t) + 0.5) * dt

    values = np.empty((angles.size, detectors), dtype=np.float64)
    for ia, theta in enumerate(angles):
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        x = s[:, None] * cos_t - t[None, :] * sin_t
        y = s[:, None] * sin_t + t[None, :] * cos_t
        values[ia] = _bilinear(img, x, y).sum(axis=1) * dt
    sino = Sinogram(angles=angles, detectors=detectors, values=values, image_size=n)
    return sino


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample img at unit coords (x, y); zero outside the field of view."""
    n = img.shape[0]
    col = (x + 1.0) * (n / 2.0) - 0.5
    row = (y + 1.0) * (n / 2.0) - 0.5
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc = col - c0
    fr = row - r0
    out = np.zeros(x.shape, dtype=np.float64)
    for dr in (0, 1):
        for dc in (0, 1):
            rr = r0 + dr
            cc = c0 + dc
            valid = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)
            wgt = (fr if dr else 1.0 - fr) * (fc if dc else 1.0 - fc)
            out += np.where(valid, img[np.clip(rr, 0, n - 1), np.clip(cc, 0, n - 1)], 0.0) * wgt
    return out


def _ramp_spectrum(n_fft: int) -> np.ndarray:
    """Frequency response of the sampled ramp-filter kernel (detector-
    spacing units).

    Built from the band-limited impulse response (1/4 at the center,
    -1/(pi n)^2 at odd offsets) rather than by sampling |frequency|
    directly, which would zero the DC bin and push a cupping bias into
    every reconstruction.
    """
    h = np.zeros(n_fft)
    h[0] = 0.25
    odd = np.arange(1, n_fft // 2 + 1, 2)
    h[odd] = -1.0 / (np.pi * odd) ** 2
    h[-odd] = -1.0 / (np.pi * odd) ** 2
    return np.real(np.fft.fft(h))


def fbp(sinogram: Sinogram, filter_name: str = "ram-lak") -> np.ndarray:
    """Filtered backprojection: per-angle frequency-domain ramp filter,
    then bilinear backprojection onto the original grid."""
    if filter_name != "ram-lak":
        raise ValueError(f"unknown filter {filter_name!r}")
    p = np.asarray(sinogram.values, dtype=np.float64)
    if p.shape != (sinogram.angles.size, sinogram.detectors):
        raise ShapeError(
            f"sinogram values {p.shape} do not match {sinogram.angles.size} angles x "
            f"{sinogram.detectors} detectors"
        )
    n_det = sinogram.detectors
    ds = 2.0 / n_det
    n_fft = 1 << int(np.ceil(np.log2(max(2 * n_det, 16))))
    spectra = np.fft.fft(p, n=n_fft, axis=1) * _ramp_spectrum(n_fft)[None, :]
    filtered = np.fft.ifft(spectra, axis=1).real[:, :n_det] / ds

    n = sinogram.image_size
    xs = _pixel_centers(n)[None, :]
    ys = _pixel_centers(n)[:, None]
    recon = np.zeros((n, n), dtype=np.float64)
    for ia, theta in enumerate(sinogram.angles):
        s = xs * np.cos(theta) + ys * np.sin(theta)
        pos = (s + 1.0) / ds - 0.5
        i0 = np.floor(pos).astype(np.int64)
        frac = pos - i0
        q = filtered[ia]
        left = np.where((i0 >= 0) & (i0 < n_det), q[np.clip(i0, 0, n_det - 1)], 0.0)
        right = np.where((i0 + 1 >= 0) & (i0 + 1 < n_det), q[np.clip(i0 + 1, 0, n_det - 1)], 0.0)
        recon += left * (1.0 - frac) + right * frac
    recon *= np.pi / sinogram.angles.size
    return recon.astype(np.float32)


def make_pair(ground_truth: VolumeHU, views: int, noise_sigma: float, seed: int,
              detectors: int | None = None) -> tuple[VolumeHU, VolumeHU]:
    """Simulate the degraded/reference volume pair for one scan.

    Per slice: project over ``views`` angles, add Gaussian noise of the
    given sigma to the sinogram, reconstruct with FBP. Sparse views plus
    noise produce the streaks the networks learn to remove.
    """
    if views < 8:
        raise ShapeError(f"need at least 8 views, got {views}")
    z, h, w = ground_truth.dims
    det = w if detectors is None else detectors
    angles = np.arange(views) * (np.pi / views)
    recon = np.empty((z, h, w), dtype=np.float32)
    for iz in range(z):
        sino = radon(ground_truth.voxels[iz], angles, det)
        if noise_sigma > 0:
            slice_rng = seeded_rng(seed, purpose=3, index=iz)
            sino.values = sino.values + slice_rng.normal(0.0, noise_sigma, sino.values.shape)
        recon[iz] = fbp(sino)
    fbp_volume = VolumeHU(voxels=recon, voxel_spacing=ground_truth.voxel_spacing,
                          hu_window=ground_truth.hu_window)
    return fbp_volume, ground_truth


# ---------------------------------------------------------------------------
# normalization


def hu_normalize(volume, window: tuple[float, float] = (0.0, 2000.0)) -> np.ndarray:
    """Affine map of HU values: window lo -> 0, hi -> 1.

    Out-of-window values are reported via the module logger but kept, not
    clipped; the map stays invertible everywhere.
    """
    lo, hi = window
    if lo >= hi:
        raise ShapeError(f"window must satisfy lo < hi, got {window}")
    v = volume.voxels if isinstance(volume, VolumeHU) else np.asarray(volume)
    outside = int(np.count_nonzero((v < lo) | (v > hi)))
    if outside:
        log.debug("hu_normalize: %d voxels outside window [%g, %g]", outside, lo, hi)
    return ((v - lo) / (hi - lo)).astype(v.dtype if v.dtype.kind == "f" else np.float32)


def hu_denormalize(values: np.ndarray, window: tuple[float, float] = (0.0, 2000.0)) -> np.ndarray:
    lo, hi = window
    if lo >= hi:
        raise ShapeError(f"window must satisfy lo < hi, got {window}")
    return np.asarray(values) * (hi - lo) + lo


# ---------------------------------------------------------------------------
# patch extraction


@dataclass
class PatchSet:
    """Paired training samples: degraded input windows and residual targets.

    ``inputs`` is (count, window, p, p); ``targets`` is (count, 1, p, p)
    for the slice-output variants or (count, window, p, p) when the
    targets span the window. ``indices`` rows are
    (volume_id, z, row, col, aug) with aug indexing AUG_TAGS, enough to
    recompute every sample from the source volumes.
    """

    inputs: np.ndarray
    targets: np.ndarray
    indices: np.ndarray
    window: int = 1

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0] or self.inputs.shape[0] != self.indices.shape[0]:
            raise ShapeError("inputs, targets and indices must align one-to-one")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def patch_size(self) -> int:
        return self.inputs.shape[-1]


_AUG_OPS = {
    0: lambda a: a,
    1: lambda a: a[..., :, ::-1],
    2: lambda a: a[..., ::-1, :],
    3: lambda a: np.rot90(a, 1, axes=(-2, -1)),
    4: lambda a: np.rot90(a, 2, axes=(-2, -1)),
    5: lambda a: np.rot90(a, 3, axes=(-2, -1)),
}


def apply_augmentation(patch: np.ndarray, tag: int) -> np.ndarray:
    return np.ascontiguousarray(_AUG_OPS[int(tag)](patch))


def extract_patches(y, x, patch_size: int, window: int, count: int,
                    augment: bool, seed: int, volumetric_target: bool = False,
                    volume_id: int = 0) -> PatchSet:
    """Sample paired patches from a degraded volume and its reference.

    Anchors are drawn uniformly in one vectorized pass from a seeded
    counter-based generator (stream keyed by seed and volume_id), so the
    result is independent of any parallelism in the caller. Windows at
    the z edges use replicate padding. When augmenting, one of {identity,
    flips, right-angle rotations} is applied to input and target alike.
    """
    yv = y.voxels if isinstance(y, VolumeHU) else np.asarray(y)
    xv = x.voxels if isinstance(x, VolumeHU) else np.asarray(x)
    if yv.shape != xv.shape:
        raise ShapeError(f"volume shapes differ: {yv.shape} vs {xv.shape}")
    z, h, w = yv.shape
    p = patch_size
    if p > min(h, w):
        raise ShapeError(f"patch size {p} exceeds slice dims ({h}, {w})")
    if window > z:
        raise ShapeError(f"window {window} exceeds slice count {z}")
    if window % 2 == 0 or window < 1:
        raise ShapeError(f"window must be odd and positive, got {window}")
    if count < 1:
        raise ShapeError(f"count must be >= 1, got {count}")

    rng = seeded_rng(seed, purpose=4, index=volume_id)
    zs = rng.integers(0, z, size=count)
    rows = rng.integers(0, h - p + 1, size=count)
    cols = rng.integers(0, w - p + 1, size=count)
    augs = rng.integers(0, len(AUG_TAGS), size=count) if augment else np.zeros(count, dtype=np.int64)

    residual = yv - xv
    half = window // 2
    offsets = np.arange(-half, half + 1)
    inputs = np.empty((count, window, p, p), dtype=yv.dtype)
    tdepth = window if volumetric_target else 1
    targets = np.empty((count, tdepth, p, p), dtype=yv.dtype)
    for i in range(count):
        zi, r, c, a = int(zs[i]), int(rows[i]), int(cols[i]), int(augs[i])
        zwin = np.clip(zi + offsets, 0, z - 1)
        inp = yv[zwin, r : r + p, c : c + p]
        tgt = residual[zwin, r : r + p, c : c + p] if volumetric_target \
            else residual[zi : zi + 1, r : r + p, c : c + p]
        inputs[i] = apply_augmentation(inp, a)
        targets[i] = apply_augmentation(tgt, a)

    indices = np.stack(
        [np.full(count, volume_id, dtype=np.int64), zs, rows, cols, augs], axis=1
    ).astype(np.int64)
    return PatchSet(inputs=inputs, targets=targets, indices=indices, window=window)


def concat_patchsets(sets: list[PatchSet]) -> PatchSet:
    if not sets:
        raise ShapeError("need at least one patch set")
    if len({s.window for s in sets}) != 1:
        raise ShapeError("patch sets disagree on window size")
    return PatchSet(
        inputs=np.concatenate([s.inputs for s in sets]),
        targets=np.concatenate([s.targets for s in sets]),
        indices=np.concatenate([s.indices for s in sets]),
        window=sets[0].window,
    )


PATCHSET_MAGIC = "ctrefine-patchset 1"


def save_patchset(patches: PatchSet, path) -> None:
    """Container blob (inputs then targets) plus a CSV index sidecar."""
    n, w, p, _ = patches.inputs.shape
    fields = [
        ("count", str(n)),
        ("window", str(patches.window)),
        ("patch_size", str(p)),
        ("target_depth", str(patches.targets.shape[1])),
        ("blob_dtype", "<f4"),
    ]
    write_container(path, PATCHSET_MAGIC, fields,
                    [patches.inputs.astype("<f4"), patches.targets.astype("<f4")])
    with open(f"{path}.idx.csv", "w", encoding="utf-8") as fh:
        fh.write("volume_id,z,row,col,aug_tag\n")
        for vid, z, r, c, a in patches.indices:
            fh.write(f"{vid},{z},{r},{c},{AUG_TAGS[a]}\n")


def load_patchset(path) -> PatchSet:
    fields, blob = read_container(path, PATCHSET_MAGIC)
    try:
        n = int(fields["count"])
        window = int(fields["window"])
        p = int(fields["patch_size"])
        tdepth = int(fields["target_depth"])
        code = fields["blob_dtype"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad patchset header ({exc})") from exc
    n_in = n * window * p * p
    n_tg = n * tdepth * p * p
    inputs = blob_to_array(blob, code, n_in, path).reshape(n, window, p, p).copy()
    targets = blob_to_array(blob, code, n_tg, path, offset_items=n_in).reshape(n, tdepth, p, p).copy()
    if len(blob) > (n_in + n_tg) * np.dtype(code).itemsize:
        raise ShapeMismatchError(f"{path}: blob larger than declared patch counts")
    tag_to_idx = {t: i for i, t in enumerate(AUG_TAGS)}
    rows = []
    with open(f"{path}.idx.csv", "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "volume_id,z,row,col,aug_tag":
            raise FormatError(f"{path}.idx.csv: unexpected header {header!r}")
        for line in fh:
            vid, z, r, c, tag = line.strip().split(",")
            rows.append((int(vid), int(z), int(r), int(c), tag_to_idx[tag]))
    if len(rows) != n:
        raise ShapeMismatchError(f"{path}.idx.csv: {len(rows)} rows for {n} patches")
    indices = np.asarray(rows, dtype=np.int64)
    return PatchSet(inputs=inputs, targets=targets, indices=indices, window=window)
