"""On-disk containers: a UTF-8 ``key = value`` header followed by a raw
little-endian scalar blob.

Both volume files and network checkpoints use this layout. A loader
either returns a fully validated object or raises one of the error
classes below; partially read objects are never returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VOLUME_MAGIC = "ctrefine-volume 1"
CHECKPOINT_MAGIC = "ctrefine-checkpoint 1"
_HEADER_END = "end"


class ContainerError(Exception):
    """Base class for container read failures."""


class FormatError(ContainerError):
    """Header is missing, unparseable, or carries the wrong magic line."""


class TruncatedBlobError(ContainerError):
    """Binary blob is shorter than the header declares."""


class ShapeMismatchError(ContainerError):
    """Header fields are internally inconsistent, or the blob is larger
    than the declared shapes allow."""


def write_container(path, magic: str, fields: list[tuple[str, str]], blobs: list[np.ndarray]) -> None:
    lines = [magic]
    lines += [f"{k} = {v}" for k, v in fields]
    lines.append(_HEADER_END)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(np.ascontiguousarray(blob).tobytes())


def read_container(path, magic: str) -> tuple[dict[str, str], bytes]:
    """Read header fields and the raw blob bytes; validates only the header syntax."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end_marker = (_HEADER_END + "\n").encode("utf-8")
    first_line_end = raw.find(b"\n")
    if first_line_end < 0:
        raise FormatError(f"{path}: no header found")
    if raw[:first_line_end].decode("utf-8", errors="replace") != magic:
        raise FormatError(f"{path}: expected magic {magic!r}")
    pos = raw.find(b"\n" + end_marker, first_line_end)
    if pos < 0:
        raise FormatError(f"{path}: header end marker missing")
    header_text = raw[first_line_end + 1 : pos + 1].decode("utf-8", errors="strict")
    blob = raw[pos + 1 + len(end_marker) :]
    fields: dict[str, str] = {}
    for line in header_text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed header line {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields, blob


def blob_to_array(blob: bytes, dtype_code: str, count: int, path, offset_items: int = 0) -> np.ndarray:
    """Decode ``count`` scalars starting at item ``offset_items``; raises on short blobs."""
    dt = np.dtype(dtype_code)
    need = (offset_items + count) * dt.itemsize
    if len(blob) < need:
        raise TruncatedBlobError(
            f"{path}: blob holds {len(blob)} bytes, header declares at least {need}"
        )
    return np.frombuffer(blob, dtype=dt, count=count, offset=offset_items * dt.itemsize)


# ---------------------------------------------------------------------------
# volumes


@dataclass
class VolumeHU:
    """A 3D scalar field in Hounsfield units, ``voxels`` shaped (Z, H, W).

    Voxels are stored as float32, matching the on-disk blob so that a
    save/load round trip is bit-exact. ``hu_window`` records the
    normalization convention used downstream.
    """

    voxels: np.ndarray
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    hu_window: tuple[float, float] = (0.0, 2000.0)

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 3 or v.shape[0] < 1:
            raise ValueError(f"voxels must be (Z, H, W) with Z >= 1, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("voxels must be finite")
        self.voxels = v

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def save_volume(volume: VolumeHU, path) -> None:
    z, h, w = volume.dims
    fields = [
        ("dims", f"{z} {h} {w}"),
        ("spacing", " ".join(f"{s:g}" for s in volume.voxel_spacing)),
        ("hu_window", f"{volume.hu_window[0]:g} {volume.hu_window[1]:g}"),
        ("blob_dtype", "<f4"),
    ]
    write_container(path, VOLUME_MAGIC, fields, [volume.voxels.astype("<f4")])


def load_volume(path) -> VolumeHU:
    fields, blob = read_container(path, VOLUME_MAGIC)
    try:
        dims = tuple(int(t) for t in fields["dims"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
        window = tuple(float(t) for t in fields["hu_window"].split())
        dtype_code = fields["blob_dtype"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad volume header ({exc})") from exc
    if len(dims) != 3 or any(d < 1 for d in dims) or len(window) != 2 or len(spacing) != 3:
        raise ShapeMismatchError(f"{path}: inconsistent volume header fields")
    count = dims[0] * dims[1] * dims[2]
    data = blob_to_array(blob, dtype_code, count, path)
    if len(blob) > count * np.dtype(dtype_code).itemsize:
        raise ShapeMismatchError(f"{path}: blob larger than declared dims {dims}")
    return VolumeHU(
        voxels=data.reshape(dims).copy(),
        voxel_spacing=spacing,
        hu_window=window,
    )
