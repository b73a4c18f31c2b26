"""Volume and label containers, HU windowing, and the DMPV/DMPL file formats.

Voxel arrays are indexed ``[z, y, x]`` in C order, which makes x the
fastest-varying axis both in memory and in the file payloads.  ``dims``
properties report ``(W, H, D)``.  Containers are immutable: constructors
copy their input and mark the array read-only, so slices, checkpoints and
worker processes can share them safely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .planar import Plane, extract_slice

FORMAT_VERSION = 1
_VOLUME_MAGIC = b"DMPV"
_MASK_MAGIC = b"DMPL"
_VOLUME_HEADER = struct.Struct("<4sHIIIfff")
_MASK_HEADER = struct.Struct("<4sHIIIH")
# Refuse absurd headers before allocating the payload.
_MAX_VOXELS = 1 << 31


class FileFormatError(ValueError):
    """Base class for all volume/mask file parse failures."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FileFormatError):
    """Payload is shorter than the header-declared size."""


class DimsError(FileFormatError):
    """Header dims are zero or overflow the supported voxel budget."""


class LabelRangeError(FileFormatError):
    """Mask payload contains a label above the declared class count."""


@dataclass(frozen=True)
class WindowSpec:
    """Half-open HU clamp window mapped affinely onto [0.0, 1.0]."""

    lo: float
    hi: float

    def __post_init__(self):
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        if not self.hi > self.lo:
            raise ValueError(f"window needs hi > lo, got [{self.lo}, {self.hi}]")


#: Soft-tissue, organ and full-range windows used as the three input channels.
DEFAULT_WINDOWS: tuple[WindowSpec, ...] = (
    WindowSpec(-125.0, 275.0),
    WindowSpec(-160.0, 240.0),
    WindowSpec(-1000.0, 1000.0),
)


def _as_locked(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr or not out.flags.owndata:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Volume:
    """3D scalar field of HU-like intensities with voxel spacing metadata.

    Attributes:
        voxels: float32 array indexed ``[z, y, x]``, read-only.
        spacing: (sx, sy, sz) in mm, stored at float32 precision so a
            save/load round trip is an exact identity.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError(f"volume needs a non-empty 3D array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("volume intensities must all be finite")
        object.__setattr__(self, "voxels", _as_locked(arr.astype(np.float32, copy=False)))
        if len(self.spacing) != 3:
            raise ValueError(f"spacing needs 3 entries, got {self.spacing!r}")
        object.__setattr__(
            self, "spacing", tuple(float(np.float32(s)) for s in self.spacing)
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        """(W, H, D) voxel counts."""
        d, h, w = self.voxels.shape
        return (w, h, d)


@dataclass(frozen=True)
class LabelMask:
    """Voxelwise labels 0..K where 0 is background and 1..K are organs.

    Attributes:
        labels: uint8 array indexed ``[z, y, x]``, read-only.
        num_classes: K, the organ count excluding background.
    """

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError(f"mask needs a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.floating):
                raise ValueError("mask labels must be integers, got floating dtype")
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("mask labels must fit in uint8")
            arr = arr.astype(np.uint8)
        k = int(self.num_classes)
        if not 1 <= k <= 255:
            raise ValueError(f"num_classes must be in 1..255, got {k}")
        top = int(arr.max())
        if top > k:
            raise ValueError(f"mask contains label {top} above num_classes {k}")
        object.__setattr__(self, "labels", _as_locked(arr))
        object.__setattr__(self, "num_classes", k)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(W, H, D) voxel counts."""
        d, h, w = self.labels.shape
        return (w, h, d)


def window_rescale(raw: float, window: WindowSpec) -> float:
    """Clamp a raw intensity into the window and map it affinely onto [0, 1].

    ``window_rescale(lo) == 0.0`` and ``window_rescale(hi) == 1.0`` exactly;
    the map is monotone non-decreasing in between.
    """
    v = min(max(float(raw), window.lo), window.hi)
    return (v - window.lo) / (window.hi - window.lo)


def windowed_channels(
    volume: Volume, windows: tuple[WindowSpec, ...] = DEFAULT_WINDOWS
) -> np.ndarray:
    """Apply every window to the whole volume at once.

    Returns:
        float32 array of shape ``(D, H, W, C)`` with values in [0, 1],
        channel c holding ``window_rescale`` under ``windows[c]``.
    """
    if not windows:
        raise ValueError("need at least one window")
    raw = volume.voxels.astype(np.float64)
    channels = [
        (np.clip(raw, w.lo, w.hi) - w.lo) / (w.hi - w.lo) for w in windows
    ]
    return np.stack(channels, axis=-1).astype(np.float32)


def channelize(
    volume: Volume,
    windows: tuple[WindowSpec, ...],
    plane: Plane,
    index: int,
) -> np.ndarray:
    """Extract one slice and turn it into a multi-channel [0, 1] image.

    Per-voxel windowing commutes with slicing, so this equals slicing
    :func:`windowed_channels` output at the same position.

    Returns:
        float32 array of shape ``(h, w, C)`` for the plane's slice dims.
    """
    if not windows:
        raise ValueError("need at least one window")
    raw = extract_slice(volume.voxels, plane, index).astype(np.float64)
    channels = [
        (np.clip(raw, w.lo, w.hi) - w.lo) / (w.hi - w.lo) for w in windows
    ]
    return np.stack(channels, axis=-1).astype(np.float32)


def _read_exact(buf: bytes, kind: str):
    if len(buf) < 4:
        raise TruncatedFileError(f"{kind} file shorter than its magic")
    return buf[:4]


def _check_dims(w: int, h: int, d: int, kind: str) -> tuple[int, int, int]:
    if min(w, h, d) < 1:
        raise DimsError(f"{kind} header has zero dim (W={w}, H={h}, D={d})")
    if w * h * d > _MAX_VOXELS:
        raise DimsError(f"{kind} dims overflow voxel budget (W={w}, H={h}, D={d})")
    return w, h, d


def save_volume(volume: Volume, path: str | Path) -> None:
    """Write a volume in the DMPV format (little-endian, x-fastest payload)."""
    w, h, d = volume.dims
    sx, sy, sz = volume.spacing
    header = _VOLUME_HEADER.pack(_VOLUME_MAGIC, FORMAT_VERSION, w, h, d, sx, sy, sz)
    payload = volume.voxels.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path: str | Path) -> Volume:
    """Read a DMPV file back into a Volume.

    Raises:
        BadMagicError / TruncatedFileError / DimsError / FileFormatError on
        malformed input, each naming the problem.
    """
    buf = Path(path).read_bytes()
    if _read_exact(buf, "volume") != _VOLUME_MAGIC:
        raise BadMagicError(f"not a DMPV file: magic {buf[:4]!r}")
    if len(buf) < _VOLUME_HEADER.size:
        raise TruncatedFileError("volume header truncated")
    _, version, w, h, d, sx, sy, sz = _VOLUME_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise FileFormatError(f"unsupported DMPV version {version}")
    _check_dims(w, h, d, "volume")
    expected = _VOLUME_HEADER.size + 4 * w * h * d
    if len(buf) < expected:
        raise TruncatedFileError(
            f"volume payload truncated: {len(buf)} bytes, expected {expected}"
        )
    if len(buf) > expected:
        raise FileFormatError(f"volume file has {len(buf) - expected} trailing bytes")
    voxels = np.frombuffer(buf, dtype="<f4", count=w * h * d, offset=_VOLUME_HEADER.size)
    return Volume(voxels=voxels.reshape(d, h, w), spacing=(sx, sy, sz))


def save_mask(mask: LabelMask, path: str | Path) -> None:
    """Write a label mask in the DMPL format (little-endian, x-fastest payload)."""
    w, h, d = mask.dims
    header = _MASK_HEADER.pack(_MASK_MAGIC, FORMAT_VERSION, w, h, d, mask.num_classes)
    Path(path).write_bytes(header + mask.labels.tobytes())


def load_mask(path: str | Path) -> LabelMask:
    """Read a DMPL file back into a LabelMask.

    Raises:
        BadMagicError / TruncatedFileError / DimsError / LabelRangeError /
        FileFormatError on malformed input, each naming the problem.
    """
    buf = Path(path).read_bytes()
    if _read_exact(buf, "mask") != _MASK_MAGIC:
        raise BadMagicError(f"not a DMPL file: magic {buf[:4]!r}")
    if len(buf) < _MASK_HEADER.size:
        raise TruncatedFileError("mask header truncated")
    _, version, w, h, d, k = _MASK_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise FileFormatError(f"unsupported DMPL version {version}")
    _check_dims(w, h, d, "mask")
    if k < 1:
        raise FileFormatError("mask header declares zero classes")
    expected = _MASK_HEADER.size + w * h * d
    if len(buf) < expected:
        raise TruncatedFileError(
            f"mask payload truncated: {len(buf)} bytes, expected {expected}"
        )
    if len(buf) > expected:
        raise FileFormatError(f"mask file has {len(buf) - expected} trailing bytes")
    labels = np.frombuffer(buf, dtype=np.uint8, count=w * h * d, offset=_MASK_HEADER.size)
    labels = labels.reshape(d, h, w)
    top = int(labels.max())
    if top > k:
        raise LabelRangeError(f"mask contains label {top} above declared K={k}")
    return LabelMask(labels=labels, num_classes=k)
