"""Orthogonal plane decomposition of 3D fields and exact reconstruction.

3D arrays are indexed ``[z, y, x]`` throughout the package.  A sagittal
slice fixes x, a coronal slice fixes y and an axial slice fixes z.  The
resulting 2D arrays follow the image convention (rows first):

* axial slice ``i``    -> shape ``(H, W)``
* coronal slice ``j``  -> shape ``(D, W)``
* sagittal slice ``k`` -> shape ``(D, H)``

Arrays with trailing channel axes, e.g. ``(D, H, W, C)``, slice and stack
the same way with the channel axis passed through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class Plane(IntEnum):
    """The three orthogonal slicing planes, in fixed priority order.

    The enum value doubles as the priority used to break confidence ties
    during fusion: lower value wins (sagittal first, then coronal, axial).
    """

    SAGITTAL = 0
    CORONAL = 1
    AXIAL = 2


#: Planes in priority order; every per-plane loop in the package uses this.
PLANES: tuple[Plane, ...] = (Plane.SAGITTAL, Plane.CORONAL, Plane.AXIAL)

# Axis of a [z, y, x] array that the plane's slice index walks along.
_SLICE_AXIS = {Plane.SAGITTAL: 2, Plane.CORONAL: 1, Plane.AXIAL: 0}


class ReconstructionError(ValueError):
    """Raised when a slice stack cannot be reassembled into the target dims."""


def slice_axis(plane: Plane) -> int:
    """Array axis (of a ``[z, y, x]`` field) indexed by this plane."""
    return _SLICE_AXIS[Plane(plane)]


def plane_extent(shape: tuple[int, ...], plane: Plane) -> int:
    """Number of slices the plane produces from a field of this shape."""
    return int(shape[slice_axis(plane)])


def extract_slice(field: np.ndarray, plane: Plane, index: int) -> np.ndarray:
    """Materialize one 2D slice of a 3D (or 3D+channels) field as a copy.

    Raises:
        IndexError: if ``index`` is outside the plane's extent, with the
            plane name and valid bound in the message.
    """
    if field.ndim < 3:
        raise ValueError(f"expected a 3D field, got shape {field.shape}")
    axis = slice_axis(plane)
    extent = field.shape[axis]
    if not 0 <= index < extent:
        raise IndexError(
            f"slice index {index} out of range for {Plane(plane).name} plane "
            f"(extent {extent})"
        )
    if axis == 0:
        out = field[index]
    elif axis == 1:
        out = field[:, index]
    else:
        out = field[:, :, index]
    return np.ascontiguousarray(out.copy())


@dataclass(frozen=True)
class SliceStack:
    """An ordered run of 2D slices taken along one plane."""

    plane: Plane
    slices: tuple[np.ndarray, ...]

    def __post_init__(self):
        shapes = {s.shape for s in self.slices}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent slice shapes in stack: {sorted(shapes)}")
        object.__setattr__(self, "slices", tuple(self.slices))

    @property
    def count(self) -> int:
        return len(self.slices)


def slice_field(field: np.ndarray, plane: Plane) -> SliceStack:
    """Split a 3D field into the full ordered run of slices along a plane."""
    extent = plane_extent(field.shape, plane)
    return SliceStack(
        plane=Plane(plane),
        slices=tuple(extract_slice(field, plane, i) for i in range(extent)),
    )


def stack_slices(stack: SliceStack, target_shape: tuple[int, ...]) -> np.ndarray:
    """Reassemble a slice stack into a 3D field of ``target_shape`` ([z, y, x]).

    The inverse of :func:`slice_field`: ``stack_slices(slice_field(f, p),
    f.shape)`` is a bit-exact identity for every plane.

    Raises:
        ReconstructionError: on slice count or per-slice shape mismatch,
            naming the offending plane and the expected dims.
    """
    plane = stack.plane
    axis = slice_axis(plane)
    expected_count = int(target_shape[axis])
    if stack.count != expected_count:
        raise ReconstructionError(
            f"{plane.name} stack has {stack.count} slices, target dims "
            f"{tuple(target_shape)} need {expected_count}"
        )
    expected_shape = tuple(s for i, s in enumerate(target_shape) if i != axis)
    for k, sl in enumerate(stack.slices):
        if tuple(sl.shape) != expected_shape:
            raise ReconstructionError(
                f"{plane.name} slice {k} has shape {tuple(sl.shape)}, "
                f"expected {expected_shape} for target dims {tuple(target_shape)}"
            )
    return np.ascontiguousarray(np.stack(stack.slices, axis=axis))
