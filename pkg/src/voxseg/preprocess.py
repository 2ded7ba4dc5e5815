"""Preprocessing chain: isotropic resampling, head clipping, resizing,
intensity normalization, and the inverse mapping back to original space.

Every geometric step is recorded in a PreprocessRecord so probability maps
can be reconstructed in the referential space of the original volume.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume

HEAD_MASK_FRACTION = 0.02
BBOX_MARGIN = 2


class NormalizationError(ValueError):
    """Raised when intensities cannot be mapped to [0, 1]."""


class ClippingError(ValueError):
    """Raised when no head mask can be extracted."""


@dataclass
class PreprocessRecord:
    original_shape: tuple
    original_spacing: tuple
    resampled_shape: tuple
    bbox_low: tuple
    bbox_high: tuple
    target_dims: tuple
    intensity_min: float
    intensity_max: float
    patient_id: str = ""

    @property
    def cropped_shape(self):
        return tuple(h - l for l, h in zip(self.bbox_low, self.bbox_high))


def resize_trilinear(array, out_shape, order=1):
    """Resize to an exact output shape with endpoint-aligned interpolation."""
    array = np.asarray(array, dtype=np.float64)
    out_shape = tuple(int(n) for n in out_shape)
    if array.shape == out_shape:
        return array.copy()
    coords = np.meshgrid(*[
        np.linspace(0.0, n_in - 1.0, n_out) if n_out > 1
        else np.array([(n_in - 1.0) / 2.0])
        for n_in, n_out in zip(array.shape, out_shape)
    ], indexing="ij")
    return ndimage.map_coordinates(array, coords, order=order, mode="nearest")


def isotropic_shape(shape, spacing):
    """Output dims covering the same physical extent at 1 mm per voxel."""
    return tuple(int(round((n - 1) * s)) + 1 for n, s in zip(shape, spacing))


def head_bounding_box(resampled):
    """Bounding box of the largest bright component, with a small margin."""
    threshold = HEAD_MASK_FRACTION * float(resampled.max())
    mask = resampled > threshold
    if not mask.any():
        raise ClippingError("empty head mask: no voxel above threshold")
    labels, count = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=int))
    sizes = np.bincount(labels.ravel())[1:]
    largest = labels == (int(np.argmax(sizes)) + 1)
    low, high = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        profile = largest.any(axis=other)
        idx = np.flatnonzero(profile)
        low.append(max(int(idx[0]) - BBOX_MARGIN, 0))
        high.append(min(int(idx[-1]) + 1 + BBOX_MARGIN, largest.shape[axis]))
    return tuple(low), tuple(high)


def preprocess(volume, target_dims=(32, 32, 32)):
    """Resample to 1 mm, clip to the head, resize, normalize to [0, 1]."""
    data = np.asarray(volume.data, dtype=np.float64)
    if float(data.max()) == float(data.min()):
        raise NormalizationError("volume is constant, cannot normalize")

    iso_shape = isotropic_shape(data.shape, volume.spacing)
    resampled = resize_trilinear(data, iso_shape)
    low, high = head_bounding_box(resampled)
    cropped = resampled[low[0]:high[0], low[1]:high[1], low[2]:high[2]]
    resized = resize_trilinear(cropped, target_dims)

    lo, hi = float(resized.min()), float(resized.max())
    if hi == lo:
        raise NormalizationError("clipped volume is constant, cannot normalize")
    normalized = (resized - lo) / (hi - lo)
    record = PreprocessRecord(
        original_shape=tuple(data.shape),
        original_spacing=tuple(volume.spacing),
        resampled_shape=iso_shape,
        bbox_low=low, bbox_high=high,
        target_dims=tuple(target_dims),
        intensity_min=lo, intensity_max=hi,
        patient_id=volume.patient_id,
    )
    return normalized.astype(np.float32), record


def preprocess_label(annotation, record):
    """Apply the recorded geometric chain to labels with nearest-neighbor."""
    if tuple(annotation.shape) != record.original_shape:
        raise ValueError("annotation dims do not match the recorded volume")
    iso = resize_trilinear(annotation.astype(np.float64),
                           record.resampled_shape, order=0)
    l, h = record.bbox_low, record.bbox_high
    cropped = iso[l[0]:h[0], l[1]:h[1], l[2]:h[2]]
    resized = resize_trilinear(cropped, record.target_dims, order=0)
    return (resized > 0.5).astype(np.uint8)


def invert_to_original(prob_map, record):
    """Map a probability map back to the original volume geometry."""
    prob_map = np.asarray(prob_map, dtype=np.float64)
    if tuple(prob_map.shape) != record.target_dims:
        raise ValueError(
            f"probability map dims {prob_map.shape} do not match the record "
            f"target dims {record.target_dims}")
    cropped = resize_trilinear(prob_map, record.cropped_shape)
    iso = np.zeros(record.resampled_shape, dtype=np.float64)
    l, h = record.bbox_low, record.bbox_high
    iso[l[0]:h[0], l[1]:h[1], l[2]:h[2]] = cropped
    original = resize_trilinear(iso, record.original_shape)
    return Volume(data=np.clip(original, 0.0, 1.0).astype(np.float32),
                  spacing=record.original_spacing,
                  patient_id=record.patient_id)
