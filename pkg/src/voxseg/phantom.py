"""Synthetic volumetric phantoms with known ground truth.

A phantom is a head-shaped ellipsoid of mid intensity containing bright
ellipsoidal tumors (the annotated targets) and bright tubular vessel
distractors, corrupted by Gaussian noise. Generation is fully determined
by the spec seed.
"""

from dataclasses import dataclass, field

import numpy as np

from .params import ConfigurationError
from .volume import Volume


class GenerationError(RuntimeError):
    """Raised when a requested structure cannot be placed in the volume."""


@dataclass
class PhantomSpec:
    shape: tuple = (48, 48, 48)
    spacing: tuple = (1.0, 1.0, 1.0)
    head_semiaxes: tuple = (20.0, 20.0, 20.0)
    head_intensity: float = 0.4
    tumor_count: int = 1
    tumor_volume_range_ml: tuple = (0.5, 8.0)
    tumor_intensity: float = 0.9
    vessel_count: int = 2
    vessel_radius_mm: float = 1.2
    vessel_intensity: float = 0.75
    noise_sigma: float = 0.02
    seed: int = 0
    patient_id: str = "phantom"

    def __post_init__(self):
        if len(self.shape) != 3 or any(int(s) <= 0 for s in self.shape):
            raise ConfigurationError(f"invalid shape {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigurationError(f"invalid spacing {self.spacing}")
        lo, hi = self.tumor_volume_range_ml
        if lo <= 0 or hi < lo:
            raise ConfigurationError(
                f"tumor volumes must be positive, got range {self.tumor_volume_range_ml}")
        if self.tumor_count < 0 or self.vessel_count < 0:
            raise ConfigurationError("structure counts must be non-negative")


def _coordinate_grid(shape, spacing):
    """Physical (mm) coordinates of every voxel center, centered on the volume."""
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(shape, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid_mask(grid, center, semiaxes):
    zz, yy, xx = grid
    r = ((zz - center[0]) / semiaxes[0]) ** 2
    r += ((yy - center[1]) / semiaxes[1]) ** 2
    r += ((xx - center[2]) / semiaxes[2]) ** 2
    return r <= 1.0


def _tumor_semiaxes(volume_ml, rng):
    """Ellipsoid semi-axes (mm) with the requested volume and mild anisotropy."""
    radius = ((3.0 * volume_ml * 1000.0) / (4.0 * np.pi)) ** (1.0 / 3.0)
    # jitter the axes while keeping the product (hence the volume) fixed
    a = rng.uniform(0.85, 1.15)
    b = rng.uniform(0.85, 1.15)
    return (radius * a, radius * b, radius / (a * b))


def _segment_distance(grid, p0, p1):
    """Distance from each voxel center to the segment p0-p1 (mm)."""
    zz, yy, xx = grid
    pts = np.stack([zz, yy, xx], axis=-1)
    d = p1 - p0
    denom = float(d @ d)
    if denom < 1e-12:
        return np.linalg.norm(pts - p0, axis=-1)
    t = np.clip(((pts - p0) @ d) / denom, 0.0, 1.0)
    proj = p0 + t[..., None] * d
    return np.linalg.norm(pts - proj, axis=-1)


def generate_phantom(spec):
    rng = np.random.default_rng(spec.seed)
    grid = _coordinate_grid(spec.shape, spec.spacing)
    head = _ellipsoid_mask(grid, np.zeros(3), spec.head_semiaxes)
    if not head.any():
        raise GenerationError("head ellipsoid does not intersect the field of view")

    data = np.zeros(spec.shape, dtype=np.float32)
    data[head] = spec.head_intensity
    half_extent = np.array([(n - 1) / 2.0 * s
                            for n, s in zip(spec.shape, spec.spacing)])

    for _ in range(spec.vessel_count):
        scale = np.asarray(spec.head_semiaxes) * 0.8
        p0 = rng.uniform(-1, 1, size=3) * scale
        p1 = rng.uniform(-1, 1, size=3) * scale
        tube = (_segment_distance(grid, p0, p1) <= spec.vessel_radius_mm) & head
        data[tube] = spec.vessel_intensity

    annotation = np.zeros(spec.shape, dtype=np.uint8)
    lo, hi = spec.tumor_volume_range_ml
    for _ in range(spec.tumor_count):
        volume_ml = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        semiaxes = _tumor_semiaxes(volume_ml, rng)
        placed = False
        for _attempt in range(200):
            # keep the whole tumor inside the head and the field of view
            margin = np.maximum(np.asarray(spec.head_semiaxes)
                                - np.max(semiaxes), 0.0)
            center = rng.uniform(-1, 1, size=3) * margin * 0.9
            if np.any(np.abs(center) + np.max(semiaxes) > half_extent):
                continue
            tumor = _ellipsoid_mask(grid, center, semiaxes)
            if not tumor.any() or (annotation[tumor] != 0).any():
                continue
            data[tumor] = spec.tumor_intensity
            annotation[tumor] = 1
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place a tumor of {volume_ml:.2f} ml inside the head")

    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma,
                                 size=spec.shape).astype(np.float32)
        data = np.clip(data, 0.0, 1.0)
    return Volume(data=data.astype(np.float32), spacing=spec.spacing,
                  patient_id=spec.patient_id, annotation=annotation)


def generate_cohort(count, base_spec, seed=0):
    """A list of phantoms with per-patient seeds and log-spanned tumor sizes."""
    if count <= 0:
        raise ConfigurationError("cohort size must be positive")
    volumes = []
    for i in range(count):
        spec = PhantomSpec(**{**base_spec.__dict__,
                              "seed": seed * 100003 + i,
                              "patient_id": f"P{i:03d}"})
        volumes.append(generate_phantom(spec))
    return volumes
