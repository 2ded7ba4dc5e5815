"""Volume container, raw+metadata file format, and cohort manifests.

On-disk format: one directory per volume holding
  meta.json        dims, spacing, dtype, byte order, patient id
  image.raw        little-endian float32 voxels, C order
  annotation.raw   little-endian uint8 labels (optional)
Round-trips are bit-exact.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    patient_id: str = ""
    annotation: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3-D")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"invalid spacing {self.spacing}")
        if self.annotation is not None:
            self.annotation = np.asarray(self.annotation, dtype=np.uint8)
            if self.annotation.shape != self.data.shape:
                raise ValueError("annotation dims must equal data dims")

    @property
    def voxel_volume_ml(self):
        return float(np.prod(self.spacing)) / 1000.0

    def tumor_volume_ml(self):
        if self.annotation is None:
            return 0.0
        return float(self.annotation.astype(bool).sum()) * self.voxel_volume_ml


def save_volume(volume, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "dims": list(volume.data.shape),
        "spacing": list(volume.spacing),
        "dtype": "float32",
        "byte_order": "little",
        "patient_id": volume.patient_id,
        "has_annotation": volume.annotation is not None,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    (directory / "image.raw").write_bytes(
        np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    if volume.annotation is not None:
        (directory / "annotation.raw").write_bytes(
            np.ascontiguousarray(volume.annotation, dtype=np.uint8).tobytes())
    return directory


def load_volume(directory):
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    dims = tuple(meta["dims"])
    data = np.frombuffer((directory / "image.raw").read_bytes(),
                         dtype="<f4").reshape(dims).copy()
    annotation = None
    ann_path = directory / "annotation.raw"
    if meta.get("has_annotation") and ann_path.exists():
        annotation = np.frombuffer(ann_path.read_bytes(),
                                   dtype=np.uint8).reshape(dims).copy()
    return Volume(data=data, spacing=tuple(meta["spacing"]),
                  patient_id=meta["patient_id"], annotation=annotation)


def write_manifest(entries, path):
    """Cohort manifest: list of {patient_id, path, tumor_volume_ml}."""
    path = Path(path)
    path.write_text(json.dumps(list(entries), indent=2, sort_keys=True))
    return path


def read_manifest(path):
    return json.loads(Path(path).read_text())
