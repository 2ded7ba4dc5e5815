"""Training-time augmentation: in-plane flips, rotation, translation, zoom.

Each transform is applied with probability 0.5. The image is interpolated
trilinearly and the labels with nearest-neighbor so they stay binary. The
geometry is a single affine acting on the two in-plane axes (H, W); the
through-plane axis is untouched.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

ROTATION_RANGE_DEG = 20.0
TRANSLATION_FRACTION = 0.10
ZOOM_RANGE = (0.8, 1.2)


@dataclass
class AugmentParams:
    flip_h: bool = False
    flip_v: bool = False
    rotate_deg: float = 0.0
    translate: tuple = (0.0, 0.0)
    zoom: float = 1.0

    @classmethod
    def identity(cls):
        return cls()

    def is_identity(self):
        return (not self.flip_h and not self.flip_v
                and self.rotate_deg == 0.0
                and self.translate == (0.0, 0.0)
                and self.zoom == 1.0)


def draw_params(rng, shape):
    """Sample transform parameters; each transform fires with probability 0.5."""
    params = AugmentParams()
    params.flip_h = bool(rng.random() < 0.5)
    params.flip_v = bool(rng.random() < 0.5)
    if rng.random() < 0.5:
        params.rotate_deg = float(rng.uniform(-ROTATION_RANGE_DEG,
                                              ROTATION_RANGE_DEG))
    if rng.random() < 0.5:
        limit_h = TRANSLATION_FRACTION * shape[1]
        limit_w = TRANSLATION_FRACTION * shape[2]
        params.translate = (float(rng.uniform(-limit_h, limit_h)),
                            float(rng.uniform(-limit_w, limit_w)))
    if rng.random() < 0.5:
        params.zoom = float(rng.uniform(*ZOOM_RANGE))
    return params


def _affine(array, params, order):
    if (params.rotate_deg == 0.0 and params.translate == (0.0, 0.0)
            and params.zoom == 1.0):
        return array
    theta = np.deg2rad(params.rotate_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    # inverse in-plane map: input = R(-theta)/zoom @ (output - center - t) + center
    inplane = np.array([[cos, sin], [-sin, cos]]) / params.zoom
    matrix = np.eye(3)
    matrix[1:, 1:] = inplane
    center = (np.asarray(array.shape, dtype=np.float64) - 1.0) / 2.0
    shift = np.array([0.0, params.translate[0], params.translate[1]])
    offset = center - matrix @ (center + shift)
    return ndimage.affine_transform(array, matrix, offset=offset, order=order,
                                    mode="constant", cval=0.0)


def apply_params(image, label, params):
    """Apply one parameter draw to an image and its labels identically."""
    image = np.asarray(image, dtype=np.float64)
    out_img, out_lab = image, None
    if label is not None:
        out_lab = np.asarray(label, dtype=np.float64)
        if out_lab.shape != image.shape:
            raise ValueError("image and label dims differ")
    if params.flip_h:
        out_img = out_img[:, :, ::-1]
        out_lab = out_lab[:, :, ::-1] if out_lab is not None else None
    if params.flip_v:
        out_img = out_img[:, ::-1, :]
        out_lab = out_lab[:, ::-1, :] if out_lab is not None else None
    out_img = _affine(np.ascontiguousarray(out_img), params, order=1)
    if out_lab is not None:
        out_lab = _affine(np.ascontiguousarray(out_lab), params, order=0)
        out_lab = (out_lab > 0.5).astype(np.uint8)
    return out_img.astype(np.float32), out_lab


def augment(image, label, rng):
    params = draw_params(rng, image.shape)
    img, lab = apply_params(image, label, params)
    return img, lab, params
