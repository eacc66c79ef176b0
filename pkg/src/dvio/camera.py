"""Pinhole camera model and image pyramids with precomputed gradients."""

from dataclasses import dataclass

import numpy as np

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def at_level(self, level):
        """Intrinsics of pyramid level `level` (2x downsampling by averaging)."""
        s = 2 ** level
        return CameraIntrinsics(
            fx=self.fx / s, fy=self.fy / s,
            cx=(self.cx + 0.5) / s - 0.5, cy=(self.cy + 0.5) / s - 0.5,
            width=self.width // s, height=self.height // s,
        )


def project(point, intr):
    """Pinhole projection of a camera-frame 3D point to pixel coordinates."""
    point = np.asarray(point, dtype=float)
    z = point[2]
    if z <= MIN_DEPTH:
        raise ValueError("point is behind the camera")
    return np.array([intr.fx * point[0] / z + intr.cx, intr.fy * point[1] / z + intr.cy])


def unproject(pixel, inv_depth, intr):
    """Back-project a pixel with inverse depth (1/m) to a camera-frame point."""
    if inv_depth <= 0:
        raise ValueError("inverse depth must be positive")
    pixel = np.asarray(pixel, dtype=float)
    return np.array([
        (pixel[0] - intr.cx) / intr.fx,
        (pixel[1] - intr.cy) / intr.fy,
        1.0,
    ]) / inv_depth


def ray(pixel, intr):
    """Unit-depth ray through a pixel (z component is 1)."""
    pixel = np.asarray(pixel, dtype=float)
    return np.array([(pixel[0] - intr.cx) / intr.fx, (pixel[1] - intr.cy) / intr.fy, 1.0])


def _gradients(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return gx, gy


def _downsample(img):
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    img = img[: 2 * h2, : 2 * w2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


class PyramidImage:
    """Intensity pyramid (float, 0-255) with central-difference gradients."""

    def __init__(self, image, levels=4):
        image = np.ascontiguousarray(image, dtype=float)
        self.levels = levels
        self.intensity = [image]
        for _ in range(1, levels):
            self.intensity.append(np.ascontiguousarray(_downsample(self.intensity[-1])))
        self.grad_x = []
        self.grad_y = []
        for img in self.intensity:
            gx, gy = _gradients(img)
            self.grad_x.append(np.ascontiguousarray(gx))
            self.grad_y.append(np.ascontiguousarray(gy))

    @property
    def shape(self):
        return self.intensity[0].shape
