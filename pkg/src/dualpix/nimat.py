"""Eight aperture-direction views from one image, by rotating the input.

The network only knows a horizontal left/right split. Feeding it the image
rotated clockwise by 0, 45, 90 and 135 degrees and rotating both predicted
views back gives four splits; the right view at rotation ``t`` is tagged
with angle ``t`` and the left view with ``t + 180``. Played in angle order
the frames sweep around the aperture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import affine_transform

from .scenes import write_png

ROTATIONS = (0, 45, 90, 135)
MODES = ("exact90", "bilinear")


def _check_angle(angle_deg: float, mode: str) -> int:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if angle_deg != int(angle_deg) or int(angle_deg) % 45:
        raise ValueError(f"unsupported rotation {angle_deg}; use multiples of 45 degrees")
    angle = int(angle_deg) % 360
    if mode == "exact90" and angle % 90:
        raise ValueError(f"exact90 rotation needs a multiple of 90 degrees, got {angle_deg}")
    return angle


def expanded_side(height: int, width: int, multiple: int = 1) -> int:
    """Square canvas holding any rotation of an ``height x width`` image."""
    side = math.ceil(math.hypot(height, width))
    return -(-side // multiple) * multiple


def rotate(image: np.ndarray, angle_deg: float, mode: str = "bilinear",
           size: tuple[int, int] | None = None) -> np.ndarray:
    """Rotate an H x W (x C) image clockwise by ``angle_deg``.

    Multiples of 90 are exact pixel permutations in either mode. Other
    multiples of 45 are bilinearly resampled about the centre onto a square
    canvas (default :func:`expanded_side`) with replicate fill; pass the
    original ``size`` when rotating back to crop to it.
    """
    angle = _check_angle(angle_deg, mode)
    image = np.asarray(image)
    if angle % 90 == 0:
        out = np.rot90(image, k=-(angle // 90), axes=(0, 1))
        if size is not None and out.shape[:2] != tuple(size):
            raise ValueError(f"a {angle} degree rotation of {image.shape[:2]} cannot have size {size}")
        return np.ascontiguousarray(out)
    h, w = image.shape[:2]
    if size is None:
        side = expanded_side(h, w)
        size = (side, side)
    t = math.radians(angle)
    c, s = math.cos(t), math.sin(t)
    # maps output (row, col) back to input (row, col)
    matrix = np.array([[c, -s], [s, c]])
    offset = (np.array([h, w]) - 1) / 2 - matrix @ ((np.array(size) - 1) / 2)
    planes = image[..., None] if image.ndim == 2 else image
    out = np.stack([affine_transform(planes[..., k].astype(np.float64), matrix, offset, output_shape=tuple(size),
                                     order=1, mode="nearest") for k in range(planes.shape[2])], axis=-1)
    out = out.astype(image.dtype if image.dtype.kind == "f" else np.float64)
    return out[..., 0] if image.ndim == 2 else out


@dataclass
class ViewSet:
    """Eight (angle, image) frames sorted by angle."""

    frames: list[tuple[int, np.ndarray]] = field(default_factory=list)
    source_id: str = ""

    @property
    def angles(self) -> list[int]:
        return [a for a, _ in self.frames]

    def view(self, angle: int) -> np.ndarray:
        for a, img in self.frames:
            if a == angle:
                return img
        raise KeyError(angle)


def synthesize_eight_views(model, image: np.ndarray, source_id: str = "",
                           multiple: int | None = None) -> ViewSet:
    """Run ``model.predict`` on four rotations of ``image``; see module doc.

    Diagonal rotations use a canvas of :func:`expanded_side` rounded up to
    ``multiple`` (default ``2**model.config.depth``).
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    if multiple is None:
        multiple = 2 ** model.config.depth if hasattr(model, "config") else 1
    frames = []
    for theta in ROTATIONS:
        if theta == 0:
            left, right, _ = model.predict(image)
        elif theta % 90 == 0:
            rl, rr, _ = model.predict(rotate(image, theta, "exact90"))
            left, right = rotate(rl, -theta, "exact90"), rotate(rr, -theta, "exact90")
        else:
            side = expanded_side(h, w, multiple)
            rl, rr, _ = model.predict(rotate(image, theta, "bilinear", (side, side)))
            left, right = rotate(rl, -theta, "bilinear", (h, w)), rotate(rr, -theta, "bilinear", (h, w))
        frames.append((theta, right))
        frames.append((theta + 180, left))
    frames.sort(key=lambda f: f[0])
    return ViewSet(frames, source_id)


def write_animation_frames(views: ViewSet, directory, gain: float = 2.0) -> list[Path]:
    """Write ``frame_000.png`` ... in angle order plus ``order.txt``.

    Each DP view carries about half the light of the full image, so frames
    are multiplied by ``gain`` (then clipped) for display.
    """
    if len(views.frames) != 8 or len(set(views.angles)) != 8:
        raise ValueError(f"a view set needs 8 distinct angles, got {views.angles}")
    d = Path(directory)
    if d.exists() and not d.is_dir():
        raise NotADirectoryError(f"{d} exists and is not a directory")
    d.mkdir(parents=True, exist_ok=True)
    paths, lines = [], []
    for i, (angle, img) in enumerate(sorted(views.frames, key=lambda f: f[0])):
        path = d / f"frame_{i:03d}.png"
        write_png(path, np.clip(np.asarray(img) * gain, 0, 1))
        paths.append(path)
        lines.append(f"{angle} {path.name}\n")
    (d / "order.txt").write_text("".join(lines), encoding="utf-8")
    return paths
