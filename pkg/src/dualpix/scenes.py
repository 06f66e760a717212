"""Procedural scenes, DP record rendering and the on-disk dataset layout.

Layout::

    <root>/manifest.txt
    <root>/<split>/<scene_id>/{c,l,r,s}.png, defocus.dfm, meta.txt

Images are 8-bit RGB PNGs; the defocus map is stored losslessly in a small
float container (``DFM1`` magic, u32 width, u32 height, float32 row-major,
all little-endian).
"""

from __future__ import annotations

import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.draw import ellipse, polygon

from .optics import DEFAULT_LEAKAGE, LensParams, coc_radius_px, synthesize_dp_views

TEXTURES = ("checker", "gradient-noise", "polygons", "mixed")
# pure gradient-noise scenes are left out of the desk mix: they are nearly
# sharp after blurring and dominate a per-scene PSNR average
DESK_TEXTURES = ("checker", "polygons", "mixed")
DESK_BLUR_RANGE = (1.0, 3.0)
F_NUMBERS = (4.0, 5.6, 10.0, 16.0, 22.0)
DFM_MAGIC = b"DFM1"
META_KEYS = ("focal_length_mm", "f_number", "focus_distance_mm", "pixel_pitch_mm", "leakage", "levels", "seed")


class RecordError(ValueError):
    """A dataset record on disk is missing, corrupt or inconsistent."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: int = 128
    height: int = 128
    texture: str = "mixed"
    layer_depths_mm: tuple[float, ...] = (1000.0, 3000.0)


@dataclass
class DatasetRecord:
    id: str
    sharp: np.ndarray
    left: np.ndarray
    right: np.ndarray
    combined: np.ndarray
    defocus: np.ndarray
    lens: LensParams
    leakage: float = DEFAULT_LEAKAGE
    levels: int = 16
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.defocus.shape


# ---------------------------------------------------------------------------
# procedural content


def _value_noise(rng: np.random.Generator, h: int, w: int, octaves: int = 4) -> np.ndarray:
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    cells = 3
    for _ in range(octaves):
        grid = rng.random((cells + 1, cells + 1))
        ys = np.linspace(0, cells, h, endpoint=False)
        xs = np.linspace(0, cells, w, endpoint=False)
        y0, x0 = ys.astype(int), xs.astype(int)
        ty, tx = ys - y0, xs - x0
        ty, tx = ty * ty * (3 - 2 * ty), tx * tx * (3 - 2 * tx)
        top = grid[y0][:, x0] * (1 - tx) + grid[y0][:, x0 + 1] * tx
        bot = grid[y0 + 1][:, x0] * (1 - tx) + grid[y0 + 1][:, x0 + 1] * tx
        out += amp * (top * (1 - ty[:, None]) + bot * ty[:, None])
        total += amp
        amp *= 0.5
        cells *= 2
    return out / total


def _texture(rng: np.random.Generator, kind: str, h: int, w: int) -> np.ndarray:
    if kind == "mixed":
        kind = TEXTURES[rng.integers(0, 3)]
    if kind == "checker":
        period = rng.uniform(4, 16)
        theta = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        u = (xx * np.cos(theta) + yy * np.sin(theta)) / period + rng.random()
        v = (-xx * np.sin(theta) + yy * np.cos(theta)) / period + rng.random()
        mask = (np.floor(u) + np.floor(v)) % 2
        a, b = rng.random(3), rng.random(3)
        return a * mask[..., None] + b * (1 - mask[..., None])
    if kind == "gradient-noise":
        base = rng.random(3)
        tint = rng.random(3) - 0.5
        n = np.stack([_value_noise(rng, h, w) for _ in range(3)], axis=-1)
        return np.clip(base * 0.4 + n * 0.6 + tint * 0.2 * _value_noise(rng, h, w)[..., None], 0, 1)
    if kind == "polygons":
        img = np.empty((h, w, 3))
        img[:] = rng.random(3)
        for _ in range(rng.integers(8, 20)):
            k = rng.integers(3, 6)
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(4, max(h, w) / 3)
            ang = np.sort(rng.uniform(0, 2 * np.pi, k))
            rr, cc = polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=(h, w))
            img[rr, cc] = rng.random(3)
        return img
    raise ValueError(f"unknown texture {kind!r}; expected one of {TEXTURES}")


def _layer_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    if rng.random() < 0.5:
        rr, cc = ellipse(rng.uniform(0, h), rng.uniform(0, w), rng.uniform(h / 6, h / 2.5),
                         rng.uniform(w / 6, w / 2.5), shape=(h, w), rotation=rng.uniform(0, np.pi))
    else:
        k = rng.integers(3, 7)
        cy, cx = rng.uniform(h / 4, 3 * h / 4), rng.uniform(w / 4, 3 * w / 4)
        rad = rng.uniform(min(h, w) / 5, min(h, w) / 2)
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        rr, cc = polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=(h, w))
    mask[rr, cc] = True
    return mask


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sharp H x W x 3 image in [0, 1] and a per-pixel depth map (mm).

    The first listed layer is a full-frame background; every other layer
    covers a random blob. Farther layers are painted first.
    """
    if not spec.layer_depths_mm:
        raise ValueError("a scene needs at least one depth layer")
    if spec.width < 32 or spec.height < 32:
        raise ValueError(f"scene must be at least 32x32, got {spec.width}x{spec.height}")
    if spec.texture not in TEXTURES:
        raise ValueError(f"unknown texture {spec.texture!r}; expected one of {TEXTURES}")
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    layers = []
    for i, depth in enumerate(spec.layer_depths_mm):
        mask = np.ones((h, w), dtype=bool) if i == 0 else _layer_mask(rng, h, w)
        layers.append((depth, mask, _texture(rng, spec.texture, h, w)))
    image = np.zeros((h, w, 3))
    depth_map = np.zeros((h, w))
    # background first, then foreground blobs far-to-near
    order = [0] + sorted(range(1, len(layers)), key=lambda i: -layers[i][0])
    for i in order:
        depth, mask, tex = layers[i]
        image[mask] = tex[mask]
        depth_map[mask] = depth
    return np.clip(image, 0, 1), depth_map


def render_record(sharp: np.ndarray, depth: np.ndarray, lens: LensParams,
                  leakage: float = DEFAULT_LEAKAGE, levels: int = 16,
                  record_id: str = "scene", seed: int = 0) -> DatasetRecord:
    defocus = coc_radius_px(lens, depth).astype(np.float32)
    left, right, combined = synthesize_dp_views(sharp, defocus, leakage, levels)
    return DatasetRecord(record_id, sharp.astype(np.float32), left.astype(np.float32),
                         right.astype(np.float32), combined.astype(np.float32), defocus,
                         lens, leakage, levels, seed)


def random_scene_spec(rng: np.random.Generator, seed: int, size: int,
                      textures: tuple[str, ...] = DESK_TEXTURES) -> SceneSpec:
    n_layers = int(rng.integers(2, 6))
    depths = tuple(float(d) for d in np.exp(rng.uniform(np.log(600), np.log(8000), n_layers)))
    return SceneSpec(seed=seed, width=size, height=size, texture=textures[rng.integers(0, len(textures))],
                     layer_depths_mm=depths)


def make_scene_record(seed: int, size: int = 128, leakage: float = DEFAULT_LEAKAGE, levels: int = 16,
                      record_id: str = "scene", blur_range: tuple[float, float] = DESK_BLUR_RANGE,
                      focal_length_mm: float = 50.0, pixel_pitch_mm: float = 0.03) -> DatasetRecord:
    """One random scene: layer depths, texture, aperture and focus all from ``seed``.

    Draws are repeated (deterministically) until the mean blur radius over
    the frame lies in ``blur_range``, which keeps every record visibly but
    recoverably defocused.
    """
    lo, hi = blur_range
    if not 0 <= lo <= hi:
        raise ValueError(f"bad blur range {blur_range}")
    rng = np.random.default_rng(seed)
    for _ in range(10_000):
        spec = random_scene_spec(rng, seed, size)
        lens = LensParams(focal_length_mm=focal_length_mm, f_number=float(rng.choice(F_NUMBERS)),
                          focus_distance_mm=float(np.exp(rng.uniform(np.log(600), np.log(8000)))),
                          pixel_pitch_mm=pixel_pitch_mm)
        sharp, depth = generate_scene(spec)
        if lo <= float(np.abs(coc_radius_px(lens, depth)).mean()) <= hi:
            return render_record(sharp, depth, lens, leakage, levels, record_id, seed)
    raise ValueError(f"no lens draw reached a mean blur in {blur_range} px")


# ---------------------------------------------------------------------------
# disk format


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(_to_u8(img)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Float32 H x W x 3 image in [0, 1]; grayscale is promoted to RGB."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise RecordError(f"{path}: unreadable image ({exc})") from exc
    return arr


def write_dfm(path, defocus: np.ndarray) -> None:
    defocus = np.asarray(defocus, dtype="<f4")
    h, w = defocus.shape
    Path(path).write_bytes(DFM_MAGIC + struct.pack("<II", w, h) + defocus.tobytes())


def read_dfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise RecordError(f"{path}: corrupt map (header truncated)")
    if data[:4] != DFM_MAGIC:
        raise RecordError(f"{path}: bad magic {data[:4]!r}, expected {DFM_MAGIC!r}")
    w, h = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * w * h:
        raise RecordError(f"{path}: corrupt map ({len(data) - 12} payload bytes for {w}x{h})")
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w).astype(np.float32)


def write_record(record: DatasetRecord, directory) -> None:
    shapes = {k: getattr(record, k).shape[:2] for k in ("sharp", "left", "right", "combined", "defocus")}
    if len(set(shapes.values())) != 1:
        raise RecordError(f"record {record.id}: raster sizes disagree {shapes}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for key, name in (("combined", "c"), ("left", "l"), ("right", "r"), ("sharp", "s")):
        write_png(d / f"{name}.png", getattr(record, key))
    write_dfm(d / "defocus.dfm", record.defocus)
    lens = record.lens
    meta = {"focal_length_mm": lens.focal_length_mm, "f_number": lens.f_number,
            "focus_distance_mm": lens.focus_distance_mm, "pixel_pitch_mm": lens.pixel_pitch_mm,
            "leakage": record.leakage, "levels": record.levels, "seed": record.seed}
    (d / "meta.txt").write_text("".join(f"{k}={meta[k]!r}\n" for k in META_KEYS), encoding="utf-8")


def read_record(directory) -> DatasetRecord:
    d = Path(directory)
    if not d.is_dir():
        raise RecordError(f"{d}: no such record directory")
    for name in ("c.png", "l.png", "r.png", "s.png", "defocus.dfm", "meta.txt"):
        if not (d / name).exists():
            raise RecordError(f"{d}: missing file {name}")
    meta = {}
    for line in (d / "meta.txt").read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise RecordError(f"{d}: meta.txt lacks keys {missing}")
    imgs = {k: read_png(d / f"{k}.png") for k in "clrs"}
    defocus = read_dfm(d / "defocus.dfm")
    sizes = {k: v.shape[:2] for k, v in imgs.items()} | {"defocus": defocus.shape}
    if len(set(sizes.values())) != 1:
        raise RecordError(f"{d}: dimension disagreement {sizes}")
    lens = LensParams(float(meta["focal_length_mm"]), float(meta["f_number"]),
                      float(meta["focus_distance_mm"]), float(meta["pixel_pitch_mm"]))
    return DatasetRecord(d.name, imgs["s"], imgs["l"], imgs["r"], imgs["c"], defocus, lens,
                         float(meta["leakage"]), int(meta["levels"]), int(meta["seed"]))


def check_record(record: DatasetRecord, tol: float = 1.0 / 255 + 1e-6) -> None:
    """Raise if rasters disagree in size or ``combined != left + right``."""
    shapes = {k: getattr(record, k).shape[:2] for k in ("sharp", "left", "right", "combined", "defocus")}
    if len(set(shapes.values())) != 1:
        raise RecordError(f"record {record.id}: raster sizes disagree {shapes}")
    err = float(np.max(np.abs(record.combined - (record.left + record.right))))
    if err > tol:
        raise RecordError(f"record {record.id}: combined differs from left + right by {err}")


@dataclass
class Patch:
    combined: np.ndarray
    left: np.ndarray
    right: np.ndarray
    sharp: np.ndarray
    source: str = ""


def extract_patches(record: DatasetRecord, patch: int, stride: int) -> list[Patch]:
    h, w = record.size
    if patch > min(h, w) or patch < 1:
        raise ValueError(f"patch {patch} does not fit a {h}x{w} record")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for y in range(0, h - patch + 1, stride):
        for x in range(0, w - patch + 1, stride):
            win = (slice(y, y + patch), slice(x, x + patch))
            out.append(Patch(record.combined[win], record.left[win], record.right[win], record.sharp[win],
                             f"{record.id}@{y},{x}"))
    return out


# ---------------------------------------------------------------------------
# datasets


def default_test_count(n_scenes: int) -> int:
    """Test share matching the 200/32 desk split."""
    if n_scenes < 2:
        return 0
    return int(min(max(round(n_scenes * 32 / 232), 1), n_scenes - 1))


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def generate_dataset(root, n_scenes: int = 232, size: int = 128, seed: int = 0, n_test: int | None = None,
                     leakage: float = DEFAULT_LEAKAGE, levels: int = 16, force: bool = False,
                     focal_length_mm: float = 50.0, pixel_pitch_mm: float = 0.03,
                     blur_range: tuple[float, float] = DESK_BLUR_RANGE) -> dict:
    """Render ``n_scenes`` records into ``root/{train,test}``; returns the manifest."""
    if n_scenes < 1:
        raise ValueError("need at least one scene")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} is not empty (use force to overwrite)")
        shutil.rmtree(root)
    n_test = default_test_count(n_scenes) if n_test is None else n_test
    if not 0 <= n_test <= n_scenes:
        raise ValueError(f"n_test={n_test} out of range for {n_scenes} scenes")
    n_train = n_scenes - n_test
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n_scenes):
        split = "train" if i < n_train else "test"
        sid = f"scene_{i:04d}"
        rec = make_scene_record(scene_seed(seed, i), size, leakage, levels, sid, blur_range,
                                focal_length_mm, pixel_pitch_mm)
        write_record(rec, root / split / sid)
    manifest = {"format": 1, "seed": seed, "scenes": n_scenes, "size": size, "train": n_train,
                "test": n_test, "leakage": leakage, "levels": levels, "focal_length_mm": focal_length_mm,
                "pixel_pitch_mm": pixel_pitch_mm, "blur_range": f"{blur_range[0]},{blur_range[1]}"}
    (root / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()), encoding="utf-8")
    return manifest


def read_manifest(root) -> dict[str, str]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise RecordError(f"{root}: no manifest.txt (not a dataset root?)")
    return dict(line.split("=", 1) for line in path.read_text(encoding="utf-8").splitlines() if "=" in line)


def load_split(root, split: str) -> list[DatasetRecord]:
    d = Path(root) / split
    if not d.is_dir():
        return []
    return [read_record(p) for p in sorted(d.iterdir()) if p.is_dir()]
