"""Procedural pole-and-shadow dataset, splits, and image I/O.

The scene is viewed top-down: a bright ground plane (0.9), a dark disk for
the vertical pole at the image center (radius 0.03 * size, intensity 0.1),
and a shadow rectangle (intensity 0.3) cast away from the light. For light
azimuth phi the shadow extends along phi + 180 degrees; its length is
pole_height / tan(elevation) with pole_height = 0.35 * size, and its width
equals the pole diameter. Edges are anti-aliased by 4x supersampling, so
rendering is a pure function of (theta, phi, size).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

__all__ = [
    "SceneParams",
    "LabeledDataset",
    "DatasetError",
    "render_pole_image",
    "generate_pole_dataset",
    "split_dataset",
    "save_dataset",
    "load_dataset",
    "load_image_dir",
    "save_png",
    "load_png",
    "worker_count",
    "PLANE_INTENSITY",
    "POLE_INTENSITY",
    "SHADOW_INTENSITY",
    "POLE_RADIUS_FRAC",
    "POLE_HEIGHT_FRAC",
    "SUPERSAMPLE",
]

PLANE_INTENSITY = 0.9
POLE_INTENSITY = 0.1
SHADOW_INTENSITY = 0.3
POLE_RADIUS_FRAC = 0.03
POLE_HEIGHT_FRAC = 0.35
SUPERSAMPLE = 4

DEFAULT_THETAS = (45.0, 80.0, 5.0)  # min, max, step (degrees)
DEFAULT_PHI_STEP = 5.0


class DatasetError(RuntimeError):
    pass


def worker_count() -> int:
    """Worker-thread cap: AEAI_THREADS env var, defaulting to the core count."""
    raw = os.environ.get("AEAI_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError as exc:
            raise DatasetError(f"AEAI_THREADS must be an integer, got {raw!r}") from exc
        if n >= 1:
            return n
    return os.cpu_count() or 1


@dataclass(frozen=True)
class SceneParams:
    """Light direction: elevation above the plane and azimuth, in degrees."""

    theta: float
    phi: float

    def __post_init__(self):
        if not 0.0 < self.theta < 90.0:
            raise ValueError(f"theta must be in (0, 90) degrees, got {self.theta}")
        if not 0.0 <= self.phi < 360.0:
            raise ValueError(f"phi must be in [0, 360) degrees, got {self.phi}")


@dataclass
class LabeledDataset:
    """Images with aligned scene parameters and an optional split assignment.

    ``phis`` is the cyclic angle parameter (azimuth for the pole scene,
    turntable angle for directory-loaded data); ``thetas`` is None when the
    data has a single generating angle.
    """

    images: np.ndarray
    thetas: np.ndarray | None = None
    phis: np.ndarray | None = None
    split: np.ndarray | None = None
    seed: int | None = None

    def __len__(self):
        return len(self.images)

    @property
    def labeled(self):
        return self.phis is not None

    def train_indices(self):
        if self.split is None:
            raise DatasetError("dataset has no split assignment")
        return np.flatnonzero(self.split == "train")

    def test_indices(self):
        if self.split is None:
            raise DatasetError("dataset has no split assignment")
        return np.flatnonzero(self.split == "test")


def render_pole_image(params: SceneParams, size: int) -> np.ndarray:
    """Render one grayscale frame; deterministic, all pixels in [0, 1]."""
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    ss = SUPERSAMPLE
    n = size * ss
    # Subsample centers in pixel units; the lattice is symmetric about size/2,
    # so phi and phi+180 render as exact 180-degree rotations of each other.
    coords = (np.arange(n, dtype=np.float64) + 0.5) / ss
    cx = cy = size / 2.0
    dx = coords[None, :] - cx  # x = column direction
    dy = coords[:, None] - cy  # y = row direction

    pole_r = POLE_RADIUS_FRAC * size
    height = POLE_HEIGHT_FRAC * size
    length = height / math.tan(math.radians(params.theta))
    half_w = pole_r

    shadow_dir = math.radians(params.phi + 180.0)
    ux, uy = math.cos(shadow_dir), math.sin(shadow_dir)

    img = np.full((n, n), PLANE_INTENSITY, dtype=np.float64)
    t = dx * ux + dy * uy
    s = -dx * uy + dy * ux
    shadow = (t >= 0.0) & (t <= length) & (np.abs(s) <= half_w)
    img[shadow] = SHADOW_INTENSITY
    pole = dx * dx + dy * dy <= pole_r * pole_r
    img[pole] = POLE_INTENSITY

    out = img.reshape(size, ss, size, ss).mean(axis=(1, 3))
    return out.astype(np.float32)


def _theta_grid(theta_range):
    lo, hi, step = theta_range
    count = (hi - lo) / step
    if abs(count - round(count)) > 1e-9:
        raise ValueError(f"theta step {step} does not divide range [{lo}, {hi}] evenly")
    return np.array([lo + k * step for k in range(int(round(count)) + 1)], dtype=np.float64)


def _phi_grid(phi_step):
    count = 360.0 / phi_step
    if abs(count - round(count)) > 1e-9:
        raise ValueError(f"phi step {phi_step} does not divide 360 evenly")
    return np.array([k * phi_step for k in range(int(round(count)))], dtype=np.float64)


def generate_pole_dataset(
    theta_range=DEFAULT_THETAS,
    phi_step: float = DEFAULT_PHI_STEP,
    size: int = 32,
    seed: int = 0,
) -> LabeledDataset:
    """Render the full (theta, phi) grid; the default grid is 8 x 72 = 576 frames."""
    thetas = _theta_grid(theta_range)
    phis = _phi_grid(phi_step)
    grid = [(t, p) for t in thetas for p in phis]
    images = np.empty((len(grid), size, size), dtype=np.float32)

    def render_at(k):
        t, p = grid[k]
        images[k] = render_pole_image(SceneParams(t, p), size)

    workers = min(worker_count(), len(grid))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(render_at, range(len(grid))))
    else:
        for k in range(len(grid)):
            render_at(k)

    return LabeledDataset(
        images=images,
        thetas=np.array([t for t, _ in grid], dtype=np.float32),
        phis=np.array([p for _, p in grid], dtype=np.float32),
        seed=seed,
    )


def split_dataset(ds: LabeledDataset, train_fraction: float, seed: int) -> LabeledDataset:
    """Random split with exactly round(train_fraction * N) training items.

    Fractions f and 1 - f under the same seed produce mirrored assignments
    (each one's train set is the other's test set).
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds)
    perm = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(10,))).permutation(n)
    major = int(round(max(train_fraction, 1.0 - train_fraction) * n))
    front, back = perm[:major], perm[major:]
    train_idx = front if train_fraction >= 0.5 else back
    split = np.full(n, "test", dtype="<U5")
    split[train_idx] = "train"
    return dataclasses.replace(ds, split=split, seed=seed)


def save_png(path, image: np.ndarray):
    """Write a [0, 1] float image as 8-bit grayscale PNG."""
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_png(path, size: int | None = None, resize: bool = True) -> np.ndarray:
    """Read a PNG as a [0, 1] float32 grayscale image (RGB converts to luma)."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "I;16"):
                im = im.convert("L")
            if size is not None and im.size != (size, size):
                if not resize:
                    raise DatasetError(f"{path}: size {im.size} does not match expected {size} and resizing is disabled")
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"unreadable image file {path}: {exc}") from exc
    return arr / 255.0


def save_dataset(ds: LabeledDataset, out_dir) -> str:
    """Write PNGs plus a dataset.json manifest listing filename/theta/phi/split."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for k in range(len(ds)):
        name = f"pole_{k:04d}.png"
        save_png(os.path.join(out_dir, name), ds.images[k])
        entries.append(
            {
                "filename": name,
                "theta": float(ds.thetas[k]) if ds.thetas is not None else None,
                "phi": float(ds.phis[k]) if ds.phis is not None else None,
                "split": str(ds.split[k]) if ds.split is not None else None,
            }
        )
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump({"seed": ds.seed, "items": entries}, fh, indent=2)
        fh.write("\n")
    return out_dir


def load_dataset(path, size: int | None = None) -> LabeledDataset:
    """Load a directory written by save_dataset via its dataset.json manifest."""
    path = os.fspath(path)
    manifest_path = os.path.join(path, "dataset.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"no dataset.json under {path}") from exc
    items = manifest["items"]
    if not items:
        raise DatasetError(f"empty dataset manifest in {manifest_path}")
    images = np.stack([load_png(os.path.join(path, it["filename"]), size) for it in items])
    thetas = None
    if all(it.get("theta") is not None for it in items):
        thetas = np.array([it["theta"] for it in items], dtype=np.float32)
    phis = None
    if all(it.get("phi") is not None for it in items):
        phis = np.array([it["phi"] for it in items], dtype=np.float32)
    split = None
    if all(it.get("split") for it in items):
        split = np.array([it["split"] for it in items], dtype="<U5")
    return LabeledDataset(images=images, thetas=thetas, phis=phis, split=split, seed=manifest.get("seed"))


def _pattern_to_regex(pattern: str) -> re.Pattern:
    out = []
    pos = 0
    for m in re.finditer(r"\{(\w+)\}", pattern):
        out.append(re.escape(pattern[pos : m.start()]))
        field = m.group(1)
        if field == "angle":
            out.append(r"(?P<angle>-?\d+(?:\.\d+)?)")
        else:
            out.append(rf"(?P<{field}>\w+?)")
        pos = m.end()
    out.append(re.escape(pattern[pos:]))
    return re.compile("^" + "".join(out) + "$")


def load_image_dir(path, expected_size: int, filename_pattern: str | None = None, resize: bool = True) -> LabeledDataset:
    """Load a directory of PNG files, optionally extracting an angle parameter.

    ``filename_pattern`` uses {angle} (and other ignored {fields}), e.g.
    "obj{id}__{angle}.png". When given, it must match every file; matching
    only a subset is reported as an inconsistent-labels error, and matching
    none leaves the parameters absent.
    """
    path = os.fspath(path)
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
    if not names:
        raise DatasetError(f"no PNG files in {path}")
    images = np.stack([load_png(os.path.join(path, f), expected_size, resize=resize) for f in names])

    phis = None
    if filename_pattern is not None:
        rx = _pattern_to_regex(filename_pattern)
        matches = [rx.match(f) for f in names]
        hits = [m for m in matches if m is not None and "angle" in m.groupdict()]
        if 0 < len(hits) < len(names):
            bad = [f for f, m in zip(names, matches) if m is None]
            raise DatasetError(f"inconsistent labels: pattern matched {len(hits)}/{len(names)} files (e.g. {bad[0]!r})")
        if len(hits) == len(names):
            phis = np.array([float(m.group("angle")) for m in matches], dtype=np.float32)
    return LabeledDataset(images=images, phis=phis)
