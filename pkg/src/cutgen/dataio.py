"""Dataset readers/writers: MVTec-style and VisA-style layouts, the
generated-dataset manifest, the k-shot sampling protocol, and a procedural
toy-defect dataset used as the desk-scale end-to-end substrate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .types import AnnotatedSample, ImageSample, ValidationError, derive_seed

LAYOUTS = ("mvtec", "visa", "generated", "toy")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class DatasetSpec:
    root: Path
    layout: str
    categories: tuple[str, ...]
    split: str = "test"

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValidationError(f"unknown layout {self.layout!r}, expected one of {LAYOUTS}")
        if not self.categories:
            raise ValidationError("categories must be non-empty")
        if self.split not in ("train", "test"):
            raise ValidationError(f"split must be train or test, got {self.split!r}")
        if not Path(self.root).exists():
            raise ValidationError(f"dataset root does not exist: {self.root}")


@dataclass(frozen=True)
class LoadedSample:
    image: ImageSample
    y_img: int
    mask: np.ndarray  # H x W float in [0, 1]; all-zero for normal samples
    auxiliary: bool = False


@dataclass(frozen=True)
class KShotSample:
    k: int | str
    seed: int
    paths: tuple[str, ...]


def save_image(pixels: np.ndarray, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(pixels * 255.0).astype(np.uint8)).save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_mask(mask: np.ndarray, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.asarray(mask, dtype=np.float64) * 255.0).astype(np.uint8), mode="L").save(path)


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _sorted_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


# ---------------------------------------------------------------------------
# mvtec-style layout: <root>/<cat>/{train/good, test/<defect>, ground_truth/<defect>}
# ---------------------------------------------------------------------------

def _iter_mvtec(root: Path, category: str, split: str) -> Iterator[LoadedSample]:
    cat_dir = root / category
    if split == "train":
        good = cat_dir / "train" / "good"
        if not good.is_dir():
            raise ValidationError(f"missing train/good directory: {good}")
        for p in _sorted_images(good):
            px = load_image(p)
            yield LoadedSample(ImageSample(px, category, str(p)), 0, np.zeros(px.shape[:2]))
        return

    test_dir = cat_dir / "test"
    if not test_dir.is_dir():
        raise ValidationError(f"missing test directory: {test_dir}")
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        is_good = defect_dir.name == "good"
        for p in _sorted_images(defect_dir):
            px = load_image(p)
            if is_good:
                yield LoadedSample(ImageSample(px, category, str(p)), 0, np.zeros(px.shape[:2]))
                continue
            mask_path = cat_dir / "ground_truth" / defect_dir.name / f"{p.stem}_mask.png"
            if not mask_path.exists():
                raise ValidationError(f"anomalous test image {p} has no ground-truth mask at {mask_path}")
            yield LoadedSample(ImageSample(px, category, str(p)), 1, load_mask(mask_path))


# ---------------------------------------------------------------------------
# visa-style layout: CSV-indexed split file <root>/split_csv/1cls.csv
# columns: object,split,label,image,mask (paths relative to root)
# ---------------------------------------------------------------------------

def _iter_visa(root: Path, category: str, split: str) -> Iterator[LoadedSample]:
    import csv as _csv

    csv_path = root / "split_csv" / "1cls.csv"
    if not csv_path.exists():
        raise ValidationError(f"missing visa split file: {csv_path}")
    with open(csv_path, newline="") as fh:
        rows = [r for r in _csv.DictReader(fh) if r["object"] == category and r["split"] == split]
    for r in sorted(rows, key=lambda r: r["image"]):
        p = root / r["image"]
        px = load_image(p)
        if r["label"] == "normal":
            yield LoadedSample(ImageSample(px, category, str(p)), 0, np.zeros(px.shape[:2]))
        else:
            if not r.get("mask"):
                raise ValidationError(f"anomalous visa image {p} has no mask column entry")
            mask_path = root / r["mask"]
            if not mask_path.exists():
                raise ValidationError(f"anomalous visa image {p} has no mask file at {mask_path}")
            yield LoadedSample(ImageSample(px, category, str(p)), 1, load_mask(mask_path))


# ---------------------------------------------------------------------------
# generated-dataset layout: <out>/<cat>/{images,masks}/<idx>.png + manifest.jsonl
# ---------------------------------------------------------------------------

def write_generated(samples: list[AnnotatedSample], out_root: Path, category: str) -> Path:
    """Write generated samples and their manifest; returns the category dir."""
    cat_dir = Path(out_root) / category
    (cat_dir / "images").mkdir(parents=True, exist_ok=True)
    (cat_dir / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for idx, s in enumerate(samples):
        save_image(s.image.pixels, cat_dir / "images" / f"{idx:05d}.png")
        save_mask(s.y_pix, cat_dir / "masks" / f"{idx:05d}.png")
        records.append({
            "index": idx,
            "y_img": s.y_img,
            "seed": s.seed,
            "gamma": s.gamma,
            "prompt": s.prompt.text if s.prompt else "",
            "source_normal": s.metadata.get("source_normal", ""),
            "anomaly_tokens": sorted(s.prompt.anomaly_token_indices) if s.prompt else [],
        })
    with open(cat_dir / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return cat_dir


def read_manifest(cat_dir: Path) -> list[dict]:
    path = Path(cat_dir) / "manifest.jsonl"
    if not path.exists():
        raise ValidationError(f"missing manifest: {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _iter_generated(root: Path, category: str, split: str) -> Iterator[LoadedSample]:
    cat_dir = root / category
    for rec in read_manifest(cat_dir):
        img_path = cat_dir / "images" / f"{rec['index']:05d}.png"
        px = load_image(img_path)
        mask = load_mask(cat_dir / "masks" / f"{rec['index']:05d}.png")
        yield LoadedSample(ImageSample(px, category, str(img_path)), int(rec["y_img"]), mask)


def load_split(spec: DatasetSpec) -> Iterator[LoadedSample]:
    """Yield every sample of the split, with all-zero masks for normals."""
    root = Path(spec.root)
    for category in spec.categories:
        if spec.layout in ("mvtec", "toy"):
            yield from _iter_mvtec(root, category, spec.split)
        elif spec.layout == "visa":
            yield from _iter_visa(root, category, spec.split)
        else:
            yield from _iter_generated(root, category, spec.split)


# ---------------------------------------------------------------------------
# k-shot protocol
# ---------------------------------------------------------------------------

def with_auxiliary(primary: list[LoadedSample], auxiliary: list[LoadedSample]) -> list[LoadedSample]:
    """Concatenate an auxiliary dataset for training; its samples are tagged
    so evaluation never sees them."""
    tagged = [LoadedSample(s.image, s.y_img, s.mask, auxiliary=True) for s in auxiliary]
    return list(primary) + tagged


def sample_kshot(spec: DatasetSpec, category: str, k: int | str, seed: int) -> KShotSample:
    """Deterministic without-replacement pick of k training normals.

    k="all" returns the full normal set in canonical (sorted-path) order;
    otherwise the pick is a seeded shuffle prefix of that canonical order.
    """
    train_spec = DatasetSpec(root=spec.root, layout=spec.layout, categories=(category,), split="train")
    paths = [s.image.path for s in load_split(train_spec)]
    if k == "all":
        return KShotSample(k="all", seed=seed, paths=tuple(paths))
    if not isinstance(k, int) or k < 1:
        raise ValidationError(f"k must be a positive integer or 'all', got {k!r}")
    if k > len(paths):
        raise ValidationError(f"k={k} exceeds the {len(paths)} available normals for {category}")
    rng = np.random.default_rng(derive_seed(seed, "kshot", category, k))
    perm = rng.permutation(len(paths))
    return KShotSample(k=k, seed=seed, paths=tuple(paths[i] for i in perm[:k]))


# ---------------------------------------------------------------------------
# procedural toy-defect dataset
# ---------------------------------------------------------------------------

TOY_CATEGORY = "toydisk"
TOY_SIDE = 128
_DISK_RGB = np.array([0.30, 0.32, 0.38])
_BG_RGB = np.array([0.85, 0.84, 0.82])
DEFECT_SHIFT = 0.3


def _render_disk(rng: np.random.Generator) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Plain-background disk with smooth low-frequency shading; returns
    (image, (cy, cx, r))."""
    from scipy import ndimage

    s = TOY_SIDE
    cy = s / 2 + rng.uniform(-8, 8)
    cx = s / 2 + rng.uniform(-8, 8)
    r = rng.uniform(36, 44)
    yy, xx = np.mgrid[0:s, 0:s]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    img = np.where(inside[..., None], _DISK_RGB, _BG_RGB).astype(np.float64)
    shading = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=12.0)
    shading *= 0.04 / max(np.abs(shading).max(), 1e-9)
    img += shading[..., None]
    return np.clip(img, 0.0, 1.0), (cy, cx, r)


def _shift_away_from_nearest_bound(img: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Push defect pixels by DEFECT_SHIFT toward the farther intensity bound,
    so they always differ from the clean render by more than 1/255."""
    out = img.copy()
    lum = img.mean(axis=2)
    direction = np.where(lum < 0.5, DEFECT_SHIFT, -DEFECT_SHIFT)
    out[region] = np.clip(img[region] + direction[region][:, None], 0.0, 1.0)
    return out


def _defect_region(kind: str, disk: tuple[float, float, float], rng: np.random.Generator) -> np.ndarray:
    cy, cx, r = disk
    s = TOY_SIDE
    yy, xx = np.mgrid[0:s, 0:s]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= (r - 3) ** 2
    if kind == "scratch":
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.5, 0.5) * r
        d = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta) - offset
        region = (np.abs(d) <= rng.uniform(1.5, 3.0)) & inside
    elif kind == "blob":
        by = cy + rng.uniform(-0.5, 0.5) * r
        bx = cx + rng.uniform(-0.5, 0.5) * r
        br = rng.uniform(5, 10)
        region = (yy - by) ** 2 + (xx - bx) ** 2 <= br ** 2
        region &= inside
    elif kind == "wedge":
        theta0 = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.4, 0.9)
        ang = np.arctan2(yy - cy, xx - cx)
        delta = np.mod(ang - theta0 + np.pi, 2 * np.pi) - np.pi
        region = (np.abs(delta) <= width / 2) & inside
    else:
        raise ValidationError(f"unknown defect kind {kind!r}")
    if not region.any():  # degenerate geometry: fall back to a center blob
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= 36.0
    return region


DEFECT_KINDS = ("scratch", "blob", "wedge")


def make_toy_dataset(out: Path, n_normal: int, n_anomalous: int, seed: int = 0) -> DatasetSpec:
    """Render a deterministic disk dataset in mvtec-style layout.

    Writes n_normal train normals, n_normal test normals, and n_anomalous
    test defects with exact ground-truth masks.
    """
    if n_normal < 1 or n_anomalous < 0:
        raise ValidationError("need n_normal >= 1 and n_anomalous >= 0")
    out = Path(out)
    cat = out / TOY_CATEGORY
    for idx in range(n_normal):
        img, _ = _render_disk(np.random.default_rng(derive_seed(seed, "toy-train", idx)))
        save_image(img, cat / "train" / "good" / f"{idx:03d}.png")
    for idx in range(n_normal):
        img, _ = _render_disk(np.random.default_rng(derive_seed(seed, "toy-test-good", idx)))
        save_image(img, cat / "test" / "good" / f"{idx:03d}.png")
    (cat / "test" / "defect").mkdir(parents=True, exist_ok=True)
    (cat / "ground_truth" / "defect").mkdir(parents=True, exist_ok=True)
    for idx in range(n_anomalous):
        rng = np.random.default_rng(derive_seed(seed, "toy-test-defect", idx))
        clean, disk = _render_disk(rng)
        kind = DEFECT_KINDS[idx % len(DEFECT_KINDS)]
        region = _defect_region(kind, disk, rng)
        if kind == "wedge":
            defect = clean.copy()
            defect[region] = clean[region] + (_BG_RGB - _DISK_RGB)
            defect = np.clip(defect, 0.0, 1.0)
        else:
            defect = _shift_away_from_nearest_bound(clean, region)
        save_image(defect, cat / "test" / "defect" / f"{idx:03d}.png")
        save_mask(region.astype(np.float64), cat / "ground_truth" / "defect" / f"{idx:03d}_mask.png")
    return DatasetSpec(root=out, layout="toy", categories=(TOY_CATEGORY,), split="test")
