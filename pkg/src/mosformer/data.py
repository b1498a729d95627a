"""Volume files, dataset manifests and the synthetic ellipsoid phantom generator.

Volume file layout (little-endian)::

    b"MVOL" | version u32 | dtype u8 | n_classes u32 | C, H, W, D u64 | spacing 3×f64 | raw C×H×W×D data

``n_classes`` is 0 for images and the class count for label volumes.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import parse_text
from .exceptions import ConfigError, DataError, FormatError
from .tensor.checkpoint import DTYPE_TAGS, TAG_DTYPES

VOLUME_MAGIC = b"MVOL"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sIBI4Q3d")


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_classes: int = 0

    @property
    def labels(self) -> np.ndarray:
        """H×W×D view of a single-channel label volume."""
        return self.data[0]


def dumps_volume(data: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0), n_classes: int = 0) -> bytes:
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise FormatError(f"volume must be C×H×W×D or H×W×D, got {arr.shape}")
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dtype not in DTYPE_TAGS:
        raise FormatError(f"unsupported volume dtype {arr.dtype}")
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, DTYPE_TAGS[dtype], n_classes, *arr.shape, *map(float, spacing))
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def loads_volume(blob: bytes) -> Volume:
    if len(blob) < _HEADER.size:
        raise FormatError("volume file shorter than its header")
    magic, version, tag, n_classes, c, h, w, d, sx, sy, sz = _HEADER.unpack_from(blob)
    if magic != VOLUME_MAGIC:
        raise FormatError("not an MVOL volume")
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported volume version {version}")
    if tag not in TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dtype = TAG_DTYPES[tag]
    count = c * h * w * d
    if len(blob) - _HEADER.size != count * dtype.itemsize:
        raise FormatError(f"payload is {len(blob) - _HEADER.size} bytes, expected {count * dtype.itemsize}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=_HEADER.size).reshape(c, h, w, d).copy()
    return Volume(data, (sx, sy, sz), n_classes)


def write_volume(path: Union[str, Path], data: np.ndarray, spacing=(1.0, 1.0, 1.0), n_classes: int = 0) -> None:
    Path(path).write_bytes(dumps_volume(data, spacing, n_classes))


def read_volume(path: Union[str, Path]) -> Volume:
    try:
        return loads_volume(Path(path).read_bytes())
    except OSError as exc:
        raise OSError(f"cannot read volume {path}: {exc}") from exc


# ------------------------------------------------------------------ manifest
@dataclass
class Case:
    case_id: str
    image: np.ndarray  # C×H×W×D
    labels: np.ndarray  # H×W×D
    spacing: Tuple[float, float, float]
    n_classes: int


def read_manifest(path: Union[str, Path]) -> List[dict]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if not {"case_id", "image", "label", "split"} <= set(r):
            raise DataError(f"manifest {path} needs columns case_id,image,label,split")
        r["image"] = str(path.parent / r["image"])
        r["label"] = str(path.parent / r["label"])
    return rows


def load_cases(manifest: Union[str, Path], split: Optional[str] = None) -> List[Case]:
    cases = []
    for row in read_manifest(manifest):
        if split is not None and row["split"] != split:
            continue
        img = read_volume(row["image"])
        lbl = read_volume(row["label"])
        if lbl.data.shape[1:] != img.data.shape[1:]:
            raise DataError(f"case {row['case_id']}: label grid {lbl.data.shape[1:]} != image grid {img.data.shape[1:]}")
        cases.append(Case(row["case_id"], img.data, lbl.labels.astype(np.int64), img.spacing, lbl.n_classes))
    return cases


# ------------------------------------------------------------------ phantoms
class PhantomOverlapWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid in physical (mm) coordinates."""

    label: int
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]


# per-class (min, max) radii in mm along (row, col, slice)
DEFAULT_RADII = (
    ((13.0, 18.0), (13.0, 18.0), (26.0, 40.0)),
    ((6.0, 9.0), (6.0, 9.0), (16.0, 28.0)),
    ((2.5, 4.0), (2.5, 4.0), (36.0, 60.0)),
)


@dataclass
class PhantomSpec:
    grid: Tuple[int, int, int] = (64, 64, 24)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 4.0)
    n_classes: int = 4
    count: int = 25
    n_test: int = 5
    noise: float = 0.6
    seed: int = 0
    # image intensity per class, background first
    intensities: Tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    # explicit shapes shared by every volume; empty means random per volume
    shapes: List[Ellipsoid] = field(default_factory=list)

    def __post_init__(self):
        if len(self.intensities) != self.n_classes:
            raise ConfigError("need one intensity per class")
        if not 0 <= self.n_test <= self.count:
            raise ConfigError("n_test must lie in [0, count]")
        for e in self.shapes:
            if not 0 < e.label < self.n_classes:
                raise ConfigError(f"shape label {e.label} outside [1, {self.n_classes})")
            extent = [n * s for n, s in zip(self.grid, self.spacing)]
            if any(not 0 <= c <= x for c, x in zip(e.center, extent)):
                raise ConfigError(f"shape centre {e.center} lies outside the grid")


def parse_phantom_spec(text: str) -> PhantomSpec:
    """Key-value phantom spec; ``shape.<n> = label cx cy cz rx ry rz`` adds an ellipsoid."""
    entries = parse_text(text)
    kwargs = {}
    shapes = []
    scalar = {"n_classes": int, "count": int, "n_test": int, "noise": float, "seed": int}
    vector = {"grid": int, "spacing": float, "intensities": float}
    for key, raw in entries.items():
        key = key[len("phantom."):] if key.startswith("phantom.") else key
        values = raw.replace(",", " ").split()
        try:
            if key in scalar:
                kwargs[key] = scalar[key](raw)
            elif key in vector:
                kwargs[key] = tuple(vector[key](v) for v in values)
            elif key.startswith("shape."):
                nums = [float(v) for v in values]
                if len(nums) != 7:
                    raise ConfigError(f"{key}: expected 'label cx cy cz rx ry rz'")
                shapes.append((key, Ellipsoid(int(nums[0]), tuple(nums[1:4]), tuple(nums[4:7]))))
            else:
                raise ConfigError(f"unknown phantom key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    shapes.sort(key=lambda kv: int(kv[0].split(".", 1)[1]) if kv[0].split(".", 1)[1].isdigit() else kv[0])
    return PhantomSpec(**kwargs, shapes=[e for _, e in shapes])


def rasterize(ellipsoid: Ellipsoid, grid: Sequence[int], spacing: Sequence[float]) -> np.ndarray:
    """Boolean mask of voxels whose centres (index × spacing) fall inside the ellipsoid."""
    axes = np.ogrid[tuple(slice(0, n) for n in grid)]
    total = 0.0
    for ax, sp, c, r in zip(axes, spacing, ellipsoid.center, ellipsoid.radii):
        total = total + ((ax * sp - c) / r) ** 2
    return total <= 1.0


def _random_shapes(spec: PhantomSpec, rng: np.random.Generator) -> List[Ellipsoid]:
    extent = np.array(spec.grid) * np.array(spec.spacing)
    shapes: List[Ellipsoid] = []
    occupied = np.zeros(spec.grid, dtype=bool)
    for label in range(1, spec.n_classes):
        ranges = DEFAULT_RADII[(label - 1) % len(DEFAULT_RADII)]
        for _ in range(200):
            radii = tuple(float(rng.uniform(lo, hi)) for lo, hi in ranges)
            # keep the in-plane extent inside the grid; allow running off through-plane
            center = tuple(
                float(rng.uniform(min(r + 2, x / 2), max(x - r - 2, x / 2))) if axis < 2 else float(rng.uniform(0.3 * x, 0.7 * x))
                for axis, (r, x) in enumerate(zip(radii, extent))
            )
            cand = Ellipsoid(label, center, radii)
            mask = rasterize(cand, spec.grid, spec.spacing)
            if mask.any() and not (mask & occupied).any():
                shapes.append(cand)
                occupied |= mask
                break
        else:
            raise DataError(f"could not place a non-overlapping shape for class {label}")
    return shapes


def make_phantom(spec: PhantomSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One (image 1×H×W×D float32, labels H×W×D uint8) pair.

    Later shapes overwrite earlier ones where they overlap.
    """
    shapes = spec.shapes or _random_shapes(spec, rng)
    labels = np.zeros(spec.grid, dtype=np.uint8)
    claimed = np.zeros(spec.grid, dtype=bool)
    for e in shapes:
        mask = rasterize(e, spec.grid, spec.spacing)
        if (mask & claimed & (labels != e.label)).any():
            warnings.warn(f"class {e.label} shape overlaps an earlier shape; later shape wins", PhantomOverlapWarning)
        labels[mask] = e.label
        claimed |= mask
    intensities = np.asarray(spec.intensities, dtype=np.float64)
    image = intensities[labels]
    if spec.noise > 0:
        image = image + spec.noise * rng.standard_normal(spec.grid)
    return image[None].astype(np.float32), labels


def generate_phantoms(spec: PhantomSpec, out_dir: Union[str, Path]) -> Path:
    """Write ``spec.count`` image/label volume pairs plus ``manifest.csv``; return the manifest path.

    The last ``n_test`` cases are tagged ``test``, the rest ``train``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    rows = []
    for i in range(spec.count):
        image, labels = make_phantom(spec, rng)
        cid = f"case{i:03d}"
        write_volume(out / f"{cid}_image.mvol", image, spec.spacing)
        write_volume(out / f"{cid}_label.mvol", labels, spec.spacing, n_classes=spec.n_classes)
        split = "test" if i >= spec.count - spec.n_test else "train"
        rows.append((cid, f"{cid}_image.mvol", f"{cid}_label.mvol", split))
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "image", "label", "split"])
        writer.writerows(rows)
    return manifest
