"""Count-labelled images: synthetic generation, PNM/CSV I/O, crops, and fold splitting."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_EXTENT = 32


class DataError(ValueError):
    pass


@dataclass
class Sample:
    """One image with its count label.

    ``centers`` holds ``(row, col)`` object positions for synthetic images and
    is ``None`` for loaded images, which only carry a count.
    """

    image: np.ndarray
    count: float
    name: str = ""
    centers: np.ndarray | None = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def rgb(self) -> np.ndarray:
        if self.image.ndim == 2:
            return np.repeat(self.image[:, :, None], 3, axis=2)
        return self.image


@dataclass
class SynthSpec:
    height: int = 64
    width: int = 64
    count_lo: int = 0
    count_hi: int = 20
    radius_lo: float = 2.0
    radius_hi: float = 4.0
    noise: float = 8.0
    seed: int = 0
    max_tries: int = 2000

    def __post_init__(self):
        if self.count_lo < 0 or self.count_hi < self.count_lo:
            raise DataError(f"need 0 <= count_lo <= count_hi, got [{self.count_lo}, {self.count_hi}]")
        if min(self.height, self.width) < MIN_EXTENT:
            raise DataError(f"synthetic images must be at least {MIN_EXTENT} pixels on a side")
        if not 0 < self.radius_lo <= self.radius_hi:
            raise DataError("need 0 < radius_lo <= radius_hi")


def _place_disks(spec: SynthSpec, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    centers = np.zeros((count, 2))
    radii = rng.uniform(spec.radius_lo, spec.radius_hi, size=count)
    for i in range(count):
        r = radii[i]
        for _ in range(spec.max_tries):
            c = np.array([rng.uniform(r, spec.height - 1 - r), rng.uniform(r, spec.width - 1 - r)])
            if i == 0 or np.all(np.hypot(*(centers[:i] - c).T) > radii[:i] + r):
                centers[i] = c
                break
        else:
            raise DataError(f"could not place {count} disks in a {spec.height}x{spec.width} frame")
    return centers, radii


def render_sample(spec: SynthSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    count = int(rng.integers(spec.count_lo, spec.count_hi + 1))
    centers, radii = _place_disks(spec, count, rng)
    img = 30.0 + spec.noise * rng.standard_normal((spec.height, spec.width))
    rows, cols = np.mgrid[0 : spec.height, 0 : spec.width]
    for (cy, cx), r in zip(centers, radii):
        d2 = (rows - cy) ** 2 + (cols - cx) ** 2
        sigma = r / 2.0
        img += np.where(d2 <= r * r, 190.0 * np.exp(-d2 / (2 * sigma * sigma)), 0.0)
    gray = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(np.repeat(gray[:, :, None], 3, axis=2), count, f"synth_{index:05d}", centers)


def generate_synthetic(spec: SynthSpec, n_images: int) -> list[Sample]:
    """Images of ``count`` non-overlapping bright Gaussian disks on dark noise.

    Each sample is seeded from ``(spec.seed, index)`` so any subset can be
    regenerated independently.
    """
    return [render_sample(spec, i) for i in range(n_images)]


# -- PNM I/O --------------------------------------------------------------------
def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError("truncated PNM header")
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Decode a binary PGM (P5) or PPM (P6) with maxval 255."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported magic number {magic!r}")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise DataError(f"{path}: bad header field {tok!r}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    nbytes = width * height * channels
    raster = buf[pos : pos + nbytes]
    if len(raster) != nbytes:
        raise DataError(f"{path}: raster has {len(raster)} bytes, expected {nbytes}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def write_pnm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise DataError("write_pnm expects uint8 pixels")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot write image of shape {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def load_image_ppm(path) -> Sample:
    return Sample(read_pnm(path), 0, os.path.basename(str(path)))


def load_labels_csv(path, image_dir=None) -> dict[str, int]:
    """Read ``filename,count`` rows; counts must be non-negative integers.

    If ``image_dir`` is given, every referenced file must exist there.
    """
    labels: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and [c.strip() for c in row] == ["filename", "count"]:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 'filename,count'")
            name, raw = row[0].strip(), row[1].strip()
            try:
                count = int(raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: count {raw!r} is not an integer") from None
            if count < 0:
                raise DataError(f"{path}:{lineno}: negative count {count}")
            if image_dir is not None and not os.path.exists(os.path.join(image_dir, name)):
                raise DataError(f"{path}:{lineno}: {name} not found in {image_dir}")
            labels[name] = count
    return labels


def write_labels_csv(path, samples) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "count"])
        for s in samples:
            writer.writerow([s.name, s.count])


def load_dataset(image_dir, labels_path=None) -> list[Sample]:
    labels_path = labels_path or os.path.join(image_dir, "labels.csv")
    labels = load_labels_csv(labels_path, image_dir)
    samples = []
    for name, count in labels.items():
        s = load_image_ppm(os.path.join(image_dir, name))
        s.count = count
        samples.append(s)
    return samples


def save_dataset(samples, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    named = []
    for s in samples:
        fname = s.name if s.name.endswith((".ppm", ".pgm")) else s.name + (".pgm" if s.image.ndim == 2 else ".ppm")
        write_pnm(os.path.join(out_dir, fname), s.image)
        named.append(Sample(s.image, s.count, fname))
    write_labels_csv(os.path.join(out_dir, "labels.csv"), named)


# -- crops and splits -----------------------------------------------------------------
def random_crop(sample: Sample, m: int, n: int, rng: np.random.Generator, area_scaled: bool = False) -> Sample:
    """Crop an ``m x n`` (rows x cols) patch at a uniformly random top-left corner.

    With object centers available the crop label is the number of centers in
    the patch. Without them, ``area_scaled=True`` scales the image count by the
    area fraction; otherwise cropping is refused.
    """
    if m % 32 or n % 32:
        raise DataError(f"crop {m}x{n} must be divisible by 32")
    if m > sample.height or n > sample.width:
        raise DataError(f"crop {m}x{n} larger than image {sample.height}x{sample.width}")
    top = int(rng.integers(0, sample.height - m + 1))
    left = int(rng.integers(0, sample.width - n + 1))
    patch = sample.image[top : top + m, left : left + n]
    if sample.centers is not None:
        c = sample.centers
        inside = (c[:, 0] >= top) & (c[:, 0] < top + m) & (c[:, 1] >= left) & (c[:, 1] < left + n)
        centers = c[inside] - [top, left]
        count: float = int(inside.sum())
    elif area_scaled:
        centers = None
        count = sample.count * (m * n) / (sample.height * sample.width)
    else:
        raise DataError(f"{sample.name}: no object positions; enable area-scaled crop labels")
    return Sample(patch, count, sample.name, centers)


def kfold_split(samples, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Partition sample indices into ``k`` shuffled folds whose sizes differ by at most one.

    ``samples`` is either a sequence or a sample count.
    """
    n_samples = samples if isinstance(samples, (int, np.integer)) else len(samples)
    if k < 1 or n_samples < k:
        raise DataError(f"need at least k={k} samples, got {n_samples}")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return [np.sort(f) for f in np.array_split(perm, k)]


def train_test_split(n_samples: int, train_fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n_samples)
    n_train = int(round(n_samples * train_fraction))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])
