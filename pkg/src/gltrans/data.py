"""Deterministic synthetic identities and a PPM directory loader.

Filenames follow ``<id>_c<camera>_<index>.ppm``. A ``manifest.csv``
(filename, id, camera, split) records the split assignment.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "query", "gallery")
NAME_RE = re.compile(r"^(\d+)_c(\d+)_(\d+)$")
MANIFEST = "manifest.csv"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    num_ids: int = 8
    imgs_per_id: int = 16
    num_cameras: int = 4
    image_h: int = 52
    image_w: int = 28
    seed: int = 7
    nuisance: float = 0.3
    bands: int = 4

    def validate(self) -> None:
        if self.num_ids < 2:
            raise DatasetError(f"need at least 2 identities, got {self.num_ids}")
        if self.imgs_per_id < 2:
            raise DatasetError(f"need at least 2 images per identity, got {self.imgs_per_id}")
        if self.num_cameras < 2:
            raise DatasetError("need at least 2 cameras for cross-camera query/gallery splits")
        if not 0.0 <= self.nuisance <= 1.0:
            raise DatasetError(f"nuisance strength must lie in [0, 1], got {self.nuisance}")
        if self.image_h < self.bands or self.image_w < 1:
            raise DatasetError("image too small")


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, 3) float32 in [0, 1], multiples of 1/255
    ids: np.ndarray
    cameras: np.ndarray
    splits: np.ndarray
    names: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, split: str) -> "Dataset":
        mask = self.splits == split
        idx = np.flatnonzero(mask)
        return Dataset(
            images=self.images[idx], ids=self.ids[idx], cameras=self.cameras[idx],
            splits=self.splits[idx], names=[self.names[i] for i in idx],
        )


def sample_name(pid: int, cam: int, index: int) -> str:
    return f"{pid:04d}_c{cam}_{index:04d}"


def parse_name(stem: str) -> tuple[int, int, int]:
    m = NAME_RE.match(stem)
    if not m:
        raise DatasetError(f"malformed sample name {stem!r}; expected <id>_c<camera>_<index>")
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


def _identity_pattern(spec: SynthSpec, pid: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1, pid])
    h, w = spec.image_h, spec.image_w
    # horizontal color bands: each stripe of the image carries its own cue
    colors = rng.uniform(0.1, 0.9, size=(spec.bands, 3))
    band_of_row = np.minimum(np.arange(h) * spec.bands // h, spec.bands - 1)
    img = np.repeat(colors[band_of_row][:, None, :], w, axis=1)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    for _ in range(2):
        fy, fx = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        weights = rng.uniform(-1, 1, size=3)
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img = img + 0.08 * wave[..., None] * weights
    return img


def _camera_transform(spec: SynthSpec, cam: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 2, cam])
    gain = 1.0 + 0.5 * spec.nuisance * rng.uniform(-1, 1, size=3)
    offset = 0.25 * spec.nuisance * rng.uniform(-1, 1, size=3)
    return gain, offset


def _shift_rows(img: np.ndarray, dy: int) -> np.ndarray:
    if dy == 0:
        return img
    idx = np.clip(np.arange(img.shape[0]) - dy, 0, img.shape[0] - 1)
    return img[idx]


def generate(spec: SynthSpec = SynthSpec()) -> Dataset:
    spec.validate()
    s = spec.nuisance
    cams = [_camera_transform(spec, c) for c in range(spec.num_cameras)]
    images, ids, cameras, splits, names = [], [], [], [], []
    for pid in range(spec.num_ids):
        base = _identity_pattern(spec, pid)
        cam_of = [j % spec.num_cameras for j in range(spec.imgs_per_id)]
        present = sorted(set(cam_of))
        srng = np.random.default_rng([spec.seed, 3, pid])
        q_cam, g_cam = srng.choice(present, 2, replace=False)
        per_cam = {c: [j for j in range(spec.imgs_per_id) if cam_of[j] == c] for c in present}
        query = set(per_cam[q_cam][: max(1, len(per_cam[q_cam]) // 2)])
        gallery = set(per_cam[g_cam][: max(1, len(per_cam[g_cam]) // 2)])
        for j in range(spec.imgs_per_id):
            cam = cam_of[j]
            irng = np.random.default_rng([spec.seed, 4, pid, j])
            gain, offset = cams[cam]
            img = base * gain + offset
            img = img + s * irng.uniform(-0.1, 0.1)
            img = img + 0.1 * s * irng.standard_normal(img.shape)
            img = _shift_rows(img, int(round(s * irng.uniform(-4, 4))))
            u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            images.append(u8.astype(np.float32) / 255.0)
            ids.append(pid)
            cameras.append(cam)
            splits.append("query" if j in query else "gallery" if j in gallery else "train")
            names.append(sample_name(pid, cam, j))
    return Dataset(
        images=np.stack(images), ids=np.array(ids), cameras=np.array(cameras),
        splits=np.array(splits), names=names,
    )


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    u8 = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, c = u8.shape
    if c != 3:
        raise DatasetError("PPM P6 stores exactly 3 channels")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6 file into an ``(H, W, 3)`` float32 array in [0, 1]."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM is supported")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float32) / 255.0


def resize_nearest(image: np.ndarray, h: int, w: int) -> np.ndarray:
    if image.shape[:2] == (h, w):
        return image
    rows = np.arange(h) * image.shape[0] // h
    cols = np.arange(w) * image.shape[1] // w
    return image[rows][:, cols]


def write_dataset(ds: Dataset, out_dir: str | os.PathLike, comments: list[str] = ()) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / MANIFEST, "w", newline="", encoding="utf-8") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["filename", "id", "camera", "split"])
        for i, name in enumerate(ds.names):
            fname = f"{name}.ppm"
            write_ppm(out / fname, ds.images[i])
            w.writerow([fname, int(ds.ids[i]), int(ds.cameras[i]), ds.splits[i]])
    return out


def _read_manifest(path: Path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return {r["filename"]: r["split"] for r in rows}


def load_dir(path: str | os.PathLike, image_h: int | None = None, image_w: int | None = None) -> Dataset:
    """Load every ``.ppm`` in ``path``; labels come from the filenames.

    Splits come from ``manifest.csv`` when present (else everything is
    ``train``). Images are nearest-neighbor resized to ``image_h x image_w``.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.is_file() and p.name != MANIFEST and not p.name.startswith("."))
    if not files:
        raise DatasetError(f"{root} contains no images")
    bad = [p.name for p in files if p.suffix.lower() != ".ppm" or not NAME_RE.match(p.stem)]
    if bad:
        raise DatasetError(f"malformed sample names in {root}: {', '.join(bad[:10])}")
    manifest = _read_manifest(root / MANIFEST) if (root / MANIFEST).exists() else {}
    if manifest:
        order = {name: i for i, name in enumerate(manifest)}
        files.sort(key=lambda p: order.get(p.name, len(order)))
    images, ids, cams, splits, names = [], [], [], [], []
    for p in files:
        pid, cam, _ = parse_name(p.stem)
        img = read_ppm(p)
        if image_h is not None and image_w is not None:
            img = resize_nearest(img, image_h, image_w)
        split = manifest.get(p.name, "train")
        if split not in SPLITS:
            raise DatasetError(f"{p.name}: unknown split {split!r}")
        images.append(img)
        ids.append(pid)
        cams.append(cam)
        splits.append(split)
        names.append(p.stem)
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DatasetError(f"images have different shapes {sorted(shapes)}; pass a target geometry")
    return Dataset(
        images=np.stack(images), ids=np.array(ids), cameras=np.array(cams),
        splits=np.array(splits), names=names,
    )


def nearest_centroid_accuracy(ds: Dataset) -> float:
    """Train accuracy of a nearest-class-mean classifier on raw pixels."""
    x = ds.images.reshape(len(ds), -1).astype(np.float64)
    labels = np.unique(ds.ids)
    cents = np.stack([x[ds.ids == l].mean(0) for l in labels])
    d = ((x[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((labels[d.argmin(1)] == ds.ids).mean())
