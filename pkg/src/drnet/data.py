"""Synthetic shape datasets, point-cloud text I/O, and the binary checkpoint format.

Classification clouds are surface samples of four primitives (sphere, cube,
cylinder, torus); segmentation clouds are two composite categories (mallet:
box head + cylinder handle; lamp: disk base + pole + sphere shade) whose
ground-truth part labels come from the generating primitive. Every cloud is
rotated by a random angle about the vertical (z) axis, centered on its
centroid, and scaled so the farthest point sits on the unit sphere.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from drnet.numerics import RandomStream, fold_seed

CLS_CLASSES = ("sphere", "cube", "cylinder", "torus")
SEG_CATEGORIES = ("mallet", "lamp")
SEG_PARTS = {"mallet": ("head", "handle"), "lamp": ("base", "pole", "shade")}

MALLET_HEAD_FRACTION = (0.35, 0.55)
LAMP_BASE_FRACTION = (0.20, 0.30)
LAMP_POLE_FRACTION = (0.25, 0.35)

CHECKPOINT_MAGIC = b"DRNC"
CHECKPOINT_VERSION = 1

_TAG_CLS = 0xC15
_TAG_SEG = 0x5E6
_SPLIT_TRAIN = 0
_SPLIT_TEST = 1


class CloudFormatError(ValueError):
    """Malformed point-cloud text file."""


class CheckpointFormatError(ValueError):
    """Malformed or truncated checkpoint file."""


@dataclass
class LabeledCloud:
    coords: np.ndarray
    cloud_label: int | None = None
    point_labels: np.ndarray | None = None
    category: int | None = None


@dataclass
class DatasetBundle:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    class_names: list = field(default_factory=list)
    parts: dict | None = None
    points_per_cloud: int = 0
    task: str = "cls"

    def part_ids(self):
        """Global part-id table in category order: category -> list of int ids."""
        if not self.parts:
            return None
        table, nxt = [], 0
        for name in self.class_names:
            ids = list(range(nxt, nxt + len(self.parts[name])))
            table.append(ids)
            nxt += len(self.parts[name])
        return table


def normalize(coords: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the farthest point onto the unit sphere."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] < 1:
        raise ValueError("cannot normalize an empty cloud")
    centered = coords - coords.mean(axis=0)
    radius = float(np.sqrt((centered**2).sum(axis=1).max()))
    if radius > 0.0:
        centered /= radius
    return centered


def _rotate_z(coords: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return coords @ rot.T


def _sample_sphere(rng: RandomStream, n: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    z = rng.uniform(-1.0, 1.0, (n,))
    phi = rng.uniform(0.0, 2.0 * math.pi, (n,))
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1) * radius
    return pts + np.asarray(center)


def _sample_box(rng: RandomStream, n: int, half_extents, center=(0.0, 0.0, 0.0)):
    hx, hy, hz = half_extents
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    cdf = np.cumsum(areas / areas.sum())
    pts = np.empty((n, 3))
    for i in range(n):
        u = rng.uniform(0.0, 1.0)
        face = int(np.searchsorted(cdf, u))
        a = rng.uniform(-1.0, 1.0)
        b = rng.uniform(-1.0, 1.0)
        axis = face // 2
        sign = 1.0 if face % 2 == 0 else -1.0
        if axis == 0:
            pts[i] = (sign * hx, a * hy, b * hz)
        elif axis == 1:
            pts[i] = (a * hx, sign * hy, b * hz)
        else:
            pts[i] = (a * hx, b * hy, sign * hz)
    return pts + np.asarray(center)


def _sample_cylinder(
    rng: RandomStream, n: int, radius: float, height: float, center=(0.0, 0.0, 0.0), caps=True
):
    side_area = 2.0 * math.pi * radius * height
    cap_area = math.pi * radius * radius
    total = side_area + (2.0 * cap_area if caps else 0.0)
    pts = np.empty((n, 3))
    for i in range(n):
        u = rng.uniform(0.0, total)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        if u < side_area:
            z = rng.uniform(-0.5, 0.5) * height
            pts[i] = (radius * math.cos(phi), radius * math.sin(phi), z)
        else:
            r = radius * math.sqrt(rng.uniform(0.0, 1.0))
            z = 0.5 * height if u < side_area + cap_area else -0.5 * height
            pts[i] = (r * math.cos(phi), r * math.sin(phi), z)
    return pts + np.asarray(center)


def _sample_torus(rng: RandomStream, n: int, major: float, minor: float, center=(0.0, 0.0, 0.0)):
    # surface density on a torus varies with (major + minor cos(t)); rejection keeps it uniform
    pts = np.empty((n, 3))
    for i in range(n):
        while True:
            t = rng.uniform(0.0, 2.0 * math.pi)
            if rng.uniform(0.0, 1.0) * (major + minor) <= major + minor * math.cos(t):
                break
        phi = rng.uniform(0.0, 2.0 * math.pi)
        ring = major + minor * math.cos(t)
        pts[i] = (ring * math.cos(phi), ring * math.sin(phi), minor * math.sin(t))
    return pts + np.asarray(center)


def _sample_disk(rng: RandomStream, n: int, radius: float, z: float = 0.0):
    pts = np.empty((n, 3))
    for i in range(n):
        r = radius * math.sqrt(rng.uniform(0.0, 1.0))
        phi = rng.uniform(0.0, 2.0 * math.pi)
        pts[i] = (r * math.cos(phi), r * math.sin(phi), z)
    return pts


def _finish(coords: np.ndarray, rng: RandomStream) -> np.ndarray:
    rotated = _rotate_z(coords, rng.uniform(0.0, 2.0 * math.pi))
    return normalize(rotated).astype(np.float32)


def _make_cls_cloud(class_idx: int, n: int, rng: RandomStream) -> np.ndarray:
    if class_idx == 0:
        pts = _sample_sphere(rng, n)
    elif class_idx == 1:
        side = rng.uniform(0.7, 0.9)
        pts = _sample_box(rng, n, (side, side, side))
    elif class_idx == 2:
        pts = _sample_cylinder(rng, n, rng.uniform(0.4, 0.6), rng.uniform(1.4, 1.8))
    else:
        pts = _sample_torus(rng, n, 0.7, rng.uniform(0.2, 0.3))
    return _finish(pts, rng)


def gen_cls_dataset(seed: int, n_per_class: int = 60, points_per_cloud: int = 64) -> DatasetBundle:
    """Four-primitive classification set; the test split is n_per_class // 3 per class."""
    if points_per_cloud < 32:
        raise ValueError("points_per_cloud must be at least 32")
    bundle = DatasetBundle(
        class_names=list(CLS_CLASSES), points_per_cloud=points_per_cloud, task="cls"
    )
    for split, count, target in (
        (_SPLIT_TRAIN, n_per_class, bundle.train),
        (_SPLIT_TEST, n_per_class // 3, bundle.test),
    ):
        for cls in range(len(CLS_CLASSES)):
            for i in range(count):
                rng = RandomStream(fold_seed(seed, _TAG_CLS, split, cls, i))
                coords = _make_cls_cloud(cls, points_per_cloud, rng)
                target.append(LabeledCloud(coords=coords, cloud_label=cls))
    return bundle


def _make_seg_cloud(category: int, n: int, rng: RandomStream, part_ids):
    coords = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    if category == 0:  # mallet: box head on a cylinder handle
        frac = rng.uniform(*MALLET_HEAD_FRACTION)
        n_head = max(1, round(frac * n))
        n_handle = n - n_head
        half = (rng.uniform(0.35, 0.45), 0.18, 0.18)
        length = rng.uniform(0.9, 1.1)
        coords[:n_head] = _sample_box(rng, n_head, half, center=(0.0, 0.0, length))
        coords[n_head:] = _sample_cylinder(
            rng, n_handle, rng.uniform(0.07, 0.1), length, center=(0.0, 0.0, 0.5 * length)
        )
        labels[:n_head] = part_ids[0][0]
        labels[n_head:] = part_ids[0][1]
    else:  # lamp: disk base, pole, sphere shade
        f_base = rng.uniform(*LAMP_BASE_FRACTION)
        f_pole = rng.uniform(*LAMP_POLE_FRACTION)
        n_base = max(1, round(f_base * n))
        n_pole = max(1, round(f_pole * n))
        n_shade = n - n_base - n_pole
        height = rng.uniform(1.0, 1.3)
        coords[:n_base] = _sample_disk(rng, n_base, rng.uniform(0.4, 0.55))
        coords[n_base : n_base + n_pole] = _sample_cylinder(
            rng, n_pole, 0.05, height, center=(0.0, 0.0, 0.5 * height), caps=False
        )
        coords[n_base + n_pole :] = _sample_sphere(
            rng, n_shade, rng.uniform(0.3, 0.4), center=(0.0, 0.0, height)
        )
        labels[:n_base] = part_ids[1][0]
        labels[n_base : n_base + n_pole] = part_ids[1][1]
        labels[n_base + n_pole :] = part_ids[1][2]
    rotated = _rotate_z(coords, rng.uniform(0.0, 2.0 * math.pi))
    return normalize(rotated).astype(np.float32), labels


def gen_seg_dataset(seed: int, n_shapes: int = 16, points_per_cloud: int = 64) -> DatasetBundle:
    """Two composite categories with per-point part labels; test split n_shapes // 3."""
    if points_per_cloud < 32:
        raise ValueError("points_per_cloud must be at least 32")
    bundle = DatasetBundle(
        class_names=list(SEG_CATEGORIES),
        parts={k: list(v) for k, v in SEG_PARTS.items()},
        points_per_cloud=points_per_cloud,
        task="seg",
    )
    part_ids = bundle.part_ids()
    for split, count, target in (
        (_SPLIT_TRAIN, n_shapes, bundle.train),
        (_SPLIT_TEST, n_shapes // 3, bundle.test),
    ):
        for cat in range(len(SEG_CATEGORIES)):
            for i in range(count):
                rng = RandomStream(fold_seed(seed, _TAG_SEG, split, cat, i))
                coords, labels = _make_seg_cloud(cat, points_per_cloud, rng, part_ids)
                target.append(LabeledCloud(coords=coords, point_labels=labels, category=cat))
    return bundle


def save_cloud(path: str, coords: np.ndarray, point_labels=None) -> None:
    """One point per line: `x y z [label]`, 9 significant digits."""
    coords = np.asarray(coords)
    with open(path, "w") as fh:
        for i in range(coords.shape[0]):
            x, y, z = coords[i]
            line = f"{x:.9g} {y:.9g} {z:.9g}"
            if point_labels is not None:
                line += f" {int(point_labels[i])}"
            fh.write(line + "\n")


def load_cloud(path: str):
    """Parse a cloud file; returns (coords float32, labels or None)."""
    coords, labels = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise CloudFormatError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            try:
                coords.append([float(v) for v in fields[:3]])
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: bad coordinate ({exc})") from None
            if len(fields) == 4:
                try:
                    labels.append(int(fields[3]))
                except ValueError:
                    raise CloudFormatError(f"{path}:{lineno}: bad label {fields[3]!r}") from None
    if not coords:
        raise CloudFormatError(f"{path}: no points")
    if labels and len(labels) != len(coords):
        raise CloudFormatError(f"{path}: labels on some lines but not all")
    coords = np.asarray(coords, dtype=np.float32)
    return coords, (np.asarray(labels, dtype=np.int64) if labels else None)


def save_dataset(bundle: DatasetBundle, out_dir: str) -> str:
    """Write clouds plus a manifest.json; returns the manifest path."""
    files = []
    for split, clouds in (("train", bundle.train), ("test", bundle.test)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for i, cloud in enumerate(clouds):
            rel = f"{split}/cloud_{i:05d}.xyz"
            save_cloud(os.path.join(out_dir, rel), cloud.coords, cloud.point_labels)
            label = cloud.cloud_label if bundle.task == "cls" else cloud.category
            files.append({"path": rel, "split": split, "label": int(label)})
    manifest = {
        "task": bundle.task,
        "classes": bundle.class_names,
        "parts": bundle.parts,
        "points_per_cloud": bundle.points_per_cloud,
        "files": files,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def load_dataset(root: str) -> DatasetBundle:
    """Load a generated dataset directory back into memory, validating labels."""
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise CloudFormatError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    bundle = DatasetBundle(
        class_names=list(manifest["classes"]),
        parts=manifest.get("parts"),
        points_per_cloud=int(manifest["points_per_cloud"]),
        task=manifest["task"],
    )
    part_ids = bundle.part_ids()
    n_classes = len(bundle.class_names)
    for entry in manifest["files"]:
        path = os.path.join(root, entry["path"])
        if not os.path.isfile(path):
            raise CloudFormatError(f"manifest references missing file {path}")
        coords, labels = load_cloud(path)
        label = int(entry["label"])
        if not 0 <= label < n_classes:
            raise CloudFormatError(f"{path}: label {label} outside [0, {n_classes})")
        if bundle.task == "seg":
            if labels is None:
                raise CloudFormatError(f"{path}: segmentation cloud without point labels")
            valid = set(part_ids[label])
            bad = set(int(v) for v in labels) - valid
            if bad:
                raise CloudFormatError(f"{path}: part labels {sorted(bad)} not in category {label}")
            cloud = LabeledCloud(coords=coords, point_labels=labels, category=label)
        else:
            cloud = LabeledCloud(coords=coords, cloud_label=label)
        (bundle.train if entry["split"] == "train" else bundle.test).append(cloud)
    return bundle


def save_checkpoint(path: str, tensors: dict) -> None:
    """Binary format: magic DRNC, version, count, then name/rank/extents/f32 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value)
            if arr.dtype != np.float32:
                raise TypeError(f"checkpoint tensors must be float32, got {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path: str) -> dict:
    """Bitwise round trip of save_checkpoint; rejects bad magic/version/truncation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if len(view) < 12 or bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    offset = 12
    out = {}

    def take(nbytes, what):
        nonlocal offset
        if offset + nbytes > len(view):
            raise CheckpointFormatError(f"{path}: truncated while reading {what}")
        chunk = view[offset : offset + nbytes]
        offset += nbytes
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape)) if rank else 1
        raw = take(4 * n, f"tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if offset != len(view):
        raise CheckpointFormatError(f"{path}: {len(view) - offset} trailing bytes")
    return out
