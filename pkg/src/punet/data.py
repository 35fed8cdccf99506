"""Synthetic abdominal-style phantoms, view augmentation and the on-disk
dataset container.

Each subject is a fixed arrangement of organ-like shapes inside a body
ellipse; slices of a subject vary the shapes smoothly, like neighbouring
axial slices of one volume. Labels are disjoint: 0 is background and every
class owns one shape per slice.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .windowing import make_grid


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    name: str
    family: str  # ellipse | blob | ring
    intensity: tuple[float, float]  # core intensity band; rings use it for the wall
    radius: tuple[float, float]
    core_intensity: float | None = None  # ring interior
    freq_bounds: tuple[float, float] = (0.0, 1.0)


DEFAULT_CLASSES = (
    ClassSpec("liver", "blob", (0.64, 0.70), (7.0, 8.5), freq_bounds=(0.03, 0.08)),
    ClassSpec("kidney", "ring", (0.84, 0.90), (5.0, 6.0), core_intensity=0.56, freq_bounds=(0.015, 0.05)),
    ClassSpec("gallbladder", "ellipse", (0.12, 0.18), (4.0, 5.0), freq_bounds=(0.008, 0.035)),
    ClassSpec("spleen", "blob", (0.50, 0.55), (6.0, 7.0), freq_bounds=(0.02, 0.06)),
    ClassSpec("stomach", "ring", (0.22, 0.27), (5.0, 6.5), core_intensity=0.75, freq_bounds=(0.015, 0.05)),
    ClassSpec("duodenum", "ellipse", (0.90, 0.96), (4.0, 5.0), freq_bounds=(0.008, 0.035)),
)


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    subjects: int = 30
    slices_per_subject: int = 6
    noise: float = 0.03
    noise_sigma: float = 1.0
    body_intensity: float = 0.38
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    group_a: tuple[int, ...] = (1, 2, 3)
    group_b: tuple[int, ...] = (4, 5, 6)

    def __post_init__(self):
        if set(self.group_a) & set(self.group_b):
            raise DataError("class groups A and B must be disjoint")
        labels = set(range(1, len(self.classes) + 1))
        if not set(self.group_a) | set(self.group_b) <= labels:
            raise DataError("class groups reference unknown labels")
        if self.subjects < 3:
            raise DataError("need at least 3 subjects for a train/val/test split")
        for c in self.classes:
            if c.family not in ("ellipse", "blob", "ring"):
                raise DataError(f"unknown shape family {c.family!r}")
            if 2 * c.radius[1] * 1.25 >= self.image_size * 0.8:
                raise DataError(f"class {c.name} cannot fit in a {self.image_size}px image")

    @property
    def n_labels(self) -> int:
        return len(self.classes) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["classes"] = tuple(
            ClassSpec(**{**c, "intensity": tuple(c["intensity"]), "radius": tuple(c["radius"]),
                         "freq_bounds": tuple(c["freq_bounds"])})
            for c in d["classes"]
        )
        d["group_a"] = tuple(d["group_a"])
        d["group_b"] = tuple(d["group_b"])
        return cls(**d)


@dataclass
class Dataset:
    spec: PhantomSpec
    seed: int
    images: np.ndarray  # (N, H, W) float32
    masks: np.ndarray  # (N, H, W) uint8
    subject: np.ndarray  # (N,) int
    slice_index: np.ndarray  # (N,) int
    splits: dict[str, list[int]] = field(default_factory=dict)  # split -> subject ids

    def indices(self, split: str, subjects: list[int] | None = None) -> np.ndarray:
        ids = self.splits[split] if subjects is None else subjects
        return np.flatnonzero(np.isin(self.subject, ids))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for i in range(len(self.images)):
            h.update(_image_bytes(self.images[i]))
            h.update(_mask_bytes(self.masks[i]))
        return h.hexdigest()


# ---------------------------------------------------------------- generation


def split_subjects(n: int, rng: np.random.Generator) -> dict[str, list[int]]:
    """70/10/20 train/val/test split by subject."""
    order = rng.permutation(n).tolist()
    n_train = int(round(0.7 * n))
    n_val = max(1, int(round(0.1 * n)))
    n_train = min(n_train, n - n_val - 1)
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }


def _shape_mask(family, center, radius, aspect, angle, harmonics, shape):
    rows, cols = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = rows - center[0], cols - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = np.sqrt((u / (radius * aspect)) ** 2 + (v / (radius / aspect)) ** 2)
    if family == "blob":
        theta = np.arctan2(v, u)
        r = r / (1.0 + sum(a * np.cos(k * theta + p) for k, a, p in harmonics))
    return r


def _place(spec: PhantomSpec, rng: np.random.Generator, body_axes):
    for _ in range(50):
        layout = _try_place(spec, rng, body_axes)
        if layout is not None:
            return layout
    raise DataError("could not place every class; image too small for the catalog")


def _try_place(spec: PhantomSpec, rng: np.random.Generator, body_axes):
    size = spec.image_size
    centre = (size - 1) / 2.0
    layout = []
    for label, cls in enumerate(spec.classes, start=1):
        radius = rng.uniform(*cls.radius)
        for _ in range(200):
            ang = rng.uniform(0, 2 * np.pi)
            rho = np.sqrt(rng.uniform(0, 1))
            cy = centre + rho * (body_axes[0] - radius * 1.3) * np.sin(ang)
            cx = centre + rho * (body_axes[1] - radius * 1.3) * np.cos(ang)
            if all(np.hypot(cy - o["c"][0], cx - o["c"][1]) > (radius + o["r"]) * 1.1 + 1.5 for o in layout):
                break
        else:
            return None
        layout.append(
            {
                "label": label,
                "c": (cy, cx),
                "r": radius,
                "aspect": rng.uniform(0.85, 1.2),
                "angle": rng.uniform(0, np.pi),
                "harmonics": [(k, rng.uniform(0.03, 0.1), rng.uniform(0, 2 * np.pi)) for k in (2, 3)],
                "intensity": rng.uniform(*cls.intensity),
                "ramp": rng.normal(0, 0.015, size=2),
            }
        )
    return layout


def _render_slice(spec: PhantomSpec, layout, body, k: int, rng: np.random.Generator):
    size = spec.image_size
    shape = (size, size)
    phase = 2 * np.pi * k / max(spec.slices_per_subject, 1)
    rows, cols = np.mgrid[:size, :size].astype(np.float64)
    centre = (size - 1) / 2.0
    # body ellipse with a smooth intensity gradient
    body_r = ((rows - centre) / body["axes"][0]) ** 2 + ((cols - centre) / body["axes"][1]) ** 2
    image = np.where(body_r <= 1.0, spec.body_intensity + body["grad"][0] * (rows - centre) / size
                     + body["grad"][1] * (cols - centre) / size, 0.0)
    mask = np.zeros(shape, np.uint8)
    for org in layout:
        cls = spec.classes[org["label"] - 1]
        scale = 1.0 + 0.08 * np.sin(phase + org["angle"])
        cy = org["c"][0] + 1.0 * np.sin(phase + 1.3 * org["label"])
        cx = org["c"][1] + 1.0 * np.cos(phase + 0.7 * org["label"])
        r = _shape_mask(cls.family, (cy, cx), org["r"] * scale, org["aspect"], org["angle"], org["harmonics"], shape)
        inside = r <= 1.0
        value = org["intensity"] + org["ramp"][0] * (rows - cy) / 4 + org["ramp"][1] * (cols - cx) / 4
        if cls.family == "ring":
            value = np.where(r <= 0.55, cls.core_intensity, value)
        image = np.where(inside, value, image)
        mask[inside] = org["label"]
    noise = ndimage.gaussian_filter(rng.normal(size=shape), spec.noise_sigma)
    noise *= spec.noise / max(noise.std(), 1e-12)
    image = image + noise * (body_r <= 1.0)
    return image.astype(np.float32), mask


def generate(spec: PhantomSpec, seed: int) -> Dataset:
    """Deterministic per ``(spec, seed)``; each subject draws from its own stream."""
    images, masks, subject, slice_index = [], [], [], []
    size = spec.image_size
    for sid in range(spec.subjects):
        rng = np.random.default_rng([seed, sid])
        body = {
            "axes": (rng.uniform(0.40, 0.46) * size, rng.uniform(0.44, 0.48) * size),
            "grad": rng.normal(0, 0.04, size=2),
        }
        layout = _place(spec, rng, body["axes"])
        for k in range(spec.slices_per_subject):
            img, msk = _render_slice(spec, layout, body, k, rng)
            images.append(img)
            masks.append(msk)
            subject.append(sid)
            slice_index.append(k)
    splits = split_subjects(spec.subjects, np.random.default_rng([seed, 10**6]))
    return Dataset(spec, seed, np.stack(images), np.stack(masks), np.array(subject), np.array(slice_index), splits)


def class_frequencies(masks: np.ndarray, labels) -> dict[int, float]:
    """Mean per-image pixel fraction of each label."""
    flat = masks.reshape(len(masks), -1)
    return {int(c): float((flat == c).mean(axis=1).mean()) for c in labels}


# ---------------------------------------------------------------- container


def _image_bytes(img: np.ndarray) -> bytes:
    return np.ascontiguousarray(img, dtype="<f4").tobytes()


def _mask_bytes(msk: np.ndarray) -> bytes:
    return np.ascontiguousarray(msk, dtype=np.uint8).tobytes()


def write_dataset(ds: Dataset, path: str | os.PathLike) -> Path:
    out = Path(path)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(len(ds.images)):
        stem = f"s{int(ds.subject[i]):04d}_{int(ds.slice_index[i]):03d}"
        (out / "slices" / f"{stem}.img").write_bytes(_image_bytes(ds.images[i]))
        (out / "slices" / f"{stem}.msk").write_bytes(_mask_bytes(ds.masks[i]))
        records.append({"stem": stem, "subject": int(ds.subject[i]), "slice": int(ds.slice_index[i])})
    meta = {
        "format": "punet-phantoms",
        "version": 1,
        "spec": ds.spec.to_dict(),
        "seed": ds.seed,
        "shape": list(ds.images.shape[1:]),
        "splits": ds.splits,
        "records": records,
        "checksum": ds.checksum(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    return out


def read_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    h, w = meta["shape"]
    spec = PhantomSpec.from_dict(meta["spec"])
    images, masks, subject, slice_index = [], [], [], []
    for rec in meta["records"]:
        raw_img = (root / "slices" / f"{rec['stem']}.img").read_bytes()
        raw_msk = (root / "slices" / f"{rec['stem']}.msk").read_bytes()
        if len(raw_img) != 4 * h * w or len(raw_msk) != h * w:
            raise DataError(f"truncated record {rec['stem']}")
        images.append(np.frombuffer(raw_img, dtype="<f4").reshape(h, w).astype(np.float32))
        masks.append(np.frombuffer(raw_msk, dtype=np.uint8).reshape(h, w).copy())
        subject.append(rec["subject"])
        slice_index.append(rec["slice"])
    ds = Dataset(spec, meta["seed"], np.stack(images), np.stack(masks), np.array(subject), np.array(slice_index),
                 {k: list(v) for k, v in meta["splits"].items()})
    if ds.checksum() != meta["checksum"]:
        raise DataError("dataset checksum mismatch")
    if ds.masks.max() >= spec.n_labels:
        raise DataError("mask label outside the class catalog")
    return ds


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    intensity_scale: tuple[float, float] = (1.0, 1.0)
    intensity_shift: tuple[float, float] = (0.0, 0.0)
    gamma: tuple[float, float] = (1.0, 1.0)
    rotation_deg: float = 0.0
    scale: tuple[float, float] = (1.0, 1.0)
    shear: float = 0.0
    mask_fraction: tuple[float, float] | None = None
    mask_block: int = 4

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def weak(cls) -> "AugmentPolicy":
        return cls((0.95, 1.05), (-0.03, 0.03), (0.9, 1.1), 8.0, (0.95, 1.05), 0.03)

    @classmethod
    def strong(cls, mask_fraction=(0.1, 0.4), mask_block=4) -> "AugmentPolicy":
        return cls((0.85, 1.15), (-0.08, 0.08), (0.7, 1.4), 15.0, (0.9, 1.1), 0.08, tuple(mask_fraction), mask_block)


@dataclass
class View:
    image: np.ndarray  # (S, S) float32
    mask: np.ndarray | None  # (S, S) uint8
    grid: np.ndarray  # (S, S, 2) world (x, y) in slice pixels
    record: dict


def affine_matrix(rotation: float, scale: float, shear: float) -> np.ndarray:
    """Maps view (row, col) offsets from the view centre to source offsets."""
    c, s = np.cos(rotation), np.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.array([[1.0, shear], [0.0, 1.0]]) / scale


def render(image: np.ndarray, mask: np.ndarray | None, offset: tuple[int, int], size: int,
           matrix: np.ndarray | None = None) -> View:
    """Crop ``size`` pixels at ``offset`` (row, col), optionally warped about the crop centre."""
    matrix = np.eye(2) if matrix is None else np.asarray(matrix, dtype=np.float64)
    half = (size - 1) / 2.0
    rows, cols = np.mgrid[:size, :size].astype(np.float64)
    rel = np.stack([rows - half, cols - half])
    src = np.einsum("ij,jhw->ihw", matrix, rel)
    src[0] += offset[0] + half
    src[1] += offset[1] + half
    identity = np.allclose(matrix, np.eye(2))
    if identity:
        img = image[offset[0] : offset[0] + size, offset[1] : offset[1] + size].astype(np.float32).copy()
        msk = None if mask is None else mask[offset[0] : offset[0] + size, offset[1] : offset[1] + size].copy()
    else:
        img = ndimage.map_coordinates(image, src, order=1, mode="constant", cval=0.0).astype(np.float32)
        msk = None if mask is None else ndimage.map_coordinates(mask, src, order=0, mode="constant", cval=0)
    grid = np.stack([src[1], src[0]], axis=-1)
    if identity:
        grid = make_grid((offset[1], offset[0]), 1.0, (size, size))
    return View(img, msk, grid, {"offset": tuple(int(o) for o in offset), "matrix": matrix.tolist()})


def _intensity(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator, record: dict) -> np.ndarray:
    gamma = rng.uniform(*policy.gamma)
    scale = rng.uniform(*policy.intensity_scale)
    shift = rng.uniform(*policy.intensity_shift)
    record.update(gamma=gamma, intensity_scale=scale, intensity_shift=shift)
    if gamma != 1.0:
        img = np.clip(img, 0.0, None) ** gamma
    return (img * scale + shift).astype(np.float32)


def _sample_matrix(policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    rot = np.deg2rad(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
    return affine_matrix(rot, rng.uniform(*policy.scale), rng.uniform(-policy.shear, policy.shear))


def mask_blocks(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator, record: dict) -> np.ndarray:
    """Drop out or shuffle whole blocks until a fraction in ``policy.mask_fraction`` is hit."""
    b = policy.mask_block
    nby, nbx = img.shape[0] // b, img.shape[1] // b
    total = nby * nbx
    lo, hi = policy.mask_fraction
    cells = b * b
    area = img.shape[0] * img.shape[1]
    # counts whose covered fraction lies inside [lo, hi]
    n_lo = int(np.ceil(lo * area / cells - 1e-9))
    n_hi = int(np.floor(hi * area / cells + 1e-9))
    n_lo, n_hi = max(n_lo, 0), min(n_hi, total)
    n = int(rng.integers(n_lo, n_hi + 1)) if n_hi >= n_lo else n_lo
    chosen = rng.choice(total, size=n, replace=False)
    out = img.copy()
    masked = np.zeros(img.shape, bool)
    for idx in chosen:
        y, x = divmod(int(idx), nbx)
        sl = (slice(y * b, (y + 1) * b), slice(x * b, (x + 1) * b))
        if rng.random() < 0.5:
            out[sl] = 0.0
        else:
            block = out[sl].ravel()
            out[sl] = rng.permutation(block).reshape(b, b)
        masked[sl] = True
    record["masked"] = masked
    record["masked_fraction"] = float(masked.mean())
    return out


def augment(image: np.ndarray, mask: np.ndarray | None, offset, size: int, policy: AugmentPolicy,
            rng: np.random.Generator) -> View:
    view = render(image, mask, offset, size, _sample_matrix(policy, rng))
    view.image = _intensity(view.image, policy, rng, view.record)
    if policy.mask_fraction is not None:
        view.image = mask_blocks(view.image, policy, rng, view.record)
    return view


def augment_weak(image, mask, rng, offset=(0, 0), size=None, policy: AugmentPolicy | None = None) -> View:
    size = size or image.shape[0]
    return augment(image, mask, offset, size, policy or AugmentPolicy.weak(), rng)


def augment_strong(image, mask, rng, offset=(0, 0), size=None, policy: AugmentPolicy | None = None) -> View:
    size = size or image.shape[0]
    return augment(image, mask, offset, size, policy or AugmentPolicy.strong(), rng)
