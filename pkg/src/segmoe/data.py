"""Procedural two-domain synthetic segmentation data.

Domain A ("urban-like"): many small rectangles/ellipses over a textured
background.  Domain B ("highway-like"): dominant road band, sky band, and
sparse objects.  Colors correlate with classes but carry seeded jitter and
pixel noise, so nets must actually be trained.  Every sample has its own
deterministic RNG stream derived from (seed, domain, split, index).

On-disk layout (see FORMAT.md): per-sample `<id>.img` / `<id>.msk` binary
files plus a `manifest.json` indexing splits.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .serialize import (
    FormatError,
    read_f64_array,
    read_magic,
    read_u16_array,
    read_u32,
    write_f64_array,
    write_magic,
    write_u16_array,
    write_u32,
)

SPLITS = ("train", "val", "test")
DOMAIN_A = "A"
DOMAIN_B = "B"
_DOMAIN_CODE = {DOMAIN_A: 1, DOMAIN_B: 2}
_SPLIT_CODE = {s: i + 1 for i, s in enumerate(SPLITS)}

CLASS_NAMES = (
    "background", "road", "sky", "building",
    "vehicle", "vegetation", "marking", "obstacle",
)
ROAD_CLASS = 1
SKY_CLASS = 2

# base colors per class; jitter, per-image tint, and pixel noise keep the
# decision margins small enough for epsilon-scale attacks to matter
_CLASS_COLORS = np.array(
    [
        [0.45, 0.45, 0.45],  # background
        [0.15, 0.18, 0.28],  # road
        [0.55, 0.75, 0.95],  # sky
        [0.75, 0.25, 0.75],  # building
        [0.90, 0.10, 0.10],  # vehicle
        [0.10, 0.60, 0.15],  # vegetation
        [0.95, 0.95, 0.80],  # marking
        [0.95, 0.60, 0.05],  # obstacle
    ]
)
_INSTANCE_JITTER = 0.06
_PIXEL_NOISE = 0.03
_TEXTURE_AMP = 0.05

_DOMAIN_VOCAB = {
    DOMAIN_A: (0, 3, 4, 5, 6, 7),
    DOMAIN_B: (0, 1, 2, 4, 5, 6),
}


@dataclass(frozen=True)
class SceneConfig:
    domain: str
    counts: Mapping[str, int]
    resolution: tuple = (64, 64)
    num_classes: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.domain not in _DOMAIN_CODE:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        needed = max(_DOMAIN_VOCAB[self.domain]) + 1
        if self.num_classes < needed:
            raise ValueError(
                f"domain {self.domain} object vocabulary needs {needed} classes, "
                f"got {self.num_classes}"
            )
        for split in self.counts:
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")


@dataclass
class Sample:
    id: str
    domain: str
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    mask: np.ndarray  # (H, W) int64 in [0, K)


@dataclass
class Dataset:
    num_classes: int
    class_names: tuple
    domains: List[str]
    splits: Dict[str, List[str]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    samples: Dict[str, Sample] = field(default_factory=dict)
    access_log: Counter = field(default_factory=Counter)

    def add(self, split: str, sample: Sample):
        if sample.id in self.samples:
            raise ValueError(f"duplicate sample id {sample.id}")
        self.samples[sample.id] = sample
        self.splits.setdefault(split, []).append(sample.id)

    def split(self, name: str, domain: Optional[str] = None) -> List[Sample]:
        """Samples of one split (optionally one domain); logs the access."""
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}")
        out = []
        for sid in self.splits[name]:
            s = self.samples[sid]
            if domain is None or s.domain == domain:
                out.append(s)
        self.access_log[name] += len(out)
        return out

    @property
    def resolution(self):
        for sid in self.samples:
            return self.samples[sid].image.shape[1:]
        return None

    def merge(self, other: "Dataset") -> "Dataset":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch between datasets")
        merged = Dataset(
            num_classes=self.num_classes,
            class_names=self.class_names,
            domains=sorted(set(self.domains) | set(other.domains)),
        )
        for src in (self, other):
            for split in SPLITS:
                for sid in src.splits.get(split, []):
                    merged.add(split, src.samples[sid])
        return merged


def _sample_rng(cfg: SceneConfig, split: str, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(
        entropy=cfg.seed,
        spawn_key=(_DOMAIN_CODE[cfg.domain], _SPLIT_CODE[split], index),
    )
    return np.random.Generator(np.random.PCG64(ss))


def _smooth_field(rng, h, w, cells=6):
    """Low-frequency noise in [-1, 1] via bilinear upsampling of a coarse grid."""
    g = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = g[y0][:, x0]
    b = g[y0][:, x0 + 1]
    c = g[y0 + 1][:, x0]
    d = g[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def _jittered_color(rng, cls) -> np.ndarray:
    return _CLASS_COLORS[cls] + rng.uniform(-_INSTANCE_JITTER, _INSTANCE_JITTER, size=3)


def _paint_region(canvas, mask, region, cls, color):
    mask[region] = cls
    for ch in range(3):
        canvas[ch][region] = color[ch]


def _rect_region(rng, h, w, min_frac=0.10, max_frac=0.26):
    rh = max(2, int(rng.uniform(min_frac, max_frac) * h))
    rw = max(2, int(rng.uniform(min_frac, max_frac) * w))
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    region = np.zeros((h, w), dtype=bool)
    region[y0 : y0 + rh, x0 : x0 + rw] = True
    return region


def _ellipse_region(rng, h, w, min_frac=0.07, max_frac=0.16):
    ry = max(2, int(rng.uniform(min_frac, max_frac) * h))
    rx = max(2, int(rng.uniform(min_frac, max_frac) * w))
    cy = int(rng.integers(ry, h - ry))
    cx = int(rng.integers(rx, w - rx))
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _render_urban(rng, h, w):
    mask = np.zeros((h, w), dtype=np.int64)
    canvas = np.empty((3, h, w))
    bg = _jittered_color(rng, 0)
    tex = _smooth_field(rng, h, w) * _TEXTURE_AMP
    for ch in range(3):
        canvas[ch] = bg[ch] + tex
    n_shapes = int(rng.integers(8, 15))
    object_classes = (3, 4, 5, 6, 7)
    for _ in range(n_shapes):
        cls = int(rng.choice(object_classes))
        if rng.uniform() < 0.5:
            region = _rect_region(rng, h, w)
        else:
            region = _ellipse_region(rng, h, w)
        _paint_region(canvas, mask, region, cls, _jittered_color(rng, cls))
    return canvas, mask


def _render_highway(rng, h, w):
    mask = np.zeros((h, w), dtype=np.int64)
    canvas = np.empty((3, h, w))
    sky_rows = int(rng.uniform(0.25, 0.40) * h)
    road_rows = int(rng.uniform(0.40, 0.52) * h)
    horizon_cls = 5 if rng.uniform() < 0.5 else 0
    sky = _jittered_color(rng, SKY_CLASS)
    mid = _jittered_color(rng, horizon_cls)
    road = _jittered_color(rng, ROAD_CLASS)
    tex = _smooth_field(rng, h, w) * _TEXTURE_AMP
    for ch in range(3):
        canvas[ch] = tex
        canvas[ch][:sky_rows] += sky[ch]
        canvas[ch][sky_rows : h - road_rows] += mid[ch]
        canvas[ch][h - road_rows :] += road[ch]
    mask[:sky_rows] = SKY_CLASS
    mask[sky_rows : h - road_rows] = horizon_cls
    mask[h - road_rows :] = ROAD_CLASS
    # lane markings: dashes on the road, thick enough to survive 2x pooling
    if rng.uniform() < 0.5:
        mh = max(3, h // 16)
        for _ in range(int(rng.integers(1, 4))):
            my = int(rng.integers(h - road_rows + 1, h - mh))
            mx = int(rng.integers(0, max(1, w - w // 4)))
            mw = int(rng.integers(w // 8, w // 4))
            region = np.zeros((h, w), dtype=bool)
            region[my : my + mh, mx : mx + mw] = True
            _paint_region(canvas, mask, region, 6, _jittered_color(rng, 6))
    # occasionally a vehicle sitting on the road band
    if rng.uniform() < 0.45:
        vh = max(3, int(rng.uniform(0.06, 0.14) * h))
        vw = max(3, int(rng.uniform(0.08, 0.18) * w))
        vy = int(rng.integers(h - road_rows, h - vh))
        vx = int(rng.integers(0, w - vw))
        region = np.zeros((h, w), dtype=bool)
        region[vy : vy + vh, vx : vx + vw] = True
        _paint_region(canvas, mask, region, 4, _jittered_color(rng, 4))
    return canvas, mask


def _render(cfg: SceneConfig, rng) -> Sample:
    h, w = cfg.resolution
    if cfg.domain == DOMAIN_A:
        canvas, mask = _render_urban(rng, h, w)
    else:
        canvas, mask = _render_highway(rng, h, w)
    canvas += rng.normal(0.0, _PIXEL_NOISE, size=canvas.shape)
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return canvas, mask


def generate(cfg: SceneConfig) -> Dataset:
    """Deterministically generate one domain's dataset from its config."""
    ds = Dataset(
        num_classes=cfg.num_classes,
        class_names=CLASS_NAMES[: cfg.num_classes],
        domains=[cfg.domain],
    )
    for split in SPLITS:
        count = int(cfg.counts.get(split, 0))
        for i in range(count):
            rng = _sample_rng(cfg, split, i)
            image, mask = _render(cfg, rng)
            sid = f"{cfg.domain}-{split}-{i:04d}"
            ds.add(split, Sample(id=sid, domain=cfg.domain, image=image, mask=mask))
    return ds


def generate_pair(counts: Mapping[str, int], resolution=(64, 64), num_classes=8,
                  seed=0) -> Dataset:
    """Both domains with the same per-domain counts, merged into one dataset."""
    a = generate(SceneConfig(DOMAIN_A, counts, resolution, num_classes, seed))
    b = generate(SceneConfig(DOMAIN_B, counts, resolution, num_classes, seed))
    return a.merge(b)


# ---------------------------------------------------------------------------
# container format

_IMG_MAGIC = "SEGIMG1"
_MSK_MAGIC = "SEGLBL1"


def _write_sample(dirpath: str, sample: Sample):
    c, h, w = sample.image.shape
    with open(os.path.join(dirpath, sample.id + ".img"), "wb") as fh:
        write_magic(fh, _IMG_MAGIC)
        write_u32(fh, h, w, c)
        write_f64_array(fh, sample.image.transpose(1, 2, 0))  # (H, W, C) row-major
    with open(os.path.join(dirpath, sample.id + ".msk"), "wb") as fh:
        write_magic(fh, _MSK_MAGIC)
        write_u32(fh, h, w)
        write_u16_array(fh, sample.mask)


def _read_sample(dirpath: str, sid: str, domain: str, num_classes: int) -> Sample:
    img_path = os.path.join(dirpath, sid + ".img")
    msk_path = os.path.join(dirpath, sid + ".msk")
    for p in (img_path, msk_path):
        if not os.path.exists(p):
            raise FormatError(f"manifest references missing file {p}")
    with open(img_path, "rb") as fh:
        read_magic(fh, _IMG_MAGIC, img_path)
        h, w, c = read_u32(fh, 3, img_path)
        image = read_f64_array(fh, (h, w, c), img_path).transpose(2, 0, 1)
    with open(msk_path, "rb") as fh:
        read_magic(fh, _MSK_MAGIC, msk_path)
        h2, w2 = read_u32(fh, 2, msk_path)
        if (h2, w2) != (h, w):
            raise FormatError(f"mask/image shape mismatch for {sid}")
        mask = read_u16_array(fh, (h2, w2), msk_path)
    if mask.size and mask.max() >= num_classes:
        raise FormatError(f"mask {msk_path} has class {mask.max()} >= {num_classes}")
    return Sample(id=sid, domain=domain, image=np.ascontiguousarray(image), mask=mask)


def save(ds: Dataset, dirpath: str):
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "classes": ds.num_classes,
        "class_names": list(ds.class_names),
        "domains": list(ds.domains),
        "splits": {s: list(ds.splits.get(s, [])) for s in SPLITS},
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    for split in SPLITS:
        for sid in ds.splits.get(split, []):
            _write_sample(dirpath, ds.samples[sid])


def load(dirpath: str) -> Dataset:
    man_path = os.path.join(dirpath, "manifest.json")
    if not os.path.exists(man_path):
        raise FormatError(f"no manifest.json in {dirpath}")
    with open(man_path) as fh:
        manifest = json.load(fh)
    for key in ("classes", "class_names", "domains", "splits"):
        if key not in manifest:
            raise FormatError(f"manifest missing key {key!r}")
    ds = Dataset(
        num_classes=int(manifest["classes"]),
        class_names=tuple(manifest["class_names"]),
        domains=list(manifest["domains"]),
    )
    seen = set()
    for split in SPLITS:
        for sid in manifest["splits"].get(split, []):
            if sid in seen:
                raise FormatError(f"sample id {sid} appears in two splits")
            seen.add(sid)
            domain = sid.split("-", 1)[0]
            ds.add(split, _read_sample(dirpath, sid, domain, ds.num_classes))
    return ds
