"""Procedural aerial-style scenes with scene- and instance-level variation.

Scenes are 64x64 RGB images in [0, 1] holding 1..8 annotated vehicles from three
categories (car, truck, bus), each with its own shape and color family, plus
unannotated background clutter (tree, building, traffic sign). Instance variation
comes from a per-object scale factor tied to altitude and from aspect/orientation
tied to the view. Scene variation is a transform chain applied after rendering:
altitude -> downscale blur, weather -> night dimming or haze.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_SIZE = 64
TARGET_CATEGORIES = ("car", "truck", "bus")
CLUTTER_CATEGORIES = ("tree", "building", "traffic sign")

STYLE_ATTRIBUTES = {
    "uavdt": {
        "weather": ("clean", "night", "foggy"),
        "view": ("side", "front", "bird"),
        "altitude": ("low", "medium", "high"),
    },
    "visdrone": {"time": ("day", "night")},
}

# length (px at scale 1), width/length ratio, base RGB
_SHAPES = {
    0: (16.0, 0.58, (0.85, 0.18, 0.12)),
    1: (20.0, 0.52, (0.92, 0.80, 0.12)),
    2: (24.0, 0.45, (0.15, 0.35, 0.90)),
}
_SCALE_RANGE = {"low": (1.3, 2.0), "medium": (0.85, 1.3), "high": (0.5, 0.9)}
_BLUR_FACTOR = {"low": None, "medium": 1.5, "high": 2.0}
NIGHT_GAIN = 0.3
FOG_ALPHA = 0.55


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3)
    boxes: np.ndarray  # (n, 4) normalized cx, cy, w, h
    labels: np.ndarray  # (n,)
    attributes: dict
    seed: int
    style: str = "uavdt"
    masks: list = field(default_factory=list, repr=False)

    def chw(self) -> np.ndarray:
        return self.image.transpose(2, 0, 1)


def _check_style(style: str) -> None:
    if style not in STYLE_ATTRIBUTES:
        raise ValueError(f"unknown style {style!r}; expected one of {sorted(STYLE_ATTRIBUTES)}")


def sample_attributes(rng: np.random.Generator, style: str, override: dict | None = None) -> dict:
    _check_style(style)
    grid = STYLE_ATTRIBUTES[style]
    attrs = {k: vals[int(rng.integers(len(vals)))] for k, vals in grid.items()}
    for k, v in (override or {}).items():
        if k not in grid or v not in grid[k]:
            raise ValueError(f"invalid {style} attribute {k}={v!r}")
        attrs[k] = v
    return attrs


def _smooth_noise(rng: np.random.Generator, cells: int, size: int = IMAGE_SIZE) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    return ndimage.zoom(coarse, size / (cells + 1), order=1)[:size, :size]


def _background(rng: np.random.Generator) -> np.ndarray:
    base = np.array([0.42, 0.40, 0.34]) + rng.uniform(-0.05, 0.05, 3)
    low = _smooth_noise(rng, 4) - 0.5
    img = base[None, None, :] + 0.12 * low[..., None] + rng.normal(0, 0.015, (IMAGE_SIZE, IMAGE_SIZE, 3))
    if rng.random() < 0.6:  # road band
        horizontal = rng.random() < 0.5
        pos = int(rng.integers(10, 54))
        width = int(rng.integers(6, 11))
        band = slice(max(pos - width // 2, 0), pos + width // 2)
        road = np.array([0.30, 0.30, 0.31])
        if horizontal:
            img[band, :, :] = road + rng.normal(0, 0.01, img[band, :, :].shape)
        else:
            img[:, band, :] = road + rng.normal(0, 0.01, img[:, band, :].shape)
    return img


def _object_extent(category: int, scale: float, view: str, rng: np.random.Generator):
    length, ratio, _ = _SHAPES[category]
    length *= scale * rng.uniform(0.92, 1.08)
    width = length * ratio * rng.uniform(0.92, 1.08)
    if view == "front":  # foreshortened along the driving axis
        length *= 0.6
    vertical = view == "bird" and rng.random() < 0.5
    w, h = (width, length) if vertical else (length, width)
    return max(w, 2.0), max(h, 2.0)


def _object_mask(category: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    inside = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if category == 0:  # car: ellipse inscribed in its box
        cx, cy = x0 + (w - 1) / 2, y0 + (h - 1) / 2
        rx, ry = max(w / 2, 0.5), max(h / 2, 0.5)
        ell = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        inside &= ell
    return inside


def _paint_object(img, rng, category: int, mask: np.ndarray, x0, y0, w, h) -> None:
    _, _, rgb = _SHAPES[category]
    color = np.clip(np.array(rgb) + rng.uniform(-0.08, 0.08, 3), 0, 1)
    img[mask] = color
    if category == 1:  # truck: dark cab at one end
        cab = np.zeros_like(mask)
        if w >= h:
            cab[y0:y0 + h, x0:x0 + max(1, w // 4)] = True
        else:
            cab[y0:y0 + max(1, h // 4), x0:x0 + w] = True
        img[mask & cab] = color * 0.45
    elif category == 2:  # bus: light roof stripe along the long axis
        stripe = np.zeros_like(mask)
        if w >= h:
            mid = y0 + h // 2
            stripe[mid:mid + 1, x0 + 1:x0 + w - 1] = True
        else:
            mid = x0 + w // 2
            stripe[y0 + 1:y0 + h - 1, mid:mid + 1] = True
        img[mask & stripe] = np.array([0.9, 0.92, 0.95])


def _paint_clutter(img, rng, occupied: np.ndarray) -> None:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    for _ in range(int(rng.integers(0, 4))):
        kind = int(rng.integers(len(CLUTTER_CATEGORIES)))
        cx, cy = rng.uniform(4, 60, 2)
        if kind == 0:  # tree: green disc
            r = rng.uniform(2.5, 5.0)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            color = np.array([0.15, 0.45, 0.15])
        elif kind == 1:  # building: grey block
            half = rng.uniform(4.0, 8.0)
            mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half * rng.uniform(0.7, 1.0))
            color = np.array([0.62, 0.62, 0.60])
        else:  # traffic sign: small white square
            mask = (np.abs(xx - cx) <= 1.5) & (np.abs(yy - cy) <= 1.5)
            color = np.array([0.95, 0.95, 0.95])
        mask &= ~occupied
        img[mask] = color + rng.uniform(-0.04, 0.04, 3)


def render_scene(seed: int, style: str, attributes: dict):
    """Render the untransformed scene: (image, boxes, labels, masks)."""
    _check_style(style)
    rng = np.random.default_rng([seed, 1])
    img = _background(rng)
    altitude = attributes.get("altitude", "low") if style == "uavdt" else None
    lo, hi = _SCALE_RANGE[altitude] if altitude else (0.6, 1.6)
    count = int(rng.integers(1, 9))
    occupied = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    boxes, labels, masks = [], [], []
    for _ in range(count):
        category = int(rng.integers(len(TARGET_CATEGORIES)))
        view = attributes.get("view") if style == "uavdt" else ("side", "front", "bird")[int(rng.integers(3))]
        w, h = _object_extent(category, rng.uniform(lo, hi), view, rng)
        w, h = int(round(min(w, 36))), int(round(min(h, 36)))
        for _attempt in range(30):
            x0 = int(rng.integers(0, IMAGE_SIZE - w + 1))
            y0 = int(rng.integers(0, IMAGE_SIZE - h + 1))
            if not occupied[max(y0 - 1, 0):y0 + h + 1, max(x0 - 1, 0):x0 + w + 1].any():
                break
        else:
            continue
        mask = _object_mask(category, x0, y0, w, h)
        if not mask.any():
            continue
        _paint_object(img, rng, category, mask, x0, y0, w, h)
        occupied[max(y0 - 1, 0):y0 + h + 1, max(x0 - 1, 0):x0 + w + 1] = True
        ys, xs = np.nonzero(mask)
        bx0, bx1, by0, by1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
        boxes.append([(bx0 + bx1) / 2 / IMAGE_SIZE, (by0 + by1) / 2 / IMAGE_SIZE,
                      (bx1 - bx0) / IMAGE_SIZE, (by1 - by0) / IMAGE_SIZE])
        labels.append(category)
        masks.append(mask)
    _paint_clutter(img, rng, occupied)
    return np.clip(img, 0.0, 1.0), np.array(boxes).reshape(-1, 4), np.array(labels, dtype=np.int64), masks


def _downscale_blur(img: np.ndarray, factor: float) -> np.ndarray:
    small = ndimage.zoom(img, (1 / factor, 1 / factor, 1), order=1)
    up = ndimage.zoom(small, (IMAGE_SIZE / small.shape[0], IMAGE_SIZE / small.shape[1], 1), order=1)
    return up[:IMAGE_SIZE, :IMAGE_SIZE]


def apply_scene_transform(img: np.ndarray, seed: int, style: str, attributes: dict) -> np.ndarray:
    """Scene-level variation; a pure function of (image, seed, attributes)."""
    rng = np.random.default_rng([seed, 2])
    out = img
    if style == "uavdt":
        factor = _BLUR_FACTOR[attributes["altitude"]]
        if factor:
            out = _downscale_blur(out, factor)
        weather = attributes["weather"]
    else:
        weather = "night" if attributes["time"] == "night" else "clean"
    if weather == "night":
        out = out * NIGHT_GAIN + rng.normal(0, 0.02, out.shape)
    elif weather == "foggy":
        haze = 0.65 + 0.25 * _smooth_noise(rng, 3)
        out = (1 - FOG_ALPHA) * out + FOG_ALPHA * haze[..., None]
    return np.clip(out, 0.0, 1.0) if out is not img else img


def generate_sample(seed: int, style: str = "uavdt", attribute_override: dict | None = None) -> SceneSample:
    _check_style(style)
    attrs = sample_attributes(np.random.default_rng([seed, 0]), style, attribute_override)
    clean, boxes, labels, masks = render_scene(seed, style, attrs)
    image = apply_scene_transform(clean, seed, style, attrs)
    return SceneSample(image, boxes, labels, attrs, seed, style, masks)


def rms_contrast(image: np.ndarray) -> float:
    return float(image.mean(axis=-1).std())


def _stratified(rng: np.random.Generator, size: int, probs: dict) -> list:
    values = list(probs)
    p = np.array([probs[v] for v in values], dtype=np.float64)
    if np.any(p < 0) or p.sum() <= 0:
        raise ValueError(f"invalid attribute distribution {probs}")
    exact = p / p.sum() * size
    counts = np.floor(exact).astype(int)
    for k in np.argsort(-(exact - counts), kind="stable")[: size - counts.sum()]:
        counts[k] += 1
    pool = [v for v, c in zip(values, counts) for _ in range(c)]
    return [pool[k] for k in rng.permutation(size)]


def generate_split(size: int, seed: int, style: str = "uavdt", distribution: dict | None = None):
    """Stratified split: each attribute's value counts match ``distribution`` exactly.

    ``distribution`` maps attribute -> {value: weight}; attributes left out are uniform.
    Returns (samples, manifest).
    """
    _check_style(style)
    if size < 1:
        raise ValueError("split size must be >= 1")
    grid = STYLE_ATTRIBUTES[style]
    distribution = distribution or {}
    rng = np.random.default_rng([seed, 99])
    columns = {}
    for attr, values in grid.items():
        probs = distribution.get(attr, {v: 1.0 for v in values})
        unknown = set(probs) - set(values)
        if unknown:
            raise ValueError(f"unknown {attr} values {sorted(unknown)}")
        columns[attr] = _stratified(rng, size, probs)
    seeds = rng.integers(0, 2**31 - 1, size=size)
    samples = []
    for k in range(size):
        override = {attr: columns[attr][k] for attr in grid}
        samples.append(generate_sample(int(seeds[k]), style, override))
    return samples, build_manifest(samples, style, seed)


def build_manifest(samples: list[SceneSample], style: str, seed: int) -> dict:
    grid = STYLE_ATTRIBUTES[style]
    subsets = {f"{attr}={v}": [] for attr, values in grid.items() for v in values}
    records = []
    for k, s in enumerate(samples):
        for attr in grid:
            subsets[f"{attr}={s.attributes[attr]}"].append(k)
        records.append({
            "id": k,
            "seed": int(s.seed),
            "attributes": dict(s.attributes),
            "boxes": [[*map(float, b), int(c)] for b, c in zip(s.boxes, s.labels)],
        })
    return {"format": "langdet.manifest/1", "style": style, "seed": int(seed),
            "size": len(samples), "samples": records, "subsets": subsets}


def samples_from_manifest(manifest: dict) -> list[SceneSample]:
    """Regenerate samples from their recorded seeds and attributes."""
    style = manifest["style"]
    return [generate_sample(r["seed"], style, r["attributes"]) for r in manifest["samples"]]


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    pixels = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte follows maxval; pixel bytes may themselves look like whitespace
    header = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if header is None:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(v) for v in header.groups())
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=header.end())
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_split(samples: list[SceneSample], manifest: dict, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        write_ppm(out / "images" / f"{k:05d}.ppm", s.image)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_uavdt(root):
    """Attachment point for the real UAVDT/VisDrone data.

    A loader would map each frame to a ``SceneSample`` (boxes normalized to cx, cy, w, h;
    scene attributes taken from the dataset's weather/altitude/view annotations).
    """
    raise NotImplementedError(f"real dataset loading is not bundled (requested {root})")
