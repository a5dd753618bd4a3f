"""Synthetic glyph benchmark with a controllable, label-preserving domain shift.

Each class is a parametric glyph: a shape family combined with a stroke
pattern. The source domain renders glyphs upright in a warm hue on a plain dark
background. The target domain draws the same glyphs under rotation, hue shift,
scale jitter and a textured background. None of these attributes depend on the
class, so the label of every sample is preserved.

In ``mode="fine"`` classes come in pairs that share a glyph and differ only by
a small dot placed next to it.

On-disk layout of one domain (``save``/``load``)::

    DIR/manifest.json   UTF-8 JSON: version, shape [N,3,H,W], dtype "f32le",
                        label_count, label_dtype "u16le", label_base 1,
                        domain_tag, generator {...}
    DIR/images.bin      row-major little-endian float32
    DIR/labels.bin      little-endian uint16, class index + 1
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError, FormatError

FORMAT_VERSION = 1
IMAGE_SIZE = 32
_SUPERSAMPLE = 2

SHIFT_PRESETS: Dict[str, Dict[str, Any]] = {
    "none": {"rotation_deg": 0.0, "hue_shift": 0.0, "texture": False, "scale_jitter": 0.0},
    "mild": {"rotation_deg": 20.0, "hue_shift": 0.04, "texture": False, "scale_jitter": 0.1},
    "default": {"rotation_deg": 30.0, "hue_shift": 0.15, "texture": True, "scale_jitter": 0.15},
    "strong": {"rotation_deg": 40.0, "hue_shift": 0.15, "texture": True, "scale_jitter": 0.2},
}
_SHIFT_KEYS = {"rotation_deg", "hue_shift", "texture", "scale_jitter"}

FAMILIES = ("disk", "square", "triangle", "plus", "tee", "ell", "aitch", "crescent", "bars", "half_disk")
PATTERNS = ("filled", "outline", "striped", "holed")


# -- dataset container -------------------------------------------------------------
@dataclass
class DomainDataset:
    """Images plus labels for one domain.

    Target-domain labels are reachable only through :meth:`evaluation_labels`;
    the ``labels`` property refuses to serve them so that adaptation code
    cannot read them by accident.
    """

    images: np.ndarray  # N x 3 x H x W, float64 in [0, 1]
    _labels: np.ndarray = field(repr=False)  # 0-based class indices
    domain_tag: str
    manifest: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.domain_tag not in ("source", "target"):
            raise DataError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")
        if len(self.images) != len(self._labels):
            raise DataError(f"{len(self.images)} images but {len(self._labels)} labels")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.manifest.get("label_count", int(self._labels.max()) + 1))

    @property
    def sample_ids(self) -> np.ndarray:
        return np.arange(len(self.images))

    @property
    def labels(self) -> np.ndarray:
        if self.domain_tag == "target":
            raise DataError("target labels are evaluation-only; use evaluation_labels()")
        return self._labels.copy()

    def evaluation_labels(self) -> np.ndarray:
        return self._labels.copy()

    def subset(self, index: np.ndarray) -> "DomainDataset":
        return DomainDataset(self.images[index], self._labels[index], self.domain_tag, dict(self.manifest))

    def equals(self, other: "DomainDataset") -> bool:
        return (
            self.domain_tag == other.domain_tag
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self._labels, other._labels)
            and self.manifest == other.manifest
        )


# -- shift specification ----------------------------------------------------------
def resolve_shift(shift_spec: Union[str, Dict[str, Any], None]) -> Dict[str, Any]:
    """Turn a preset name, JSON string or dict into a complete shift dict."""
    if shift_spec is None:
        shift_spec = "none"
    if isinstance(shift_spec, str):
        text = shift_spec.strip()
        if text.startswith("{"):
            try:
                shift_spec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"shift spec is not valid JSON: {exc}") from exc
        elif text in SHIFT_PRESETS:
            return dict(SHIFT_PRESETS[text])
        else:
            raise ConfigError(f"unknown shift preset {text!r}; choose from {sorted(SHIFT_PRESETS)}")
    if not isinstance(shift_spec, dict):
        raise ConfigError(f"shift spec must be a preset name or an object, got {type(shift_spec).__name__}")
    spec = dict(SHIFT_PRESETS[shift_spec.get("preset", "none")]) if "preset" in shift_spec else dict(SHIFT_PRESETS["none"])
    unknown = set(shift_spec) - _SHIFT_KEYS - {"preset"}
    if unknown:
        raise ConfigError(f"unknown shift keys: {sorted(unknown)}")
    spec.update({k: v for k, v in shift_spec.items() if k != "preset"})
    if not 0 <= float(spec["rotation_deg"]) <= 180:
        raise ConfigError("rotation_deg must lie in [0, 180]")
    if not 0 <= float(spec["scale_jitter"]) < 0.5:
        raise ConfigError("scale_jitter must lie in [0, 0.5)")
    spec["rotation_deg"] = float(spec["rotation_deg"])
    spec["hue_shift"] = float(spec["hue_shift"]) % 1.0
    spec["scale_jitter"] = float(spec["scale_jitter"])
    spec["texture"] = bool(spec["texture"])
    return spec


# -- glyph rendering --------------------------------------------------------------------
def _family_mask(family: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Boolean mask of a glyph family in glyph coordinates (roughly |x|,|y| < 0.6)."""
    r = np.hypot(x, y)
    if family == "disk":
        return r < 0.55
    if family == "square":
        return np.maximum(np.abs(x), np.abs(y)) < 0.47
    if family == "triangle":
        # apex up (negative y is up in image rows)
        return (y < 0.45) & (y > -0.55 + 1.6 * np.abs(x))
    if family == "plus":
        return ((np.abs(x) < 0.17) & (np.abs(y) < 0.56)) | ((np.abs(y) < 0.17) & (np.abs(x) < 0.56))
    if family == "tee":
        return ((np.abs(x) < 0.56) & (y > -0.56) & (y < -0.24)) | ((np.abs(x) < 0.16) & (y > -0.56) & (y < 0.56))
    if family == "ell":
        return ((x > -0.45) & (x < -0.13) & (np.abs(y) < 0.56)) | ((x > -0.45) & (x < 0.45) & (y > 0.24) & (y < 0.56))
    if family == "aitch":
        legs = (np.abs(np.abs(x) - 0.36) < 0.15) & (np.abs(y) < 0.56)
        return legs | ((np.abs(x) < 0.4) & (np.abs(y) < 0.14))
    if family == "crescent":
        return (r < 0.56) & (np.hypot(x - 0.28, y) > 0.42)
    if family == "bars":
        return (np.abs(x) < 0.56) & (np.abs(np.abs(y) - 0.3) < 0.14)
    if family == "half_disk":
        return (r < 0.58) & (y > -0.1)
    raise ConfigError(f"unknown glyph family {family!r}")


def _glyph_mask(cls_spec: Tuple[str, str, bool], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    family, pattern, dot = cls_spec
    mask = _family_mask(family, x, y)
    if pattern == "outline":
        mask = mask & ~_family_mask(family, x / 0.6, y / 0.6)
    elif pattern == "striped":
        mask = mask & (np.cos(np.pi * (x + y) / 0.18) > -0.2)
    elif pattern == "holed":
        mask = mask & (np.hypot(x, y) > 0.17)
    if dot:
        mask = mask | (np.hypot(x - 0.62, y + 0.62) < 0.14)
    return mask


def class_specs(K: int, mode: str = "standard") -> list:
    """Glyph spec ``(family, pattern, has_dot)`` for each class index."""
    if mode == "standard":
        capacity = len(FAMILIES) * len(PATTERNS)
        if K > capacity:
            raise ConfigError(f"standard mode supports at most {capacity} classes, got K={K}")
        return [(FAMILIES[k % len(FAMILIES)], PATTERNS[k // len(FAMILIES)], False) for k in range(K)]
    if mode == "fine":
        capacity = 2 * len(FAMILIES) * len(PATTERNS)
        if K > capacity:
            raise ConfigError(f"fine mode supports at most {capacity} classes, got K={K}")
        specs = []
        for k in range(K):
            base = k // 2
            specs.append((FAMILIES[base % len(FAMILIES)], PATTERNS[base // len(FAMILIES)], bool(k % 2)))
        return specs
    raise ConfigError(f"mode must be 'standard' or 'fine', got {mode!r}")


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _render(
    spec: Tuple[str, str, bool],
    rng: np.random.Generator,
    shift: Dict[str, Any],
    base_scale: float,
    image_size: int = IMAGE_SIZE,
) -> np.ndarray:
    size = image_size * _SUPERSAMPLE
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    gy, gx = np.meshgrid(coords, coords, indexing="ij")

    angle = np.deg2rad(rng.uniform(-shift["rotation_deg"], shift["rotation_deg"]))
    scale = base_scale * rng.uniform(1.0 - shift["scale_jitter"], 1.0 + shift["scale_jitter"])
    tx, ty = rng.uniform(-0.08, 0.08, 2)
    cos, sin = np.cos(angle), np.sin(angle)
    px, py = (gx - tx) / scale, (gy - ty) / scale
    x = cos * px + sin * py
    y = -sin * px + cos * py
    coverage = _glyph_mask(spec, x, y).astype(np.float64)
    coverage = coverage.reshape(image_size, _SUPERSAMPLE, image_size, _SUPERSAMPLE).mean(axis=(1, 3))

    hue = rng.uniform(0.0, 0.12) + shift["hue_shift"]
    fg = _hsv(hue, rng.uniform(0.7, 0.9), rng.uniform(0.85, 1.0))

    cy, cx = np.meshgrid(np.linspace(-1, 1, image_size), np.linspace(-1, 1, image_size), indexing="ij")
    if shift["texture"]:
        bg_a = _hsv(hue + 0.5 + rng.uniform(-0.1, 0.1), 0.4, 0.28)
        bg_b = _hsv(hue + rng.uniform(0.2, 0.3), 0.4, 0.12)
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3.0, 5.0) * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        weave = np.sin(freq * (np.cos(theta) * cx + np.sin(theta) * cy) + phase)
        weave = weave * np.sin(freq * (-np.sin(theta) * cx + np.cos(theta) * cy))
        t = 0.5 + 0.5 * weave
        bg = bg_a[:, None, None] * t + bg_b[:, None, None] * (1 - t)
    else:
        tone = rng.uniform(0.1, 0.2)
        theta = rng.uniform(0, 2 * np.pi)
        ramp = 0.05 * (np.cos(theta) * cx + np.sin(theta) * cy)
        bg = np.broadcast_to(tone + ramp, (3, image_size, image_size))

    image = bg * (1 - coverage) + fg[:, None, None] * coverage
    image = image + rng.normal(0.0, 0.03, image.shape)
    return np.clip(image, 0.0, 1.0)


def _render_domain(
    K: int,
    per_class: int,
    shift: Dict[str, Any],
    rng: np.random.Generator,
    mode: str,
    image_size: int = IMAGE_SIZE,
) -> Tuple[np.ndarray, np.ndarray]:
    specs = class_specs(K, mode)
    base_scale = 0.8 if mode == "fine" else 0.9
    labels = np.repeat(np.arange(K), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.stack([_render(specs[k], rng, shift, base_scale, image_size) for k in labels])
    # float32 quantisation makes save/load an exact round trip
    return images.astype(np.float32).astype(np.float64), labels


def generate(
    K: int,
    per_class: int,
    shift_spec: Union[str, Dict[str, Any], None] = "default",
    seed: int = 0,
    mode: str = "standard",
    min_per_class: int = 8,
    image_size: int = IMAGE_SIZE,
) -> Tuple[DomainDataset, DomainDataset]:
    """Render a (source, target) pair over the same ``K`` classes.

    ``min_per_class`` is the neighbour-retrieval floor ``max(2, 2*M)``; the
    default matches ``M = 4``.

    Raises:
        ConfigError: invalid class count, sample count, mode or shift spec.
    """
    if K < 2:
        raise ConfigError(f"K must be >= 2, got {K}")
    if per_class < max(2, min_per_class):
        raise ConfigError(f"per_class must be >= {max(2, min_per_class)}, got {per_class}")
    if image_size < 4:
        raise ConfigError(f"image_size must be >= 4, got {image_size}")
    shift = resolve_shift(shift_spec)
    class_specs(K, mode)
    params = {"K": K, "per_class": per_class, "shift": shift, "seed": seed, "mode": mode, "image_size": image_size}
    source_shift = dict(SHIFT_PRESETS["none"])
    out = []
    for index, (tag, spec) in enumerate((("source", source_shift), ("target", shift))):
        rng = np.random.default_rng([seed, index])
        images, labels = _render_domain(K, per_class, spec, rng, mode, image_size)
        manifest = _manifest(images.shape, K, tag, params)
        out.append(DomainDataset(images, labels, tag, manifest))
    return out[0], out[1]


def _manifest(shape, K: int, tag: str, params: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "shape": [int(s) for s in shape],
        "dtype": "f32le",
        "label_dtype": "u16le",
        "label_base": 1,
        "label_count": int(K),
        "domain_tag": tag,
        "generator": params,
    }


# -- persistence -------------------------------------------------------------------------
def save(ds: DomainDataset, directory: Union[str, Path]) -> Path:
    """Write ``manifest.json``, ``images.bin`` and ``labels.bin`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = dict(ds.manifest)
    manifest.update(
        {
            "version": manifest.get("version", FORMAT_VERSION),
            "shape": [int(s) for s in ds.images.shape],
            "dtype": "f32le",
            "label_dtype": "u16le",
            "label_base": 1,
            "label_count": ds.num_classes,
            "domain_tag": ds.domain_tag,
        }
    )
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (directory / "images.bin").write_bytes(ds.images.astype("<f4").tobytes(order="C"))
    (directory / "labels.bin").write_bytes((ds._labels + 1).astype("<u2").tobytes())
    return directory


def _read_blob(path: Path, expected: int) -> bytes:
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: missing") from exc
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)} (mismatch at offset {min(len(blob), expected)})")
    return blob


def load(directory: Union[str, Path]) -> DomainDataset:
    """Read a dataset directory written by :func:`save`.

    Unknown manifest keys are kept as-is.

    Raises:
        FormatError: malformed manifest or blob size mismatch.
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"{directory}: manifest.json not found") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{directory / 'manifest.json'}: not valid UTF-8 JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise FormatError("manifest.json must hold a JSON object")
    for key in ("version", "shape", "dtype", "label_count", "domain_tag"):
        if key not in manifest:
            raise FormatError(f"manifest.json: missing key {key!r}")
    if manifest["dtype"] != "f32le" or manifest.get("label_dtype", "u16le") != "u16le":
        raise FormatError(f"unsupported dtype {manifest['dtype']!r}/{manifest.get('label_dtype')!r}")
    shape = manifest["shape"]
    if not (isinstance(shape, list) and len(shape) == 4 and all(isinstance(s, int) and s > 0 for s in shape) and shape[1] == 3):
        raise FormatError(f"manifest.json: shape must be [N, 3, H, W] of positive ints, got {shape}")
    n = shape[0]
    image_blob = _read_blob(directory / "images.bin", 4 * int(np.prod(shape)))
    label_blob = _read_blob(directory / "labels.bin", 2 * n)
    images = np.frombuffer(image_blob, dtype="<f4").reshape(shape).astype(np.float64)
    base = int(manifest.get("label_base", 1))
    labels = np.frombuffer(label_blob, dtype="<u2").astype(np.int64) - base
    K = int(manifest["label_count"])
    if n and (labels.min() < 0 or labels.max() >= K):
        raise FormatError(f"labels.bin: labels outside [{base}, {K - 1 + base}]")
    try:
        return DomainDataset(images, labels, manifest["domain_tag"], manifest)
    except DataError as exc:
        raise FormatError(str(exc)) from exc


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class seeded split into (train indices, test indices), each sorted."""
    rng = np.random.default_rng([seed, 7])
    train, test = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(test_fraction * len(idx))))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))

