"""Datasets: manifests, synthetic two-factor faces, augmentation, pairing, folds."""

from __future__ import annotations

import colorsys
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from skimage.transform import resize, rotate

from ._validation import ValidationError

log = logging.getLogger(__name__)

BASIC_EXPRESSIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")
CROP_POSITIONS = ("center", "top_left", "top_right", "bottom_left", "bottom_right")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
MANIFEST_VERSION = 1


@dataclass
class LabeledImage:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    expression: int
    identity: int


class PairSample(NamedTuple):
    """Record indices into a manifest for one (source, target) training pair."""

    source: int
    target: int
    same_identity: bool


@dataclass
class AugmentationConfig:
    crop_size: int = 56
    crop_positions: List[str] = field(default_factory=lambda: list(CROP_POSITIONS))
    rotation_angles_deg: List[float] = field(default_factory=lambda: [-6.0, -3.0, 3.0, 6.0])
    horizontal_flip: bool = True
    # 0 keeps every variant; otherwise a fixed, evenly spaced subset per image
    max_variants: int = 0

    def __post_init__(self):
        if self.crop_size < 1:
            raise ValidationError("crop_size must be positive")
        bad = [p for p in self.crop_positions if p not in CROP_POSITIONS]
        if bad or not self.crop_positions:
            raise ValidationError(f"crop_positions must be a non-empty subset of {CROP_POSITIONS}")
        if not all(np.isfinite(a) for a in self.rotation_angles_deg):
            raise ValidationError("rotation angles must be finite")
        if self.max_variants < 0:
            raise ValidationError("max_variants must be >= 0")

    @property
    def n_variants(self) -> int:
        return (len(self.crop_positions) * (1 + len(self.rotation_angles_deg))
                * (2 if self.horizontal_flip else 1))

    @classmethod
    def identity(cls, crop_size: int) -> "AugmentationConfig":
        """Center crop only: no rotation, no flip."""
        return cls(crop_size=crop_size, crop_positions=["center"],
                   rotation_angles_deg=[], horizontal_flip=False)

    def to_dict(self):
        return asdict(self)


@dataclass
class DatasetManifest:
    records: List[dict]
    n_expressions: int
    n_identities: int
    image_size: int
    expression_names: List[str] = field(default_factory=list)
    identity_names: List[str] = field(default_factory=list)
    folds: Optional[List[int]] = None  # fold index per identity
    root: Optional[str] = None  # base directory for relative record paths
    generator: Optional[dict] = None  # synth parameters when records are keys
    skipped: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.folds is not None:
            if len(self.folds) != self.n_identities:
                raise ValidationError("folds must assign exactly one fold to every identity")

    def __len__(self):
        return len(self.records)

    @property
    def expressions(self) -> np.ndarray:
        return np.array([r["expression"] for r in self.records], dtype=np.int64)

    @property
    def identities(self) -> np.ndarray:
        return np.array([r["identity"] for r in self.records], dtype=np.int64)

    @property
    def n_folds(self) -> int:
        return 0 if self.folds is None else max(self.folds) + 1

    def fold_identities(self, fold: int) -> set:
        if self.folds is None:
            raise ValidationError("manifest has no fold assignment; run make_folds first")
        return {i for i, f in enumerate(self.folds) if f == fold}

    def record_indices(self, folds: Optional[Sequence[int]] = None) -> np.ndarray:
        """Indices of records whose identity belongs to one of ``folds`` (all if None)."""
        if folds is None:
            return np.arange(len(self.records))
        if self.folds is None:
            raise ValidationError("manifest has no fold assignment; run make_folds first")
        allowed = set(int(f) for f in folds)
        ids = self.identities
        fold_of = np.asarray(self.folds)
        return np.flatnonzero(np.isin(fold_of[ids], list(allowed)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = MANIFEST_VERSION
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        version = d.pop("version", None)
        if version != MANIFEST_VERSION:
            raise ValidationError(f"manifest version {version} unsupported (expected {MANIFEST_VERSION})")
        m = cls(**d)
        if m.root is None:
            m.root = str(Path(path).resolve().parent)
        return m


# ---------------------------------------------------------------------------
# Synthetic two-factor faces

# expression factors: mouth curvature (+ = smile), mouth opening, brow tilt
# (+ = inner ends raised), brow raise, eye openness
_EXPRESSION_FACTORS = np.array([
    # curve  open  tilt  raise  eye
    [-0.35, 0.00, -1.00, -0.6, 0.55],  # anger
    [-0.70, 0.15, -0.50, -0.3, 0.40],  # disgust
    [-0.20, 0.55, 0.80, 0.6, 1.20],  # fear
    [1.00, 0.20, 0.00, 0.0, 0.70],  # happiness
    [-1.00, 0.00, 1.00, 0.2, 0.60],  # sadness
    [0.00, 1.00, 0.20, 1.0, 1.35],  # surprise
])

_NEUTRAL = np.array([0.0, 0.0, 0.0, 0.0, 0.8])
_BACKGROUND = np.array([0.92, 0.92, 0.92])
_CHIN_PATCH = np.array([0.80, 0.74, 0.70])
_FEATURE_DARK = np.array([0.15, 0.10, 0.10])
_MOUTH = np.array([0.55, 0.12, 0.15])
_SUPERSAMPLE = 4

# lower-face patch holding the mouth; identical for every identity
CHIN_CENTER = (0.0, 0.45)
CHIN_RADII = (0.35, 0.25)
FACE_HALF_HEIGHT = 0.85


def identity_factors(n_identities: int, seed) -> np.ndarray:
    """Per-identity ``[face half-width, hue, eye spacing]`` drawn from ``seed``."""
    rng = np.random.default_rng([int(seed), 1])
    return np.stack([
        rng.uniform(0.52, 0.72, n_identities),
        rng.uniform(0.0, 1.0, n_identities),
        rng.uniform(0.22, 0.36, n_identities),
    ], axis=1)


def expression_factors(n_expressions: int) -> np.ndarray:
    return _EXPRESSION_FACTORS[:n_expressions].copy()


def expression_intensities(n_identities: int, n_expressions: int, seed) -> np.ndarray:
    """Per-record intensity in [0.45, 1], drawn independently of identity."""
    rng = np.random.default_rng([int(seed), 2])
    return rng.uniform(0.45, 1.0, (n_identities, n_expressions))


def scale_expression(factors: Sequence[float], intensity: float) -> np.ndarray:
    """Move expression factors towards the neutral face by ``intensity`` (1 = full)."""
    f = np.asarray(factors, dtype=float)
    return _NEUTRAL + intensity * (f - _NEUTRAL)


def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def render_face(id_factors: Sequence[float], expr_factors: Sequence[float],
                image_size: int) -> np.ndarray:
    """Render one face on a ``[-1, 1]^2`` canvas (y grows downwards)."""
    half_width, hue, eye_dx = id_factors
    curve, opening, tilt, raise_, eye_open = expr_factors
    n = image_size * _SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    x, y = np.meshgrid(c, c)
    img = np.empty((n, n, 3))
    img[:] = _BACKGROUND

    skin = np.array(colorsys.hsv_to_rgb(hue, 0.45, 0.85))
    face = (x / half_width) ** 2 + (y / FACE_HALF_HEIGHT) ** 2 <= 1.0
    img[face] = skin
    outline = np.abs(np.hypot(x / half_width, y / FACE_HALF_HEIGHT) - 1.0) < 0.03
    img[outline] = skin * 0.55

    chin = ((x - CHIN_CENTER[0]) / CHIN_RADII[0]) ** 2 + ((y - CHIN_CENTER[1]) / CHIN_RADII[1]) ** 2 <= 1.0
    img[chin] = _CHIN_PATCH

    # mouth: band between the upper lip curve and the (possibly opened) lower lip
    mouth_y, mouth_w = CHIN_CENTER[1], 0.2
    u = np.clip(x / mouth_w, -1.0, 1.0)
    upper = mouth_y - 0.1 * curve * u ** 2
    lower = upper + 0.12 * opening * (1.0 - u ** 2)
    mouth = (np.abs(x) <= mouth_w) & (y >= upper - 0.022) & (y <= lower + 0.022)
    img[mouth] = _MOUTH

    eye_y = -0.12
    for side in (-1.0, 1.0):
        ex = side * eye_dx
        eye_h = 0.05 * eye_open
        eye = ((x - ex) / 0.09) ** 2 + ((y - eye_y) / eye_h) ** 2 <= 1.0
        img[eye] = 1.0
        pupil = eye & ((x - ex) ** 2 + (y - eye_y) ** 2 <= 0.035 ** 2)
        img[pupil] = _FEATURE_DARK
        # brow: inner end (towards the nose) moves up with positive tilt
        brow_y = eye_y - 0.13 - 0.05 * raise_
        inner_x, outer_x = ex - side * 0.09, ex + side * 0.09
        d = _segment_distance(x, y, inner_x, brow_y - 0.045 * tilt, outer_x, brow_y + 0.045 * tilt)
        img[d <= 0.022] = _FEATURE_DARK

    img = img.reshape(image_size, _SUPERSAMPLE, image_size, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    return img.astype(np.float32)


def chin_mask(image_size: int) -> np.ndarray:
    """Boolean mask of pixels fully inside the identity-independent mouth patch."""
    c = (np.arange(image_size) + 0.5) / image_size * 2.0 - 1.0
    x, y = np.meshgrid(c, c)
    margin = 2.5 / image_size
    rx, ry = CHIN_RADII[0] - margin, CHIN_RADII[1] - margin
    return ((x - CHIN_CENTER[0]) / rx) ** 2 + ((y - CHIN_CENTER[1]) / ry) ** 2 <= 1.0


def synth_generate(n_identities: int = 20, n_expressions: int = 6, image_size: int = 64,
                   seed: int = 0) -> DatasetManifest:
    """One record per (identity, expression) pair, rendered on demand from ``seed``."""
    if n_identities < 2:
        raise ValidationError("need at least 2 identities")
    if not 2 <= n_expressions <= len(_EXPRESSION_FACTORS):
        raise ValidationError(f"n_expressions must lie in [2, {len(_EXPRESSION_FACTORS)}]")
    records = [{"key": f"synth/{i}/{e}", "expression": e, "identity": i}
               for i in range(n_identities) for e in range(n_expressions)]
    return DatasetManifest(
        records=records,
        n_expressions=n_expressions,
        n_identities=n_identities,
        image_size=image_size,
        expression_names=list(BASIC_EXPRESSIONS[:n_expressions]),
        identity_names=[f"id{i:03d}" for i in range(n_identities)],
        generator={"kind": "synth", "n_identities": n_identities,
                   "n_expressions": n_expressions, "seed": int(seed)},
    )


# ---------------------------------------------------------------------------
# Image I/O


def read_image(path, image_size: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if image_size is not None and arr.shape[:2] != (image_size, image_size):
        arr = resize(arr, (image_size, image_size, 3), order=1, anti_aliasing=True)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_images(manifest: DatasetManifest, indices: Optional[Sequence[int]] = None,
                image_size: Optional[int] = None) -> np.ndarray:
    """Materialise records as a float32 ``[n, S, S, 3]`` array."""
    size = image_size or manifest.image_size
    idx = range(len(manifest.records)) if indices is None else indices
    out = np.empty((len(idx), size, size, 3), dtype=np.float32)
    gen = manifest.generator
    if gen is not None and gen.get("kind") == "synth":
        ids = identity_factors(gen["n_identities"], gen["seed"])
        exprs = expression_factors(gen["n_expressions"])
        intensity = expression_intensities(gen["n_identities"], gen["n_expressions"], gen["seed"])
    for j, i in enumerate(idx):
        rec = manifest.records[i]
        if "key" in rec:
            i_, e_ = rec["identity"], rec["expression"]
            out[j] = render_face(ids[i_], scale_expression(exprs[e_], intensity[i_, e_]), size)
        else:
            path = Path(rec["path"])
            if not path.is_absolute() and manifest.root:
                path = Path(manifest.root) / path
            out[j] = read_image(path, size)
    return out


# ---------------------------------------------------------------------------
# Augmentation


def _crop(image: np.ndarray, size: int, position: str) -> np.ndarray:
    h, w = image.shape[:2]
    top = {"center": (h - size) // 2, "top_left": 0, "top_right": 0,
           "bottom_left": h - size, "bottom_right": h - size}[position]
    left = {"center": (w - size) // 2, "top_left": 0, "bottom_left": 0,
            "top_right": w - size, "bottom_right": w - size}[position]
    return image[top:top + size, left:left + size]


def augment(image: LabeledImage, cfg: AugmentationConfig,
            image_size: Optional[int] = None) -> List[LabeledImage]:
    """Crops x (original + rotations) x (original + flip), in that nesting order.

    Rotation is bilinear with edge replication. Outputs are resized to
    ``image_size`` (default: the input side).
    """
    img = np.asarray(image.image, dtype=np.float32)
    h, w = img.shape[:2]
    if cfg.crop_size > min(h, w):
        raise ValidationError(f"image {h}x{w} is smaller than crop_size {cfg.crop_size}")
    size = image_size or h
    out = []
    for position in cfg.crop_positions:
        crop = _crop(img, cfg.crop_size, position)
        for angle in [None] + list(cfg.rotation_angles_deg):
            rot = crop if angle is None else rotate(crop, angle, order=1, mode="edge")
            if rot.shape[0] != size:
                rot = resize(rot, (size, size, 3), order=1, anti_aliasing=True)
            rot = np.clip(rot, 0.0, 1.0).astype(np.float32)
            out.append(LabeledImage(rot, image.expression, image.identity))
            if cfg.horizontal_flip:
                out.append(LabeledImage(rot[:, ::-1].copy(), image.expression, image.identity))
    if cfg.max_variants and cfg.max_variants < len(out):
        keep = np.linspace(0, len(out) - 1, cfg.max_variants).round().astype(int)
        out = [out[k] for k in keep]
    return out


def augment_array(images: np.ndarray, cfg: AugmentationConfig,
                  image_size: Optional[int] = None) -> np.ndarray:
    """Augment a batch; returns ``[n, n_variants, S, S, 3]``."""
    out = [np.stack([v.image for v in augment(LabeledImage(im, 0, 0), cfg, image_size)])
           for im in images]
    return np.stack(out)


# ---------------------------------------------------------------------------
# Folds and pairing


def make_folds(manifest: DatasetManifest, k: int, seed: int = 0) -> DatasetManifest:
    """Identity-independent folds: identities shuffled by ``seed`` and dealt round-robin."""
    if k < 1 or k > manifest.n_identities:
        raise ValidationError(f"k={k} folds requested but only {manifest.n_identities} identities")
    order = np.random.default_rng(seed).permutation(manifest.n_identities)
    folds = [0] * manifest.n_identities
    for pos, ident in enumerate(order):
        folds[int(ident)] = pos % k
    d = asdict(manifest)
    d["folds"] = folds
    return DatasetManifest(**d)


def sample_pair(manifest: DatasetManifest, rng: np.random.Generator,
                same_identity_prob: float = 1.0,
                folds: Optional[Sequence[int]] = None,
                _pools: Optional[dict] = None) -> PairSample:
    """Draw a (source, target) pair restricted to records of identities in ``folds``.

    The source is uniform over allowed records. With probability
    ``same_identity_prob`` the target is another record of the same
    identity; otherwise a uniformly random allowed identity is drawn first
    and then a uniform record within it.
    """
    if not 0.0 <= same_identity_prob <= 1.0:
        raise ValidationError("same_identity_prob must lie in [0, 1]")
    pools = _pools if _pools is not None else identity_pools(manifest, folds)
    if not pools:
        raise ValidationError("no records available for pairing")
    allowed = pools["__all__"]
    same = bool(rng.random() < same_identity_prob)
    if same and not pools["__multi__"]:
        raise ValidationError("same-identity pairing needs an identity with at least 2 records")
    while True:
        src = int(allowed[rng.integers(len(allowed))])
        ident = manifest.records[src]["identity"]
        if same:
            pool = pools[ident]
            if len(pool) < 2:
                continue
            others = pool[pool != src]
            return PairSample(src, int(others[rng.integers(len(others))]), True)
        ids = pools["__ids__"]
        tgt_ident = int(ids[rng.integers(len(ids))])
        pool = pools[tgt_ident]
        tgt = int(pool[rng.integers(len(pool))])
        return PairSample(src, tgt, tgt_ident == ident)


def identity_pools(manifest: DatasetManifest, folds: Optional[Sequence[int]] = None) -> dict:
    """Record indices per identity (plus bookkeeping keys) for :func:`sample_pair`."""
    allowed = manifest.record_indices(folds)
    if len(allowed) == 0:
        return {}
    ids = manifest.identities[allowed]
    pools = {int(i): allowed[ids == i] for i in np.unique(ids)}
    pools["__ids__"] = np.unique(ids)
    pools["__all__"] = allowed
    pools["__multi__"] = any(len(v) >= 2 for k, v in pools.items() if isinstance(k, int))
    return pools


# ---------------------------------------------------------------------------
# Folder ingestion


def ingest_folder(root, image_size: int = 64,
                  expression_names: Sequence[str] = BASIC_EXPRESSIONS) -> DatasetManifest:
    """Build a manifest from ``<root>/<identity>/<expression>/<image files>``.

    Images must already be aligned face crops. Undecodable files are skipped
    and listed in ``manifest.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"not a directory: {root}")
    names = [n.lower() for n in expression_names]
    identities = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not identities:
        raise ValidationError(f"no identities found under {root}")
    unknown, records, skipped = [], [], []
    for id_idx, ident in enumerate(identities):
        for expr_dir in sorted(p for p in (root / ident).iterdir() if p.is_dir()):
            if expr_dir.name.lower() not in names:
                unknown.append(f"{ident}/{expr_dir.name}")
                continue
            e = names.index(expr_dir.name.lower())
            for f in sorted(expr_dir.iterdir()):
                if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                try:
                    with Image.open(f) as im:
                        im.convert("RGB").load()
                except (UnidentifiedImageError, OSError):
                    skipped.append(os.path.relpath(f, root))
                    continue
                records.append({"path": os.path.relpath(f, root), "expression": e,
                                "identity": id_idx})
    if unknown:
        raise ValidationError(
            "unknown expression directories: " + ", ".join(unknown)
            + f" (expected one of {list(names)})")
    if skipped:
        log.warning("skipped %d undecodable file(s)", len(skipped))
    if not records:
        raise ValidationError(f"no decodable images found under {root}")
    return DatasetManifest(
        records=records, n_expressions=len(names), n_identities=len(identities),
        image_size=image_size, expression_names=list(names), identity_names=identities,
        root=str(root.resolve()), skipped=skipped)
