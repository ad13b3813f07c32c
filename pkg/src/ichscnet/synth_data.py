"""Synthetic ICH-like dataset: generation, on-disk layout, loading and validation.

Each case is a 2D grayscale slice with an elliptical "brain", one to three
bright hemorrhage blobs, a clinical text record and a binary prognosis label.
The label depends on the hemorrhage volume (visible in the image) *and* on the
GCS score (only present in the text), so an image-only model cannot reach
perfect accuracy.
"""
from __future__ import annotations

import functools
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

GENERATOR_VERSION = "ichsynth-1.0"
ML_PER_PIXEL = 0.01
VOLUME_PERCENTILE = 60.0
MIN_CASES = 8

GENDERS = ("M", "F")
TREATMENTS = ("conservative", "surgical")
LOCATIONS = ("left-anterior", "right-anterior", "left-posterior", "right-posterior", "central")
GCS_RANGE = (3, 15)
AGE_RANGE = (18, 95)
STAY_RANGE = (1, 60)
ONSET_RANGE = (1, 72)

TEXT_TEMPLATE = (
    "Age {age}, {gender}. Hospital stay {stay_days} d. Onset-to-CT {onset_to_ct_hours} h. "
    "GCS {gcs}. Treatment: {treatment}. Hemorrhage at {location}, volume {volume_ml:.1f} mL."
)


class DatasetError(ValueError):
    """Raised for generation requests or on-disk datasets that break the layout contract."""

    def __init__(self, message: str, case_id: str | None = None):
        if case_id is not None:
            message = f"[{case_id}] {message}"
        super().__init__(message)
        self.case_id = case_id


@dataclass(frozen=True)
class ClinicalText:
    age: int
    gender: str
    stay_days: int
    onset_to_ct_hours: int
    gcs: int
    treatment: str
    location: str
    volume_ml: float

    def __post_init__(self):
        validate_text_fields(self)

    @property
    def rendered(self) -> str:
        return render_text(self)


def _check_int_range(name, value, lo, hi):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise DatasetError(f"{name} must be an integer, got {value!r}")
    if not lo <= value <= hi:
        raise DatasetError(f"{name}={value} outside [{lo}, {hi}]")


def validate_text_fields(t: ClinicalText) -> None:
    _check_int_range("age", t.age, *AGE_RANGE)
    _check_int_range("stay_days", t.stay_days, *STAY_RANGE)
    _check_int_range("onset_to_ct_hours", t.onset_to_ct_hours, *ONSET_RANGE)
    _check_int_range("gcs", t.gcs, *GCS_RANGE)
    if t.gender not in GENDERS:
        raise DatasetError(f"gender must be one of {GENDERS}, got {t.gender!r}")
    if t.treatment not in TREATMENTS:
        raise DatasetError(f"treatment must be one of {TREATMENTS}, got {t.treatment!r}")
    if t.location not in LOCATIONS:
        raise DatasetError(f"location must be one of {LOCATIONS}, got {t.location!r}")
    if not np.isfinite(t.volume_ml) or t.volume_ml < 0:
        raise DatasetError(f"volume_ml must be finite and non-negative, got {t.volume_ml!r}")


def render_text(fields: ClinicalText) -> str:
    validate_text_fields(fields)
    return TEXT_TEMPLATE.format(
        age=int(fields.age),
        gender=fields.gender,
        stay_days=int(fields.stay_days),
        onset_to_ct_hours=int(fields.onset_to_ct_hours),
        gcs=int(fields.gcs),
        treatment=fields.treatment,
        location=fields.location,
        volume_ml=float(fields.volume_ml),
    )


def label_rule(volume_ml: float, gcs: int, v_thr: float) -> int:
    """1 (poor prognosis) iff (large bleed and GCS < 12) or GCS < 9."""
    return int((volume_ml > v_thr and gcs < 12) or gcs < 9)


@dataclass
class CaseRecord:
    case_id: str
    image: np.ndarray  # uint8 (H, W)
    gt_mask: np.ndarray  # bool (H, W)
    rough_mask: np.ndarray  # bool (H, W)
    bbox: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max (inclusive)
    text: ClinicalText
    label: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass
class DatasetManifest:
    cases: list[CaseRecord]
    seed: int
    generator_version: str
    class_counts: tuple[int, int]
    v_thr: float
    image_size: tuple[int, int]
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.cases)

    def by_id(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.cases], dtype=np.int64)


# ---------------------------------------------------------------------------
# geometry helpers


def _ellipse(shape, cy, cx, ay, ax, theta):
    """Rasterizes a filled ellipse; only the bounding window is evaluated."""
    h, w = shape
    r = max(ay, ax) + 1.0
    y0, y1 = max(0, int(np.floor(cy - r))), min(h, int(np.ceil(cy + r)) + 1)
    x0, x1 = max(0, int(np.floor(cx - r))), min(w, int(np.ceil(cx + r)) + 1)
    out = np.zeros(shape, dtype=bool)
    if y0 >= y1 or x0 >= x1:
        return out
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    out[y0:y1, x0:x1] = u * u + v * v <= 1.0
    return out


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return xx * xx + yy * yy <= radius * radius


def jaccard_binary(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def bbox_of(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def bbox_coverage(mask: np.ndarray, bbox) -> float:
    x0, y0, x1, y1 = bbox
    total = mask.sum()
    if total == 0:
        return 1.0
    return float(mask[y0 : y1 + 1, x0 : x1 + 1].sum() / total)


@dataclass(frozen=True)
class _Brain:
    cy: float
    cx: float
    ay: float
    ax: float
    theta: float


def _sample_brain(rng: np.random.Generator, shape) -> _Brain:
    h, w = shape
    return _Brain(
        cy=h / 2 + rng.uniform(-0.03, 0.03) * h,
        cx=w / 2 + rng.uniform(-0.03, 0.03) * w,
        ay=rng.uniform(0.38, 0.44) * h,
        ax=rng.uniform(0.33, 0.40) * w,
        theta=rng.uniform(-0.15, 0.15),
    )


def _sample_blobs(rng: np.random.Generator, shape, brain: _Brain):
    """Returns (blob union mask, list of blob centers); every blob lies inside the brain."""
    h, w = shape
    size = min(h, w)
    brain_mask = _ellipse(shape, brain.cy, brain.cx, brain.ay, brain.ax, brain.theta)
    # stay clear of the skull edge
    inner = ndimage.binary_erosion(brain_mask, iterations=max(1, size // 32))
    n_blobs = int(rng.integers(1, 4))
    union = np.zeros(shape, dtype=bool)
    centers = []
    lo, hi = max(2.0, 0.05 * size), 0.2 * size
    for _ in range(n_blobs):
        for _attempt in range(50):
            ay, ax = rng.uniform(lo, hi, size=2)
            cy = rng.uniform(brain.cy - brain.ay, brain.cy + brain.ay)
            cx = rng.uniform(brain.cx - brain.ax, brain.cx + brain.ax)
            blob = _ellipse(shape, cy, cx, ay, ax, rng.uniform(0, np.pi))
            if blob.any() and not np.any(blob & ~inner):
                union |= blob
                centers.append((cy, cx))
                break
    if not union.any():
        # degenerate draw; a small disk at the brain centre always fits
        r = lo
        union = _ellipse(shape, brain.cy, brain.cx, r, r, 0.0)
        centers.append((brain.cy, brain.cx))
    return union, centers


@functools.lru_cache(maxsize=8)
def volume_threshold(shape: tuple[int, int], n_reference: int = 2000) -> float:
    """60th percentile of the generator's volume distribution at this raster size.

    Estimated from a fixed reference sample of blob configurations so it does not
    depend on the seed or the number of generated cases.
    """
    rng = np.random.default_rng(20240917)
    vols = np.empty(n_reference)
    for i in range(n_reference):
        brain = _sample_brain(rng, shape)
        blobs, _ = _sample_blobs(rng, shape, brain)
        vols[i] = blobs.sum() * ML_PER_PIXEL
    return float(np.percentile(vols, VOLUME_PERCENTILE))


def _location(centers, brain: _Brain, shape) -> str:
    cy = float(np.mean([c[0] for c in centers]))
    cx = float(np.mean([c[1] for c in centers]))
    dy = (cy - brain.cy) / brain.ay
    dx = (cx - brain.cx) / brain.ax
    if dx * dx + dy * dy < 0.15**2:
        return "central"
    # image left == patient right in radiological convention; we keep image orientation
    side = "left" if dx < 0 else "right"
    front = "anterior" if dy < 0 else "posterior"
    return f"{side}-{front}"


def _rough_mask(rng: np.random.Generator, gt: np.ndarray) -> np.ndarray:
    radius = int(rng.integers(1, 4))
    keep = rng.random(gt.shape) >= 0.10
    for r in range(radius, -1, -1):
        dilated = ndimage.binary_dilation(gt, structure=_disk(r)) if r > 0 else gt.copy()
        rough = dilated & keep
        if rough.any() and jaccard_binary(rough, gt) >= 0.3:
            return rough
    return gt.copy()


def _jittered_bbox(rng: np.random.Generator, gt: np.ndarray) -> tuple[int, int, int, int]:
    h, w = gt.shape
    x0, y0, x1, y1 = bbox_of(gt)
    jitter = rng.integers(-3, 4, size=4)
    # shrink the jitter until the box keeps >= 95% of the foreground
    for scale in (1.0, 0.67, 0.34, 0.0):
        j = np.round(jitter * scale).astype(int)
        box = (
            int(np.clip(x0 + j[0], 0, w - 1)),
            int(np.clip(y0 + j[1], 0, h - 1)),
            int(np.clip(x1 + j[2], 0, w - 1)),
            int(np.clip(y1 + j[3], 0, h - 1)),
        )
        if box[0] < box[2] and box[1] < box[3] and bbox_coverage(gt, box) >= 0.95:
            return box
    return _widen(x0, y0, x1, y1, w, h)


def _widen(x0, y0, x1, y1, w, h):
    if x1 <= x0:
        x0, x1 = (x0 - 1, x1) if x1 == w - 1 else (x0, x1 + 1)
    if y1 <= y0:
        y0, y1 = (y0 - 1, y1) if y1 == h - 1 else (y0, y1 + 1)
    return int(x0), int(y0), int(x1), int(y1)


def make_case(index: int, seed: int, shape=(128, 128), v_thr: float | None = None) -> CaseRecord:
    """Deterministically synthesizes case ``index`` of the dataset with ``seed``."""
    if v_thr is None:
        v_thr = volume_threshold(tuple(shape))
    rng = np.random.default_rng([seed, index])
    brain = _sample_brain(rng, shape)
    gt, centers = _sample_blobs(rng, shape, brain)
    brain_mask = _ellipse(shape, brain.cy, brain.cx, brain.ay, brain.ax, brain.theta)

    size = min(shape)
    texture = ndimage.gaussian_filter(rng.normal(size=shape), sigma=max(1.0, size / 40))
    texture /= texture.std() + 1e-12
    img = np.full(shape, 12.0)
    img[brain_mask] = 85.0
    img += 10.0 * texture * brain_mask
    blob_level = rng.uniform(165.0, 200.0)
    img[gt] = blob_level + 8.0 * texture[gt]
    img += rng.normal(0.0, 3.0, size=shape)
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)

    rough = _rough_mask(rng, gt)
    bbox = _jittered_bbox(rng, gt)

    volume_ml = float(gt.sum()) * ML_PER_PIXEL
    # GCS is drawn independently of the image; the label follows from the rule
    gcs = int(rng.integers(GCS_RANGE[0], GCS_RANGE[1] + 1))
    text = ClinicalText(
        age=int(rng.integers(AGE_RANGE[0], AGE_RANGE[1] + 1)),
        gender=GENDERS[int(rng.integers(0, 2))],
        stay_days=int(rng.integers(STAY_RANGE[0], STAY_RANGE[1] + 1)),
        onset_to_ct_hours=int(rng.integers(ONSET_RANGE[0], ONSET_RANGE[1] + 1)),
        gcs=gcs,
        treatment=TREATMENTS[int(rng.integers(0, 2))],
        location=_location(centers, brain, shape),
        volume_ml=round(volume_ml, 4),
    )
    return CaseRecord(
        case_id=f"case{index:05d}",
        image=image,
        gt_mask=gt,
        rough_mask=rough,
        bbox=bbox,
        text=text,
        label=label_rule(volume_ml, gcs, v_thr),
    )


# ---------------------------------------------------------------------------
# persistence


def _save_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array, mode="L").save(path, format="PNG", optimize=False)


def _case_row(case: CaseRecord) -> dict:
    row = {"case_id": case.case_id}
    row.update(asdict(case.text))
    row["rendered"] = case.text.rendered
    row["bbox"] = [int(v) for v in case.bbox]
    row["label"] = int(case.label)
    return row


def write_dataset(manifest: DatasetManifest, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    try:
        for sub in ("images", "masks", "rough"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DatasetError(f"dataset directory {out} is not writable")
    for case in manifest.cases:
        _save_png(out / "images" / f"{case.case_id}.png", case.image)
        _save_png(out / "masks" / f"{case.case_id}.png", case.gt_mask.astype(np.uint8) * 255)
        _save_png(out / "rough" / f"{case.case_id}.png", case.rough_mask.astype(np.uint8) * 255)
    with open(out / "cases.jsonl", "w", encoding="utf-8") as fh:
        for case in manifest.cases:
            fh.write(json.dumps(_case_row(case), sort_keys=True) + "\n")
    meta = {
        "seed": manifest.seed,
        "generator_version": manifest.generator_version,
        "cases": [c.case_id for c in manifest.cases],
        "class_counts": list(manifest.class_counts),
        "v_thr": manifest.v_thr,
        "image_size": list(manifest.image_size),
        "ml_per_pixel": ML_PER_PIXEL,
        "label_rule": "poor iff (volume_ml > v_thr and gcs < 12) or gcs < 9",
    }
    (out / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.root = out
    return out


def generate_dataset(n_cases: int, seed: int, out_dir, image_size=(128, 128)) -> DatasetManifest:
    if isinstance(n_cases, bool) or not isinstance(n_cases, (int, np.integer)) or n_cases < MIN_CASES:
        raise DatasetError(f"n_cases must be an integer >= {MIN_CASES}, got {n_cases!r}")
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    shape = (int(image_size[0]), int(image_size[1]))
    if min(shape) < 16:
        raise DatasetError(f"image_size must be at least 16x16, got {shape}")
    v_thr = volume_threshold(shape)
    cases = [make_case(i, seed, shape, v_thr) for i in range(n_cases)]
    n_poor = sum(c.label for c in cases)
    manifest = DatasetManifest(
        cases=cases,
        seed=int(seed),
        generator_version=GENERATOR_VERSION,
        class_counts=(n_cases - n_poor, n_poor),
        v_thr=v_thr,
        image_size=shape,
    )
    write_dataset(manifest, out_dir)
    return manifest


def _load_png(path: Path, case_id: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file {path}", case_id)
    with Image.open(path) as im:
        if im.mode != "L":
            raise DatasetError(f"{path.name} must be 8-bit grayscale, got mode {im.mode}", case_id)
        return np.asarray(im, dtype=np.uint8).copy()


def _load_mask(path: Path, case_id: str) -> np.ndarray:
    raw = _load_png(path, case_id)
    if not np.isin(raw, (0, 255)).all():
        raise DatasetError(f"{path.name} must only contain values 0 and 255", case_id)
    return raw == 255


def validate_case(case: CaseRecord) -> None:
    cid = case.case_id
    shape = case.image.shape
    if case.image.ndim != 2:
        raise DatasetError("image must be a 2D raster", cid)
    for name in ("gt_mask", "rough_mask"):
        if getattr(case, name).shape != shape:
            raise DatasetError(f"{name} shape {getattr(case, name).shape} != image shape {shape}", cid)
    if case.label not in (0, 1):
        raise DatasetError(f"label must be 0 or 1, got {case.label!r}", cid)
    if not case.gt_mask.any():
        raise DatasetError("gt_mask is empty", cid)
    x0, y0, x1, y1 = case.bbox
    h, w = shape
    if not (0 <= x0 < x1 < w and 0 <= y0 < y1 < h):
        raise DatasetError(f"bbox {case.bbox} invalid for raster {shape}", cid)
    if bbox_coverage(case.gt_mask, case.bbox) < 0.95:
        raise DatasetError("bbox covers less than 95% of gt_mask foreground", cid)
    jac = jaccard_binary(case.rough_mask, case.gt_mask)
    if jac < 0.3:
        raise DatasetError(f"rough_mask Jaccard vs gt_mask is {jac:.3f} < 0.3", cid)
    try:
        validate_text_fields(case.text)
    except DatasetError as exc:
        raise DatasetError(str(exc), cid) from None


def load_dataset(directory) -> DatasetManifest:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"missing {manifest_path}")
    meta = json.loads(manifest_path.read_text(encoding="utf-8"))
    cases_path = root / "cases.jsonl"
    if not cases_path.is_file():
        raise DatasetError(f"missing {cases_path}")
    rows = {}
    with open(cases_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                rows[row["case_id"]] = row

    cases = []
    for cid in meta["cases"]:
        if cid not in rows:
            raise DatasetError("listed in manifest.json but absent from cases.jsonl", cid)
        row = rows[cid]
        try:
            text = ClinicalText(**{k: row[k] for k in ClinicalText.__dataclass_fields__})
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"malformed text fields: {exc}", cid) from None
        except DatasetError as exc:
            raise DatasetError(str(exc), cid) from None
        if "rendered" in row and row["rendered"] != text.rendered:
            raise DatasetError("rendered text does not match its fields", cid)
        case = CaseRecord(
            case_id=cid,
            image=_load_png(root / "images" / f"{cid}.png", cid),
            gt_mask=_load_mask(root / "masks" / f"{cid}.png", cid),
            rough_mask=_load_mask(root / "rough" / f"{cid}.png", cid),
            bbox=tuple(int(v) for v in row["bbox"]),
            text=text,
            label=int(row["label"]),
        )
        validate_case(case)
        cases.append(case)

    n_poor = sum(c.label for c in cases)
    counts = (len(cases) - n_poor, n_poor)
    if list(counts) != list(meta["class_counts"]):
        raise DatasetError(f"class_counts {meta['class_counts']} disagree with labels {list(counts)}")
    shape = tuple(meta.get("image_size", cases[0].image.shape))
    return DatasetManifest(
        cases=cases,
        seed=int(meta["seed"]),
        generator_version=meta["generator_version"],
        class_counts=counts,
        v_thr=float(meta["v_thr"]),
        image_size=shape,
        root=root,
    )


# ---------------------------------------------------------------------------
# Bayes oracles over the latent (volume, gcs) parameters


def gcs_probabilities() -> dict[int, float]:
    lo, hi = GCS_RANGE
    n = hi - lo + 1
    return {g: 1.0 / n for g in range(lo, hi + 1)}


def image_only_bayes_accuracy(volumes, gcs_values, labels, v_thr: float) -> float:
    """Accuracy of the best predictor that sees the true volume but not the GCS."""
    pg = gcs_probabilities()
    correct = 0
    for vol, lab in zip(volumes, labels):
        p_poor = sum(p for g, p in pg.items() if label_rule(vol, g, v_thr) == 1)
        pred = int(p_poor > 0.5)
        correct += int(pred == lab)
    return correct / len(labels)


def image_text_bayes_accuracy(volumes, gcs_values, labels, v_thr: float) -> float:
    preds = [label_rule(v, g, v_thr) for v, g in zip(volumes, gcs_values)]
    return float(np.mean(np.asarray(preds) == np.asarray(labels)))
