"""Annotation I/O, labeled/unlabeled selection with 70-10-20 split, and
synthetic dense-scene generation.

CSV schema (matches the public dense-retail distribution):
``image_name,x1,y1,x2,y2,class,image_width,image_height``; the header is
optional and detected by a non-numeric test on the second column of the
first row.  Boxes are clamped into image bounds with a warning; rows that
are degenerate after clamping are rejected loudly, never silently.

Synthetic scenes place a jittered grid of boxes whose pitch is shrunk by
``overlap_factor``, which induces neighbor overlap (the stand-in for
dense-shelf occlusion).  Per-box occlusion level is recorded as the max
IoU with any other box in the scene.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geom import Box, GroundTruth, iou

LABEL_NAMES: dict[int, str] = {0: "object"}


class AnnotationError(ValueError):
    """A malformed annotation row; message names line and field."""


@dataclass(frozen=True)
class ImageRecord:
    """One image's annotations.

    ``occlusion`` is a per-GT tuple (max IoU with any other box) filled by
    the synthetic generator and recomputed on CSV load; ``labeled=False``
    marks pool images whose GTs are hidden from training and retained only
    for audits.
    """

    image_id: str
    width: int
    height: int
    gts: tuple[GroundTruth, ...]
    labeled: bool = True
    occlusion: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"{self.image_id}: image dims must be positive, "
                f"got {self.width}x{self.height}"
            )
        for g in self.gts:
            b = g.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValueError(
                    f"{self.image_id}: GT box {b.as_tuple()} outside "
                    f"[0,{self.width}]x[0,{self.height}]"
                )

    def as_unlabeled(self) -> "ImageRecord":
        return replace(self, labeled=False)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint labeled train/val/test id lists plus the unlabeled pool."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    unlabeled_pool: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "unlabeled_pool": list(self.unlabeled_pool),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(
            tuple(d["train"]),
            tuple(d["val"]),
            tuple(d["test"]),
            tuple(d["unlabeled_pool"]),
        )


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for one synthetic dense scene."""

    grid_rows: int
    grid_cols: int
    box_w: float = 48.0
    box_h: float = 64.0
    jitter: float = 2.0
    overlap_factor: float = 0.0
    seed: int = 0
    width: int | None = None
    height: int | None = None

    def __post_init__(self) -> None:
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid dims must be positive")
        if self.box_w <= 0 or self.box_h <= 0:
            raise ValueError("box dims must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if not (0.0 <= self.overlap_factor < 1.0):
            raise ValueError(
                f"overlap_factor must be in [0, 1), got {self.overlap_factor!r}"
            )


def pairwise_iou(boxes: Sequence[Box]) -> np.ndarray:
    """Dense IoU matrix; agrees with geom.iou elementwise."""
    n = len(boxes)
    if n == 0:
        return np.zeros((0, 0))
    arr = np.array([b.as_tuple() for b in boxes], dtype=float)
    x1 = np.maximum(arr[:, None, 0], arr[None, :, 0])
    y1 = np.maximum(arr[:, None, 1], arr[None, :, 1])
    x2 = np.minimum(arr[:, None, 2], arr[None, :, 2])
    y2 = np.minimum(arr[:, None, 3], arr[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    areas = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
    union = areas[:, None] + areas[None, :] - inter
    return inter / union


def occlusion_levels(gts: Sequence[GroundTruth]) -> tuple[float, ...]:
    """Per-box max IoU with any other box (0.0 for a lone box)."""
    n = len(gts)
    if n <= 1:
        return (0.0,) * n
    m = pairwise_iou([g.box for g in gts])
    np.fill_diagonal(m, 0.0)
    return tuple(float(v) for v in m.max(axis=1))


def _parse_row(
    row: list[str], line_no: int
) -> tuple[str, Box, str, int, int] | None:
    fields = (
        "image_name", "x1", "y1", "x2", "y2", "class", "image_width", "image_height"
    )
    if len(row) != 8:
        raise AnnotationError(
            f"line {line_no}: expected 8 fields "
            f"({','.join(fields)}), got {len(row)}"
        )
    name = row[0].strip()
    if not name:
        raise AnnotationError(f"line {line_no}: field image_name is empty")
    vals = []
    for idx, fname in zip((1, 2, 3, 4), fields[1:5]):
        try:
            vals.append(float(row[idx]))
        except ValueError:
            raise AnnotationError(
                f"line {line_no}: field {fname} is not numeric: {row[idx]!r}"
            ) from None
    cls = row[5].strip()
    dims = []
    for idx, fname in zip((6, 7), fields[6:8]):
        try:
            v = int(row[idx])
        except ValueError:
            raise AnnotationError(
                f"line {line_no}: field {fname} is not an integer: {row[idx]!r}"
            ) from None
        if v <= 0:
            raise AnnotationError(f"line {line_no}: field {fname} must be positive")
        dims.append(v)
    x1, y1, x2, y2 = vals
    w, h = dims
    cx1, cy1 = max(0.0, min(x1, w)), max(0.0, min(y1, h))
    cx2, cy2 = max(0.0, min(x2, w)), max(0.0, min(y2, h))
    if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
        warnings.warn(
            f"line {line_no}: box ({x1},{y1},{x2},{y2}) clamped to "
            f"image bounds {w}x{h}"
        )
    if cx2 <= cx1 or cy2 <= cy1:
        warnings.warn(
            f"line {line_no}: box degenerate after clamping "
            f"({cx1},{cy1},{cx2},{cy2}); row rejected"
        )
        return None
    return name, Box(cx1, cy1, cx2, cy2), cls, w, h


def load_annotations(path: str | Path) -> list[ImageRecord]:
    """Read the annotation CSV into per-image records (row order kept)."""
    path = Path(path)
    label_ids: dict[str, int] = {"object": 0}
    by_image: dict[str, dict] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if line_no == 1 and len(row) >= 2:
                try:
                    float(row[1])
                except ValueError:
                    continue  # header row
            parsed = _parse_row(row, line_no)
            if parsed is None:
                continue
            name, box, cls, w, h = parsed
            if cls not in label_ids:
                label_ids[cls] = len(label_ids)
            entry = by_image.setdefault(
                name, {"width": w, "height": h, "gts": []}
            )
            if entry["width"] != w or entry["height"] != h:
                raise AnnotationError(
                    f"line {line_no}: image {name} has conflicting dims "
                    f"{w}x{h} vs {entry['width']}x{entry['height']}"
                )
            entry["gts"].append(GroundTruth(box, label_ids[cls]))
    records = []
    for name, entry in by_image.items():
        gts = tuple(entry["gts"])
        records.append(
            ImageRecord(
                name, entry["width"], entry["height"], gts,
                labeled=True, occlusion=occlusion_levels(gts),
            )
        )
    return records


def save_annotations(
    records: Iterable[ImageRecord],
    path: str | Path,
    label_names: dict[int, str] | None = None,
) -> None:
    """Write records back to the CSV schema, header included."""
    names = dict(LABEL_NAMES if label_names is None else label_names)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["image_name", "x1", "y1", "x2", "y2", "class",
             "image_width", "image_height"]
        )
        for rec in records:
            for g in rec.gts:
                w.writerow(
                    [rec.image_id, repr(g.box.x1), repr(g.box.y1),
                     repr(g.box.x2), repr(g.box.y2),
                     names.get(g.label, f"class_{g.label}"),
                     rec.width, rec.height]
                )


def _floor_share(fraction: float, n: int) -> int:
    # 0.7*2000 is 1399.9999999999998 in floats; the epsilon keeps exact
    # decimal shares exact without ever adding a whole unit
    return int(math.floor(fraction * n + 1e-6))


def select_and_split(
    records: Sequence[ImageRecord],
    n_labeled: int = 2000,
    n_unlabeled: int = 8000,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> DatasetSplit:
    """Seeded uniform selection of labeled/unlabeled sets, then the
    train/val/test split: floor shares for train and val, remainder to
    test."""
    if n_labeled <= 0:
        raise ValueError(f"n_labeled must be positive, got {n_labeled}")
    if n_unlabeled < 0:
        raise ValueError(f"n_unlabeled must be >= 0, got {n_unlabeled}")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three nonnegative fractions, got {fractions!r}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions!r}")
    need = n_labeled + n_unlabeled
    if need > len(records):
        raise ValueError(
            f"need {need} records (n_labeled={n_labeled} + "
            f"n_unlabeled={n_unlabeled}) but only {len(records)} available"
        )
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image_ids in records")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    chosen = [ids[i] for i in perm[:need]]
    labeled = chosen[:n_labeled]
    pool = tuple(chosen[n_labeled:need])
    n_train = _floor_share(fractions[0], n_labeled)
    n_val = _floor_share(fractions[1], n_labeled)
    n_test = n_labeled - n_train - n_val
    if n_test < 0:
        raise ValueError("fractions leave a negative test share")
    return DatasetSplit(
        train=tuple(labeled[:n_train]),
        val=tuple(labeled[n_train : n_train + n_val]),
        test=tuple(labeled[n_train + n_val :]),
        unlabeled_pool=pool,
    )


def generate_synthetic_scene(
    spec: SceneSpec, image_id: str | None = None
) -> ImageRecord:
    """One dense scene: a grid of boxes with pitch shrunk by
    overlap_factor and Gaussian placement jitter, deterministic in
    spec.seed."""
    pitch_x = spec.box_w * (1.0 - spec.overlap_factor)
    pitch_y = spec.box_h * (1.0 - spec.overlap_factor)
    margin_x = spec.box_w * 0.5 + 4.0 * spec.jitter
    margin_y = spec.box_h * 0.5 + 4.0 * spec.jitter
    width = spec.width
    height = spec.height
    if width is None:
        width = int(math.ceil(2 * margin_x + pitch_x * (spec.grid_cols - 1) + spec.box_w))
    if height is None:
        height = int(math.ceil(2 * margin_y + pitch_y * (spec.grid_rows - 1) + spec.box_h))
    if spec.box_w > width or spec.box_h > height:
        raise ValueError(
            f"box {spec.box_w}x{spec.box_h} exceeds image {width}x{height}"
        )
    rng = np.random.default_rng(spec.seed)
    boxes: list[GroundTruth] = []
    for r in range(spec.grid_rows):
        for c in range(spec.grid_cols):
            x = margin_x + c * pitch_x
            y = margin_y + r * pitch_y
            if spec.jitter > 0:
                x += rng.normal(0.0, spec.jitter)
                y += rng.normal(0.0, spec.jitter)
            x = min(max(x, 0.0), width - spec.box_w)
            y = min(max(y, 0.0), height - spec.box_h)
            boxes.append(GroundTruth(Box(x, y, x + spec.box_w, y + spec.box_h)))
    gts = tuple(boxes)
    return ImageRecord(
        image_id=image_id or f"synth-{spec.seed:08x}",
        width=width,
        height=height,
        gts=gts,
        labeled=True,
        occlusion=occlusion_levels(gts),
    )


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_synthetic_dataset(
    n_images: int,
    spec_template: SceneSpec,
    seed: int = 0,
    row_range: tuple[int, int] | None = None,
    col_range: tuple[int, int] | None = None,
) -> list[ImageRecord]:
    """n_images scenes with per-image derived seeds; optional density
    variation draws grid dims uniformly from the given inclusive ranges."""
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    records = []
    for i in range(n_images):
        s = _child_seed(seed, i)
        rows, cols = spec_template.grid_rows, spec_template.grid_cols
        if row_range or col_range:
            dim_rng = np.random.default_rng(_child_seed(s, 1))
            if row_range:
                rows = int(dim_rng.integers(row_range[0], row_range[1] + 1))
            if col_range:
                cols = int(dim_rng.integers(col_range[0], col_range[1] + 1))
        spec = replace(spec_template, seed=s, grid_rows=rows, grid_cols=cols)
        records.append(generate_synthetic_scene(spec, image_id=f"synth-{i:05d}"))
    return records


def write_manifest(
    path: str | Path,
    n_images: int,
    spec_template: SceneSpec,
    seed: int,
    row_range: tuple[int, int] | None = None,
    col_range: tuple[int, int] | None = None,
) -> None:
    """Sidecar JSON recording how a synthetic CSV was produced."""
    payload = {
        "n_images": n_images,
        "seed": seed,
        "row_range": list(row_range) if row_range else None,
        "col_range": list(col_range) if col_range else None,
        "scene_spec": {
            "grid_rows": spec_template.grid_rows,
            "grid_cols": spec_template.grid_cols,
            "box_w": spec_template.box_w,
            "box_h": spec_template.box_h,
            "jitter": spec_template.jitter,
            "overlap_factor": spec_template.overlap_factor,
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def mean_neighbor_iou(record: ImageRecord) -> float:
    """Mean of per-box occlusion levels; 0 for scenes of one box."""
    if not record.occlusion:
        occ = occlusion_levels(record.gts)
    else:
        occ = record.occlusion
    return float(np.mean(occ)) if occ else 0.0
