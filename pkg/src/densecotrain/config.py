"""Run configuration: one JSON document that pins everything a run
needs, so the echoed config in a report reproduces the run bit for bit.

The seed is mandatory; nothing in the pipeline draws implicit entropy.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .cotrain import MODES, CoTrainConfig
from .data import SceneSpec
from .detectors import DetectorParams
from .ensemble import EnsembleParams, RfParams, SvmParams, XgbParams
from .tuner import TunerConfig

ARTIFACT_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration content."""


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"  # synthetic | csv
    csv_path: str | None = None
    n_labeled: int = 200
    n_unlabeled: int = 800
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    grid_rows: int = 4
    grid_cols: int = 5
    row_range: tuple[int, int] | None = (3, 5)
    col_range: tuple[int, int] | None = (4, 6)
    box_w: float = 48.0
    box_h: float = 64.0
    jitter: float = 2.0
    overlap_factor: float = 0.4

    def __post_init__(self) -> None:
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.source must be synthetic or csv, got {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("dataset.source csv requires dataset.csv_path")
        if len(self.fractions) != 3:
            raise ConfigError("fractions must have three entries")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(
                f"fractions must sum to 1 within 1e-9, got {self.fractions}"
            )
        if self.n_labeled <= 0 or self.n_unlabeled < 0:
            raise ConfigError("n_labeled must be positive and n_unlabeled >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    dataset: DatasetConfig = DatasetConfig()
    cotrain: CoTrainConfig = CoTrainConfig()
    tuner: TunerConfig = TunerConfig()
    output_dir: str = "runs/default"

    def scene_spec(self) -> SceneSpec:
        d = self.dataset
        return SceneSpec(
            grid_rows=d.grid_rows, grid_cols=d.grid_cols, box_w=d.box_w,
            box_h=d.box_h, jitter=d.jitter, overlap_factor=d.overlap_factor,
            seed=self.seed,
        )

    def cotrain_config(self) -> CoTrainConfig:
        return replace(self.cotrain, seed=self.seed)

    def tuner_config(self) -> TunerConfig:
        return replace(self.tuner, seed=self.seed)


def default_synthetic(seed: int = 0) -> RunConfig:
    """The stock experiment: 200 labeled plus 800 unlabeled dense scenes
    at overlap 0.4, two co-training rounds at tau 0.8."""
    return RunConfig(
        seed=seed,
        dataset=DatasetConfig(),
        cotrain=CoTrainConfig(tau_conf=0.8, max_rounds=2, seed=seed),
        tuner=TunerConfig(seed=seed),
    )


def _detector_params_to_dict(p: DetectorParams) -> dict:
    return {
        "epochs": p.epochs, "confidence_threshold": p.confidence_threshold,
        "nms_iou": p.nms_iou, "batch_size": p.batch_size,
        "learning_rate": p.learning_rate, "anchor_scales": p.anchor_scales,
    }


def _ensemble_params_to_dict(e: EnsembleParams) -> dict:
    return {
        "xgb": asdict(e.xgb), "rf": asdict(e.rf), "svm": asdict(e.svm),
    }


def config_to_dict(cfg: RunConfig) -> dict:
    c = cfg.cotrain
    return {
        "artifact_version": ARTIFACT_VERSION,
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "dataset": {
            "source": cfg.dataset.source,
            "csv_path": cfg.dataset.csv_path,
            "n_labeled": cfg.dataset.n_labeled,
            "n_unlabeled": cfg.dataset.n_unlabeled,
            "fractions": list(cfg.dataset.fractions),
            "grid_rows": cfg.dataset.grid_rows,
            "grid_cols": cfg.dataset.grid_cols,
            "row_range": list(cfg.dataset.row_range) if cfg.dataset.row_range else None,
            "col_range": list(cfg.dataset.col_range) if cfg.dataset.col_range else None,
            "box_w": cfg.dataset.box_w,
            "box_h": cfg.dataset.box_h,
            "jitter": cfg.dataset.jitter,
            "overlap_factor": cfg.dataset.overlap_factor,
        },
        "cotrain": {
            "tau_conf": c.tau_conf,
            "max_rounds": c.max_rounds,
            "epsilon": c.epsilon,
            "patience": c.patience,
            "pseudo_nms_iou": c.pseudo_nms_iou,
            "merge_nms_iou": c.merge_nms_iou,
            "separation": c.separation,
            "mode": c.mode,
            "unlabeled_subsample": c.unlabeled_subsample,
            "ensemble_train_cap": c.ensemble_train_cap,
        },
        "detectors": {
            "loc": _detector_params_to_dict(c.loc_params),
            "ctx": _detector_params_to_dict(c.ctx_params),
            "ensemble": _ensemble_params_to_dict(c.ensemble_params),
        },
        "tuner": {
            "algorithm": cfg.tuner.algorithm,
            "budget": cfg.tuner.budget,
            "population": cfg.tuner.population,
            "mutation_rate": cfg.tuner.mutation_rate,
            "crossover_rate": cfg.tuner.crossover_rate,
            "initial_temperature": cfg.tuner.initial_temperature,
            "cooling_rate": cfg.tuner.cooling_rate,
        },
    }


def _build(section: str, ctor, payload: dict):
    try:
        return ctor(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    version = doc.get("artifact_version", ARTIFACT_VERSION)
    if version != ARTIFACT_VERSION:
        raise ConfigError(f"unsupported artifact_version {version!r}")
    if "seed" not in doc:
        raise ConfigError("config requires an explicit seed (no implicit entropy)")
    seed = doc["seed"]
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    ds_doc = dict(doc.get("dataset", {}))
    for key in ("fractions", "row_range", "col_range"):
        if ds_doc.get(key) is not None:
            ds_doc[key] = tuple(ds_doc[key])
    dataset = _build("dataset", DatasetConfig, ds_doc)

    det_doc = doc.get("detectors", {})
    base = CoTrainConfig()
    loc = _build("detectors.loc", DetectorParams, det_doc["loc"]) \
        if "loc" in det_doc else base.loc_params
    ctx = _build("detectors.ctx", DetectorParams, det_doc["ctx"]) \
        if "ctx" in det_doc else base.ctx_params
    if "ensemble" in det_doc:
        e = det_doc["ensemble"]
        ensemble = EnsembleParams(
            xgb=_build("detectors.ensemble.xgb", XgbParams, e.get("xgb", {})),
            rf=_build("detectors.ensemble.rf", RfParams, e.get("rf", {})),
            svm=_build("detectors.ensemble.svm", SvmParams, e.get("svm", {})),
        )
    else:
        ensemble = base.ensemble_params

    ct_doc = dict(doc.get("cotrain", {}))
    if ct_doc.get("mode", "cotrain") not in MODES:
        raise ConfigError(f"cotrain.mode must be one of {MODES}")
    cotrain = _build(
        "cotrain", CoTrainConfig,
        {**ct_doc, "loc_params": loc, "ctx_params": ctx,
         "ensemble_params": ensemble, "seed": seed},
    )
    tuner = _build("tuner", TunerConfig, {**doc.get("tuner", {}), "seed": seed})
    return RunConfig(
        seed=seed,
        dataset=dataset,
        cotrain=cotrain,
        tuner=tuner,
        output_dir=doc.get("output_dir", "runs/default"),
    )


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf-8"
    )
