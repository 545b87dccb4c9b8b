"""The co-training loop: two detector views exchange ensemble-vetted
pseudo-labels on unlabeled images, retrain, and stop on a validation
patience rule.

Rules this module enforces:

* Strict cross-exchange: in cotrain mode the accepted set for view A
  holds only labels produced by view B and vice versa.  The self-training
  baseline (each view keeps its own labels) exists only as a harness for
  comparison experiments, selected by ``mode``.
* Replace-per-image-per-source: a round's labels for an image supersede
  that image's older labels from the same source; rounds that generate
  nothing leave the views unchanged.
* Retraining is always recomputed from the round-0 supervised skill plus
  the current accepted set, never compounded round over round.
* The labeled train/val/test sets are never mutated, and the test set is
  read exactly once per run, after stopping, on the best-validation
  round's checkpointed state.
* Bit-for-bit reproducible from (config, seed): every RNG consumed here
  is derived from the config seed and a string namespace.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import DatasetSplit, ImageRecord
from .detectors import (
    CONTEXTUAL,
    DEFAULT_CONTEXTUAL_PARAMS,
    DEFAULT_LOCALIZER_PARAMS,
    LOCALIZER,
    Detection,
    DetectorParams,
    DetectorProfile,
    PseudoLabelAudit,
    RetrainCoefficients,
    SkillModel,
    audit_pseudo_labels,
    count_occluded,
    derive_seed,
    detect,
    retrain,
    size_regime,
    skill_from_params,
)
from .ensemble import EnsembleClassifier, EnsembleParams
from .geom import Box, ScoredBox, nms
from .metrics import EvalReport, match_detections, mean_average_precision

MODES = ("cotrain", "selftrain", "supervised")
CHECKPOINT_VERSION = 1


class InfeasibleViewError(ValueError):
    """The configuration produced no usable verification training data
    (no detections at all, or correct/incorrect examples of one class
    only)."""


@dataclass(frozen=True)
class PseudoLabel:
    """One accepted pseudo-annotation on an unlabeled image."""

    image_id: str
    box: Box
    label: int
    confidence: float
    source_view: str
    round: int

    def to_scored(self) -> ScoredBox:
        return ScoredBox(self.box, self.confidence, self.label)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "box": list(self.box.as_tuple()),
            "label": self.label,
            "confidence": self.confidence,
            "source_view": self.source_view,
            "round": self.round,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PseudoLabel":
        return cls(
            d["image_id"], Box(*d["box"]), int(d["label"]),
            float(d["confidence"]), d["source_view"], int(d["round"]),
        )


@dataclass(frozen=True)
class CoTrainConfig:
    """Knobs of one run; everything downstream derives from these plus
    the seed."""

    loc_params: DetectorParams = DEFAULT_LOCALIZER_PARAMS
    ctx_params: DetectorParams = DEFAULT_CONTEXTUAL_PARAMS
    ensemble_params: EnsembleParams = EnsembleParams()
    tau_conf: float = 0.8
    max_rounds: int = 5
    epsilon: float = 0.005
    patience: int = 2
    pseudo_nms_iou: float = 0.5
    merge_nms_iou: float = 0.5
    separation: float = 4.0
    mode: str = "cotrain"
    seed: int = 0
    unlabeled_subsample: int | None = None
    ensemble_train_cap: int = 2500
    retrain_coeff: RetrainCoefficients = RetrainCoefficients()

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_conf <= 1.0):
            raise ValueError(f"tau_conf must be in (0, 1], got {self.tau_conf!r}")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.epsilon < 0 or self.patience < 1:
            raise ValueError("epsilon must be >= 0 and patience >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0.0 < self.pseudo_nms_iou < 1.0 and 0.0 < self.merge_nms_iou < 1.0):
            raise ValueError("nms thresholds must be in (0, 1)")


@dataclass
class ViewState:
    """One detector view plus its verification ensemble."""

    name: str
    profile: DetectorProfile
    params: DetectorParams
    base_skill: SkillModel
    skill: SkillModel
    ensemble: EnsembleClassifier | None = None

    @property
    def trained(self) -> bool:
        return self.ensemble is not None


@dataclass
class RoundRecord:
    round: int
    val_map_a: float
    val_map_b: float
    val_map_combined: float
    n_accepted_for_a: int = 0
    n_accepted_for_b: int = 0
    pseudo_precision_a: float | None = None  # oracle precision of A's output
    pseudo_precision_b: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "round", "val_map_a", "val_map_b", "val_map_combined",
            "n_accepted_for_a", "n_accepted_for_b",
            "pseudo_precision_a", "pseudo_precision_b",
        )}

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(**d)


@dataclass
class CoTrainState:
    round: int
    view_a: ViewState
    view_b: ViewState
    accepted_for_a: dict[str, list[PseudoLabel]] = field(default_factory=dict)
    accepted_for_b: dict[str, list[PseudoLabel]] = field(default_factory=dict)
    history: list[RoundRecord] = field(default_factory=list)
    n_base_annotations: int = 0
    n_base_occluded: int = 0
    scene_regime: str = "medium"
    mode: str = "cotrain"


@dataclass
class CoTrainResult:
    state: CoTrainState
    best_round: int
    report_a: EvalReport
    report_b: EvalReport
    report_combined: EvalReport


def records_index(records: Iterable[ImageRecord]) -> dict[str, ImageRecord]:
    out = {}
    for r in records:
        if r.image_id in out:
            raise ValueError(f"duplicate image_id {r.image_id!r}")
        out[r.image_id] = r
    return out


def _detect_view(
    view: ViewState,
    records: Sequence[ImageRecord],
    seed: int,
    separation: float,
) -> dict[str, list[Detection]]:
    return {
        rec.image_id: detect(
            rec, view.skill, view.params, view.profile, seed,
            separation=separation,
        )
        for rec in records
    }


def _verified_scores(
    view: ViewState, dets_by_image: Mapping[str, list[Detection]]
) -> dict[str, list[ScoredBox]]:
    """Final prediction rule: detector score times the ensemble's fused
    object probability (keeps both stages' information in the ranking)."""
    if not view.trained:
        raise ValueError(f"view {view.name} has no trained ensemble")
    order = sorted(dets_by_image)
    feats = []
    for img in order:
        feats.extend(d.features for d in dets_by_image[img])
    if not feats:
        return {img: [] for img in dets_by_image}
    p_obj = view.ensemble.positive_probability(np.asarray(feats))
    out: dict[str, list[ScoredBox]] = {}
    k = 0
    for img in order:
        row = []
        for d in dets_by_image[img]:
            s = d.scored.score * float(p_obj[k])
            row.append(ScoredBox(d.scored.box, min(max(s, 0.0), 1.0), d.scored.label))
            k += 1
        out[img] = row
    return out


def predict_verified(
    view: ViewState,
    records: Sequence[ImageRecord],
    seed: int,
    separation: float,
) -> dict[str, list[ScoredBox]]:
    dets = _detect_view(view, records, seed, separation)
    return _verified_scores(view, dets)


def merge_views(
    dets_a: Mapping[str, Sequence[ScoredBox]],
    dets_b: Mapping[str, Sequence[ScoredBox]],
    merge_nms_iou: float,
) -> dict[str, list[ScoredBox]]:
    """The combined detector: both views' outputs, NMS-deduplicated."""
    out = {}
    for img in sorted(set(dets_a) | set(dets_b)):
        merged = list(dets_a.get(img, ())) + list(dets_b.get(img, ()))
        out[img] = nms(merged, merge_nms_iou)
    return out


def _val_maps(
    state: CoTrainState,
    val_records: Sequence[ImageRecord],
    config: CoTrainConfig,
) -> tuple[float, float, float]:
    gts = {r.image_id: list(r.gts) for r in val_records}
    da = predict_verified(
        state.view_a, val_records, derive_seed(config.seed, "val", "A"),
        config.separation,
    )
    db = predict_verified(
        state.view_b, val_records, derive_seed(config.seed, "val", "B"),
        config.separation,
    )
    map_a = mean_average_precision(da, gts).map_coco
    map_b = mean_average_precision(db, gts).map_coco
    dc = merge_views(da, db, config.merge_nms_iou)
    map_c = mean_average_precision(dc, gts).map_coco
    return float(map_a), float(map_b), float(map_c)


def _train_view_ensemble(
    view: ViewState,
    train_records: Sequence[ImageRecord],
    config: CoTrainConfig,
) -> EnsembleClassifier:
    """Fit the verification ensemble on the view's own detections over
    the labeled train set, labeled correct/incorrect by oracle match."""
    dets = _detect_view(
        view, train_records,
        derive_seed(config.seed, "ens-train", view.name), config.separation,
    )
    feats: list[tuple[float, ...]] = []
    targets: list[int] = []
    for rec in train_records:
        row = dets[rec.image_id]
        mr = match_detections([d.scored for d in row], list(rec.gts), 0.5)
        for d, tp in zip(row, mr.det_is_tp):
            feats.append(d.features)
            targets.append(1 if tp else 0)
    if not feats:
        raise InfeasibleViewError(
            f"view {view.name}: no detections on the labeled train set; "
            "cannot fit the verification ensemble"
        )
    if len(set(targets)) < 2:
        raise InfeasibleViewError(
            f"view {view.name}: verification training data is single-class "
            "(every detection was {}); cannot fit the ensemble".format(
                "correct" if targets[0] else "incorrect"
            )
        )
    X = np.asarray(feats)
    y = np.asarray(targets)
    if len(X) > config.ensemble_train_cap:
        rng = np.random.default_rng(derive_seed(config.seed, "cap", view.name))
        keep = rng.choice(len(X), config.ensemble_train_cap, replace=False)
        keep.sort()
        X, y = X[keep], y[keep]
    return EnsembleClassifier.train(
        (X, y), config.ensemble_params,
        seed=derive_seed(config.seed, "ensemble", view.name) & 0xFFFFFFFF,
    )


def initial_supervised_phase(
    records_by_id: Mapping[str, ImageRecord],
    split: DatasetSplit,
    config: CoTrainConfig,
) -> CoTrainState:
    """Round 0: both views trained on labeled train data only; the first
    validation entry is recorded and both accepted sets are empty."""
    if not split.train:
        raise ValueError("initial supervised phase requires a nonempty train set")
    train_records = [records_by_id[i] for i in split.train]
    val_records = [records_by_id[i] for i in split.val]
    regime = size_regime(train_records)
    view_a = ViewState(
        "A", LOCALIZER, config.loc_params,
        base_skill=skill_from_params(config.loc_params, LOCALIZER, regime),
        skill=skill_from_params(config.loc_params, LOCALIZER, regime),
    )
    view_b = ViewState(
        "B", CONTEXTUAL, config.ctx_params,
        base_skill=skill_from_params(config.ctx_params, CONTEXTUAL, regime),
        skill=skill_from_params(config.ctx_params, CONTEXTUAL, regime),
    )
    view_a.ensemble = _train_view_ensemble(view_a, train_records, config)
    view_b.ensemble = _train_view_ensemble(view_b, train_records, config)
    state = CoTrainState(
        round=0,
        view_a=view_a,
        view_b=view_b,
        n_base_annotations=sum(len(r.gts) for r in train_records),
        n_base_occluded=count_occluded(train_records),
        scene_regime=regime,
        mode=config.mode,
    )
    map_a, map_b, map_c = _val_maps(state, val_records, config)
    state.history.append(RoundRecord(0, map_a, map_b, map_c))
    return state


def generate_pseudo_labels(
    view: ViewState,
    unlabeled_records: Sequence[ImageRecord],
    tau_conf: float,
    nms_iou: float,
    round_no: int,
    seed: int,
    separation: float,
) -> list[PseudoLabel]:
    """Detector output vetted by the view's ensemble: keep detections the
    fuse calls object with confidence >= tau_conf, NMS-deduplicated."""
    if not view.trained:
        raise ValueError(f"view {view.name} is untrained; cannot generate pseudo-labels")
    if not (0.0 < tau_conf <= 1.0):
        raise ValueError(f"tau_conf must be in (0, 1], got {tau_conf!r}")
    dets = _detect_view(view, unlabeled_records, seed, separation)
    order = sorted(dets)
    feats = []
    for img in order:
        feats.extend(d.features for d in dets[img])
    if not feats:
        return []
    preds = view.ensemble.predict(np.asarray(feats))
    out: list[PseudoLabel] = []
    k = 0
    for img in order:
        candidates: list[tuple[ScoredBox, float]] = []
        for d in dets[img]:
            fused = preds[k]
            k += 1
            if fused.label != 1:  # ensemble says background
                continue
            if fused.confidence < tau_conf:
                continue
            candidates.append(
                (ScoredBox(d.scored.box, fused.confidence, d.scored.label),
                 fused.confidence)
            )
        kept = nms([c[0] for c in candidates], nms_iou)
        for sb in kept:
            out.append(
                PseudoLabel(img, sb.box, sb.label, sb.score, view.name, round_no)
            )
    return out


def _group_by_image(labels: Sequence[PseudoLabel]) -> dict[str, list[PseudoLabel]]:
    grouped: dict[str, list[PseudoLabel]] = {}
    for p in labels:
        grouped.setdefault(p.image_id, []).append(p)
    return grouped


def _oracle_precision(
    labels: Sequence[PseudoLabel], records_by_id: Mapping[str, ImageRecord]
) -> float | None:
    """Fraction of pseudo-labels matching a hidden GT at IoU >= 0.5."""
    if not labels:
        return None
    correct = 0
    for img, group in _group_by_image(labels).items():
        rec = records_by_id[img]
        mr = match_detections([p.to_scored() for p in group], list(rec.gts), 0.5)
        correct += sum(mr.det_is_tp)
    return correct / len(labels)


def _retrain_view(
    view: ViewState,
    accepted: Mapping[str, Sequence[PseudoLabel]],
    records_by_id: Mapping[str, ImageRecord],
    state: CoTrainState,
    config: CoTrainConfig,
) -> SkillModel:
    pseudo_scored = {
        img: [p.to_scored() for p in group] for img, group in accepted.items()
    }
    audit = audit_pseudo_labels(
        pseudo_scored, records_by_id, view.profile, view.base_skill
    )
    return retrain(
        view.base_skill, view.profile,
        state.n_base_annotations, state.n_base_occluded,
        audit, config.retrain_coeff,
    )


def _pool_records(
    records_by_id: Mapping[str, ImageRecord],
    split: DatasetSplit,
    config: CoTrainConfig,
    round_no: int,
) -> list[ImageRecord]:
    ids = list(split.unlabeled_pool)
    if config.unlabeled_subsample is not None and config.unlabeled_subsample < len(ids):
        rng = np.random.default_rng(
            derive_seed(config.seed, "pool-sample", round_no)
        )
        pick = rng.choice(len(ids), config.unlabeled_subsample, replace=False)
        ids = [ids[i] for i in sorted(pick)]
    return [records_by_id[i] for i in ids]


def exchange_round(
    state: CoTrainState,
    records_by_id: Mapping[str, ImageRecord],
    split: DatasetSplit,
    config: CoTrainConfig,
) -> CoTrainState:
    """One iteration: simultaneous pseudo-label generation from both
    views on the state as-is, exchange per mode, retrain from the round-0
    base skills, and record validation mAP."""
    round_no = state.round + 1
    pool = _pool_records(records_by_id, split, config, round_no)
    labels_a = labels_b = []
    if config.mode != "supervised":
        labels_a = generate_pseudo_labels(
            state.view_a, pool, config.tau_conf, config.pseudo_nms_iou,
            round_no, derive_seed(config.seed, "pool", "A", round_no),
            config.separation,
        )
        labels_b = generate_pseudo_labels(
            state.view_b, pool, config.tau_conf, config.pseudo_nms_iou,
            round_no, derive_seed(config.seed, "pool", "B", round_no),
            config.separation,
        )
    if config.mode == "cotrain":
        to_a, to_b = labels_b, labels_a
    elif config.mode == "selftrain":
        to_a, to_b = labels_a, labels_b
    else:
        to_a, to_b = [], []
    # replace-per-image-per-source: only images with fresh labels change
    for img, group in _group_by_image(to_a).items():
        state.accepted_for_a[img] = group
    for img, group in _group_by_image(to_b).items():
        state.accepted_for_b[img] = group
    state.view_a.skill = _retrain_view(
        state.view_a, state.accepted_for_a, records_by_id, state, config
    )
    state.view_b.skill = _retrain_view(
        state.view_b, state.accepted_for_b, records_by_id, state, config
    )
    state.round = round_no
    val_records = [records_by_id[i] for i in split.val]
    map_a, map_b, map_c = _val_maps(state, val_records, config)
    state.history.append(
        RoundRecord(
            round_no, map_a, map_b, map_c,
            n_accepted_for_a=sum(len(v) for v in state.accepted_for_a.values()),
            n_accepted_for_b=sum(len(v) for v in state.accepted_for_b.values()),
            pseudo_precision_a=_oracle_precision(labels_a, records_by_id),
            pseudo_precision_b=_oracle_precision(labels_b, records_by_id),
        )
    )
    return state


# ------------------------------------------------------------ checkpoints

def _skill_to_dict(s: SkillModel) -> dict:
    return {
        "base_recall": s.base_recall, "occlusion_penalty": s.occlusion_penalty,
        "jitter_sigma": s.jitter_sigma, "fp_rate": s.fp_rate,
    }


def _params_to_dict(p: DetectorParams) -> dict:
    return {
        "epochs": p.epochs, "confidence_threshold": p.confidence_threshold,
        "nms_iou": p.nms_iou, "batch_size": p.batch_size,
        "learning_rate": p.learning_rate, "anchor_scales": p.anchor_scales,
    }


def _view_to_dict(v: ViewState) -> dict:
    return {
        "name": v.name,
        "profile": v.profile.name,
        "params": _params_to_dict(v.params),
        "base_skill": _skill_to_dict(v.base_skill),
        "skill": _skill_to_dict(v.skill),
        "ensemble": json.loads(v.ensemble.to_json()) if v.ensemble else None,
    }


def _view_from_dict(d: dict) -> ViewState:
    from .detectors import PROFILES

    return ViewState(
        name=d["name"],
        profile=PROFILES[d["profile"]],
        params=DetectorParams(**d["params"]),
        base_skill=SkillModel(**d["base_skill"]),
        skill=SkillModel(**d["skill"]),
        ensemble=EnsembleClassifier.from_json(json.dumps(d["ensemble"]))
        if d.get("ensemble") else None,
    )


def save_checkpoint(state: CoTrainState, path: str | Path) -> None:
    doc = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "round": state.round,
        "mode": state.mode,
        "scene_regime": state.scene_regime,
        "n_base_annotations": state.n_base_annotations,
        "n_base_occluded": state.n_base_occluded,
        "view_a": _view_to_dict(state.view_a),
        "view_b": _view_to_dict(state.view_b),
        "accepted_for_a": {
            img: [p.to_dict() for p in group]
            for img, group in state.accepted_for_a.items()
        },
        "accepted_for_b": {
            img: [p.to_dict() for p in group]
            for img, group in state.accepted_for_b.items()
        },
        "history": [r.to_dict() for r in state.history],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> CoTrainState:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint_version {doc.get('checkpoint_version')!r}"
        )
    state = CoTrainState(
        round=int(doc["round"]),
        view_a=_view_from_dict(doc["view_a"]),
        view_b=_view_from_dict(doc["view_b"]),
        accepted_for_a={
            img: [PseudoLabel.from_dict(p) for p in group]
            for img, group in doc["accepted_for_a"].items()
        },
        accepted_for_b={
            img: [PseudoLabel.from_dict(p) for p in group]
            for img, group in doc["accepted_for_b"].items()
        },
        history=[RoundRecord.from_dict(r) for r in doc["history"]],
        n_base_annotations=int(doc["n_base_annotations"]),
        n_base_occluded=int(doc["n_base_occluded"]),
        scene_regime=doc["scene_regime"],
        mode=doc["mode"],
    )
    return state


def _checkpoint_path(run_dir: Path, round_no: int) -> Path:
    return run_dir / f"checkpoint_round_{round_no:03d}.json"


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return None
    found = sorted(run_dir.glob("checkpoint_round_*.json"))
    return found[-1] if found else None


def _snapshot(state: CoTrainState) -> dict:
    """Cheap copy of what the best-round restore needs."""
    return {
        "round": state.round,
        "skill_a": state.view_a.skill,
        "skill_b": state.view_b.skill,
    }


class PatienceTracker:
    """Stopping rule: a round is stagnant when neither view improved its
    best validation mAP so far by at least epsilon; `patience` stagnant
    rounds in a row stop the run."""

    def __init__(self, epsilon: float, patience: int,
                 first_a: float, first_b: float) -> None:
        self.epsilon = epsilon
        self.patience = patience
        self.best_a = first_a
        self.best_b = first_b
        self.stagnant = 0

    def update(self, val_a: float, val_b: float) -> None:
        gain_a = val_a - self.best_a
        gain_b = val_b - self.best_b
        if gain_a < self.epsilon and gain_b < self.epsilon:
            self.stagnant += 1
        else:
            self.stagnant = 0
        self.best_a = max(self.best_a, val_a)
        self.best_b = max(self.best_b, val_b)

    @property
    def should_stop(self) -> bool:
        return self.stagnant >= self.patience


def run_cotraining(
    records_by_id: Mapping[str, ImageRecord],
    split: DatasetSplit,
    config: CoTrainConfig,
    run_dir: str | Path | None = None,
    resume: bool = False,
) -> CoTrainResult:
    """Initial phase, then exchange rounds until max_rounds or the
    patience rule fires; the test set is evaluated exactly once at the
    end using the round whose combined validation mAP was best."""
    rd = Path(run_dir) if run_dir is not None else None
    if rd is not None:
        rd.mkdir(parents=True, exist_ok=True)
    state = None
    if resume and rd is not None:
        ck = latest_checkpoint(rd)
        if ck is not None:
            state = load_checkpoint(ck)
    try:
        if state is None:
            state = initial_supervised_phase(records_by_id, split, config)
            if rd is not None:
                save_checkpoint(state, _checkpoint_path(rd, 0))
        snapshots = {state.history[r].round: None for r in range(len(state.history))}
        snapshots[state.round] = _snapshot(state)
        tracker = PatienceTracker(
            config.epsilon, config.patience,
            state.history[0].val_map_a, state.history[0].val_map_b,
        )
        # replay history so a resumed run keeps the same patience state
        for rec in state.history[1:]:
            tracker.update(rec.val_map_a, rec.val_map_b)
        rounds_to_run = (
            0 if config.mode == "supervised" else config.max_rounds - state.round
        )
        for _ in range(max(rounds_to_run, 0)):
            if tracker.should_stop:
                break
            state = exchange_round(state, records_by_id, split, config)
            rec = state.history[-1]
            tracker.update(rec.val_map_a, rec.val_map_b)
            snapshots[state.round] = _snapshot(state)
            if rd is not None:
                save_checkpoint(state, _checkpoint_path(rd, state.round))
    except Exception:
        if rd is not None and state is not None:
            save_checkpoint(state, rd / "crash_state.json")
        raise

    # single test pass on the round whose combined validation mAP was best
    # (first max wins ties)
    best_round = max(
        state.history, key=lambda r: (r.val_map_combined, -r.round)
    ).round
    snap = snapshots.get(best_round)
    if snap is None:
        if rd is None:
            raise RuntimeError(
                f"no snapshot or checkpoint for best round {best_round}"
            )
        ck_state = load_checkpoint(_checkpoint_path(rd, best_round))
        snap = _snapshot(ck_state)
    state.view_a.skill = snap["skill_a"]
    state.view_b.skill = snap["skill_b"]
    test_records = [records_by_id[i] for i in split.test]
    gts = {r.image_id: list(r.gts) for r in test_records}
    da = predict_verified(
        state.view_a, test_records, derive_seed(config.seed, "test", "A"),
        config.separation,
    )
    db = predict_verified(
        state.view_b, test_records, derive_seed(config.seed, "test", "B"),
        config.separation,
    )
    report_a = mean_average_precision(da, gts)
    report_b = mean_average_precision(db, gts)
    dc = merge_views(da, db, config.merge_nms_iou)
    report_combined = mean_average_precision(dc, gts)
    result = CoTrainResult(state, best_round, report_a, report_b, report_combined)
    if rd is not None:
        (rd / "result.json").write_text(
            json.dumps(result_to_dict(result)), encoding="utf-8"
        )
    return result


def report_to_dict(rep: EvalReport) -> dict:
    return {
        "map_coco": rep.map_coco,
        "ap75": rep.ap75,
        "ar300": rep.ar300,
        "ap_per_threshold": {f"{t:.2f}": v for t, v in rep.ap_per_threshold.items()},
        "notes": list(rep.notes),
    }


def result_to_dict(result: CoTrainResult) -> dict:
    return {
        "best_round": result.best_round,
        "rounds_completed": result.state.round,
        "mode": result.state.mode,
        "history": [r.to_dict() for r in result.state.history],
        "report_a": report_to_dict(result.report_a),
        "report_b": report_to_dict(result.report_b),
        "report_combined": report_to_dict(result.report_combined),
    }
