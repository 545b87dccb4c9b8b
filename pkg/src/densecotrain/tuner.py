"""Metaheuristic search over the 20-gene hyperparameter vector that
configures both detector views and the three verification classifiers.

Two optimizers ship behind one interface: a genetic algorithm
(tournament selection, elitism, uniform crossover) and simulated
annealing (single-gene moves, Metropolis acceptance, geometric cooling).
The default configuration vector is always injected, so tuning can only
match or beat the defaults.  Objective scores are memoized by vector, and
only fresh evaluations consume budget.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .cotrain import CoTrainConfig, InfeasibleViewError, initial_supervised_phase
from .data import DatasetSplit, ImageRecord
from .detectors import ANCHOR_MENU, BATCH_MENU, DetectorParams, derive_seed
from .ensemble import SVM_KERNELS, EnsembleParams, RfParams, SvmParams, XgbParams

ALGORITHMS = ("ga", "sa")


@dataclass(frozen=True)
class GeneSpec:
    """Bounds or menu for one gene of the search space."""

    name: str
    kind: str  # continuous | log | integer | categorical
    low: float | None = None
    high: float | None = None
    menu: tuple = ()

    def __post_init__(self) -> None:
        if self.kind not in ("continuous", "log", "integer", "categorical"):
            raise ValueError(f"gene {self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.menu:
                raise ValueError(f"gene {self.name}: categorical menu is empty")
        else:
            if self.low is None or self.high is None or not (self.low < self.high):
                raise ValueError(f"gene {self.name}: needs low < high bounds")
            if self.kind == "log" and self.low <= 0:
                raise ValueError(f"gene {self.name}: log bounds must be positive")


@dataclass(frozen=True)
class HyperVector:
    """The 20 tunable cells: boosted-trees, random-forest, and SVM blocks,
    then the single-stage and anchor-based detector blocks."""

    lr_xgb: float
    d_xgb: int
    rc_xgb: float
    nt_xgb: int
    d_rf: int
    nt_rf: int
    c_svm: float
    k_svm: str
    g_svm: float
    ep_yolo: int
    ct_yolo: float
    iou_yolo: float
    bs_yolo: int
    lr_yolo: float
    ep_rcnn: int
    ct_rcnn: float
    iou_rcnn: float
    bs_rcnn: int
    lr_rcnn: float
    as_rcnn: str


GENE_NAMES = tuple(f.name for f in fields(HyperVector))

GENE_SPECS: tuple[GeneSpec, ...] = (
    GeneSpec("lr_xgb", "continuous", 0.01, 0.5),
    GeneSpec("d_xgb", "integer", 1, 12),
    GeneSpec("rc_xgb", "continuous", 0.0, 10.0),
    GeneSpec("nt_xgb", "integer", 10, 300),
    GeneSpec("d_rf", "integer", 1, 20),
    GeneSpec("nt_rf", "integer", 10, 300),
    GeneSpec("c_svm", "log", 0.01, 100.0),
    GeneSpec("k_svm", "categorical", menu=SVM_KERNELS),
    GeneSpec("g_svm", "log", 1e-4, 10.0),
    GeneSpec("ep_yolo", "integer", 1, 60),
    GeneSpec("ct_yolo", "continuous", 0.05, 0.95),
    GeneSpec("iou_yolo", "continuous", 0.3, 0.9),
    GeneSpec("bs_yolo", "categorical", menu=BATCH_MENU),
    GeneSpec("lr_yolo", "log", 1e-5, 1e-2),
    GeneSpec("ep_rcnn", "integer", 1, 60),
    GeneSpec("ct_rcnn", "continuous", 0.05, 0.95),
    GeneSpec("iou_rcnn", "continuous", 0.3, 0.9),
    GeneSpec("bs_rcnn", "categorical", menu=BATCH_MENU),
    GeneSpec("lr_rcnn", "log", 1e-5, 1e-2),
    GeneSpec("as_rcnn", "categorical", menu=ANCHOR_MENU),
)

# the shipped default configuration, expressed as a vector; injected into
# every search so the tuned result can only match or beat it
DEFAULT_VECTOR = HyperVector(
    lr_xgb=0.15, d_xgb=3, rc_xgb=1.0, nt_xgb=30,
    d_rf=8, nt_rf=25,
    c_svm=1.0, k_svm="rbf", g_svm=1.0 / 16.0,
    ep_yolo=20, ct_yolo=0.25, iou_yolo=0.5, bs_yolo=16, lr_yolo=2e-3,
    ep_rcnn=20, ct_rcnn=0.25, iou_rcnn=0.5, bs_rcnn=16, lr_rcnn=1e-3,
    as_rcnn="medium",
)


@dataclass(frozen=True)
class TunerConfig:
    algorithm: str = "ga"
    budget: int = 16
    population: int = 8
    mutation_rate: float = 0.1
    crossover_rate: float = 0.9
    initial_temperature: float = 0.05
    cooling_rate: float = 0.97
    seed: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if not (0.0 <= self.mutation_rate <= 1.0 and 0.0 <= self.crossover_rate <= 1.0):
            raise ValueError("rates must be in [0, 1]")
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.initial_temperature < 0 or not (0.0 < self.cooling_rate <= 1.0):
            raise ValueError("bad annealing schedule")


@dataclass(frozen=True)
class TraceEntry:
    index: int  # 1-based fresh-evaluation counter
    score: float
    best_so_far: float
    vector: HyperVector


@dataclass(frozen=True)
class TuneReport:
    best_vector: HyperVector
    best_score: float
    trace: tuple[TraceEntry, ...]
    n_evaluations: int
    algorithm: str


def vector_values(v: HyperVector) -> tuple:
    return tuple(getattr(v, name) for name in GENE_NAMES)


def _check_specs(specs: Sequence[GeneSpec]) -> dict[str, GeneSpec]:
    by_name = {s.name: s for s in specs}
    missing = [n for n in GENE_NAMES if n not in by_name]
    if missing:
        raise ValueError(f"gene specs missing: {', '.join(missing)}")
    return by_name


def validate_vector(v: HyperVector, specs: Sequence[GeneSpec] = GENE_SPECS) -> None:
    by_name = _check_specs(specs)
    for name in GENE_NAMES:
        spec = by_name[name]
        val = getattr(v, name)
        if spec.kind == "categorical":
            if val not in spec.menu:
                raise ValueError(f"gene {name}: {val!r} not in menu {spec.menu}")
        elif spec.kind == "integer":
            if val != int(val) or not (spec.low <= val <= spec.high):
                raise ValueError(
                    f"gene {name}: {val!r} not an integer in [{spec.low}, {spec.high}]"
                )
        else:
            if not (spec.low <= val <= spec.high):
                raise ValueError(
                    f"gene {name}: {val!r} outside [{spec.low}, {spec.high}]"
                )


def _sample_gene(spec: GeneSpec, rng: np.random.Generator):
    if spec.kind == "categorical":
        return spec.menu[int(rng.integers(len(spec.menu)))]
    if spec.kind == "integer":
        return int(rng.integers(int(spec.low), int(spec.high) + 1))
    if spec.kind == "log":
        return float(10.0 ** rng.uniform(math.log10(spec.low), math.log10(spec.high)))
    return float(rng.uniform(spec.low, spec.high))


def random_vector(specs: Sequence[GeneSpec] = GENE_SPECS, seed: int = 0) -> HyperVector:
    """Uniform sample of every gene (log-space for log genes)."""
    by_name = _check_specs(specs)
    rng = np.random.default_rng(seed)
    return HyperVector(**{n: _sample_gene(by_name[n], rng) for n in GENE_NAMES})


def _perturb_gene(spec: GeneSpec, val, rng: np.random.Generator,
                  sigma_scale: float, int_step_max: int):
    if spec.kind == "categorical":
        return spec.menu[int(rng.integers(len(spec.menu)))]
    if spec.kind == "integer":
        step = int(rng.integers(1, int_step_max + 1))
        sign = 1 if rng.random() < 0.5 else -1
        return int(min(max(val + sign * step, spec.low), spec.high))
    if spec.kind == "log":
        lo, hi = math.log10(spec.low), math.log10(spec.high)
        x = math.log10(val) + rng.normal(0.0, sigma_scale * (hi - lo))
        return float(10.0 ** min(max(x, lo), hi))
    x = val + rng.normal(0.0, sigma_scale * (spec.high - spec.low))
    return float(min(max(x, spec.low), spec.high))


def mutate(
    v: HyperVector,
    specs: Sequence[GeneSpec] = GENE_SPECS,
    rate: float = 0.2,
    seed: int = 0,
    *,
    sigma_scale: float = 0.1,
    int_step_max: int = 3,
) -> HyperVector:
    """Independent per-gene perturbation with probability `rate`: Gaussian
    step (sigma = sigma_scale of the range, clamped) for continuous genes,
    a +-1..int_step_max step for integers, a menu resample for
    categoricals."""
    by_name = _check_specs(specs)
    rng = np.random.default_rng(seed)
    out = {}
    for name in GENE_NAMES:
        val = getattr(v, name)
        if rng.random() < rate:
            val = _perturb_gene(by_name[name], val, rng, sigma_scale, int_step_max)
        out[name] = val
    return HyperVector(**out)


def crossover(
    a: HyperVector, b: HyperVector, seed: int = 0,
    *, mask: Sequence[bool] | None = None,
) -> tuple[HyperVector, HyperVector]:
    """Uniform crossover: per gene, child1 takes a's value where the mask
    is true and b's elsewhere; child2 takes the complement."""
    if mask is None:
        rng = np.random.default_rng(seed)
        mask = rng.random(len(GENE_NAMES)) < 0.5
    if len(mask) != len(GENE_NAMES):
        raise ValueError(f"mask must have {len(GENE_NAMES)} entries")
    c1, c2 = {}, {}
    for take_a, name in zip(mask, GENE_NAMES):
        av, bv = getattr(a, name), getattr(b, name)
        c1[name] = av if take_a else bv
        c2[name] = bv if take_a else av
    return HyperVector(**c1), HyperVector(**c2)


class _ScoreTracker:
    """Memoizing objective wrapper; only fresh evaluations consume budget
    and append to the trace."""

    def __init__(self, objective: Callable[[HyperVector], float], budget: int):
        self.objective = objective
        self.budget = budget
        self.memo: dict[tuple, float] = {}
        self.trace: list[TraceEntry] = []
        self.best_vector: HyperVector | None = None
        self.best_score = -math.inf

    @property
    def exhausted(self) -> bool:
        return len(self.memo) >= self.budget

    def score(self, v: HyperVector) -> float | None:
        """Score the vector, or None when the budget is exhausted and the
        vector has not been seen."""
        key = vector_values(v)
        if key in self.memo:
            return self.memo[key]
        if self.exhausted:
            return None
        s = self.objective(v)
        if not (isinstance(s, (int, float)) and math.isfinite(s) and 0.0 <= s <= 1.0):
            raise ValueError(
                f"objective returned invalid score {s!r} for vector {key}"
            )
        s = float(s)
        self.memo[key] = s
        if s > self.best_score:
            self.best_score = s
            self.best_vector = v
        self.trace.append(TraceEntry(len(self.memo), s, self.best_score, v))
        return s

    def report(self, algorithm: str) -> TuneReport:
        if self.best_vector is None:
            raise ValueError("no objective evaluations were performed")
        return TuneReport(
            self.best_vector, self.best_score, tuple(self.trace),
            len(self.memo), algorithm,
        )


def _tournament(pop, scores, rng, k=3) -> HyperVector:
    best_i = None
    for _ in range(k):
        i = int(rng.integers(len(pop)))
        if best_i is None or scores[i] > scores[best_i]:
            best_i = i
    return pop[best_i]


def _optimize_ga(tracker, config, specs) -> TuneReport:
    rng = np.random.default_rng(derive_seed(config.seed, "tuner", "ga"))
    pop = [DEFAULT_VECTOR] + [
        random_vector(specs, seed=int(rng.integers(2**63)))
        for _ in range(config.population - 1)
    ]
    scores = []
    for v in pop:
        s = tracker.score(v)
        if s is None:
            return tracker.report("ga")
        scores.append(s)
    while not tracker.exhausted:
        elite_i = max(range(len(pop)), key=lambda i: scores[i])
        new_pop = [pop[elite_i]]
        while len(new_pop) < config.population:
            p1 = _tournament(pop, scores, rng)
            p2 = _tournament(pop, scores, rng)
            if rng.random() < config.crossover_rate:
                c1, c2 = crossover(p1, p2, seed=int(rng.integers(2**63)))
            else:
                c1, c2 = p1, p2
            c1 = mutate(c1, specs, config.mutation_rate, seed=int(rng.integers(2**63)))
            c2 = mutate(c2, specs, config.mutation_rate, seed=int(rng.integers(2**63)))
            new_pop.append(c1)
            if len(new_pop) < config.population:
                new_pop.append(c2)
        fresh_before = len(tracker.memo)
        new_scores = []
        for v in new_pop:
            s = tracker.score(v)
            if s is None:
                return tracker.report("ga")
            new_scores.append(s)
        if len(tracker.memo) == fresh_before and not tracker.exhausted:
            # generation was fully memoized; inject a fresh random vector
            # so the search keeps consuming budget
            for _ in range(16):
                rv = random_vector(specs, seed=int(rng.integers(2**63)))
                s = tracker.score(rv)
                if s is None:
                    return tracker.report("ga")
                if len(tracker.memo) > fresh_before:
                    worst_i = min(
                        (i for i in range(len(new_pop)) if i != 0),
                        key=lambda i: new_scores[i],
                    )
                    new_pop[worst_i] = rv
                    new_scores[worst_i] = s
                    break
        pop, scores = new_pop, new_scores
    return tracker.report("ga")


def _optimize_sa(tracker, config, specs) -> TuneReport:
    rng = np.random.default_rng(derive_seed(config.seed, "tuner", "sa"))
    by_name = _check_specs(specs)
    current = DEFAULT_VECTOR
    current_score = tracker.score(current)
    if current_score is None:
        return tracker.report("sa")
    temperature = config.initial_temperature
    while not tracker.exhausted:
        name = GENE_NAMES[int(rng.integers(len(GENE_NAMES)))]
        moved = _perturb_gene(
            by_name[name], getattr(current, name), rng,
            sigma_scale=0.1, int_step_max=3,
        )
        neighbor = replace(current, **{name: moved})
        s = tracker.score(neighbor)
        if s is None:
            break
        delta = s - current_score
        accept = delta >= 0 or (
            temperature > 0 and rng.random() < math.exp(delta / temperature)
        )
        if accept:
            current, current_score = neighbor, s
        temperature *= config.cooling_rate
    return tracker.report("sa")


def optimize(
    objective: Callable[[HyperVector], float],
    config: TunerConfig,
    specs: Sequence[GeneSpec] = GENE_SPECS,
) -> TuneReport:
    """Maximize the objective over the gene space within config.budget
    fresh evaluations; deterministic given (objective, config, specs)."""
    _check_specs(specs)
    if config.algorithm == "ga" and config.budget < config.population:
        raise ValueError(
            f"ga needs budget >= population, got {config.budget} < {config.population}"
        )
    tracker = _ScoreTracker(objective, config.budget)
    if config.algorithm == "ga":
        return _optimize_ga(tracker, config, specs)
    return _optimize_sa(tracker, config, specs)


def normalized_distance(
    a: HyperVector, b: HyperVector, specs: Sequence[GeneSpec] = GENE_SPECS
) -> float:
    """Mean per-gene distance in [0, 1]: range-scaled for numeric genes
    (log-space for log genes), 0/1 mismatch for categoricals."""
    by_name = _check_specs(specs)
    total = 0.0
    for name in GENE_NAMES:
        spec = by_name[name]
        av, bv = getattr(a, name), getattr(b, name)
        if spec.kind == "categorical":
            total += 0.0 if av == bv else 1.0
        elif spec.kind == "log":
            lo, hi = math.log10(spec.low), math.log10(spec.high)
            total += abs(math.log10(av) - math.log10(bv)) / (hi - lo)
        else:
            total += abs(av - bv) / (spec.high - spec.low)
    return total / len(GENE_NAMES)


def planted_objective(
    target: HyperVector, specs: Sequence[GeneSpec] = GENE_SPECS
) -> Callable[[HyperVector], float]:
    """Benchmark surrogate: 1 minus the normalized distance to a hidden
    target vector, so the planted optimum scores exactly 1."""
    def f(v: HyperVector) -> float:
        return 1.0 - normalized_distance(v, target, specs)
    return f


def vector_to_params(
    v: HyperVector,
) -> tuple[EnsembleParams, DetectorParams, DetectorParams]:
    """Route genes to parameter blocks: the anchor-bearing detector genes
    drive the anchor-aware precise view, the anchor-free genes drive the
    context view, and the rest configure the verification ensemble."""
    ens = EnsembleParams(
        xgb=XgbParams(
            learning_rate=float(v.lr_xgb), max_depth=int(v.d_xgb),
            l2_reg=float(v.rc_xgb), n_trees=int(v.nt_xgb),
        ),
        rf=RfParams(max_depth=int(v.d_rf), n_trees=int(v.nt_rf)),
        svm=SvmParams(c=float(v.c_svm), kernel=str(v.k_svm), gamma=float(v.g_svm)),
    )
    loc = DetectorParams(
        epochs=int(v.ep_rcnn), confidence_threshold=float(v.ct_rcnn),
        nms_iou=float(v.iou_rcnn), batch_size=int(v.bs_rcnn),
        learning_rate=float(v.lr_rcnn), anchor_scales=str(v.as_rcnn),
    )
    ctx = DetectorParams(
        epochs=int(v.ep_yolo), confidence_threshold=float(v.ct_yolo),
        nms_iou=float(v.iou_yolo), batch_size=int(v.bs_yolo),
        learning_rate=float(v.lr_yolo), anchor_scales=None,
    )
    return ens, loc, ctx


def make_supervised_objective(
    records_by_id: Mapping[str, ImageRecord],
    split: DatasetSplit,
    base_config: CoTrainConfig | None = None,
) -> Callable[[HyperVector], float]:
    """Objective for tuning: combined validation mAP of the initial
    supervised phase under the candidate's parameters."""
    base = base_config if base_config is not None else CoTrainConfig()

    def objective(v: HyperVector) -> float:
        ens, loc, ctx = vector_to_params(v)
        cfg = replace(base, loc_params=loc, ctx_params=ctx, ensemble_params=ens)
        try:
            state = initial_supervised_phase(records_by_id, split, cfg)
        except InfeasibleViewError:
            # candidate starves its own verification stage (e.g. a
            # confidence threshold that removes every false positive);
            # score it worst instead of killing the whole search
            return 0.0
        return state.history[0].val_map_combined

    return objective


def tune_pipeline(
    records_by_id: Mapping[str, ImageRecord],
    split: DatasetSplit,
    tuner_config: TunerConfig,
    base_config: CoTrainConfig | None = None,
) -> TuneReport:
    """Tune against the combined validation mAP of the initial supervised
    phase; the best vector is what a full co-training run should use."""
    objective = make_supervised_objective(records_by_id, split, base_config)
    cfg = tuner_config
    if cfg.algorithm == "ga" and cfg.population > cfg.budget:
        cfg = replace(cfg, population=cfg.budget)
    return optimize(objective, cfg, GENE_SPECS)


def write_trace_csv(report: TuneReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["evaluation", "score", "best_so_far", *GENE_NAMES])
        for entry in report.trace:
            writer.writerow(
                [entry.index, entry.score, entry.best_so_far,
                 *vector_values(entry.vector)]
            )
