"""Fine-tuning trials, space scoring, greedy discovery and method comparison.

Everything that ends up in a table is derived from trial records alone
(:func:`render_stage_tables`, :func:`render_comparison_table`), so a saved
trial log re-renders byte-identical tables.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import designspace as ds
from .designspace import ALLOCATION, GROUPING, TUNABLE, AllocationPattern, Component, DesignSpace, GroupingPattern
from .errors import (DiscoveryError, EvaluationError, HyperparameterError, InfeasibleBudgetError, InputError,
                     SamplingError)
from .estimator import PEFTClassifier, PEFTRegressor
from .peft import PAPER_STRATEGY_MENU, all_strategy_sets
from .stats import stars, welch_t
from .tasks import TaskKind

DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_HEAD_LEARNING_RATE = 3e-2
LOG_FIELDS = ("point_id", "task", "seed", "epochs", "metric", "trainable_params", "wall_ms")


def derive_seed(*parts):
    """Stable 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


@dataclass(frozen=True)
class TrialResult:
    point_id: str
    task: str
    seed: int
    epochs: int
    metric: float
    trainable_params: int
    wall_ms: int
    stage: str = ""
    candidate: str = ""
    model: int = 0
    loss_trace: tuple = field(default=(), compare=False)
    note: str = ""

    def to_record(self):
        out = {k: getattr(self, k) for k in LOG_FIELDS}
        out.update(stage=self.stage, candidate=self.candidate, model=self.model)
        if self.note:
            out["note"] = self.note
        return out

    @classmethod
    def from_record(cls, d):
        missing = [k for k in LOG_FIELDS if k not in d]
        if missing:
            raise InputError(f"trial record lacks {missing}")
        metric = d["metric"]
        if metric is not None and not isinstance(metric, (int, float)):
            raise InputError(f"metric must be a number or null, got {metric!r}")
        return cls(str(d["point_id"]), str(d["task"]), int(d["seed"]), int(d["epochs"]),
                   None if metric is None else float(metric), int(d["trainable_params"]), int(d["wall_ms"]),
                   str(d.get("stage", "")), str(d.get("candidate", "")), int(d.get("model", 0)),
                   note=str(d.get("note", "")))

    @property
    def feasible(self):
        return self.metric is not None

    def tagged(self, stage, candidate, model):
        return TrialResult(self.point_id, self.task, self.seed, self.epochs, self.metric, self.trainable_params,
                           self.wall_ms, stage, candidate, model, self.loss_trace, self.note)


def train_trial(checkpoint, point, task, epochs, learning_rate=DEFAULT_LEARNING_RATE,
                head_learning_rate=DEFAULT_HEAD_LEARNING_RATE, weight_decay=0.01, warmup_ratio=0.06, batch_size=32,
                seed=None, timestamp=True, return_estimator=False):
    """Clone ``checkpoint``, attach ``point``, fine-tune on ``task`` and score the validation split."""
    if int(epochs) != epochs or epochs < 1:
        raise HyperparameterError(f"epochs must be a positive integer, got {epochs}")
    seed = derive_seed(point.seed, task.spec.seed) if seed is None else seed
    cls = PEFTRegressor if task.spec.kind is TaskKind.REGRESSION else PEFTClassifier
    est = cls(checkpoint, design=point, epochs=epochs, learning_rate=learning_rate,
              head_learning_rate=head_learning_rate, weight_decay=weight_decay, warmup_ratio=warmup_ratio,
              batch_size=batch_size, random_state=seed)
    start = time.perf_counter()
    est.fit(task.train_x, task.train_y)
    metric = task.metric(est.predict(task.val_x))
    wall = int(round((time.perf_counter() - start) * 1000)) if timestamp else 0
    result = TrialResult(point.point_id, task.name, int(seed), int(epochs), float(metric), int(est.n_trainable_),
                         wall, loss_trace=tuple(est.loss_curve_))
    return (result, est) if return_estimator else result


# --- scorers ----------------------------------------------------------------------

class TrainingScorer:
    """Scores a point on a task by actually fine-tuning it."""

    def __init__(self, checkpoint, datasets, epochs, timestamp=True, **hyper):
        self.checkpoint = checkpoint
        self.datasets = list(datasets)
        self.epochs = epochs
        self.timestamp = timestamp
        self.hyper = hyper

    @property
    def task_names(self):
        return [d.name for d in self.datasets]

    def __call__(self, point, task_index, seed):
        return train_trial(self.checkpoint, point, self.datasets[task_index], self.epochs,
                           seed=seed, timestamp=self.timestamp, **self.hyper)


def classify_grouping(sizes):
    for pattern in ds.GROUPING_CANDIDATES:
        if ds.satisfies_grouping(sizes, pattern):
            return pattern
    return GroupingPattern.UNCONSTRAINED


def classify_allocation(budgets):
    budgets = list(budgets)
    if all(b == budgets[0] for b in budgets):
        return AllocationPattern.UNIFORM
    for pattern in (AllocationPattern.INCREASING, AllocationPattern.DECREASING):
        if ds.satisfies_allocation(budgets, pattern):
            return pattern
    return AllocationPattern.UNCONSTRAINED


def _jaccard(a, b):
    return len(a & b) / len(a | b) if a | b else 1.0


class SurrogateScorer:
    """Scores a point by how well it agrees with a planted, fully constrained target space.

    The score is a sum of one term per component: exact match of the
    grouping and allocation shapes, Jaccard overlap of the tunable groups,
    and for each target-tunable group the Jaccard overlap of its strategy set
    (0 if the point leaves that group untuned). Gaussian noise of scale
    ``sigma`` is added per trial.
    """

    def __init__(self, target, task_names, config, sigma=0.0, seed=0):
        self.target = target
        self.task_names = list(task_names)
        self.config = config
        self.sigma = float(sigma)
        self.seed = seed

    def agreement(self, point):
        t = self.target
        score = 0.0
        grouped = len(point.partition) == t.group_count
        if grouped and classify_grouping(point.partition) is t.grouping:
            score += 1.0
        tuned_layers = [i for g, r in enumerate(ds.Partition(point.partition).ranges) if point.tunable[g] for i in r]
        # a single tuned layer is consistent with every allocation shape
        if len(tuned_layers) == 1 or (
                tuned_layers and classify_allocation([point.budgets[i] for i in tuned_layers]) is t.allocation):
            score += 1.0
        if grouped:
            mine = {g for g, on in enumerate(point.tunable) if on}
            score += _jaccard(mine, set(t.tunable))
            for g in t.tunable:
                if point.tunable[g]:
                    score += _jaccard(point.strategies[g], t.strategies[g])
        return score

    def __call__(self, point, task_index, seed):
        noise = self.sigma * np.random.default_rng([self.seed, seed % 2 ** 63, task_index]).standard_normal()
        return TrialResult(point.point_id, self.task_names[task_index], int(seed), 0,
                           float(self.agreement(point) + noise),
                           point.trainable_params(self.config.model_dim, self.config.ff_dim), 0)


def planted_target(seed, group_count=4, tunable_menu="paper", strategy_menu="paper",
                   budget_fraction=ds.DEFAULT_BUDGET_FRACTION):
    """A random fully constrained space drawn from the discovery menus."""
    rng = np.random.default_rng([seed, 909])
    tun_menu = tunable_candidates(group_count, tunable_menu)
    strat_menu = strategy_candidates(strategy_menu)
    tunable = tun_menu[int(rng.integers(len(tun_menu)))]
    strategies = [None] * group_count
    for g in tunable:
        strategies[g] = strat_menu[int(rng.integers(len(strat_menu)))]
    return DesignSpace(
        grouping=ds.GROUPING_CANDIDATES[int(rng.integers(len(ds.GROUPING_CANDIDATES)))],
        group_count=group_count,
        allocation=ds.ALLOCATION_CANDIDATES[int(rng.integers(len(ds.ALLOCATION_CANDIDATES)))],
        tunable=tunable,
        strategies=tuple(strategies),
        budget_fraction=budget_fraction,
        label="target",
    )


def tunable_candidates(group_count, menu):
    if menu == "paper" and group_count == 4:
        return list(ds.PAPER_TUNABLE_MENU)
    if menu in ("paper", "full"):
        return ds.full_tunable_menu(group_count)
    raise HyperparameterError(f"unknown tunable menu {menu!r}")


def strategy_candidates(menu):
    if menu == "paper":
        return list(PAPER_STRATEGY_MENU)
    if menu == "full":
        return all_strategy_sets()
    raise HyperparameterError(f"unknown strategy menu {menu!r}")


# --- evaluation -------------------------------------------------------------------

_WORKER_SCORER = None


def _install(scorer):
    global _WORKER_SCORER
    _WORKER_SCORER = scorer


def _run_job(job):
    point, task_index, seed = job
    return _WORKER_SCORER(point, task_index, seed)


def _run_jobs(scorer, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        out = []
        for point, task_index, seed in jobs:
            try:
                out.append(scorer(point, task_index, seed))
            except Exception as exc:
                raise EvaluationError(f"trial failed: {exc}", partial=out) from exc
        return out
    with ProcessPoolExecutor(max_workers=workers, initializer=_install, initargs=(scorer,)) as pool:
        futures = [pool.submit(_run_job, job) for job in jobs]
        out = []
        for fut in futures:
            try:
                out.append(fut.result())
            except Exception as exc:
                raise EvaluationError(f"trial failed: {exc}", partial=out) from exc
        return out


@dataclass(frozen=True)
class SpaceScore:
    label: str
    tasks: tuple
    means: tuple
    stds: tuple
    n_models: int
    n_epochs: int

    @property
    def grand_average(self):
        return float(np.mean(self.means))

    @property
    def pooled_std(self):
        return float(math.sqrt(np.mean(np.square(self.stds))))

    def to_dict(self):
        out = asdict(self)
        out.update(tasks=list(self.tasks), means=list(self.means), stds=list(self.stds),
                   grand_average=self.grand_average, pooled_std=self.pooled_std)
        return out


def _std(values):
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(label, records):
    """Per-task mean/std over models, tasks in order of first appearance."""
    by_task = {}
    for r in records:
        by_task.setdefault(r.task, []).append(r.metric)
    tasks = tuple(by_task)
    n_models = len({r.model for r in records})
    epochs = records[0].epochs if records else 0
    return SpaceScore(label, tasks, tuple(float(np.mean(by_task[t])) for t in tasks),
                      tuple(_std(by_task[t]) for t in tasks), n_models, epochs)


MAX_DRAWS_PER_MODEL = 10


def sample_feasible(space, config, n, rng):
    """Draw ``n`` points, redrawing any that cannot be materialised at all.

    Gives up with :class:`SamplingError` after ``MAX_DRAWS_PER_MODEL * n`` draws.
    """
    points, last = [], None
    for _ in range(MAX_DRAWS_PER_MODEL * n):
        try:
            points.append(ds.sample_design(space, config, rng))
        except SamplingError as exc:
            last = exc
            continue
        if len(points) == n:
            return points
    raise SamplingError(f"only {len(points)} of {n} draws from {space.label} were feasible: {last}")


def evaluate_space(space, scorer, config, n_models, seed, workers=1, stage="", candidate=""):
    """Sample ``n_models`` points and score each on every task; returns ``(SpaceScore, records)``.

    Points are drawn by the caller's process in a fixed order and trials are
    collected in submission order, so the result does not depend on ``workers``.
    """
    if n_models < 1:
        raise HyperparameterError(f"n_models must be >= 1, got {n_models}")
    points = sample_feasible(space, config, n_models, np.random.default_rng(seed))
    jobs = [(p, t, derive_seed(p.seed % 2 ** 63, t)) for p in points for t in range(len(scorer.task_names))]
    raw = _run_jobs(scorer, jobs, workers)
    n_tasks = len(scorer.task_names)
    records = [r.tagged(stage, candidate, k // n_tasks) for k, r in enumerate(raw)]
    return aggregate(space.label, records), records


# --- discovery --------------------------------------------------------------------

@dataclass
class CandidateRecord:
    label: str
    score: SpaceScore = None
    note: str = ""

    def to_dict(self):
        return {"label": self.label, "score": None if self.score is None else self.score.to_dict(),
                "note": self.note}


@dataclass
class StageRecord:
    component: str
    candidates: list
    winner: str = None
    tie_break: str = ""

    def to_dict(self):
        return {"component": self.component, "candidates": [c.to_dict() for c in self.candidates],
                "winner": self.winner, "tie_break": self.tie_break}


@dataclass
class DiscoveryReport:
    stages: list
    final_space: DesignSpace
    target: DesignSpace = None

    @property
    def stage_order(self):
        return [s.component for s in self.stages]

    @property
    def recovered(self):
        if self.target is None:
            return None
        return same_constraints(self.final_space, self.target)

    def to_dict(self):
        out = {"stages": [s.to_dict() for s in self.stages], "final_space": self.final_space.to_dict()}
        if self.target is not None:
            out["planted_target"] = self.target.to_dict()
            out["recovered"] = self.recovered
        return out


def same_constraints(a, b):
    if (a.grouping, a.allocation, a.tunable, a.group_count) != (b.grouping, b.allocation, b.tunable, b.group_count):
        return False
    groups = range(a.group_count) if a.tunable is None else a.tunable
    return all(a.strategies[g] == b.strategies[g] for g in groups)


def select_winner(candidates):
    """Index of the best scored candidate and a note on how ties were broken.

    Order: higher grand average, then lower pooled std, then menu position.
    """
    scored = [(i, c.score) for i, c in enumerate(candidates) if c.score is not None]
    if not scored:
        return None, ""
    best = max(s.grand_average for _, s in scored)
    tied = [(i, s) for i, s in scored if s.grand_average == best]
    if len(tied) == 1:
        return tied[0][0], ""
    low = min(s.pooled_std for _, s in tied)
    tied = [(i, s) for i, s in tied if s.pooled_std == low]
    if len(tied) == 1:
        return tied[0][0], "grand-average tie broken by lower pooled std"
    return tied[0][0], "grand-average and pooled-std tie broken by menu order"


@dataclass(frozen=True)
class DiscoveryOptions:
    n_models: int = 20
    group_count: int = 4
    tunable_menu: str = "paper"
    strategy_menu: str = "paper"


def _stage_menu(component, space, options):
    if component is GROUPING:
        return [(p.value, p) for p in ds.GROUPING_CANDIDATES]
    if component is ALLOCATION:
        return [(p.value, p) for p in ds.ALLOCATION_CANDIDATES]
    if component is TUNABLE:
        return [(ds.describe(TUNABLE, c), c) for c in tunable_candidates(space.group_count, options.tunable_menu)]
    return [(ds.describe(component, s), s) for s in strategy_candidates(options.strategy_menu)]


def run_discovery(scorer, config, options=DiscoveryOptions(), seed=0, workers=1,
                  budget_fraction=ds.DEFAULT_BUDGET_FRACTION, target=None, on_records=None):
    """Greedy four-stage refinement starting from the ungrouped space.

    ``on_records`` receives every batch of trial records as it is produced
    (used for the trial log).
    """
    space = DesignSpace(group_count=options.group_count, budget_fraction=budget_fraction, label="S0")
    components = [GROUPING, ALLOCATION, TUNABLE] + [Component.strategy(g) for g in range(options.group_count)]
    stages = []
    for k, component in enumerate(components):
        if component.kind == "strategy" and space.tunable is not None and component.group not in space.tunable:
            stages.append(StageRecord(component.label, [], None, "group not tunable; skipped"))
            continue
        candidates = []
        values = []
        for label, value in _stage_menu(component, space, options):
            trial_space = ds.refine(space, component, value)
            try:
                # every candidate of a stage shares one sampling seed (common random numbers)
                score, records = evaluate_space(trial_space, scorer, config, options.n_models,
                                                derive_seed(seed, k), workers, component.label, label)
            except (SamplingError, InfeasibleBudgetError) as exc:
                records = [TrialResult("", t, 0, 0, None, 0, 0, component.label, label, 0, note=f"infeasible: {exc}")
                           for t in scorer.task_names]
                candidates.append(CandidateRecord(label, None, f"infeasible: {exc}"))
            else:
                candidates.append(CandidateRecord(label, score))
            values.append(value)
            if on_records is not None:
                on_records(records)
        index, note = select_winner(candidates)
        if index is None:
            raise DiscoveryError(f"no feasible candidate at stage {component.label}", stage=component.label)
        stages.append(StageRecord(component.label, candidates, candidates[index].label, note))
        space = ds.refine(space, component, values[index])
    return DiscoveryReport(stages, space, target)


# --- comparison -------------------------------------------------------------------

def compare_methods(methods, scorer, config, n_runs=20, seed=0, workers=1, on_records=None):
    """Score each ``(name, space)`` over ``n_runs`` seeded samples; returns all trial records.

    Run ``r`` of every method uses the same sampling seed, so methods see
    paired randomness.
    """
    if n_runs < 2:
        raise HyperparameterError(f"n_runs must be >= 2, got {n_runs}")
    out = []
    for name, space in methods:
        records = []
        for r in range(n_runs):
            try:
                _, recs = evaluate_space(space, scorer, config, 1, derive_seed(seed, 77, r), workers,
                                         "Comparison", name)
            except (SamplingError, InfeasibleBudgetError) as exc:
                recs = [TrialResult("", t, 0, 0, None, 0, 0, "Comparison", name, r, note=f"infeasible: {exc}")
                        for t in scorer.task_names]
                records.extend(recs)
                break
            records.extend(rec.tagged("Comparison", name, r) for rec in recs)
        if on_records is not None:
            on_records(records)
        out.extend(records)
    return out


# --- rendering --------------------------------------------------------------------

def _group(records, key):
    out = {}
    for r in records:
        out.setdefault(key(r), []).append(r)
    return out


def _fmt(x):
    return f"{100.0 * x:.2f}"


def _layout(header, rows):
    widths = [max(len(str(row[c])) for row in [header] + rows) for c in range(len(header))]
    line = lambda row: "  ".join(str(v).ljust(w) if c == 0 else str(v).rjust(w)
                                  for c, (v, w) in enumerate(zip(row, widths))).rstrip()
    rule = "-" * len(line(header))
    return "\n".join([line(header), rule] + [line(r) for r in rows]) + "\n"


def render_stage_table(stage, records):
    """Candidates x tasks (+ Avg) of mean metric x100 for one discovery stage."""
    tasks = list(dict.fromkeys(r.task for r in records))
    rows = []
    for candidate, recs in _group(records, lambda r: r.candidate).items():
        if not all(r.feasible for r in recs):
            rows.append([candidate] + ["n/a"] * (len(tasks) + 1))
            continue
        score = aggregate(candidate, recs)
        means = dict(zip(score.tasks, score.means))
        rows.append([candidate] + [_fmt(means[t]) for t in tasks] + [_fmt(score.grand_average)])
    return f"{stage}\n" + _layout([stage] + tasks + ["Avg"], rows)


def render_stage_tables(records):
    """Dict stage name -> rendered table, stages in order of first appearance."""
    stages = _group([r for r in records if r.stage != "Comparison"], lambda r: r.stage)
    return {stage: render_stage_table(stage, recs) for stage, recs in stages.items()}


def comparison_summary(records):
    """Per-method per-column (tasks + Avg) run lists, means, stds, and stars for the best row."""
    tasks = list(dict.fromkeys(r.task for r in records))
    methods = _group(records, lambda r: r.candidate)
    runs = {}
    for name, recs in methods.items():
        if not all(r.feasible for r in recs):
            runs[name] = None
            continue
        by_run = _group(recs, lambda r: r.model)
        cols = {t: [] for t in tasks}
        cols["Avg"] = []
        for run in by_run.values():
            vals = {r.task: r.metric for r in run}
            for t in tasks:
                cols[t].append(vals[t])
            cols["Avg"].append(float(np.mean([vals[t] for t in tasks])))
        runs[name] = cols
    columns = tasks + ["Avg"]
    marks = {(n, c): "" for n in methods for c in columns}
    pvalues = {}
    for c in columns:
        live = [(float(np.mean(cols[c])), n) for n, cols in runs.items() if cols is not None]
        if len(live) < 2:
            continue
        order = sorted(range(len(live)), key=lambda i: (-live[i][0], i))
        best, second = live[order[0]][1], live[order[1]][1]
        p = welch_t(runs[best][c], runs[second][c])
        pvalues[c] = (best, second, p)
        marks[(best, c)] = stars(p)
    return tasks, runs, marks, pvalues


def render_comparison_table(records):
    tasks, runs, marks, _ = comparison_summary(records)
    rows = []
    for name, cols in runs.items():
        if cols is None:
            rows.append([name] + ["n/a"] * (len(tasks) + 1))
            continue
        rows.append([name] + [f"{_fmt(np.mean(cols[c]))}±{_fmt(_std(cols[c]))}{marks[(name, c)]}"
                              for c in tasks + ["Avg"]])
    return "Comparison\n" + _layout(["Method"] + tasks + ["Avg"], rows)
