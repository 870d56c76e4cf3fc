"""Design spaces over layer grouping, budget allocation, tunable groups and strategy assignment.

A :class:`DesignSpace` is a set of constraints; :func:`sample_design` draws
one concrete :class:`DesignPoint` from it and :func:`refine` fixes one more
component. Groups are contiguous runs of layers in forward-pass order and
are indexed from 0 internally (``G_1`` is group 0).
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import peft
from .backbone import param_count
from .errors import ConfigError, InfeasibleBudgetError, RefinementOrderError, SamplingError
from .peft import Strategy, all_strategy_sets, resolve_hyperparams, set_code, strategy_set

DEFAULT_BUDGET_FRACTION = 0.005


class GroupingPattern(enum.Enum):
    INCREASING = "Increasing"
    UNIFORM = "Uniform"
    DECREASING = "Decreasing"
    SPINDLE = "Spindle"
    BOTTLENECK = "Bottleneck"
    UNCONSTRAINED = "Unconstrained"


class AllocationPattern(enum.Enum):
    INCREASING = "Increasing"
    UNIFORM = "Uniform"
    DECREASING = "Decreasing"
    UNCONSTRAINED = "Unconstrained"


GROUPING_CANDIDATES = [GroupingPattern.INCREASING, GroupingPattern.UNIFORM, GroupingPattern.DECREASING,
                       GroupingPattern.SPINDLE, GroupingPattern.BOTTLENECK]
ALLOCATION_CANDIDATES = [AllocationPattern.INCREASING, AllocationPattern.UNIFORM, AllocationPattern.DECREASING]


def satisfies_grouping(sizes, pattern):
    """Predicate on group sizes N_1..N_G (all positive)."""
    sizes = list(sizes)
    if not sizes or min(sizes) < 1:
        return False
    pairs = list(zip(sizes, sizes[1:]))
    if pattern is GroupingPattern.UNCONSTRAINED:
        return True
    if pattern is GroupingPattern.INCREASING:
        return all(b > a for a, b in pairs)
    if pattern is GroupingPattern.UNIFORM:
        return all(b == a for a, b in pairs)
    if pattern is GroupingPattern.DECREASING:
        return all(b < a for a, b in pairs)
    if len(sizes) < 4:
        return False
    middle = sizes[1:-1]
    flat = all(m == middle[0] for m in middle)
    if pattern is GroupingPattern.SPINDLE:
        return flat and sizes[0] < middle[0] > sizes[-1]
    if pattern is GroupingPattern.BOTTLENECK:
        return flat and sizes[0] > middle[0] < sizes[-1]
    raise ValueError(f"unknown grouping pattern {pattern!r}")


def _next_ok(pattern, sizes, part, G):
    """Can ``part`` follow the prefix ``sizes`` without breaking the pattern?"""
    if not sizes or pattern is GroupingPattern.UNCONSTRAINED:
        return True
    prev, i = sizes[-1], len(sizes)
    if pattern is GroupingPattern.INCREASING:
        return part > prev
    if pattern is GroupingPattern.UNIFORM:
        return part == prev
    if pattern is GroupingPattern.DECREASING:
        return part < prev
    spindle = pattern is GroupingPattern.SPINDLE
    if i == 1:
        return part > prev if spindle else part < prev
    if i < G - 1:
        return part == prev
    return part < prev if spindle else part > prev


def enumerate_partitions(num_layers, group_count, pattern):
    """All compositions of ``num_layers`` into ``group_count`` positive parts obeying ``pattern``, lexicographic."""
    if group_count not in (4, 8):
        raise ConfigError(f"group_count must be 4 or 8, got {group_count}")
    if num_layers < group_count:
        raise InfeasibleBudgetError(f"{num_layers} layers cannot form {group_count} nonempty groups")
    out = []

    def extend(sizes, left):
        slots = group_count - len(sizes)
        if slots == 1:
            if _next_ok(pattern, sizes, left, group_count):
                out.append(tuple(sizes) + (left,))
            return
        for part in range(1, left - (slots - 1) + 1):
            if _next_ok(pattern, sizes, part, group_count):
                extend(sizes + [part], left - part)

    extend([], num_layers)
    return [Partition(p) for p in out]


@dataclass(frozen=True)
class Partition:
    sizes: tuple

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if not self.sizes or min(self.sizes) < 1:
            raise ConfigError(f"group sizes must be positive, got {self.sizes}")

    @property
    def num_layers(self):
        return sum(self.sizes)

    @property
    def group_count(self):
        return len(self.sizes)

    @property
    def ranges(self):
        bounds = [0] + list(itertools.accumulate(self.sizes))
        return [range(a, b) for a, b in zip(bounds, bounds[1:])]

    def group_of_layer(self):
        return [g for g, r in enumerate(self.ranges) for _ in r]

    def __iter__(self):
        return iter(self.sizes)

    def __len__(self):
        return len(self.sizes)


def satisfies_allocation(budgets, pattern):
    pairs = list(zip(budgets, budgets[1:]))
    if pattern is AllocationPattern.INCREASING:
        return all(b >= a for a, b in pairs)
    if pattern is AllocationPattern.UNIFORM:
        return all(b == a for a, b in pairs)
    if pattern is AllocationPattern.DECREASING:
        return all(b <= a for a, b in pairs)
    return True


def _split(total, weights):
    """Integer split proportional to ``weights`` summing exactly to ``total``; the
    floor remainder goes to the largest-weight entries, so sortedness is kept."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = np.floor(weights / weights.sum() * total).astype(np.int64)
    short = int(total - raw.sum())
    if short > 0:
        order = np.argsort(-weights, kind="stable")[:short]
        raw[order] += 1
    return raw


def allocate_budget(total_budget, partition, pattern, rng, tunable=None):
    """Per-layer budgets n_i for every layer; layers outside ``tunable`` groups get 0.

    Uniform is ``floor(total / tuned layers)``; Increasing/Decreasing sort a
    uniform random weight vector; Unconstrained leaves it unsorted.
    """
    partition = partition if isinstance(partition, Partition) else Partition(partition)
    groups = range(partition.group_count) if tunable is None else tunable
    tuned = [i for g in sorted(groups) for i in partition.ranges[g]]
    n = len(tuned)
    if n == 0:
        raise InfeasibleBudgetError("no tunable layers to allocate a budget to")
    if total_budget < n:
        raise InfeasibleBudgetError(f"total budget {total_budget} is below one parameter per tuned layer ({n})")
    if pattern is AllocationPattern.UNIFORM:
        values = np.full(n, total_budget // n, dtype=np.int64)
    else:
        w = rng.random(n) + 1e-12
        if pattern is AllocationPattern.INCREASING:
            w = np.sort(w)
        elif pattern is AllocationPattern.DECREASING:
            w = np.sort(w)[::-1]
        values = _split(total_budget, w)
    budgets = [0] * partition.num_layers
    for i, v in zip(tuned, values):
        budgets[i] = int(v)
    return budgets


# --- spaces ---------------------------------------------------------------------

PAPER_TUNABLE_MENU = [(0,), (1,), (2,), (3,), (0, 1), (2, 3), (0, 1, 2), (1, 2, 3), (0, 1, 2, 3)]


def full_tunable_menu(group_count):
    groups = range(group_count)
    return [c for k in range(1, group_count + 1) for c in itertools.combinations(groups, k)]


@dataclass(frozen=True)
class Component:
    kind: str
    group: int = None

    @property
    def label(self):
        if self.kind == "strategy":
            return f"G_{self.group + 1}"
        return {"grouping": "Grouping", "allocation": "Allocation", "tunable": "TunableGroups"}[self.kind]

    @classmethod
    def strategy(cls, group):
        return cls("strategy", group)


GROUPING = Component("grouping")
ALLOCATION = Component("allocation")
TUNABLE = Component("tunable")


@dataclass(frozen=True)
class DesignSpace:
    """Constraints on the four components; ``None`` means unconstrained."""

    grouping: GroupingPattern = GroupingPattern.UNCONSTRAINED
    group_count: int = 4
    allocation: AllocationPattern = AllocationPattern.UNCONSTRAINED
    tunable: tuple = None
    strategies: tuple = None
    budget_fraction: float = DEFAULT_BUDGET_FRACTION
    label: str = "S0"

    def __post_init__(self):
        if self.group_count not in (4, 8):
            raise ConfigError(f"group_count must be 4 or 8, got {self.group_count}")
        if not 0 < self.budget_fraction <= 1:
            raise ConfigError(f"budget_fraction must be in (0, 1], got {self.budget_fraction}")
        if self.tunable is not None:
            tun = tuple(sorted(set(int(g) for g in self.tunable)))
            if not tun or tun[0] < 0 or tun[-1] >= self.group_count:
                raise ConfigError(f"tunable groups {self.tunable} out of range for {self.group_count} groups")
            object.__setattr__(self, "tunable", tun)
        strategies = self.strategies
        if strategies is None:
            strategies = (None,) * self.group_count
        if len(strategies) != self.group_count:
            raise ConfigError(f"need {self.group_count} strategy constraints, got {len(strategies)}")
        object.__setattr__(self, "strategies",
                           tuple(None if s is None else strategy_set(s) for s in strategies))

    @property
    def grouped(self):
        return self.grouping is not GroupingPattern.UNCONSTRAINED

    def is_fixed(self, component):
        if component.kind == "grouping":
            return self.grouped
        if component.kind == "allocation":
            return self.allocation is not AllocationPattern.UNCONSTRAINED
        if component.kind == "tunable":
            return self.tunable is not None
        return self.strategies[component.group] is not None

    def constraint(self, component):
        if component.kind == "grouping":
            return self.grouping
        if component.kind == "allocation":
            return self.allocation
        if component.kind == "tunable":
            return self.tunable
        return self.strategies[component.group]

    def total_budget(self, config):
        return int(math.floor(self.budget_fraction * param_count(config)))

    def to_dict(self):
        return {
            "label": self.label,
            "grouping": self.grouping.value,
            "group_count": self.group_count,
            "allocation": self.allocation.value,
            "tunable": None if self.tunable is None else [g + 1 for g in self.tunable],
            "strategies": [None if s is None else set_code(s) for s in self.strategies],
            "budget_fraction": self.budget_fraction,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                grouping=GroupingPattern(d.get("grouping", "Unconstrained")),
                group_count=int(d.get("group_count", 4)),
                allocation=AllocationPattern(d.get("allocation", "Unconstrained")),
                tunable=None if d.get("tunable") is None else tuple(g - 1 for g in d["tunable"]),
                strategies=None if d.get("strategies") is None else tuple(
                    None if s is None else s.split("+") for s in d["strategies"]),
                budget_fraction=float(d.get("budget_fraction", DEFAULT_BUDGET_FRACTION)),
                label=d.get("label", "custom"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid design space document: {exc}") from None


def describe(component, value):
    """Row label for a candidate constraint, e.g. ``Spindle``, ``G1,G2``, ``G_1-(A, L)``."""
    if component.kind in ("grouping", "allocation"):
        return value.value
    if component.kind == "tunable":
        return ",".join(f"G{g + 1}" for g in value)
    letters = [s.value for s in peft.ordered(value)]
    return f"G_{component.group + 1}-({', '.join(letters)})"


_NEXT_LABEL = {"grouping": ("S0", "S1"), "allocation": ("S1", "S2"), "tunable": ("S2", "S3")}


def _open_groups(space):
    """Tunable groups whose strategy set is still unconstrained."""
    tunable = range(space.group_count) if space.tunable is None else space.tunable
    return [g for g in tunable if space.strategies[g] is None]


def _assignment_label(space):
    fixed = [g + 1 for g, s in enumerate(space.strategies) if s is not None]
    if not _open_groups(space):
        return "S4"
    return "S3" + ("+" + "-".join(f"G{g}" for g in fixed) if fixed else "")


def refine(space, component, winner):
    """Copy of ``space`` with ``component`` fixed to ``winner``."""
    if space.is_fixed(component):
        raise RefinementOrderError(f"{component.label} is already fixed in {space.label}")
    if component.kind == "grouping":
        winner = GroupingPattern(winner)
        if winner is GroupingPattern.UNCONSTRAINED:
            raise ConfigError("cannot refine grouping to Unconstrained")
        changes = {"grouping": winner}
    elif component.kind == "allocation":
        winner = AllocationPattern(winner)
        if winner is AllocationPattern.UNCONSTRAINED:
            raise ConfigError("cannot refine allocation to Unconstrained")
        changes = {"allocation": winner}
    elif component.kind == "tunable":
        changes = {"tunable": tuple(winner)}
    elif component.kind == "strategy":
        g = component.group
        if not 0 <= g < space.group_count:
            raise ConfigError(f"group {g + 1} does not exist")
        earlier = [j + 1 for j in _open_groups(space) if j < g]
        if earlier:
            raise RefinementOrderError(f"strategy assignment must go G_1..G_{space.group_count} in order; "
                                       f"groups {earlier} are still open")
        strategies = list(space.strategies)
        strategies[g] = strategy_set(winner)
        changes = {"strategies": tuple(strategies)}
    else:
        raise ConfigError(f"unknown component {component!r}")
    refined = dataclasses.replace(space, **changes)
    if component.kind == "strategy":
        label = _assignment_label(refined)
        if space.label != _assignment_label(space):
            label = "custom"
    else:
        prev, nxt = _NEXT_LABEL[component.kind]
        label = nxt if space.label == prev else "custom"
    return dataclasses.replace(refined, label=label)


def preset_s4(variant="base", budget_fraction=DEFAULT_BUDGET_FRACTION):
    """Fully constrained spaces found for the base-size and 3B-size backbones."""
    assignments = {
        "base": ("AL", "AP", "APB", "PBL"),
        "threeB": ("PL", "AL", "PBL", "APB"),
    }
    if variant not in assignments:
        raise ConfigError(f"unknown preset variant {variant!r}; expected 'base' or 'threeB'")
    return DesignSpace(
        grouping=GroupingPattern.SPINDLE,
        allocation=AllocationPattern.UNIFORM,
        tunable=(0, 1, 2, 3),
        strategies=tuple(strategy_set(s) for s in assignments[variant]),
        budget_fraction=budget_fraction,
        label="S4" if variant == "base" else "S4-3b",
    )


def single_strategy_space(strategy, budget_fraction=DEFAULT_BUDGET_FRACTION):
    """Every layer tuned with one strategy and an even budget split."""
    s = Strategy.parse(strategy)
    return DesignSpace(
        grouping=GroupingPattern.UNIFORM,
        allocation=AllocationPattern.UNIFORM,
        tunable=(0, 1, 2, 3),
        strategies=(frozenset([s]),) * 4,
        budget_fraction=budget_fraction,
        label=f"{s.label}-only",
    )


# --- points ------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignPoint:
    """One concrete configuration. For ungrouped (S0) spaces each layer is its own group."""

    partition: tuple
    budgets: tuple
    tunable: tuple
    strategies: tuple
    hyperparams: tuple
    skipped: tuple = ()
    seed: int = 0
    space_label: str = ""
    point_id: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.point_id:
            object.__setattr__(self, "point_id", self._digest())

    def _content(self):
        return {
            "partition": list(self.partition),
            "budgets": list(self.budgets),
            "tunable": list(self.tunable),
            "strategies": [None if s is None else set_code(s) for s in self.strategies],
            "hyperparams": [None if h is None else h.to_dict() for h in self.hyperparams],
            "skipped": list(self.skipped),
        }

    def _digest(self):
        blob = json.dumps(self._content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def layer_groups(self):
        return Partition(self.partition).group_of_layer()

    def trainable_params(self, d, ff):
        return sum(h.cost(d, ff) for h in self.hyperparams if h is not None)

    def to_dict(self):
        out = {"point_id": self.point_id, "space": self.space_label, "seed": self.seed}
        out.update(self._content())
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(
            partition=tuple(d["partition"]),
            budgets=tuple(d["budgets"]),
            tunable=tuple(d["tunable"]),
            strategies=tuple(None if s is None else strategy_set(s.split("+")) for s in d["strategies"]),
            hyperparams=tuple(None if h is None else peft.ResolvedHyperparams(**h) for h in d["hyperparams"]),
            skipped=tuple(d.get("skipped", ())),
            seed=int(d.get("seed", 0)),
            space_label=d.get("space", ""),
        )


_LOG_SHARE_RANGE = (math.log(0.1), math.log(10.0))


def _random_set(rng):
    sets = all_strategy_sets()
    return sets[int(rng.integers(len(sets)))]


def _try_resolve(layers, budgets, strategies, config):
    resolved = {}
    for i in layers:
        try:
            resolved[i] = resolve_hyperparams(budgets[i], strategies, config.model_dim, config.ff_dim,
                                              config.max_seq_len)
        except InfeasibleBudgetError:
            resolved[i] = None
    return resolved


def sample_design(space, config, rng):
    """Draw one :class:`DesignPoint` from ``space`` for a backbone built from ``config``.

    A group whose (randomly drawn) strategy set does not fit some layer's
    budget gets one fresh draw; layers that still cannot host their group's
    set are left unattached and listed in ``skipped``. Sampling fails only
    when no tuned layer at all can be materialised.
    """
    L = config.num_layers
    seed = int(rng.integers(2 ** 63))
    total = space.total_budget(config)
    if space.grouped:
        partitions = enumerate_partitions(L, space.group_count, space.grouping)
        if not partitions:
            raise SamplingError(f"no {space.grouping.value} partition of {L} layers into {space.group_count} groups")
        partition = partitions[int(rng.integers(len(partitions)))]
        G = space.group_count
        if space.tunable is not None:
            tuned_groups = space.tunable
        else:
            mask = int(rng.integers(1, 2 ** G))
            tuned_groups = tuple(g for g in range(G) if mask >> g & 1)
        chosen = [None] * G
        for g in tuned_groups:
            chosen[g] = space.strategies[g] if space.strategies[g] is not None else _random_set(rng)
        try:
            budgets = allocate_budget(total, partition, space.allocation, rng, tuned_groups)
        except InfeasibleBudgetError as exc:
            raise SamplingError(str(exc)) from None
        fixed = [space.strategies[g] is not None for g in range(G)]
    else:
        if space.tunable is not None or any(s is not None for s in space.strategies):
            raise SamplingError("an ungrouped space cannot constrain tunable groups or strategies")
        partition = Partition((1,) * L)
        tuned_groups = tuple(i for i in range(L) if rng.random() < 0.5)
        chosen = [None] * L
        for i in tuned_groups:
            chosen[i] = _random_set(rng)
        budgets = [0] * L
        if tuned_groups:
            if space.allocation is AllocationPattern.UNCONSTRAINED:
                weights = np.exp(rng.uniform(*_LOG_SHARE_RANGE, size=len(tuned_groups)))
                shares = np.floor(weights / weights.sum() * total).astype(np.int64)
                for i, v in zip(tuned_groups, shares):
                    budgets[i] = int(v)
            else:
                try:
                    budgets = allocate_budget(total, partition, space.allocation, rng, tuned_groups)
                except InfeasibleBudgetError as exc:
                    raise SamplingError(str(exc)) from None
        fixed = [False] * L

    ranges = partition.ranges
    hyper = [None] * L
    for g in tuned_groups:
        resolved = _try_resolve(ranges[g], budgets, chosen[g], config)
        if any(h is None for h in resolved.values()) and not fixed[g]:
            chosen[g] = _random_set(rng)
            resolved = _try_resolve(ranges[g], budgets, chosen[g], config)
        for i, h in resolved.items():
            hyper[i] = h
    tuned_layers = [i for g in tuned_groups for i in ranges[g]]
    skipped = tuple(i for i in tuned_layers if hyper[i] is None)
    if tuned_layers and len(skipped) == len(tuned_layers):
        raise SamplingError(f"no tuned layer of {space.label} can host its strategy set "
                            f"within a budget of {total} parameters")
    tunable_mask = tuple(g in tuned_groups for g in range(partition.group_count))
    return DesignPoint(
        partition=partition.sizes,
        budgets=tuple(budgets),
        tunable=tunable_mask,
        strategies=tuple(chosen),
        hyperparams=tuple(hyper),
        skipped=skipped,
        seed=seed,
        space_label=space.label,
    )


def contains(space, point, config):
    """Does ``point`` satisfy every constraint of ``space``?"""
    if point.trainable_params(config.model_dim, config.ff_dim) > space.total_budget(config):
        return False
    if sum(point.budgets) > space.total_budget(config):
        return False
    if not space.grouped:
        return True
    if len(point.partition) != space.group_count:
        return False
    if not satisfies_grouping(point.partition, space.grouping):
        return False
    tuned_layers = [i for g, r in enumerate(Partition(point.partition).ranges) if point.tunable[g] for i in r]
    if not satisfies_allocation([point.budgets[i] for i in tuned_layers], space.allocation):
        return False
    if space.tunable is not None and tuple(g for g, t in enumerate(point.tunable) if t) != space.tunable:
        return False
    for g, s in enumerate(space.strategies):
        if s is not None and point.tunable[g] and point.strategies[g] != s:
            return False
    return True


def materialize(model, point):
    """Attach the point's strategies to ``model`` in place (call ``freeze_all`` first)."""
    if len(point.hyperparams) != model.config.num_layers:
        raise ConfigError(f"point has {len(point.hyperparams)} layers, model has {model.config.num_layers}")
    for i, hp in enumerate(point.hyperparams):
        if hp is not None:
            peft.attach(model, i, hp, rng=np.random.default_rng([point.seed % 2 ** 63, i]))
    return model
