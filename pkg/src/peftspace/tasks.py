"""Synthetic classification/regression tasks on the pretraining vocabulary, and their metrics.

Every task draws its raw text from the same seeded Markov chain the
backbone is pretrained on and then plants a rule. ``generate`` is a pure
function of the :class:`TaskSpec`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .backbone import FIRST_WORD, SEP_TOKEN, MarkovChain
from .errors import ConfigError, InputError


class TaskKind(enum.Enum):
    SINGLE = "SingleSentenceClass"
    PAIR = "PairClass"
    REGRESSION = "Regression"
    ACCEPTABILITY = "Acceptability"


REGRESSION_RANGE = 5.0


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    num_classes: int = 2
    train_size: int = 256
    val_size: int = 128
    noise: float = 0.0
    seed: int = 0
    name: str = ""
    vocab_size: int = 256
    seq_len: int = 32
    chain_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if not self.name:
            object.__setattr__(self, "name", self.kind.value)
        if self.train_size < 32 or self.val_size < 32:
            raise ConfigError(f"{self.name}: train and val sizes must be >= 32")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError(f"{self.name}: noise must be in [0, 1), got {self.noise}")
        if self.kind is TaskKind.REGRESSION:
            object.__setattr__(self, "num_classes", 1)
        elif self.kind is TaskKind.ACCEPTABILITY:
            if self.num_classes != 2:
                raise ConfigError(f"{self.name}: acceptability is binary")
        elif not 2 <= self.num_classes <= 4:
            raise ConfigError(f"{self.name}: num_classes must be in [2, 4], got {self.num_classes}")
        if self.seq_len < 8:
            raise ConfigError(f"{self.name}: seq_len must be >= 8")

    @property
    def metric_name(self):
        return {TaskKind.REGRESSION: "spearman", TaskKind.ACCEPTABILITY: "matthews"}.get(self.kind, "accuracy")

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid task spec: {exc}") from None


@dataclass(frozen=True, eq=False)
class Dataset:
    spec: TaskSpec
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    clean_val_y: np.ndarray = field(repr=False, default=None)

    @property
    def name(self):
        return self.spec.name

    def metric(self, predictions):
        """Score predictions on the validation split with the task's metric."""
        return METRICS[self.spec.metric_name](predictions, self.val_y)

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "train_x": self.train_x.tolist(), "train_y": self.train_y.tolist(),
            "val_x": self.val_x.tolist(), "val_y": self.val_y.tolist(),
        }

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.spec == other.spec
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("train_x", "train_y", "val_x", "val_y")))


# --- generators -----------------------------------------------------------------

class _Plant:
    """Shared state for one generation run."""

    def __init__(self, spec):
        self.spec = spec
        self.chain = MarkovChain(spec.vocab_size, spec.chain_seed)
        self.rng = np.random.default_rng([spec.seed, 505, list(TaskKind).index(spec.kind)])
        self.words = np.arange(FIRST_WORD, spec.vocab_size)

    def text(self, n, length):
        return self.chain.sample(n, length, self.rng)

    def scrub(self, seqs, banned):
        """Replace banned tokens by random allowed words."""
        banned = np.asarray(sorted(banned))
        hit = np.isin(seqs, banned)
        if hit.any():
            pool = np.setdiff1d(self.words, banned)
            seqs[hit] = self.rng.choice(pool, size=int(hit.sum()))
        return seqs

    def insert(self, row, phrase, count):
        """Overwrite ``count`` non-overlapping spots in ``row`` with ``phrase``."""
        n = len(phrase)
        slots = self.rng.choice(len(row) // n, size=count, replace=False)
        for s in slots:
            row[s * n:(s + 1) * n] = phrase


def _single(p, n):
    spec = p.spec
    ngram = 2
    per_class = 3
    triggers = p.rng.choice(p.words, size=(spec.num_classes, per_class, ngram), replace=False)
    x = p.scrub(p.text(n, spec.seq_len), triggers.ravel())
    y = p.rng.integers(0, spec.num_classes, n)
    for row, label in zip(x, y):
        for _ in range(int(p.rng.integers(2, 4))):
            p.insert(row, triggers[label, p.rng.integers(per_class)], 1)
    return x, y


def _pair(p, n):
    spec = p.spec
    half = (spec.seq_len - 1) // 2
    families, per_family, anchors = 6, 2, 2
    templates = p.rng.choice(p.words, size=(families, per_family, anchors), replace=False)
    left = p.scrub(p.text(n, half), templates.ravel())
    right = p.scrub(p.text(n, spec.seq_len - 1 - half), templates.ravel())
    y = p.rng.integers(0, spec.num_classes, n)
    for a, b, label in zip(left, right, y):
        fa, ta = int(p.rng.integers(families)), int(p.rng.integers(per_family))
        if label == 0:      # same template
            fb, tb = fa, ta
        elif label == 1 and spec.num_classes > 2:     # sibling template in the same family
            fb, tb = fa, 1 - ta
        else:               # unrelated family
            fb, tb = (fa + int(p.rng.integers(1, families))) % families, int(p.rng.integers(per_family))
        p.insert(a, templates[fa, ta], 1)
        p.insert(b, templates[fb, tb], 1)
    x = np.concatenate([left, np.full((n, 1), SEP_TOKEN), right], axis=1)
    # label 1 for binary tasks means "shares the template"
    if spec.num_classes == 2:
        y = 1 - y
    return x, y


def _regression(p, n):
    spec = p.spec
    most = 6
    triggers = p.rng.choice(p.words, size=4, replace=False)
    x = p.scrub(p.text(n, spec.seq_len), triggers)
    counts = p.rng.integers(0, most + 1, n)
    for row, c in zip(x, counts):
        if c:
            slots = p.rng.choice(spec.seq_len, size=c, replace=False)
            row[slots] = p.rng.choice(triggers, size=c)
    jitter = p.rng.normal(0.0, 0.1, n)
    y = np.clip(counts / most * REGRESSION_RANGE + jitter, 0.0, REGRESSION_RANGE)
    return x, y


def _acceptability(p, n):
    spec, chain = p.spec, p.chain
    x = p.text(n, spec.seq_len)
    y = p.rng.integers(0, 2, n)
    for row, label in zip(x, y):
        if label:
            continue
        for t in np.sort(p.rng.choice(np.arange(2, spec.seq_len), size=3, replace=False)):
            ca, cb = chain.cluster_of[row[t - 2]], chain.cluster_of[row[t - 1]]
            bad = np.setdiff1d(np.arange(chain.num_clusters), chain.allowed[ca, cb])
            c = int(p.rng.choice(bad))
            row[t] = p.rng.choice(chain.members[c])
    return x, y


_GENERATORS = {TaskKind.SINGLE: _single, TaskKind.PAIR: _pair,
               TaskKind.REGRESSION: _regression, TaskKind.ACCEPTABILITY: _acceptability}


def _corrupt(p, y):
    """With probability ``noise`` replace a label by a uniform draw (classes) or a uniform target."""
    spec = p.spec
    hit = p.rng.random(len(y)) < spec.noise
    y = y.copy()
    if spec.kind is TaskKind.REGRESSION:
        y[hit] = p.rng.uniform(0.0, REGRESSION_RANGE, int(hit.sum()))
    else:
        y[hit] = p.rng.integers(0, spec.num_classes, int(hit.sum()))
    return y


def generate(spec):
    if not isinstance(spec, TaskSpec):
        raise ConfigError(f"expected a TaskSpec, got {type(spec).__name__}")
    p = _Plant(spec)
    n = spec.train_size + spec.val_size
    x, clean = _GENERATORS[spec.kind](p, n)
    y = _corrupt(p, clean)
    x = x.astype(np.int64)
    y = y.astype(np.float64 if spec.kind is TaskKind.REGRESSION else np.int64)
    clean = clean.astype(y.dtype)
    k = spec.train_size
    return Dataset(spec, x[:k], y[:k], x[k:], y[k:], clean[k:])


def default_suite(train_size=256, val_size=128, seed=0, chain_seed=0):
    """Eight tasks shaped like the GLUE columns."""
    rows = [
        ("sst2", TaskKind.SINGLE, 2, 0.0),
        ("cola", TaskKind.ACCEPTABILITY, 2, 0.0),
        ("mrpc", TaskKind.PAIR, 2, 0.05),
        ("qqp", TaskKind.PAIR, 2, 0.0),
        ("stsb", TaskKind.REGRESSION, 1, 0.0),
        ("qnli", TaskKind.PAIR, 2, 0.1),
        ("mnli", TaskKind.PAIR, 3, 0.0),
        ("rte", TaskKind.PAIR, 2, 0.15),
    ]
    return [TaskSpec(kind, num_classes=c, train_size=train_size, val_size=val_size, noise=noise,
                     seed=seed * 1000 + i, name=name, chain_seed=chain_seed)
            for i, (name, kind, c, noise) in enumerate(rows)]


# --- metrics --------------------------------------------------------------------

def _pair_arrays(a, b, what):
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 1 or b.ndim != 1:
        raise InputError(f"{what}: inputs must be 1-D")
    if len(a) != len(b):
        raise InputError(f"{what}: length mismatch {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise InputError(f"{what}: need at least 2 items, got {len(a)}")
    return a, b


def accuracy(preds, labels):
    preds, labels = _pair_arrays(preds, labels, "accuracy")
    return float(np.mean(preds == labels))


def matthews(preds, labels):
    """Matthews correlation for binary labels; 0 when any marginal is degenerate."""
    preds, labels = _pair_arrays(preds, labels, "matthews")
    if not (np.isin(preds, (0, 1)).all() and np.isin(labels, (0, 1)).all()):
        raise InputError("matthews: predictions and labels must be binary (0/1)")
    p, t = preds.astype(bool), labels.astype(bool)
    tp = float(np.sum(p & t))
    tn = float(np.sum(~p & ~t))
    fp = float(np.sum(p & ~t))
    fn = float(np.sum(~p & t))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(denom))


def spearman(scores, targets):
    """Rank correlation with average ranks for ties; 0 if either side is constant."""
    scores, targets = _pair_arrays(scores, targets, "spearman")
    ra, rb = rankdata(scores), rankdata(targets)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0:
        return 0.0
    return float(np.clip(ra @ rb / denom, -1.0, 1.0))


METRICS = {"accuracy": accuracy, "matthews": matthews, "spearman": spearman}
