"""Adapter, Prefix, BitFit and LoRA attachments plus trainable-parameter accounting."""
from __future__ import annotations

import enum
import itertools
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .backbone import INIT_STD, LAYER_BIASES, layer_prefix
from .errors import HyperparameterError, InfeasibleBudgetError


class Strategy(enum.Enum):
    ADAPTER = "A"
    PREFIX = "P"
    BITFIT = "B"
    LORA = "L"

    @property
    def rank(self):
        return _ORDER.index(self)

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for s in cls:
            if value in (s.value, s.name, s.name.capitalize(), s.label):
                return s
        raise ValueError(f"unknown strategy {value!r}")

    @property
    def label(self):
        return {"A": "Adapter", "P": "Prefix", "B": "BitFit", "L": "LoRA"}[self.value]


_ORDER = [Strategy.ADAPTER, Strategy.PREFIX, Strategy.BITFIT, Strategy.LORA]


def strategy_set(items):
    """Normalise an iterable of strategies (or a string like ``"APL"``) to a frozenset."""
    if isinstance(items, str):
        items = list(items)
    out = frozenset(Strategy.parse(s) for s in items)
    if not out:
        raise ValueError("a strategy set must be nonempty")
    return out


def ordered(strategies):
    return tuple(sorted(strategies, key=lambda s: s.rank))


def set_code(strategies):
    """Compact label in A<P<B<L order, e.g. ``"A+P+B"``."""
    return "+".join(s.value for s in ordered(strategies))


def all_strategy_sets():
    """The 15 nonempty subsets: by size, then lexicographic in A<P<B<L."""
    return [frozenset(c) for k in range(1, 5) for c in itertools.combinations(_ORDER, k)]


# rows of the per-group assignment tables: singletons, 3 pairs, 4 triples, the full set
PAPER_STRATEGY_MENU = [strategy_set(s) for s in
                       ("A", "P", "B", "L", "PL", "AP", "AL", "APL", "PBL", "APB", "ABL", "APBL")]


@dataclass(frozen=True)
class ResolvedHyperparams:
    adapter_bottleneck: int = 0
    lora_rank: int = 0
    lora_alpha: float = 0.0
    prefix_length: int = 0
    bitfit_enabled: bool = False

    @property
    def strategies(self):
        out = set()
        if self.adapter_bottleneck:
            out.add(Strategy.ADAPTER)
        if self.prefix_length:
            out.add(Strategy.PREFIX)
        if self.bitfit_enabled:
            out.add(Strategy.BITFIT)
        if self.lora_rank:
            out.add(Strategy.LORA)
        return frozenset(out)

    def cost(self, d, ff):
        return (2 * d * self.adapter_bottleneck + 4 * d * self.lora_rank
                + 2 * d * self.prefix_length + (bitfit_cost(d, ff) if self.bitfit_enabled else 0))

    def to_dict(self):
        return asdict(self)


def bitfit_cost(d, ff):
    # q, k, v, o biases + two feed-forward biases + two layer-norm shifts
    return 4 * d + ff + d + 2 * d


def unit_cost(strategy, d):
    return {Strategy.ADAPTER: 2 * d, Strategy.PREFIX: 2 * d, Strategy.LORA: 4 * d}[strategy]


def resolve_hyperparams(layer_budget, strategies, d, ff, max_seq_len):
    """Turn one layer's parameter budget into integer sizes for each strategy in the set.

    BitFit's fixed bias count comes off the top; the rest is split evenly and
    each member takes the largest size whose cost fits its share. Whatever the
    floors leave over is handed back one unit at a time in A<P<L order, so the
    final shortfall is below the largest unit cost.
    """
    strategies = strategy_set(strategies)
    if layer_budget < 0:
        raise InfeasibleBudgetError(f"negative layer budget {layer_budget}")
    remaining = int(layer_budget)
    bitfit = Strategy.BITFIT in strategies
    if bitfit:
        fixed = bitfit_cost(d, ff)
        if remaining < fixed:
            raise InfeasibleBudgetError(f"budget {layer_budget} below BitFit's fixed cost {fixed}")
        remaining -= fixed
    members = [s for s in ordered(strategies) if s is not Strategy.BITFIT]
    caps = {Strategy.ADAPTER: d, Strategy.PREFIX: max_seq_len, Strategy.LORA: d}
    sizes = {}
    if members:
        share = remaining // len(members)
        for s in members:
            sizes[s] = min(share // unit_cost(s, d), caps[s])
            if sizes[s] < 1:
                raise InfeasibleBudgetError(
                    f"share {share} of budget {layer_budget} cannot afford one unit of {s.label} "
                    f"({unit_cost(s, d)} parameters)")
        left = remaining - sum(sizes[s] * unit_cost(s, d) for s in members)
        growing = True
        while growing:
            growing = False
            for s in members:
                if sizes[s] < caps[s] and unit_cost(s, d) <= left:
                    sizes[s] += 1
                    left -= unit_cost(s, d)
                    growing = True
    r = sizes.get(Strategy.LORA, 0)
    return ResolvedHyperparams(
        adapter_bottleneck=sizes.get(Strategy.ADAPTER, 0),
        lora_rank=r,
        lora_alpha=float(2 * r),
        prefix_length=sizes.get(Strategy.PREFIX, 0),
        bitfit_enabled=bitfit,
    )


# --- attachments ----------------------------------------------------------------

def _check_layer(model, layer):
    if not 0 <= layer < model.config.num_layers:
        raise HyperparameterError(f"layer {layer} does not exist (num_layers={model.config.num_layers})")


def _claim(model, layer, kind):
    if kind in model.attachments[layer]:
        raise HyperparameterError(f"layer {layer} already has a {kind} attachment")


def _rng(model, layer, kind, rng):
    return rng if rng is not None else np.random.default_rng([model.config.seed, layer, _KIND_CODES[kind]])


_KIND_CODES = {"adapter": 11, "prefix": 12, "lora": 13}


def _new(model, values):
    return T.Tensor(values, True, model.params["embed.token"].data.dtype)


def attach_adapter(model, layer, bottleneck, rng=None):
    """Bottleneck residual after the layer's feed-forward block; the up-projection starts at zero."""
    _check_layer(model, layer)
    if int(bottleneck) != bottleneck or bottleneck <= 0:
        raise HyperparameterError(f"adapter bottleneck must be a positive integer, got {bottleneck}")
    _claim(model, layer, "adapter")
    rng = _rng(model, layer, "adapter", rng)
    d, p = model.config.model_dim, layer_prefix(layer)
    model.params[p + "adapter.down"] = _new(model, rng.normal(0.0, INIT_STD, (d, bottleneck)))
    model.params[p + "adapter.up"] = _new(model, np.zeros((bottleneck, d)))
    model.attachments[layer]["adapter"] = int(bottleneck)


def attach_prefix(model, layer, length, rng=None):
    _check_layer(model, layer)
    if int(length) != length or not 0 < length <= model.config.max_seq_len:
        raise HyperparameterError(f"prefix length must be in [1, {model.config.max_seq_len}], got {length}")
    _claim(model, layer, "prefix")
    rng = _rng(model, layer, "prefix", rng)
    d, p = model.config.model_dim, layer_prefix(layer)
    model.params[p + "prefix.key"] = _new(model, rng.normal(0.0, INIT_STD, (length, d)))
    model.params[p + "prefix.value"] = _new(model, rng.normal(0.0, INIT_STD, (length, d)))
    model.attachments[layer]["prefix"] = int(length)


def attach_bitfit(model, layer):
    _check_layer(model, layer)
    _claim(model, layer, "bitfit")
    p = layer_prefix(layer)
    for name in LAYER_BIASES:
        model.params[p + name].requires_grad = True
    model.attachments[layer]["bitfit"] = True


def attach_lora(model, layer, rank, alpha=None, rng=None):
    """Low-rank update (alpha/rank)·B·A on the query and value projections; B starts at zero."""
    _check_layer(model, layer)
    d = model.config.model_dim
    if int(rank) != rank or not 0 < rank <= d:
        raise HyperparameterError(f"LoRA rank must be in [1, {d}], got {rank}")
    _claim(model, layer, "lora")
    rng = _rng(model, layer, "lora", rng)
    alpha = float(2 * rank if alpha is None else alpha)
    p = layer_prefix(layer)
    for target in ("q", "v"):
        model.params[f"{p}lora.{target}.A"] = _new(model, rng.normal(0.0, INIT_STD, (rank, d)))
        model.params[f"{p}lora.{target}.B"] = _new(model, np.zeros((d, rank)))
    model.attachments[layer]["lora"] = (int(rank), alpha)


def attach(model, layer, hp, rng=None):
    """Apply every strategy a :class:`ResolvedHyperparams` enables to one layer."""
    if hp.adapter_bottleneck:
        attach_adapter(model, layer, hp.adapter_bottleneck, rng=rng)
    if hp.prefix_length:
        attach_prefix(model, layer, hp.prefix_length, rng=rng)
    if hp.bitfit_enabled:
        attach_bitfit(model, layer)
    if hp.lora_rank:
        attach_lora(model, layer, hp.lora_rank, hp.lora_alpha, rng=rng)


def merge_lora(model):
    """Copy of ``model`` with every LoRA update folded into its base weight."""
    out = model.clone()
    if not any("lora" in att for att in out.attachments):
        warnings.warn("merge_lora: model has no LoRA attachments; returning an unchanged copy",
                      RuntimeWarning, stacklevel=2)
        return out
    for i, att in enumerate(out.attachments):
        if "lora" not in att:
            continue
        r, alpha = att.pop("lora")
        p = layer_prefix(i)
        for target in ("q", "v"):
            a = out.params.pop(f"{p}lora.{target}.A").data
            b = out.params.pop(f"{p}lora.{target}.B").data
            w = out.params[f"{p}attn.{target}.weight"]
            w.data = w.data + (alpha / r) * (b @ a)
    return out


def count_trainable(model, include_head=True):
    return sum(p.size for name, p in model.params.items()
               if p.requires_grad and (include_head or not name.startswith("head.")))
