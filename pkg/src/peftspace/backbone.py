"""Miniature pre-norm transformer encoder, synthetic MLM pretraining, checkpoints.

The encoder is a flat stack of ``num_layers`` identical blocks. PEFT
attachments (see :mod:`peftspace.peft`) live in the same parameter dict as
the pretrained weights and are picked up by :func:`forward` by name.
"""
from __future__ import annotations

import copy
import dataclasses
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import optim
from . import tensor as T
from .errors import CheckpointError, CheckpointVersionError, ConfigError, InputError

MASK_TOKEN = 0
SEP_TOKEN = 1
FIRST_WORD = 2  # ids below this are reserved

INIT_STD = 0.02
# pretraining-only decoder; never part of the encoder or of a task head
MLM_WEIGHT = "mlm.weight"
MLM_BIAS = "mlm.bias"


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 12
    model_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    vocab_size: int = 256
    max_seq_len: int = 32
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
        if self.num_layers < 4:
            raise ConfigError(f"num_layers must be >= 4 to admit four groups, got {self.num_layers}")
        if min(self.model_dim, self.num_heads, self.ff_dim, self.max_seq_len) < 1:
            raise ConfigError("model_dim, num_heads, ff_dim and max_seq_len must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.vocab_size <= FIRST_WORD:
            raise ConfigError(f"vocab_size must exceed the {FIRST_WORD} reserved ids")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def layer_param_count(d, ff):
    return 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 2 * (2 * d)


def param_count(config):
    """Pretrained encoder parameters (embeddings, blocks, final norm); excludes the task head."""
    d = config.model_dim
    return (config.vocab_size * d + config.max_seq_len * d
            + config.num_layers * layer_param_count(d, config.ff_dim) + 2 * d)


def layer_prefix(i):
    return f"layers.{i}."


LAYER_WEIGHTS = ("attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.o.weight",
                 "ff.in.weight", "ff.out.weight", "ln1.weight", "ln2.weight")
LAYER_BIASES = ("attn.q.bias", "attn.k.bias", "attn.v.bias", "attn.o.bias",
                "ff.in.bias", "ff.out.bias", "ln1.bias", "ln2.bias")


class Backbone:
    """Encoder parameters, task head, and per-layer PEFT attachment records.

    ``params`` maps names to :class:`~peftspace.tensor.Tensor`; a tensor's
    ``requires_grad`` is its trainable flag.
    """

    def __init__(self, config, params, attachments=None):
        self.config = config
        self.params = params
        self.attachments = attachments or [dict() for _ in range(config.num_layers)]

    def __getitem__(self, name):
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    @property
    def num_outputs(self):
        return self.params["head.weight"].shape[1]

    def encoder_parameters(self):
        """Pretrained tensors only: no head, no attachments."""
        return {n: p for n, p in self.params.items() if _is_pretrained(n)}

    def freeze_all(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze_head(self):
        self.params["head.weight"].requires_grad = True
        self.params["head.bias"].requires_grad = True
        return self

    def trainable(self):
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def clone(self):
        return copy.deepcopy(self)

    def reset_head(self, num_outputs, rng=None):
        rng = rng if rng is not None else np.random.default_rng([self.config.seed, 7])
        dtype = self.params["embed.token"].data.dtype
        d = self.config.model_dim
        self.params["head.weight"] = T.Tensor(rng.normal(0.0, INIT_STD, (d, num_outputs)), True, dtype)
        self.params["head.bias"] = T.Tensor(np.zeros(num_outputs), True, dtype)
        return self

    def astype(self, dtype):
        """Copy with every tensor cast to ``dtype`` (flags preserved)."""
        out = self.clone()
        for p in out.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return out


def _is_pretrained(name):
    if name.startswith(("head.", "mlm.")):
        return False
    return not any(tag in name for tag in (".adapter.", ".prefix.", ".lora."))


def build(config, num_outputs=2, dtype=None):
    """Freshly initialised backbone; every tensor trainable."""
    if not isinstance(config, BackboneConfig):
        raise ConfigError("build() expects a BackboneConfig")
    dtype = dtype or T.default_dtype()
    rng = np.random.default_rng(config.seed)
    d, ff = config.model_dim, config.ff_dim

    def gauss(*shape):
        return T.Tensor(rng.normal(0.0, INIT_STD, shape), True, dtype)

    def const(value, n):
        return T.Tensor(np.full(n, value), True, dtype)

    params = {"embed.token": gauss(config.vocab_size, d), "embed.position": gauss(config.max_seq_len, d)}
    for i in range(config.num_layers):
        p = layer_prefix(i)
        params[p + "ln1.weight"] = const(1.0, d)
        params[p + "ln1.bias"] = const(0.0, d)
        for name in "qkvo":
            params[p + f"attn.{name}.weight"] = gauss(d, d)
            params[p + f"attn.{name}.bias"] = const(0.0, d)
        params[p + "ln2.weight"] = const(1.0, d)
        params[p + "ln2.bias"] = const(0.0, d)
        params[p + "ff.in.weight"] = gauss(d, ff)
        params[p + "ff.in.bias"] = const(0.0, ff)
        params[p + "ff.out.weight"] = gauss(ff, d)
        params[p + "ff.out.bias"] = const(0.0, d)
    params["final_ln.weight"] = const(1.0, d)
    params["final_ln.bias"] = const(0.0, d)
    params["head.weight"] = gauss(d, num_outputs)
    params["head.bias"] = const(0.0, num_outputs)
    return Backbone(config, params)


def check_tokens(model, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise InputError(f"tokens must be a 2-D integer array, got shape {tokens.shape} dtype {tokens.dtype}")
    if tokens.shape[1] == 0 or tokens.shape[1] > model.config.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[1]} outside [1, {model.config.max_seq_len}]")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise InputError(f"token id outside vocabulary [0, {model.config.vocab_size})")
    return tokens


def _linear(x, params, name):
    return T.add(T.matmul(x, params[name + ".weight"]), params[name + ".bias"])


def _lora_delta(h, params, p, target, spec):
    r, alpha = spec
    down = T.matmul(h, params[f"{p}lora.{target}.B"])
    return T.scale(T.matmul(down, params[f"{p}lora.{target}.A"]), alpha / r)


def _split_heads(x, heads):
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def _attention(h, model, i, capture):
    params, cfg = model.params, model.config
    p = layer_prefix(i)
    att = model.attachments[i]
    q = _linear(h, params, p + "attn.q")
    k = _linear(h, params, p + "attn.k")
    v = _linear(h, params, p + "attn.v")
    if "lora" in att:
        q = T.add(q, _lora_delta(h, params, p, "q", att["lora"]))
        v = T.add(v, _lora_delta(h, params, p, "v", att["lora"]))
    batch, seq = h.shape[0], h.shape[1]
    if "prefix" in att:
        k = T.concat([T.expand(params[p + "prefix.key"], batch), k], axis=1)
        v = T.concat([T.expand(params[p + "prefix.value"], batch), v], axis=1)
    qh = _split_heads(q, cfg.num_heads)
    kh = _split_heads(k, cfg.num_heads)
    vh = _split_heads(v, cfg.num_heads)
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim))
    weights = T.softmax(scores)
    if capture is not None:
        capture.setdefault("attention", []).append(weights.data)
    out = T.transpose(T.matmul(weights, vh), (0, 2, 1, 3))
    out = T.reshape(out, (batch, seq, cfg.model_dim))
    return _linear(out, params, p + "attn.o")


def encode(model, tokens, capture=None):
    """Final-norm hidden states, shape (batch, seq, model_dim)."""
    tokens = check_tokens(model, tokens)
    params = model.params
    positions = np.broadcast_to(np.arange(tokens.shape[1]), tokens.shape)
    # token embeddings are scaled by sqrt(d) so token identity dominates the residual stream
    x = T.add(T.scale(T.embedding_lookup(params["embed.token"], tokens), math.sqrt(model.config.model_dim)),
              T.embedding_lookup(params["embed.position"], positions))
    for i in range(model.config.num_layers):
        p = layer_prefix(i)
        h = T.layer_norm(x, params[p + "ln1.weight"], params[p + "ln1.bias"])
        x = T.add(x, _attention(h, model, i, capture))
        h = T.layer_norm(x, params[p + "ln2.weight"], params[p + "ln2.bias"])
        x = T.add(x, _linear(T.gelu(_linear(h, params, p + "ff.in")), params, p + "ff.out"))
        if "adapter" in model.attachments[i]:
            x = T.add(x, T.matmul(T.gelu(T.matmul(x, params[p + "adapter.down"])), params[p + "adapter.up"]))
        if capture is not None:
            capture.setdefault("layer_outputs", []).append(x.data)
    return T.layer_norm(x, params["final_ln.weight"], params["final_ln.bias"])


def forward(model, tokens, capture=None):
    """Task logits, shape (batch, num_outputs), from mean-pooled hidden states."""
    hidden = encode(model, tokens, capture)
    return _linear(T.mean(hidden, axis=1), model.params, "head")


# --- synthetic corpus -------------------------------------------------------

class MarkovChain:
    """Seeded order-2 Markov chain over the non-reserved vocabulary.

    Words are split into ``num_clusters`` clusters. Given the clusters of the
    previous two words, the next word's cluster is one of two allowed
    clusters: a successor fixed by the previous cluster alone (weight ~0.75
    on average) or one fixed by the pair. Inside a cluster words follow a
    Zipf law. A transition is in the chain's support iff the next word's
    cluster is allowed.
    """

    def __init__(self, vocab_size=256, seed=0, num_clusters=16):
        rng = np.random.default_rng([seed, 101])
        words = rng.permutation(np.arange(FIRST_WORD, vocab_size))
        self.vocab_size = vocab_size
        self.num_clusters = num_clusters
        self.members = np.array_split(words, num_clusters)
        self.cluster_of = np.full(vocab_size, -1, dtype=np.int64)
        for c, m in enumerate(self.members):
            self.cluster_of[m] = c
        self.word_cdf = []
        for m in self.members:
            w = 1.0 / np.arange(1, len(m) + 1)
            self.word_cdf.append(np.cumsum(w / w.sum()))
        k = num_clusters
        first = rng.permutation(k)
        second = (first[None, :] + rng.integers(1, k, size=(k, k))) % k
        self.allowed = np.stack([np.broadcast_to(first, (k, k)), second], axis=-1)
        self.allowed_cdf = np.cumsum(rng.dirichlet([3.0, 1.0], size=(k, k)), axis=-1)

    def _words(self, clusters, rng):
        out = np.empty(len(clusters), dtype=np.int64)
        u = rng.random(len(clusters))
        for c in np.unique(clusters):
            sel = clusters == c
            idx = np.minimum(np.searchsorted(self.word_cdf[c], u[sel], side="right"), len(self.members[c]) - 1)
            out[sel] = self.members[c][idx]
        return out

    def sample(self, num, length, rng):
        seqs = np.empty((num, length), dtype=np.int64)
        head = min(2, length)
        seqs[:, :head] = self._words(rng.integers(0, self.num_clusters, num * head), rng).reshape(num, head)
        for t in range(2, length):
            ca, cb = self.cluster_of[seqs[:, t - 2]], self.cluster_of[seqs[:, t - 1]]
            u = rng.random(num)[:, None]
            pick = np.minimum((u > self.allowed_cdf[ca, cb]).sum(axis=1), self.allowed.shape[-1] - 1)
            seqs[:, t] = self._words(self.allowed[ca, cb, pick], rng)
        return seqs

    def in_support(self, seqs):
        """Boolean (num, length-2) array: is each transition allowed by the chain."""
        seqs = np.asarray(seqs)
        ca, cb, cc = (self.cluster_of[seqs[:, :-2]], self.cluster_of[seqs[:, 1:-1]],
                      self.cluster_of[seqs[:, 2:]])
        return (self.allowed[ca, cb] == cc[..., None]).any(axis=-1)


def make_corpus(config, num_sequences=50_000, seed=None, held_out=False):
    """Sequences from the chain seeded by ``seed`` (default: the config seed).

    ``seed`` picks the chain itself. ``held_out=True`` draws a disjoint
    sample stream from the same chain, for evaluation.
    """
    seed = config.seed if seed is None else seed
    chain = MarkovChain(config.vocab_size, seed)
    rng = np.random.default_rng([seed, 202, 1] if held_out else [seed, 202])
    return chain.sample(num_sequences, config.max_seq_len, rng)


def _mask_batch(batch, rng, mask_rate):
    mask = rng.random(batch.shape) < mask_rate
    if not mask.any():
        mask.flat[rng.integers(mask.size)] = True
    inputs = batch.copy()
    inputs[mask] = MASK_TOKEN
    return inputs, np.flatnonzero(mask), batch[mask]


def _mlm_logits(model, inputs, flat_index):
    hidden = encode(model, inputs)
    b, s, d = hidden.shape
    picked = T.take_rows(T.reshape(hidden, (b * s, d)), flat_index)
    if MLM_WEIGHT not in model.params:
        return T.matmul(picked, T.transpose(model.params["embed.token"], (1, 0)))
    return T.add(T.matmul(picked, model.params[MLM_WEIGHT]), model.params[MLM_BIAS])


def _init_mlm_decoder(model, corpus, rng):
    """Untied masked-token decoder; its bias starts at log unigram frequencies.

    Tying the decoder to the token embedding lets the frequency signal leak
    into every embedding row as one shared direction, which drowns out token
    identity in the pooled features that fine-tuning relies on.
    """
    if MLM_WEIGHT in model.params:
        return
    cfg = model.config
    dtype = model.params["embed.token"].data.dtype
    counts = np.bincount(corpus.ravel(), minlength=cfg.vocab_size) + 1.0
    model.params[MLM_WEIGHT] = T.Tensor(rng.normal(0.0, INIT_STD, (cfg.model_dim, cfg.vocab_size)), True, dtype)
    model.params[MLM_BIAS] = T.Tensor(np.log(counts / counts.sum()), True, dtype)


def masked_accuracy(model, corpus, mask_rate=0.15, seed=0, batch_size=128):
    rng = np.random.default_rng([seed, 303])
    hits = total = 0
    with T.no_grad():
        for start in range(0, len(corpus), batch_size):
            inputs, idx, targets = _mask_batch(corpus[start:start + batch_size], rng, mask_rate)
            pred = _mlm_logits(model, inputs, idx).data.argmax(axis=1)
            hits += int((pred == targets).sum())
            total += len(targets)
    return hits / max(total, 1)


def pretrain(model, corpus, epochs=3, lr=0.01, batch_size=64, mask_rate=0.15, optimizer="sgd",
             momentum=0.9, clip_norm=1.0, seed=None):
    """Masked-token pretraining, in place; returns ``model``.

    ``optimizer`` is ``"sgd"`` (heavy-ball, using ``momentum``; the default)
    or ``"adam"``. Adam escapes the unigram plateau within the default
    budget where SGD does not; use it with ``lr=1e-3``. Mean training loss
    per epoch is appended to ``model.pretrain_losses``.
    """
    corpus = np.asarray(corpus)
    if corpus.size == 0:
        raise InputError("pretraining corpus is empty")
    losses = getattr(model, "pretrain_losses", [])
    model.pretrain_losses = losses
    if epochs <= 0:
        return model
    rng = np.random.default_rng([model.config.seed if seed is None else seed, 404])
    _init_mlm_decoder(model, corpus, rng)
    live = {n: p for n, p in model.params.items() if p.requires_grad and not n.startswith("head.")}
    opt = optim.make_optimizer(optimizer, live, momentum)
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        epoch_loss = []
        for start in range(0, len(order), batch_size):
            inputs, idx, targets = _mask_batch(corpus[order[start:start + batch_size]], rng, mask_rate)
            loss = T.cross_entropy(_mlm_logits(model, inputs, idx), targets)
            loss.check_finite()
            for p in model.params.values():
                p.grad = None
            loss.backward()
            optim.clip_gradients(live, clip_norm)
            opt.step(lr)
            epoch_loss.append(float(loss.data))
        losses.append(float(np.mean(epoch_loss)))
    return model


# --- checkpoints --------------------------------------------------------------

MAGIC = b"PEFTCKPT"
VERSION = 1
END = b"END!"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_KINDS = ("adapter", "prefix", "lora", "bitfit")


def save_checkpoint(model, path):
    buf = io.BytesIO()
    cfg = model.config
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    buf.write(struct.pack("<6IQ", cfg.num_layers, cfg.model_dim, cfg.num_heads, cfg.ff_dim,
                          cfg.vocab_size, cfg.max_seq_len, cfg.seed))
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BBB", int(t.requires_grad), data.dtype.itemsize, data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    entries = [(i, kind, value) for i, att in enumerate(model.attachments) for kind, value in sorted(att.items())]
    buf.write(struct.pack("<I", len(entries)))
    for i, kind, value in entries:
        size, alpha = (value if kind == "lora" else (int(value), 0.0))
        buf.write(struct.pack("<IBId", i, _KINDS.index(kind), size, alpha))
    buf.write(END)
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}", field="path") from None


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, field):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"file truncated at byte {len(self.blob)} (needed {n} more)", field=field)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, field):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def load_checkpoint(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}", field="path") from None
    r = _Reader(blob)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic bytes", field="magic")
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise CheckpointVersionError(version, VERSION)
    fields = r.unpack("<6IQ", "config")
    try:
        config = BackboneConfig(*fields)
    except ConfigError as exc:
        raise CheckpointError(str(exc), field="config") from None
    (count,) = r.unpack("<I", "tensor_count")
    params = {}
    for k in range(count):
        (n,) = r.unpack("<H", f"tensor[{k}].name_length")
        name = r.take(n, f"tensor[{k}].name").decode("utf-8", errors="replace")
        flag, itemsize, rank = r.unpack("<BBB", f"{name}.header")
        if itemsize not in _DTYPES:
            raise CheckpointError(f"unsupported element size {itemsize}", field=f"{name}.dtype")
        dims = r.unpack(f"<{rank}I", f"{name}.dims")
        dtype = _DTYPES[itemsize]
        nbytes = int(np.prod(dims, dtype=np.int64)) * itemsize
        values = np.frombuffer(r.take(nbytes, f"{name}.values"), dtype=dtype).reshape(dims)
        t = T.Tensor.__new__(T.Tensor)
        t.data = values.astype(dtype.newbyteorder("="))
        t.requires_grad = bool(flag)
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        params[name] = t
    (n_att,) = r.unpack("<I", "attachment_count")
    attachments = [dict() for _ in range(config.num_layers)]
    for k in range(n_att):
        i, kind, size, alpha = r.unpack("<IBId", f"attachment[{k}]")
        if i >= config.num_layers or kind >= len(_KINDS):
            raise CheckpointError("attachment record out of range", field=f"attachment[{k}]")
        name = _KINDS[kind]
        attachments[i][name] = (size, alpha) if name == "lora" else (True if name == "bitfit" else size)
    if r.take(len(END), "end_marker") != END:
        raise CheckpointError("missing end marker", field="end_marker")
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes", field="end_marker")
    for required in ("embed.token", "head.weight", "head.bias"):
        if required not in params:
            raise CheckpointError("tensor missing", field=required)
    return Backbone(config, params, attachments)
