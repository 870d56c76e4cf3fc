import numpy as np
import pytest

from peftspace import backbone as bb
from peftspace import tensor as T
from peftspace.errors import CheckpointError, CheckpointVersionError, ConfigError, InputError
from peftspace.estimator import AdamW


def enumerate_count(model):
    """Oracle: walk every pretrained tensor and add up its elements."""
    return sum(int(np.prod(p.shape)) for n, p in model.params.items()
               if not n.startswith("head.") and not n.startswith("mlm."))


def test_per_layer_count_example():
    assert bb.layer_param_count(64, 128) == 33_472
    model = bb.build(bb.BackboneConfig())
    per_layer = sum(p.size for n, p in model.params.items() if n.startswith("layers.0."))
    assert per_layer == 33_472


def test_closed_form_count_matches_enumeration_on_random_configs():
    r = np.random.default_rng(0)
    for _ in range(10):
        heads = int(r.integers(1, 4))
        cfg = bb.BackboneConfig(num_layers=int(r.integers(4, 9)), model_dim=heads * int(r.integers(1, 6)),
                                num_heads=heads, ff_dim=int(r.integers(1, 20)), vocab_size=int(r.integers(3, 40)),
                                max_seq_len=int(r.integers(1, 10)), seed=int(r.integers(1000)))
        assert bb.param_count(cfg) == enumerate_count(bb.build(cfg))


def test_build_is_deterministic_and_all_trainable():
    a, b = bb.build(bb.BackboneConfig(seed=9)), bb.build(bb.BackboneConfig(seed=9))
    for name, p in a.params.items():
        assert np.array_equal(p.data, b[name].data)
        assert p.requires_grad


@pytest.mark.parametrize("kwargs", [dict(model_dim=63, num_heads=4), dict(num_layers=3), dict(vocab_size=2),
                                    dict(model_dim=64.0)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        bb.BackboneConfig(**kwargs)


def test_forward_shape_finite_and_pure(tiny_config):
    model = bb.build(tiny_config, num_outputs=3)
    tokens = np.full((1, 10), 7)
    out = bb.forward(model, tokens)
    assert out.shape == (1, 3)
    assert np.all(np.isfinite(out.data))
    assert np.array_equal(out.data, bb.forward(model, tokens).data)


def test_forward_rejects_bad_tokens(tiny_config):
    model = bb.build(tiny_config)
    with pytest.raises(InputError):
        bb.forward(model, [[0, 256]])
    with pytest.raises(InputError):
        bb.forward(model, np.zeros((1, 33), dtype=int))
    with pytest.raises(InputError):
        bb.forward(model, np.zeros((1, 3)))


def test_head_step_changes_logits(tiny_config):
    model = bb.build(tiny_config).freeze_all().unfreeze_head()
    tokens = np.arange(2, 12).reshape(2, 5)
    before = bb.forward(model, tokens).data.copy()
    T.cross_entropy(bb.forward(model, tokens), [0, 1]).backward()
    for p in model.trainable().values():
        p.data -= 0.1 * p.grad
    assert np.max(np.abs(bb.forward(model, tokens).data - before)) > 0


def test_freeze_all_then_step_changes_nothing(tiny_config):
    model = bb.build(tiny_config).freeze_all()
    assert not model.trainable()
    snapshot = {n: p.data.copy() for n, p in model.params.items()}
    out = bb.forward(model, np.arange(2, 10)[None])
    assert not out.requires_grad
    AdamW(model.trainable()).step(1e-2)
    for n, p in model.params.items():
        assert np.array_equal(p.data, snapshot[n])


def test_markov_corpus_is_in_support(tiny_config):
    chain = bb.MarkovChain(tiny_config.vocab_size, tiny_config.seed)
    corpus = bb.make_corpus(tiny_config, 64)
    assert corpus.shape == (64, tiny_config.max_seq_len)
    assert corpus.min() >= bb.FIRST_WORD
    assert chain.in_support(corpus).all()


def test_pretrain_zero_epochs_is_identity(tiny_config):
    model = bb.build(tiny_config)
    snapshot = {n: p.data.copy() for n, p in model.params.items()}
    bb.pretrain(model, bb.make_corpus(tiny_config, 32), epochs=0)
    assert set(model.params) == set(snapshot)
    for n, p in model.params.items():
        assert np.array_equal(p.data, snapshot[n])


def test_pretrain_rejects_empty_corpus(tiny_config):
    with pytest.raises(InputError):
        bb.pretrain(bb.build(tiny_config), np.zeros((0, 8), dtype=int))


def test_pretrain_deterministic(tiny_config):
    corpus = bb.make_corpus(tiny_config, 128)
    a = bb.pretrain(bb.build(tiny_config), corpus, epochs=1)
    b = bb.pretrain(bb.build(tiny_config), corpus, epochs=1)
    for n, p in a.params.items():
        assert np.array_equal(p.data, b[n].data)


def test_held_out_corpus_is_a_fresh_draw_from_the_same_chain(tiny_config):
    train = bb.make_corpus(tiny_config, 64)
    held_out = bb.make_corpus(tiny_config, 64, held_out=True)
    chain = bb.MarkovChain(tiny_config.vocab_size, tiny_config.seed)
    assert chain.in_support(held_out).all() and chain.in_support(train).all()
    assert not np.array_equal(train, held_out)
    assert not bb.MarkovChain(tiny_config.vocab_size, tiny_config.seed + 1).in_support(held_out).all()


@pytest.mark.parametrize("optimizer, lr", [("sgd", 0.01), ("adam", 1e-3)])
def test_pretrain_improves_masked_accuracy_and_loss_trend(tiny_config, optimizer, lr):
    corpus = bb.make_corpus(tiny_config, 1024)
    held_out = bb.make_corpus(tiny_config, 256, held_out=True)
    model = bb.build(tiny_config)
    before = bb.masked_accuracy(model, held_out)
    bb.pretrain(model, corpus, epochs=3, lr=lr, optimizer=optimizer)
    after = bb.masked_accuracy(model, held_out)
    assert after > before
    losses = model.pretrain_losses
    assert len(losses) == 3
    for prev, nxt in zip(losses, losses[1:]):
        assert nxt <= 1.05 * prev


def test_pretraining_keeps_pooled_features_informative(pretrained):
    # regression guard: the pooled representation must not collapse to a constant
    tokens = bb.make_corpus(pretrained.config, 64, held_out=True)
    with T.no_grad():
        pooled = bb.encode(pretrained, tokens).data.mean(axis=1)
    assert pooled.std(axis=0).mean() > 0.05


def test_checkpoint_round_trip(tmp_path, tiny_pretrained):
    from peftspace import peft
    model = tiny_pretrained.clone().freeze_all()
    peft.attach_lora(model, 1, 2)
    peft.attach_bitfit(model, 2)
    path = tmp_path / "m.bin"
    bb.save_checkpoint(model, path)
    loaded = bb.load_checkpoint(path)
    assert loaded.config == model.config
    assert loaded.attachments == model.attachments
    assert list(loaded.params) == list(model.params)
    for n, p in model.params.items():
        q = loaded[n]
        assert q.data.dtype == p.data.dtype
        assert np.array_equal(q.data, p.data)
        assert q.requires_grad == p.requires_grad
    bb.save_checkpoint(loaded, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_double_precision_round_trip(tmp_path, tiny_config):
    model = bb.build(tiny_config, dtype=np.float64)
    bb.save_checkpoint(model, tmp_path / "d.bin")
    assert bb.load_checkpoint(tmp_path / "d.bin")["embed.token"].data.dtype == np.float64


def test_checkpoint_truncated(tmp_path, tiny_config):
    path = tmp_path / "m.bin"
    bb.save_checkpoint(bb.build(tiny_config), path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CheckpointError) as info:
        bb.load_checkpoint(path)
    assert info.value.field == "end_marker"


def test_checkpoint_bad_magic(tmp_path, tiny_config):
    path = tmp_path / "m.bin"
    bb.save_checkpoint(bb.build(tiny_config), path)
    path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError) as info:
        bb.load_checkpoint(path)
    assert info.value.field == "magic"


def test_checkpoint_version_bump(tmp_path, tiny_config):
    path = tmp_path / "m.bin"
    bb.save_checkpoint(bb.build(tiny_config), path)
    blob = bytearray(path.read_bytes())
    blob[8] += 1
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError) as info:
        bb.load_checkpoint(path)
    assert "2" in str(info.value) and "1" in str(info.value)
    assert (info.value.found, info.value.expected) == (2, 1)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        bb.load_checkpoint(tmp_path / "absent.bin")
