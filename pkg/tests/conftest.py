import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from peftspace import backbone as bb

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail, seconds); filled in by test_acceptance
ACCEPTANCE = {}
# fixture name -> seconds spent building it, so the runtime budget can include setup
FIXTURE_SECONDS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail, seconds = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {detail}")


TINY = bb.BackboneConfig(num_layers=4, model_dim=16, num_heads=2, ff_dim=32, vocab_size=256, max_seq_len=32, seed=3)
MICRO = bb.BackboneConfig(num_layers=4, model_dim=8, num_heads=2, ff_dim=12, vocab_size=16, max_seq_len=6, seed=5)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def micro_config():
    return MICRO


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    """Default-size backbone after a short pretraining run, saved and reloaded once per session."""
    start = time.perf_counter()
    cfg = bb.BackboneConfig()
    model = bb.build(cfg)
    bb.pretrain(model, bb.make_corpus(cfg, 8192), epochs=1)
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint.bin"
    bb.save_checkpoint(model, path)
    model = bb.load_checkpoint(path)
    FIXTURE_SECONDS["pretrained"] = time.perf_counter() - start
    return model


@pytest.fixture(scope="session")
def tiny_pretrained():
    model = bb.build(TINY)
    bb.pretrain(model, bb.make_corpus(TINY, 512), epochs=1)
    return model
