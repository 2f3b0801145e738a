import numpy as np
import pytest

from diptych_router.data import Corpus
from diptych_router.model import ModelConfig
from diptych_router.trainer import set_single_threaded

set_single_threaded()


@pytest.fixture
def small_config():
    return ModelConfig(d=16, heads=2, layers=2, subject_rank=4, image_rank=2)


@pytest.fixture
def tiny_config():
    """2 layers, d=8, 4x4 targets and conditions: L stays small enough for float64 checks."""
    return ModelConfig(d=8, heads=2, layers=2, patch=2, image_edge=4, cond_edge=4, max_m=10, m_prime=4,
                       subject_rank=2, image_rank=1)


@pytest.fixture(scope="session")
def corpus():
    return Corpus.generate(48, seed=3, views=2)


@pytest.fixture(scope="session")
def testset():
    return Corpus.generate(24, seed=77, views=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def base_checkpoint(tmp_path_factory, corpus):
    """Default-config backbone after a short text-to-image pretraining run."""
    from diptych_router.trainer import PretrainConfig, pretrain

    path = tmp_path_factory.mktemp("base") / "base.ckpt"
    pretrain(PretrainConfig(iters=150, batch_size=8, seed=0), corpus, path)
    return path


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it.

    A test that errors before reaching its verdict is recorded as FAIL.
    """
    lines = request.config.stash.setdefault(ACCEPTANCE, [])
    name = request.node.name
    recorded = []

    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
        recorded.append(line)
        lines.append(line)
        print(line)
        assert ok, line

    yield record
    if not recorded:
        # acceptance tests are named test_c<N>_...
        lines.append(f"{name.split('_')[1].upper()} FAIL: {name} raised before a verdict was reached")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:]) if s.split()[0][1:].isdigit() else 99):
            terminalreporter.write_line(line)
