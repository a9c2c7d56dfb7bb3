import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dae_refine import dae as A  # noqa: E402
from dae_refine import datagen as D  # noqa: E402
from dae_refine import segmenter as S  # noqa: E402
from dae_refine.optim import TrainSchedule  # noqa: E402


@pytest.fixture(scope="session")
def tiny_corpus():
    return D.generate(D.CorpusSpec(n_train=60, n_val=20, n_test=20, seed=5))


@pytest.fixture(scope="session")
def tiny_segmenter(tiny_corpus):
    train, val, _ = tiny_corpus
    model = S.SegmenterModel.init(S.SegmenterConfig(), seed=0)
    S.train_segmenter(model, train, val, TrainSchedule(max_epochs=8, patience_epochs=8), seed=0)
    return model


@pytest.fixture(scope="session")
def tiny_daes(tiny_corpus, tiny_segmenter):
    """One small trained DAE per scenario."""
    train, val, _ = tiny_corpus
    cfg = A.ConvDaeConfig(channels=(16, 32, 64))
    out = {}
    for scenario, sigma in ((A.Scenario.PREDICTION, 0.1), (A.Scenario.GROUNDTRUTH, 0.5)):
        out[scenario], _ = A.train_dae(
            scenario,
            tiny_segmenter,
            train,
            val,
            cfg,
            A.CorruptionConfig(sigma),
            TrainSchedule(max_epochs=12, patience_epochs=12),
            seed=1,
        )
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
