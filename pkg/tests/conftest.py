import numpy as np
import pytest

from lhdff.data import make_dataset, vocab_from_manifest
from lhdff.synth import generate_micro_dataset
from lhdff.text import load_clotho_csv
from lhdff.training import TrainConfig, build_model, train

ACCEPTANCE_LINES: list[str] = []

# settings for the 8-clip overfit run shared by the acceptance suite and the CLI tests
OVERFIT_CONFIG = dict(epochs=200, warmup_epochs=20, decay_every=100, batch_size=4, augment=False, seed=0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro")
    generate_micro_dataset(7, 8, out)
    return out


@pytest.fixture(scope="session")
def micro_data(micro_dir):
    manifest = load_clotho_csv(micro_dir / "captions.csv", micro_dir)
    vocab = vocab_from_manifest(manifest)
    return manifest, vocab, make_dataset(manifest, vocab)


@pytest.fixture(scope="session")
def overfit_run(micro_data, tmp_path_factory):
    """Dual-mode model trained to memorize the 8-clip micro-dataset (about 3-4 minutes)."""
    import time

    manifest, vocab, data = micro_data
    out = tmp_path_factory.mktemp("overfit")
    config = TrainConfig(**OVERFIT_CONFIG)
    model = build_model(len(vocab), config)
    start = time.perf_counter()
    report = train(config, data, vocab, model, out)
    return {"model": model, "report": report, "out": out, "seconds": time.perf_counter() - start,
            "data": data, "vocab": vocab, "manifest": manifest}
