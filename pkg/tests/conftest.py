import time

import numpy as np
import pytest

from cropseg import arch, io, synth, training

# desk-scale protocol shared by the end-to-end checks
DESK_IMAGES = 200
DESK_SEED = 0
DESK_EPOCHS = 60
DESK_LR = 5e-3
DESK_AUGMENT = False

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  [{detail}]"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])


def desk_config(channels="all", seed=DESK_SEED) -> training.TrainConfig:
    return training.TrainConfig(epochs=DESK_EPOCHS, lr=DESK_LR, augment=DESK_AUGMENT, seed=seed,
                                channels=channels)


def split_dataset(samples):
    n_tr, n_va, _ = io.split_counts(len(samples))
    return samples[:n_tr], samples[n_tr:n_tr + n_va], samples[n_tr + n_va:]


def train_desk(samples, channels="all"):
    tr, va, te = split_dataset(samples)
    spec = arch.NetworkSpec(input_channels={"all": 14, "rgb": 3}[channels])
    net = arch.build_network(spec, seed=DESK_SEED)
    t0 = time.perf_counter()
    net, history = training.train(net, tr, va, desk_config(channels))
    elapsed = time.perf_counter() - t0
    report = training.evaluate_network(net, te, channels=channels)
    return {"net": net, "history": history, "seconds": elapsed, "report": report, "test": te}


@pytest.fixture(scope="session")
def home_data():
    return synth.generate_dataset("home", DESK_IMAGES, seed=DESK_SEED)


@pytest.fixture(scope="session")
def away_data():
    return synth.generate_dataset("away", DESK_IMAGES, seed=DESK_SEED + 1)


@pytest.fixture(scope="session")
def home_run(home_data):
    return train_desk(home_data, "all")


@pytest.fixture(scope="session")
def away_runs(away_data):
    return {ch: train_desk(away_data, ch) for ch in ("all", "rgb")}
