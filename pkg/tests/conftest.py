import numpy as np
import pytest

from rfmia import classifiers, mia, nn, signal

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_setting1():
    cfg = signal.scenario_config("setting1-strong", target_train=600, target_test=400,
                                 surrogate_train=200, surrogate_test=200,
                                 mia_member=200, mia_nonmember=200)
    return signal.synth_scenario(cfg, 7)


@pytest.fixture(scope="session")
def small_setting2():
    cfg = signal.scenario_config("setting2", set_size=400, subset_size=200)
    return signal.synth_scenario(cfg, 7)


@pytest.fixture(scope="session")
def tiny_mlp():
    model = nn.init(nn.LayerSpec(5, (7, 6), 3), seed=3)
    model.trained = True
    return model


@pytest.fixture(scope="session")
def trained_shadow():
    """Score-based MIA on synthetic 5-class score vectors: members confident,
    non-members flatter."""
    r = np.random.default_rng(5)
    members = nn.softmax(r.normal(0, 1, (400, 5)) + np.eye(5)[r.integers(0, 5, 400)] * 6)
    nonmembers = nn.softmax(r.normal(0, 1, (400, 5)) + np.eye(5)[r.integers(0, 5, 400)] * 2)
    sets = mia.MembershipSets(members, nonmembers)
    m = mia.train_mia(sets, mia.SCORE_BASED, nn.TrainConfig(epochs=40, seed=1), n_classes=5)
    return m, members, nonmembers
