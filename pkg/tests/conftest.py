import numpy as np
import pytest

from dynattack import dygcn, graphs

# criterion number -> (title, outcome, detail); filled by test_acceptance
ACCEPTANCE: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the current acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")
    num, title = marker.args

    def _note(text):
        ACCEPTANCE.setdefault(num, [title, None, ""])[2] = str(text)

    ACCEPTANCE.setdefault(num, [title, None, ""])
    return _note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    num, title = marker.args
    entry = ACCEPTANCE.setdefault(num, [title, None, ""])
    failed = rep.failed or entry[1] == "FAIL"
    entry[1] = "FAIL" if failed else "PASS"
    if rep.failed and not entry[2]:
        crash = getattr(rep.longrepr, "reprcrash", None)
        text = crash.message if crash is not None else str(rep.longrepr)
        entry[2] = text.strip().splitlines()[0][:200]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num} {status or 'NOT RUN'}: {title}" + (f" | {detail}" if detail else ""))


# shared small fixtures --------------------------------------------------------

SMALL = dict(num_nodes=20, num_snapshots=16, base_density=0.3, churn_rate=0.05)


@pytest.fixture(scope="session")
def small_seq():
    return graphs.synthetic_sequence(3, **SMALL)


@pytest.fixture(scope="session")
def small_split(small_seq):
    return graphs.split_examples(graphs.window_examples(small_seq, 4), 6, 3, 3)


@pytest.fixture(scope="session")
def small_victim(small_split):
    cfg = dygcn.ModelConfig(layers=2, hidden=16, lstm_layers=2, epochs=30, seed=0)
    return dygcn.train_dygcn(small_split.train, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
