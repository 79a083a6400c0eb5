import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _ACCEPTANCE[name] = call.excinfo is None


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}")


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """12-epoch MA run at the default recipe (lr 1e-4, batch 6) on a reduced synthetic set."""
    from mipa.config import ExperimentConfig, bundled_config
    from mipa.training import read_metrics, run_training

    out = tmp_path_factory.mktemp("smoke")
    config = ExperimentConfig.from_dict(bundled_config("default")).with_overrides(
        {"regime": "mipa_ma", "ma.gamma": 0.1, "dataset.train_size": 300, "dataset.test_size": 100,
         "log_every": 5})
    run_training(config, out_dir=out)
    return read_metrics(out / "metrics.csv")
