import pytest

from fishrec.config import parse_config
from fishrec.imaging import load_dataset
from fishrec.synthgen import gen_dataset

TINY_CONFIG = """
# small but complete run
max_iter = 2
cv_folds = 3
c_grid = 1, 10
threshold_folds = 3
synth_n_species = 3
synth_images_per_species = 8
seed = 7
"""


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="session")
def tiny_config():
    return parse_config(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config):
    return gen_dataset(tiny_config.gen_config(), tmp_path_factory.mktemp("data") / "tiny")


@pytest.fixture(scope="session")
def tiny_trained(tiny_dataset, tiny_config):
    from fishrec.pipeline import train_pipeline
    return train_pipeline(load_dataset(tiny_dataset), tiny_config)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, status, detail in sorted(results):
        terminalreporter.write_line(f"criterion {n:2d}: {status} - {detail}")
