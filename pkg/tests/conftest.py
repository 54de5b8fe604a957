import numpy as np
import pytest
import torch

from demark.synthgen import GeneratorConfig, generate_dataset, make_backgrounds


@pytest.fixture(scope="session")
def backgrounds(tmp_path_factory):
    root = tmp_path_factory.mktemp("backgrounds")
    make_backgrounds(root, 6, (96, 128), seed=3)
    return root


@pytest.fixture(scope="session")
def small_gen_config():
    return GeneratorConfig(image_hw=(64, 64))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, backgrounds, small_gen_config):
    root = tmp_path_factory.mktemp("dataset")
    generate_dataset(backgrounds, root, 6, seed=11, config=small_gen_config)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


_ACCEPTANCE = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    criteria = getattr(item.module, "CRITERIA", None)
    if criteria and item.name in criteria and (rep.when == "call" or rep.outcome != "passed"):
        if rep.when == "call" or rep.failed:
            detail = getattr(item.module, "DETAILS", {}).get(item.name, "")
            _ACCEPTANCE.append((criteria[item.name], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, verdict, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{verdict}  {label}: {detail}")
