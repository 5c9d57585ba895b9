import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """Tiny MVTec-layout category for fast pipeline tests (32 px)."""
    from hfrae.fixture import make_fixture

    root = tmp_path_factory.mktemp("fx")
    make_fixture(root, seed=3, category="tiny", n_train=6, n_good=3, n_defect=4, image_size=32)
    return root


_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        props = dict(report.user_properties)
        if report.skipped and isinstance(report.longrepr, tuple):
            props["reason"] = report.longrepr[2].removeprefix("Skipped: ")
        _acceptance[name] = (outcome, props)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        outcome, props = _acceptance[name]
        detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in props.items())
        terminalreporter.write_line(f"{outcome}  {name}  {detail}".rstrip())
