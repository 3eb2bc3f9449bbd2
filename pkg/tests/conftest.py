from pathlib import Path

import pytest

from elastosel.cli import main


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    """A 60-pair dataset simulated, labeled and trained (2 epochs) through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["simulate", "--out", str(data), "--pairs", "60", "--seed", "11"]) == 0
    assert main(["label", "--in", str(data), "--out", str(root / "labels.csv")]) == 0
    assert main(["train", "--data", str(data), "--labels", str(root / "labels.csv"),
                 "--model", str(root / "model.elsm"), "--epochs", "2", "--seed", "3"]) == 0
    return Path(root)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
