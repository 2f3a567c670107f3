import json
from pathlib import Path

import numpy as np
import pytest

from vaxpass import biometric
from vaxpass.ledger import Ledger, keygen_from_seed
from vaxpass.passport import PassportNode, VaccinationRecord, setup

ARTIFACT_DIR = Path(__file__).resolve().parent.parent / "artifacts" / "acceptance"

_acceptance: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one criterion's outcome for the end-of-run summary."""

    def record(criterion: str, ok: bool, detail: str = "") -> bool:
        _acceptance[criterion] = (bool(ok), detail)
        return bool(ok)

    return record


@pytest.fixture(scope="session")
def artifact_dir() -> Path:
    ARTIFACT_DIR.mkdir(parents=True, exist_ok=True)
    return ARTIFACT_DIR


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda k: int(k.lstrip("C"))):
        ok, detail = _acceptance[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
    summary = {k: {"passed": v[0], "detail": v[1]} for k, v in _acceptance.items()}
    ARTIFACT_DIR.mkdir(parents=True, exist_ok=True)
    (ARTIFACT_DIR / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# -- shared protocol fixtures -------------------------------------------------


@pytest.fixture(scope="session")
def params():
    return setup(128, seed=5)


@pytest.fixture(scope="session")
def small_dataset():
    return biometric.synth_generate(6, 3, 0.05, 0.1, seed=3)


@pytest.fixture
def parties():
    return [keygen_from_seed(f"party-{i}", b"fixture") for i in range(3)]


@pytest.fixture
def ledger(parties):
    return Ledger([p for _, p in parties])


@pytest.fixture
def node(params, ledger):
    return PassportNode(params, ledger, seed=1)


def record(dose: int = 1, issuer: str = "party-0", vaccine: str = "comirnaty") -> VaccinationRecord:
    return VaccinationRecord(date="2021-05-0%d" % dose, vaccine=vaccine, dose=dose, issuer=issuer)


def random_bits(rng: np.random.Generator, *shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape, dtype=np.uint8)
