import numpy as np
import pytest
from hypothesis import settings

from backdoorlab.geometry import BoundingBox, GroundTruthObject, Prediction

settings.register_profile("lab", max_examples=60, deadline=None)
settings.load_profile("lab")


def box(*c):
    return BoundingBox(*map(float, c))


def gt(coords, label=1, poisoned=False, **kw):
    return GroundTruthObject(box(*coords), label, poisoned=poisoned, **kw)


def pred(coords, logits=(0.0, 0.0, 0.0), score=None, label=None, background=None):
    z = np.asarray(logits, dtype=float)
    if label is None:
        label = int(np.argmax(z)) + 1
    if score is None:
        score = float(1 / (1 + np.exp(-z.max())))
    return Prediction(box(*coords), z, score, label, background)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the session
VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
