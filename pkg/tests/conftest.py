import math

import numpy as np
import pytest

from groupreplay.buffer import Origin, SampleRecord

# acceptance results collected by tests/test_acceptance.py, printed at the end
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def make_record(uid="q1", reward=0.0, n=3, epoch=1, origin=Origin.ON_POLICY, response=None, truncated=False):
    response = tuple(response) if response is not None else tuple(range(1, n + 1))
    n = len(response)
    return SampleRecord(
        uid=uid,
        response=response,
        behavior_logprobs=(-math.log(4.0),) * n,
        token_entropies=(math.log(4.0),) * n,
        reward=reward,
        truncated=truncated,
        epoch=epoch,
        origin=origin,
    )


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abc")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
