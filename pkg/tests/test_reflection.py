import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_record
from groupreplay.buffer import SampleBuffer
from groupreplay.reflection import (
    Query,
    ReflectionTemplate,
    augment_batch,
    build_reflection_query,
    is_hard,
)

T = ReflectionTemplate(guidance=(90, 91), history_window=16, hardness_threshold=0.25)


def buffer_with(uid, rewards, response=(3, 3, 7)):
    buf = SampleBuffer()
    for r in rewards:
        buf.insert(make_record(uid, r, response=response))
    return buf


def test_is_hard_examples():
    assert is_hard("q1", buffer_with("q1", [0, 0, 0]), T)
    assert not is_hard("q1", buffer_with("q1", [1.0, 1.2]), T)
    assert not is_hard("q1", SampleBuffer(), T)


def test_is_hard_uses_recent_window():
    buf = buffer_with("q1", [1.0] * 4 + [0.0] * 2)
    assert not is_hard("q1", buf, ReflectionTemplate((90,), history_window=6, hardness_threshold=0.25))
    assert is_hard("q1", buf, ReflectionTemplate((90,), history_window=2, hardness_threshold=0.25))


def test_build_query_concatenation():
    buf = buffer_with("q1", [0.0])
    assert build_reflection_query((5, 9), "q1", buf, T) == (5, 9, 3, 3, 7, 90, 91)


def test_build_query_deterministic():
    buf = SampleBuffer()
    buf.insert(make_record("q1", 0.0, response=(1, 2)))
    buf.insert(make_record("q1", 0.0, response=(4, 5, 6)))
    picks = {
        build_reflection_query((5,), "q1", buf, T, np.random.default_rng(11)) for _ in range(5)
    }
    assert len(picks) == 1


def test_build_query_uses_ranked_failures():
    # history made only of entropy-ranked rewards still counts as failed
    buf = buffer_with("q1", [0.3, 0.45])
    assert build_reflection_query((5,), "q1", buf, T) is not None


def test_build_query_ignores_successes():
    buf = SampleBuffer()
    buf.insert(make_record("q1", 1.0, response=(8, 8)))
    buf.insert(make_record("q1", 0.0, response=(2,)))
    assert build_reflection_query((5,), "q1", buf, T) == (5, 2, 90, 91)
    assert build_reflection_query((5,), "q2", buf, T) is None
    assert build_reflection_query((5,), "q1", buffer_with("q1", [1.0, 1.5]), T) is None


def test_build_query_truncates_failure_tail():
    buf = buffer_with("q1", [0.0], response=(1, 2, 3, 4, 5))
    q = build_reflection_query((5, 9), "q1", buf, T, max_length=7)
    assert q == (5, 9, 1, 2, 3, 90, 91)
    assert build_reflection_query((5, 9), "q1", buf, T, max_length=3) is None


def test_augment_batch_epoch_one_unchanged():
    buf = buffer_with("q1", [0.0])
    batch = [Query("q1", (5,))]
    assert augment_batch(batch, buf, T, epoch=1, rng_for=lambda i: np.random.default_rng(i)) == batch


def test_augment_batch_adds_one_variant_per_hard_query():
    buf = buffer_with("q1", [0.0, 0.0])
    buf.insert(make_record("q2", 1.0))
    buf.insert(make_record("q3", 1.0))
    buf.insert(make_record("q4", 0.0))
    buf.insert(make_record("q4", 1.5))
    batch = [Query(u, (50 + i,)) for i, u in enumerate(["q1", "q2", "q3", "q4"])]
    out = augment_batch(batch, buf, T, epoch=2, rng_for=lambda i: np.random.default_rng(i))
    assert len(out) == 5
    assert out[:4] == batch
    assert out[4] == Query("q1", (50, 3, 3, 7, 90, 91), reflection=True)


def test_augment_batch_skips_hard_without_failures():
    # hard by threshold (rewards below tau) yet every record counts as a success
    # under a failure threshold of 0.1
    buf = buffer_with("q1", [0.2, 0.2])
    batch = [Query("q1", (5,))]
    out = augment_batch(batch, buf, T, 3, lambda i: np.random.default_rng(i), failure_threshold=0.1)
    assert out == batch


@pytest.mark.parametrize("kwargs", [dict(guidance=()), dict(guidance=(1,), history_window=0), dict(guidance=(1,), hardness_threshold=-0.1)])
def test_template_validation(kwargs):
    with pytest.raises(ValueError):
        ReflectionTemplate(**kwargs)


@given(
    st.lists(st.integers(16, 900), min_size=1, max_size=5),
    st.lists(st.lists(st.integers(0, 15), min_size=1, max_size=8), min_size=1, max_size=5),
    st.integers(0, 50),
)
def test_variant_prefix_and_suffix(prompt, failures, seed):
    buf = SampleBuffer()
    for resp in failures:
        buf.insert(make_record("q", 0.0, response=resp))
    q = build_reflection_query(tuple(prompt), "q", buf, T, np.random.default_rng(seed))
    assert q[: len(prompt)] == tuple(prompt)
    assert q[-2:] == T.guidance
    assert len(q) > len(prompt) + len(T.guidance)
    assert q[len(prompt) : -2] in {tuple(f) for f in failures}
