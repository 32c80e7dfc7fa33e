import math

import numpy as np
import pytest

from acr.errors import InvalidInput
from acr.numerics import softmax
from acr.scores import (
    ScorerSpec,
    decide,
    restricted_probs,
    score_doctor,
    score_energy,
    score_entropy,
    score_gen,
    score_logits,
    score_maxlogit,
    score_msp,
)


def test_msp():
    assert score_msp([0.2, 0.5, 0.3]) == 0.5
    assert score_msp(np.full(4, 0.25)) == 0.25
    assert score_msp([0, 1, 0]) == 1.0
    with pytest.raises(InvalidInput):
        score_msp([])


def test_maxlogit():
    assert score_maxlogit([1, -2, 0.5]) == 1
    assert score_maxlogit([3.3, 3.3]) == 3.3
    assert score_maxlogit([-5, -3]) == -3


def test_energy():
    assert score_energy([0, 0]) == pytest.approx(math.log(2), abs=1e-15)
    assert score_energy([2.5], T=7.0) == pytest.approx(2.5, abs=1e-14)
    assert score_energy([1, 1]) == pytest.approx(1 + math.log(2), abs=1e-15)
    with pytest.raises(InvalidInput):
        score_energy([1, 2], T=0)


def test_entropy():
    assert score_entropy([0, 1, 0]) == 0.0
    assert score_entropy(np.full(5, 0.2)) == pytest.approx(-math.log(5), abs=1e-15)
    assert score_entropy([0.5, 0.5]) == pytest.approx(-math.log(2), abs=1e-15)


def test_doctor():
    assert score_doctor([0.5, 0.5], "alpha") == pytest.approx(-1.0, abs=1e-15)
    assert score_doctor([0, 1], "alpha") == 0.0
    assert score_doctor([0, 1], "beta") == 0.0
    assert score_doctor([0.75, 0.25], "alpha") == pytest.approx(-0.6, abs=1e-15)
    assert score_doctor([0.75, 0.25], "beta") == pytest.approx(-0.25 / 0.75, abs=1e-15)
    with pytest.raises(InvalidInput):
        score_doctor([0.5, 0.5], "gamma")


def test_gen():
    assert score_gen([0, 1, 0], gamma=0.3) == 0.0
    assert score_gen([0.5, 0.5], gamma=0.1, top_m=2) == pytest.approx(-2 * 0.5**0.2, abs=1e-14)
    assert score_gen([0.5, 0.5], gamma=0.1, top_m=2) == pytest.approx(-1.7411, abs=1e-4)
    p = np.array([0.1, 0.6, 0.3])
    assert score_gen(p, 0.2, 1) == pytest.approx(-(0.6**0.2) * (0.4**0.2), abs=1e-15)
    with pytest.raises(InvalidInput):
        score_gen(p, 1.0, 2)
    with pytest.raises(InvalidInput):
        score_gen(p, 0.5, 4)


def test_decide():
    assert decide(0.9, 0.5) == "correct"
    assert decide(0.5, 0.5) == "correct"
    assert decide(0.1, 0.5) == "misclassified"


def test_decide_monotone():
    taus = np.linspace(-1, 1, 21)
    for tau in taus:
        flags = [decide(s, tau) == "correct" for s in np.linspace(-2, 2, 41)]
        assert flags == sorted(flags)


def test_spec_validation():
    with pytest.raises(InvalidInput):
        ScorerSpec("softmax")
    with pytest.raises(InvalidInput):
        ScorerSpec("energy", temperature=-1)


def test_restricted_probs_default_not_renormalized():
    z = np.array([[1.0, 2.0, 0.5, 3.0]])
    full = softmax(z)
    np.testing.assert_array_equal(restricted_probs(z, 3), full[:, :3])
    np.testing.assert_allclose(restricted_probs(z, 3, renormalize=True).sum(), 1.0, atol=1e-15)


def test_score_logits_batch_and_single_agree():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 5))
    for kind in ("msp", "maxlogit", "energy", "entropy", "doctor_a", "doctor_b", "gen"):
        batch = score_logits(z, ScorerSpec(kind), num_classes=4)
        single = [score_logits(row, ScorerSpec(kind), num_classes=4)[0] for row in z]
        np.testing.assert_allclose(batch, single, rtol=1e-14)


def test_order_invariance():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(10, 4))
    perm = rng.permutation(10)
    for kind in ("msp", "energy", "gen"):
        s = score_logits(z, ScorerSpec(kind))
        np.testing.assert_array_equal(score_logits(z[perm], ScorerSpec(kind)), s[perm])


def test_argmax_invariant_under_temperature():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(200, 5))
    for T in (0.1, 0.5, 2.0, 10.0):
        assert np.array_equal(np.argmax(softmax(z / T), axis=1), np.argmax(z, axis=1))


def test_one_hot_maximizes_every_scorer():
    rng = np.random.default_rng(5)
    C = 4
    onehot = np.eye(C)[0]
    fns = [
        score_msp,
        score_entropy,
        lambda p: score_doctor(p, "alpha"),
        lambda p: score_doctor(p, "beta"),
        lambda p: score_gen(p, 0.1, C),
    ]
    for p in rng.dirichlet(np.ones(C) * 0.5, size=2000):
        for fn in fns:
            assert fn(p) <= fn(onehot) + 1e-12
