import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdrsr import diffcore as dc
from rdrsr.config import RunConfig
from rdrsr.model import RDRSR, Batch, Noise
from rdrsr.objective import (
    ce_loss, joint_loss, reward_baseline, reward_chosen, reward_orthogonal, rl_loss, total_reward,
)


def logit(p):
    return math.log(p / (1 - p))


def naive_score(p, e_t, negs):
    num = math.exp(float(p @ e_t))
    return num / (num + sum(math.exp(float(p @ n)) for n in negs))


def test_reward_chosen_symmetric_pools():
    p = np.array([1.0, 0.0])
    assert reward_chosen(p, np.array([0.3, 1.0]), np.array([[0.3, -2.0]])) == pytest.approx(0.5)
    negs = np.tile([0.3, 5.0], (99, 1))
    assert reward_chosen(p, np.array([0.3, 1.0]), negs) == pytest.approx(0.01)


@settings(max_examples=100, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**32 - 1), o=st.integers(1, 12))
def test_reward_chosen_matches_naive_and_sums_to_one(seed, o):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=4)
    pool = rng.normal(size=(o + 1, 4))
    pool *= 30 / max(1.0, np.abs(pool @ p).max())  # scores stay within +-30
    r = reward_chosen(p, pool[0], pool[1:])
    assert 0 < r <= 1  # 1 - exp(-60) rounds to 1.0 in double precision
    assert abs(r - naive_score(p, pool[0], pool[1:])) < 1e-12
    total = sum(reward_chosen(p, pool[i], np.delete(pool, i, axis=0)) for i in range(o + 1))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_reward_chosen_large_scores_finite():
    p = np.array([1.0])
    r = reward_chosen(p, np.array([1e4]), np.array([[-1e4], [9900.0]]))
    assert np.isfinite(r) and r == pytest.approx(1.0)
    logits = dc.Tensor(np.array([[1e4, 0.0, 9999.0]]))
    assert np.isfinite(ce_loss(dc.Tensor([[1.0]]), dc.reshape(logits, (1, 3, 1))).data).all()


def test_reward_baseline_examples():
    e_t, negs = np.array([1.0, 0.0]), np.array([[0.0, 0.0]])
    P = np.array([[logit(0.8), 0.0], [logit(0.2), 0.0]])
    assert reward_baseline(P, e_t, negs) == pytest.approx(0.5, abs=1e-12)
    # h=1 uses only the first slot, whatever sits in the others
    assert reward_baseline(P, e_t, negs, h=np.array(1)) == pytest.approx(0.8)
    same = np.tile([0.4, -1.0], (3, 1))
    assert reward_baseline(same, e_t, negs) == pytest.approx(reward_chosen(same[0], e_t, negs))


def test_advantage_nonnegative_when_target_rep_is_best():
    rng = np.random.default_rng(0)
    for _ in range(50):
        P, e_t, negs = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(5, 4))
        per_slot = [reward_chosen(p, e_t, negs) for p in P]
        best = int(np.argmax(per_slot))
        assert reward_chosen(P[best], e_t, negs) - reward_baseline(P, e_t, negs) >= 0


def test_reward_orthogonal_examples():
    assert reward_orthogonal(np.array([[1.0, 0.0], [0.0, 1.0]])) == 0.0
    assert reward_orthogonal(np.array([[1.0, 0.0], [1.0, 0.0]])) == -1.0
    s3 = math.sqrt(3)
    P = np.array([[1, 0, 0], [0.5, s3 / 2, 0], [0.5, 1 / (2 * s3), math.sqrt(2 / 3)]])
    assert reward_orthogonal(P) == pytest.approx(-0.5, abs=1e-12)
    assert reward_orthogonal(np.array([[3.0, 4.0], [3.0, 4.0]]), h=np.array(1)) == 0.0


@settings(max_examples=100, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 4))
def test_reward_orthogonal_bounds(seed, h):
    P = np.random.default_rng(seed).normal(size=(4, 3))
    r = reward_orthogonal(P, h=np.array(h))
    assert -np.max(np.sum(P[:h] ** 2, axis=1)) - 1e-12 <= r <= 0


def test_total_reward_examples():
    assert total_reward(0.8, 0.5, -1.0, 0.001) == pytest.approx(0.299, abs=1e-12)
    assert total_reward(0.7, 0.4, -3.0, 0.0) == pytest.approx(0.3)
    assert total_reward(0.5, 0.5, 0.0, 0.001) == 0.0
    with pytest.raises(ValueError):
        total_reward(0.5, 0.5, 0.0, -1.0)


def test_rl_loss_examples():
    logp = dc.parameter(np.log([0.5, 0.5, 0.5]), "logp")
    L = rl_loss(dc.sum(logp, axis=0, keepdims=True), np.array([1.0]))
    assert L.data[0] == pytest.approx(2.0794415416798357, abs=1e-12)
    L0 = rl_loss(dc.sum(logp, axis=0, keepdims=True), np.array([0.0]))
    assert L0.data[0] == 0.0
    dc.sum(L0).backward()
    np.testing.assert_array_equal(logp.grad, 0.0)
    assert rl_loss(dc.Tensor([0.0]), np.array([0.7])).data[0] == 0.0


def test_ce_loss_examples():
    p = dc.Tensor([[1.0, 2.0]])
    cands = dc.Tensor(np.array([[[0.5, 0.5], [1.5, 0.0]]]))  # both score 1.5
    assert ce_loss(p, cands).data[0] == pytest.approx(math.log(2), abs=1e-12)
    wide = dc.Tensor(np.array([[[30.0, 0.0], [0.0, 0.0]]]))
    assert ce_loss(dc.Tensor([[1.0, 0.0]]), wide).data[0] < 1e-12


def test_ce_loss_gradient():
    rng = np.random.default_rng(1)
    p = dc.parameter(rng.normal(size=(2, 4)), "p")
    cands = dc.parameter(rng.normal(size=(2, 4, 4)), "cands")  # target + o=3
    res = dc.grad_check(lambda: dc.sum(ce_loss(p, cands)), {"p": p, "cands": cands}, eps=1e-6)
    assert res.max_rel_error < 1e-4, res


def test_joint_loss_examples():
    L = joint_loss(dc.Tensor([math.log(2)]), dc.Tensor([-math.log(0.125)]), 1.0)
    assert L.data[0] == pytest.approx(4 * math.log(2), abs=1e-12)
    assert round(float(L.data[0]), 4) == 2.7726
    assert joint_loss(dc.Tensor([0.6931]), dc.Tensor([2.0794]), 0.0).data[0] == 0.6931
    with pytest.raises(ValueError):
        joint_loss(dc.Tensor([0.0]), dc.Tensor([0.0]), -0.5)


def test_reward_carries_no_gradient():
    cfg = RunConfig(d=4, t=3, k=3, o=3)
    model = RDRSR(cfg, 1, 10)
    batch = Batch(np.array([[1, 2, 3]]), np.array([1]), np.array([4]), np.array([[7, 8, 9]]))
    noise = Noise.draw(np.random.default_rng(0), 1, 3, 3)
    out = model.forward(batch, noise)
    dc.sum(out.losses.L_RL).backward()
    # negatives enter only the reward (and L_CE, not part of this backward)
    np.testing.assert_array_equal(model.params["item_emb"].grad[7:10], 0.0)
