"""Rewards for the allocator and the joint training loss.

Rewards are plain numpy (they are constants for backpropagation); the losses
are Tensors. The candidate pool for the sampled softmax is always the target
followed by its ``o`` negatives, so index 0 is the positive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class RewardBundle:
    R_c: np.ndarray
    R_baseline: np.ndarray
    R_orthogonal: np.ndarray
    lambda_o: float

    @property
    def R_advantage(self) -> np.ndarray:
        return self.R_c - self.R_baseline

    @property
    def R_s(self) -> np.ndarray:
        return total_reward(self.R_c, self.R_baseline, self.R_orthogonal, self.lambda_o)


@dataclass
class LossBundle:
    L_CE: dc.Tensor   # (B,)
    L_RL: dc.Tensor   # (B,)
    L: dc.Tensor      # (B,)
    beta: float


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def pool_scores(p: np.ndarray, e_target: np.ndarray, negatives: np.ndarray) -> np.ndarray:
    """Inner products of ``p`` with [target, negatives...]; shape (..., o + 1)."""
    cands = np.concatenate([np.asarray(e_target)[..., None, :], np.asarray(negatives)], axis=-2)
    return np.einsum("...d,...cd->...c", p, cands)


def reward_chosen(p_target, e_target, negatives) -> np.ndarray:
    """Sampled-softmax probability of the target under ``p_target`` (max-shifted)."""
    s = pool_scores(np.asarray(p_target, dtype=np.float64), e_target, negatives)
    return np.exp(s[..., 0] - _logsumexp(s))


def reward_baseline(P, e_target, negatives, h=None) -> np.ndarray:
    """Mean of the target's sampled-softmax score over the first h representations.

    ``P`` is (..., k, d); ``h`` (...,) defaults to all k slots.
    """
    P = np.asarray(P, dtype=np.float64)
    e_target = np.asarray(e_target)[..., None, :]
    negatives = np.asarray(negatives)[..., None, :, :]
    per_slot = reward_chosen(P, e_target, negatives)             # (..., k)
    k = P.shape[-2]
    if h is None:
        return per_slot.mean(axis=-1)
    active = np.arange(k) < np.asarray(h)[..., None]
    return (per_slot * active).sum(axis=-1) / np.asarray(h)


def reward_orthogonal(P, h=None) -> np.ndarray:
    """Negative mean |p_i . p_j| over distinct active pairs; 0 when h = 1."""
    P = np.asarray(P, dtype=np.float64)
    k = P.shape[-2]
    h = np.full(P.shape[:-2], k) if h is None else np.asarray(h)
    gram = np.abs(np.einsum("...id,...jd->...ij", P, P))
    idx = np.arange(k)
    active = idx < h[..., None]
    pair = (idx[:, None] < idx[None, :]) & active[..., :, None] & active[..., None, :]
    n_pairs = h * (h - 1) / 2.0
    total = (gram * pair).sum(axis=(-1, -2))
    return np.where(n_pairs > 0, -total / np.maximum(n_pairs, 1.0), 0.0)


def total_reward(R_c, R_baseline, R_orthogonal, lambda_o: float) -> np.ndarray:
    if lambda_o < 0:
        raise ValueError("lambda_o must be non-negative")
    return (np.asarray(R_c) - np.asarray(R_baseline)) + lambda_o * np.asarray(R_orthogonal)


def candidate_logits(p: dc.Tensor, cand_emb: dc.Tensor) -> dc.Tensor:
    """(B, o + 1) scores of each window's candidates against its representation."""
    B, d = p.shape
    return dc.reshape(cand_emb @ dc.reshape(p, (B, d, 1)), (B, cand_emb.shape[1]))


def ce_loss(p_target: dc.Tensor, cand_emb: dc.Tensor) -> dc.Tensor:
    """-log of the sampled-softmax probability of candidate 0 (the target)."""
    logp = dc.log_softmax(candidate_logits(p_target, cand_emb), axis=-1)
    return -logp[:, 0]


def rl_loss(logp_total: dc.Tensor, R_s) -> dc.Tensor:
    """REINFORCE surrogate -R_s * log P(s); R_s enters as a constant."""
    R_s = np.asarray(R_s, dtype=np.float64)
    return dc.mul(logp_total, -R_s)


def joint_loss(L_CE: dc.Tensor, L_RL: dc.Tensor, beta: float) -> dc.Tensor:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return L_CE + L_RL * beta
