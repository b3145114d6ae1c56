"""Interest allocator: an episodic MDP that routes each window item to one of h sub-sequences.

All functions are batched over windows. Sub-sequence slots are 0-based in
arrays; a row with count h uses slots ``0..h-1`` and masks the rest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import MASK_VALUE


@dataclass
class Episode:
    actions: np.ndarray        # (B, t) slot per position, -1 at padding
    step_logp: np.ndarray      # (B, t) log pi of each taken action, 0 at padding
    states: np.ndarray         # (B, t, d) state fed to the policy, 0 at padding
    logp_alloc: dc.Tensor      # (B,) sum of allocation log-probabilities
    P: dc.Tensor               # (B, k, d) final interest representations
    counts: np.ndarray         # (B, k) pooled-vector counts (1 for the user embedding)
    h: np.ndarray
    z: dc.Tensor
    target_action: np.ndarray | None = None
    target_logp: dc.Tensor | None = None

    @property
    def logp_total(self) -> dc.Tensor:
        if self.target_logp is None:
            return self.logp_alloc
        return self.logp_alloc + self.target_logp

    def to_jsonl(self, window_ids=None) -> str:
        """One JSON object per window: id, h, per-step 1-based action and log-prob."""
        lines = []
        ids = range(len(self.h)) if window_ids is None else window_ids
        for b, wid in enumerate(ids):
            real = self.actions[b] >= 0
            rec = {
                "window": int(wid), "h": int(self.h[b]),
                "actions": (self.actions[b][real] + 1).tolist(),
                "logp": self.step_logp[b][real].tolist(),
            }
            if self.target_action is not None:
                rec["target_action"] = int(self.target_action[b]) + 1
                rec["target_logp"] = float(self.target_logp.data[b])
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"


def slot_mask(h: np.ndarray, k: int) -> np.ndarray:
    """(B, k) True for active slots j < h."""
    h = np.asarray(h)
    if np.any(h < 1):
        raise ValueError("interest count h must be >= 1")
    if np.any(h > k):
        raise ValueError(f"interest count h exceeds k={k}")
    return np.arange(k)[None, :] < h[:, None]


def policy(params, s: dc.Tensor, h) -> dc.Tensor:
    """Action distribution over the first h slots: softmax(ReLU(s W1 + b1) W2 + b2)."""
    k = params["pol_w2"].shape[-1]
    h = np.asarray(h)
    h = np.broadcast_to(h.reshape(h.shape + (1,) * (s.ndim - 1 - h.ndim)), s.shape[:-1])
    active = slot_mask(h.reshape(-1), k).reshape(s.shape[:-1] + (k,))
    logits = dc.relu(s @ params["pol_w1"] + params["pol_b1"]) @ params["pol_w2"] + params["pol_b2"]
    return dc.softmax(logits + np.where(active, 0.0, MASK_VALUE), axis=-1)


def next_state(params, P: dc.Tensor, x: dc.Tensor, z: dc.Tensor, h) -> dc.Tensor:
    """s = concat(sum_j alpha_j p_j, x, z) W0 with alpha = softmax_j(p_j . x) over active slots.

    ``P`` is (B, k, d); ``x`` is (B, d) or (B, N, d) for N candidates per window.
    """
    B, k, d = P.shape
    single = x.ndim == 2
    xs = dc.reshape(x, (B, 1, d)) if single else x
    active = slot_mask(np.asarray(h).reshape(-1), k)[:, None, :]
    sim = xs @ dc.transpose(P)                                   # (B, N, k)
    alpha = dc.softmax(sim + np.where(active, 0.0, MASK_VALUE), axis=-1)
    attended = alpha @ P                                          # (B, N, d)
    zs = dc.reshape(z, (B, 1, k))
    if not single:
        zs = zs + np.zeros((B, xs.shape[1], k))
    s = dc.concat([attended, xs, zs], axis=-1) @ params["state_w0"]
    return dc.reshape(s, (B, d)) if single else s


def update_interest(P: dc.Tensor, counts: np.ndarray, x: dc.Tensor, assign: np.ndarray,
                    pooling: str = "mean"):
    """Average-pool ``x`` into the assigned slot of each row.

    ``assign`` is a (B, k) 0/1 matrix with at most one 1 per row. With
    ``pooling="mean"`` the slot becomes the running mean of everything pooled
    into it so far; ``"pairwise"`` uses (p + x) / 2.
    """
    B, k, d = P.shape
    if pooling == "mean":
        coef = assign / (counts + 1.0)
    elif pooling == "pairwise":
        coef = assign * 0.5
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    delta = dc.reshape(x, (B, 1, d)) - P
    return P + dc.mul(delta, coef[:, :, None]), counts + assign


def _choose(probs: np.ndarray, h: np.ndarray, mode: str, u: np.ndarray | None) -> np.ndarray:
    if mode == "greedy":
        return np.argmax(probs, axis=-1)
    if mode != "sample":
        raise ValueError(f"mode must be sample or greedy, got {mode!r}")
    # invert against the row's own total so rounding in the cdf can never
    # push the draw onto a slot whose probability underflowed to 0
    cdf = np.cumsum(probs, axis=-1)
    a = (cdf <= u[:, None] * cdf[:, -1:]).sum(axis=-1)
    return np.minimum(a, h - 1)


def _log_prob_of(probs: dc.Tensor, actions: np.ndarray, live: np.ndarray) -> dc.Tensor:
    k = probs.shape[-1]
    onehot = np.zeros((len(actions), k))
    onehot[np.arange(len(actions)), np.where(live, actions, 0)] = 1.0
    live = live.astype(np.float64)
    # rows at padding take log(p + 1) so an underflowed p there cannot raise
    picked = dc.sum(dc.mul(probs, onehot), axis=-1) + (1.0 - live)
    return dc.mul(dc.log(picked), live)


def rollout(params, F: dc.Tensor, e_u: dc.Tensor, mask: np.ndarray, h, z: dc.Tensor,
            mode: str = "sample", u: np.ndarray | None = None, forced: np.ndarray | None = None,
            pooling: str = "mean") -> Episode:
    """Allocate every real window item to a slot, left to right.

    ``u`` (B, t) holds uniforms for sampled actions; ``forced`` (B, t) replays
    a previous action trace (entries at padding are ignored).
    """
    B, t, d = F.shape
    k = params["pol_w2"].shape[-1]
    h = np.asarray(h, dtype=np.int64)
    if np.any(mask.sum(axis=1) == 0):
        raise ValueError("rollout: window without real items")
    if mode == "sample" and forced is None and u is None:
        raise ValueError("sample mode needs uniforms u or forced actions")
    P = dc.reshape(e_u, (B, 1, d)) + np.zeros((B, k, d))
    counts = np.ones((B, k))
    actions = np.full((B, t), -1, dtype=np.int64)
    step_logp = np.zeros((B, t))
    states = np.zeros((B, t, d))
    logp = dc.Tensor(np.zeros(B))
    rows = np.arange(B)
    for T in range(t):
        live = mask[:, T]
        if not live.any():
            continue
        x = F[:, T, :]
        s = next_state(params, P, x, z, h)
        probs = policy(params, s, h)
        if forced is not None:
            a = np.where(live, forced[:, T], 0)
        else:
            a = _choose(probs.data, h, mode, None if u is None else u[:, T])
        lp = _log_prob_of(probs, a, live)
        logp = logp + lp
        assign = np.zeros((B, k))
        assign[rows[live], a[live]] = 1.0
        P, counts = update_interest(P, counts, x, assign, pooling)
        actions[live, T] = a[live]
        step_logp[:, T] = lp.data
        states[live, T] = s.data[live]
    return Episode(actions=actions, step_logp=step_logp, states=states, logp_alloc=logp,
                   P=P, counts=counts, h=h, z=z)


def select_target_interest(params, P: dc.Tensor, e_candidate: dc.Tensor, z: dc.Tensor, h,
                           mode: str = "sample", u: np.ndarray | None = None,
                           forced: np.ndarray | None = None):
    """Pick the slot a candidate item belongs to; P is left unchanged.

    Returns ``(slots, log_prob)`` with ``log_prob`` a (B,) Tensor.
    """
    h = np.asarray(h, dtype=np.int64)
    s = next_state(params, P, e_candidate, z, h)
    probs = policy(params, s, h)
    if forced is not None:
        a = np.asarray(forced, dtype=np.int64)
    else:
        a = _choose(probs.data, h, mode, u)
    return a, _log_prob_of(probs, a, np.ones(len(a), dtype=bool))


def gather_slot(P: dc.Tensor, slots: np.ndarray) -> dc.Tensor:
    """(B, d) representation of the chosen slot per row."""
    B, k, _ = P.shape
    onehot = np.zeros((B, k, 1))
    onehot[np.arange(B), slots, 0] = 1.0
    return dc.sum(dc.mul(P, onehot), axis=1)
