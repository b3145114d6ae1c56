"""Full model: parameters, per-window training forward pass and candidate scoring."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .allocator import Episode, gather_slot, next_state, policy, rollout, select_target_interest
from .config import RunConfig
from .encoder import EncodedSequence, encode
from .interest import CountDistribution, draw_counts, fixed_counts, gumbel_noise, interest_logits
from .objective import LossBundle, RewardBundle, ce_loss, joint_loss, reward_baseline, \
    reward_chosen, reward_orthogonal, rl_loss


def param_shapes(cfg: RunConfig, n_users: int, n_items: int) -> dict[str, tuple[int, ...]]:
    d, k, t, di = cfg.d, cfg.k, cfg.t, cfg.hidden
    shapes = {
        "item_emb": (n_items + 1, d),
        "user_emb": (n_users, d),
        "pos_emb": (t, d),
    }
    for b in range(cfg.num_blocks):
        shapes.update({
            f"attn{b}_q": (d, d), f"attn{b}_k": (d, d), f"attn{b}_v": (d, d),
            f"ffn{b}_w1": (d, d), f"ffn{b}_b1": (d,), f"ffn{b}_w2": (d, d), f"ffn{b}_b2": (d,),
        })
    shapes.update({
        "did_wf1": (d, d), "did_wu": (d, d), "did_wf2": (d, 1), "did_b": (1,), "did_wk": (d, k),
        "pol_w1": (d, di), "pol_b1": (di,), "pol_w2": (di, k), "pol_b2": (k,),
        "state_w0": (2 * d + k, d),
    })
    return shapes


def init_params(cfg: RunConfig, n_users: int, n_items: int, seed: int | None = None) -> dict[str, dc.Tensor]:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) weights, zero biases, zero padding row."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    bound = 1.0 / math.sqrt(cfg.d)
    params = {}
    for name, shape in param_shapes(cfg, n_users, n_items).items():
        is_bias = len(shape) == 1
        data = np.zeros(shape) if is_bias else rng.uniform(-bound, bound, size=shape)
        if name == "item_emb":
            data[0] = 0.0
        params[name] = dc.parameter(data, name=name)
    return params


@dataclass
class Batch:
    windows: np.ndarray     # (B, t)
    users: np.ndarray       # (B,)
    targets: np.ndarray     # (B,)
    negatives: np.ndarray   # (B, o)

    def __len__(self):
        return len(self.targets)


@dataclass
class Noise:
    """Randomness for one batch; replaying the same Noise gives an identical pass."""
    gumbel: np.ndarray | None           # (B, k) Gumbel(0, 1) draws
    action_u: np.ndarray | None         # (B, t + 1) uniforms for action sampling
    forced_actions: np.ndarray | None = None   # (B, t + 1) replay of earlier actions
    forced_h: np.ndarray | None = None
    forced_reward: np.ndarray | None = None   # (B,) detached R_s to reuse

    @classmethod
    def draw(cls, rng: np.random.Generator, batch: int, k: int, t: int) -> "Noise":
        return cls(gumbel=gumbel_noise(rng.random((batch, k))), action_u=rng.random((batch, t + 1)))

    def frozen(self, out: "WindowOutput") -> "Noise":
        """Same noise with the discrete choices and the detached reward of ``out`` pinned."""
        forced = np.concatenate([out.episode.actions, out.episode.target_action[:, None]], axis=1)
        return Noise(self.gumbel, self.action_u, forced_actions=forced, forced_h=out.counts.h.copy(),
                     forced_reward=out.rewards.R_s.copy())


@dataclass
class WindowOutput:
    encoded: EncodedSequence
    counts: CountDistribution
    episode: Episode
    p_target: dc.Tensor
    rewards: RewardBundle
    losses: LossBundle

    @property
    def loss(self) -> dc.Tensor:
        return dc.mean(self.losses.L)


class RDRSR:
    def __init__(self, cfg: RunConfig, n_users: int, n_items: int, params=None):
        self.cfg = cfg.validate()
        self.n_users, self.n_items = n_users, n_items
        self.params = params if params is not None else init_params(cfg, n_users, n_items)

    # -- pieces ------------------------------------------------------------
    def encode(self, windows, users) -> EncodedSequence:
        return encode(self.params, windows, users, self.cfg.num_blocks)

    def count_distribution(self, enc: EncodedSequence, gumbel: np.ndarray | None,
                           forced_h: np.ndarray | None = None) -> CountDistribution:
        B = enc.F.shape[0]
        if self.cfg.fixed_h:
            return fixed_counts(B, self.cfg.k, self.cfg.fixed_h)
        log_f, _ = interest_logits(self.params, enc.F, enc.e_u, enc.mask)
        g = np.zeros((B, self.cfg.k)) if gumbel is None else gumbel
        dist = draw_counts(log_f, self.cfg.temperature, g)
        if forced_h is not None:
            dist.h = np.asarray(forced_h, dtype=np.int64)
        return dist

    # -- training pass -----------------------------------------------------
    def forward(self, batch: Batch, noise: Noise | None = None, mode: str = "sample") -> WindowOutput:
        """Encode, count, allocate, pick the target's interest and score it.

        ``mode="greedy"`` (or ``noise=None``) uses zero Gumbel noise and argmax
        actions; otherwise actions are sampled from ``noise.action_u``.
        """
        cfg, prm = self.cfg, self.params
        if noise is None:
            mode = "greedy"
            noise = Noise(None, None)
        enc = self.encode(batch.windows, batch.users)
        counts = self.count_distribution(enc, noise.gumbel if mode == "sample" else None, noise.forced_h)
        forced = noise.forced_actions
        u = noise.action_u
        ep = rollout(prm, enc.F, enc.e_u, enc.mask, counts.h, counts.z, mode=mode,
                     u=None if u is None else u[:, :-1],
                     forced=None if forced is None else forced[:, :-1], pooling=cfg.pooling)
        e_target = dc.gather_rows(prm["item_emb"], batch.targets)
        slot, logp_target = select_target_interest(
            prm, ep.P, e_target, counts.z, counts.h, mode=mode,
            u=None if u is None else u[:, -1], forced=None if forced is None else forced[:, -1])
        ep.target_action, ep.target_logp = slot, logp_target
        p_target = gather_slot(ep.P, slot)

        cand_ids = np.concatenate([batch.targets[:, None], batch.negatives], axis=1)
        cand_emb = dc.gather_rows(prm["item_emb"], cand_ids)
        e_t, e_neg = cand_emb.data[:, 0], cand_emb.data[:, 1:]
        rewards = RewardBundle(
            R_c=reward_chosen(p_target.data, e_t, e_neg),
            R_baseline=reward_baseline(ep.P.data, e_t, e_neg, counts.h),
            R_orthogonal=reward_orthogonal(ep.P.data, counts.h),
            lambda_o=cfg.lambda_o,
        )
        L_CE = ce_loss(p_target, cand_emb)
        R_s = rewards.R_s if noise.forced_reward is None else noise.forced_reward
        L_RL = rl_loss(ep.logp_total, R_s)
        losses = LossBundle(L_CE=L_CE, L_RL=L_RL, L=joint_loss(L_CE, L_RL, cfg.beta), beta=cfg.beta)
        return WindowOutput(enc, counts, ep, p_target, rewards, losses)

    # -- inference -----------------------------------------------------------
    def interests(self, windows, users):
        """Greedy allocation with zero noise: (P, h, z, episode) per window."""
        with dc.no_grad():
            enc = self.encode(windows, users)
            counts = self.count_distribution(enc, None)
            ep = rollout(self.params, enc.F, enc.e_u, enc.mask, counts.h, counts.z,
                         mode="greedy", pooling=self.cfg.pooling)
        return ep

    def score_candidates(self, windows, users, candidates, episode: Episode | None = None) -> np.ndarray:
        """Score (B, N) candidate ids: each goes to its argmax slot, score = p_slot . e_item."""
        candidates = np.asarray(candidates, dtype=np.int64)
        if np.any(candidates == 0):
            raise ValueError("padding id cannot be a candidate")
        ep = episode if episode is not None else self.interests(windows, users)
        prm = self.params
        with dc.no_grad():
            e_c = dc.gather_rows(prm["item_emb"], candidates)            # (B, N, d)
            s = next_state(prm, ep.P, e_c, ep.z, ep.h)
            probs = policy(prm, s, ep.h).data                            # (B, N, k)
            slot = np.argmax(probs, axis=-1)
            chosen = np.take_along_axis(ep.P.data, slot[..., None], axis=1)  # (B, N, d)
            return np.einsum("bnd,bnd->bn", chosen, e_c.data)

    def count_predictions(self, windows, users) -> np.ndarray:
        """Deterministic interest count: argmax of the count distribution."""
        with dc.no_grad():
            enc = self.encode(windows, users)
            return self.count_distribution(enc, None).h

    # -- state -----------------------------------------------------------------
    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def freeze_padding(self) -> None:
        self.params["item_emb"].grad[0] = 0.0
        self.params["item_emb"].data[0] = 0.0

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"param/{k}": p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays) -> None:
        for k, p in self.params.items():
            src = np.asarray(arrays[f"param/{k}"], dtype=np.float64)
            if src.shape != p.shape:
                raise dc.ShapeError(f"checkpoint shape {src.shape} for {k}, expected {p.shape}")
            p.data = src.copy()
            p.zero_grad()
