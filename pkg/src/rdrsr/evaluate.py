"""Leave-one-out ranking evaluation with HR@K and NDCG@K."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import NegativeSampler, SplitDataset

KS = (10, 50)


def hr_at_k(rank: int, K: int) -> int:
    return int(rank <= K)


def ndcg_at_k(rank: int, K: int) -> float:
    """Single relevant item: 1 / log2(rank + 1) inside the cutoff."""
    return 1.0 / math.log2(rank + 1) if rank <= K else 0.0


def target_rank(scores: np.ndarray, cand_ids: np.ndarray, target_idx: int = 0,
                valid: np.ndarray | None = None) -> int:
    """1-based rank of ``cand_ids[target_idx]``; ties are broken by ascending item id."""
    s_t, id_t = scores[target_idx], cand_ids[target_idx]
    ahead = (scores > s_t) | ((scores == s_t) & (cand_ids < id_t))
    if valid is not None:
        ahead &= valid
    return int(ahead.sum()) + 1


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    ranks: dict[int, int]
    n_users: int
    skipped: int = 0
    split: str = "test"
    mode: str = "full"
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    seconds: float = 0.0

    @classmethod
    def from_ranks(cls, ranks: dict[int, int], **kw) -> "MetricsReport":
        n = len(ranks)
        vals = list(ranks.values())
        hr = {K: math.fsum(hr_at_k(r, K) for r in vals) / n if n else 0.0 for K in KS}
        ndcg = {K: math.fsum(ndcg_at_k(r, K) for r in vals) / n if n else 0.0 for K in KS}
        return cls(hr=hr, ndcg=ndcg, ranks=dict(ranks), n_users=n, **kw)

    def table(self) -> str:
        head = f"{self.split} ({self.mode}, {self.n_users} users)"
        rows = [head, f"{'metric':<8}" + "".join(f"{'@' + str(K):>10}" for K in KS)]
        rows.append(f"{'HR':<8}" + "".join(f"{self.hr[K]:>10.4f}" for K in KS))
        rows.append(f"{'NDCG':<8}" + "".join(f"{self.ndcg[K]:>10.4f}" for K in KS))
        return "\n".join(rows)

    def jsonl(self) -> str:
        lines = []
        for name, vals in (("HR", self.hr), ("NDCG", self.ndcg)):
            for K in KS:
                lines.append(json.dumps({"metric": name, "K": K, "value": vals[K], "split": self.split,
                                         "mode": self.mode, "config": self.config_hash}))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"split": self.split, "mode": self.mode, "n_users": self.n_users, "skipped": self.skipped,
                "hr": self.hr, "ndcg": self.ndcg, "seconds": self.seconds, "config_hash": self.config_hash}


def build_candidates(users, targets, sampler: NegativeSampler, mode: str, o: int, seed: int):
    """Per user: target first, then all non-interacted items (full) or ``o`` of them (sampled)."""
    out = []
    for u, tgt in zip(users, targets):
        if mode == "full":
            neg = sampler.eligible(int(u))
        elif mode == "sampled":
            neg = sampler.sample(int(u), o, np.random.default_rng([seed, int(u)]))
        else:
            raise ValueError(f"unknown eval mode {mode!r}")
        out.append(np.concatenate([[tgt], neg]).astype(np.int64))
    return out


def rank_users(model, windows, users, cand_lists, budget: int = 4_000_000) -> list[int]:
    """Score candidate lists in memory-bounded chunks and return each target's rank."""
    n = len(users)
    width = 2 * model.cfg.d + model.cfg.k
    ranks = []
    start = 0
    while start < n:
        longest = max(len(c) for c in cand_lists[start:start + 256])
        step = max(1, budget // (longest * width))
        stop = min(n, start + step)
        chunk = cand_lists[start:stop]
        N = max(len(c) for c in chunk)
        cands = np.stack([np.pad(c, (0, N - len(c)), constant_values=c[0]) for c in chunk])
        valid = np.arange(N)[None, :] < np.array([len(c) for c in chunk])[:, None]
        scores = model.score_candidates(windows[start:stop], users[start:stop], cands)
        for i in range(stop - start):
            ranks.append(target_rank(scores[i], cands[i], 0, valid[i]))
        start = stop
    return ranks


def evaluate(model, split: SplitDataset, which: str = "test", mode: str = "full", o: int = 99,
             seed: int = 0, sampler: NegativeSampler | None = None) -> MetricsReport:
    """Rank each user's held-out item among candidates it never interacted with."""
    t0 = time.perf_counter()
    if which == "test":
        windows, targets = split.test_windows, split.test_targets
    elif which == "val":
        windows, targets = split.val_windows, split.val_targets
    else:
        raise ValueError(f"which must be test or val, got {which!r}")
    users = split.users
    keep = (targets > 0) & ((windows > 0).sum(axis=1) > 0)
    skipped = int((~keep).sum())
    users, windows, targets = users[keep], windows[keep], targets[keep]
    sampler = sampler or NegativeSampler(split.histories, split.n_items)
    cand_lists = build_candidates(users, targets, sampler, mode, o, seed)
    ranks = rank_users(model, windows, users, cand_lists)
    cfg = model.cfg
    return MetricsReport.from_ranks(
        dict(zip(users.tolist(), ranks)), skipped=skipped, split=which, mode=mode,
        config=cfg.to_dict(), config_hash=cfg.digest(), seconds=time.perf_counter() - t0)
