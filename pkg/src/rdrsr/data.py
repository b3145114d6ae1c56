"""Interaction logs: loading, filtering, leave-one-out splitting and negatives.

Item and user ids are re-indexed densely from 1; item id 0 is the padding
token and never a valid candidate.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
FORMATS = ("uirt", "uit")  # user item rating timestamp / user item timestamp

# per-dataset minimum interaction counts for users and items
DEFAULT_MIN_COUNTS = {"movielens": 10, "foursquare": 10, "lastfm": 5}


class DataError(ValueError):
    pass


@dataclass
class InteractionLog:
    n_users: int
    n_items: int
    sequences: dict[int, list[int]]
    user_ids: dict[int, str] = field(default_factory=dict)   # dense id -> raw id
    item_ids: dict[int, str] = field(default_factory=dict)

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences.values())

    def table_counts(self) -> tuple[int, int, int]:
        """(user rows, item rows, interactions), rows counting the padding slot."""
        return self.n_users + 1, self.n_items + 1, self.n_interactions


def _parse(path: Path, fmt: str):
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    ts_col = 3 if fmt == "uirt" else 2
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) <= ts_col:
                raise DataError(f"{path}:{lineno}: expected at least {ts_col + 1} fields, got {len(parts)}")
            try:
                ts = float(parts[ts_col])
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {parts[ts_col]!r} is not numeric") from None
            rows.append((parts[0], parts[1], ts, lineno))
    return rows


def load_interactions(path, fmt: str = "uirt", min_user: int = 10, min_item: int = 10,
                      min_length: int = 3) -> InteractionLog:
    """Read a whitespace-separated log and build per-user chronological sequences.

    Users and items with fewer than ``min_user`` / ``min_item`` interactions are
    removed repeatedly until both thresholds hold; users shorter than
    ``min_length`` are dropped afterwards. Timestamp ties keep file order.
    """
    path = Path(path)
    rows = _parse(path, fmt)
    while True:
        ucount, icount = defaultdict(int), defaultdict(int)
        for u, i, _, _ in rows:
            ucount[u] += 1
            icount[i] += 1
        kept = [r for r in rows if ucount[r[0]] >= min_user and icount[r[1]] >= min_item]
        if len(kept) == len(rows):
            break
        rows = kept
    per_user = defaultdict(list)
    for u, i, ts, lineno in rows:
        per_user[u].append((ts, lineno, i))
    per_user = {u: v for u, v in per_user.items() if len(v) >= min_length}
    if not per_user:
        raise DataError(f"{path}: no users left after filtering")
    return _reindex(per_user)


def _reindex(per_user: dict) -> InteractionLog:
    raw_users = sorted(per_user, key=_natural_key)
    raw_items = sorted({i for v in per_user.values() for _, _, i in v}, key=_natural_key)
    item_map = {raw: k for k, raw in enumerate(raw_items, 1)}
    sequences = {}
    for uid, raw in enumerate(raw_users, 1):
        events = sorted(per_user[raw], key=lambda e: (e[0], e[1]))
        sequences[uid] = [item_map[i] for _, _, i in events]
    return InteractionLog(
        n_users=len(raw_users), n_items=len(raw_items), sequences=sequences,
        user_ids={k: raw for k, raw in enumerate(raw_users, 1)},
        item_ids={k: raw for raw, k in item_map.items()},
    )


def _natural_key(raw: str):
    return (0, int(raw), raw) if raw.isdigit() else (1, 0, raw)


def from_sequences(sequences: dict[int, list[int]], n_items: int | None = None) -> InteractionLog:
    """Wrap already-indexed sequences (users 1..n, items 1..m)."""
    n_items = n_items or max(max(s) for s in sequences.values())
    return InteractionLog(n_users=max(sequences), n_items=n_items, sequences=dict(sequences))


def write_interactions(log_: InteractionLog, path) -> None:
    """Write ``user item timestamp`` lines (format ``uit``)."""
    with open(path, "w") as fh:
        for u, seq in sorted(log_.sequences.items()):
            for pos, item in enumerate(seq):
                fh.write(f"{u}\t{item}\t{pos}\n")


# ---------------------------------------------------------------------------
# windows and split
# ---------------------------------------------------------------------------
def pad_or_truncate(seq, t: int) -> np.ndarray:
    """Keep the most recent ``t`` items, left-padding with id 0."""
    if t < 1:
        raise ValueError("window length must be >= 1")
    seq = list(seq)[-t:]
    return np.array([PAD] * (t - len(seq)) + seq, dtype=np.int64)


@dataclass
class SplitDataset:
    t: int
    n_users: int
    n_items: int
    train_windows: np.ndarray   # (N, t)
    train_users: np.ndarray     # (N,)
    train_targets: np.ndarray   # (N,)
    users: np.ndarray           # users with a val/test pair
    val_windows: np.ndarray     # (U, t)
    val_targets: np.ndarray
    test_windows: np.ndarray
    test_targets: np.ndarray
    histories: dict[int, np.ndarray]  # all item ids each user interacted with
    excluded: int = 0

    def window_positions(self) -> np.ndarray:
        """Index of each training window's target within its user's sequence."""
        out = np.zeros(len(self.train_users), dtype=np.int64)
        prev, pos = None, 0
        for i, u in enumerate(self.train_users):
            pos = pos + 1 if u == prev else 0
            prev = u
            out[i] = pos
        return out


def leave_one_out_split(log_: InteractionLog, t: int) -> SplitDataset:
    """Last item -> test, second-to-last -> validation, the rest -> training.

    Training samples are sliding windows over the training prefix: each
    position j >= 1 yields (pad(prefix[:j]), prefix[j]). A user with exactly
    three interactions gets a single all-padding window targeting the first
    item, so every kept user is present in all three parts.
    """
    tw, tu, tt = [], [], []
    users, vw, vt, sw, st = [], [], [], [], []
    histories = {}
    excluded = 0
    for u in sorted(log_.sequences):
        seq = log_.sequences[u]
        if len(seq) < 3:
            excluded += 1
            continue
        train = seq[:-2]
        if len(train) == 1:
            tw.append(pad_or_truncate([], t))
            tu.append(u)
            tt.append(train[0])
        for j in range(1, len(train)):
            tw.append(pad_or_truncate(train[:j], t))
            tu.append(u)
            tt.append(train[j])
        users.append(u)
        vw.append(pad_or_truncate(seq[:-2], t))
        vt.append(seq[-2])
        sw.append(pad_or_truncate(seq[:-1], t))
        st.append(seq[-1])
        histories[u] = np.unique(np.asarray(seq, dtype=np.int64))
    if excluded:
        log.info("leave_one_out_split: excluded %d users with fewer than 3 interactions", excluded)
    as_windows = lambda rows: np.stack(rows) if rows else np.zeros((0, t), dtype=np.int64)  # noqa: E731
    return SplitDataset(
        t=t, n_users=log_.n_users, n_items=log_.n_items,
        train_windows=as_windows(tw), train_users=np.array(tu, dtype=np.int64),
        train_targets=np.array(tt, dtype=np.int64), users=np.array(users, dtype=np.int64),
        val_windows=as_windows(vw), val_targets=np.array(vt, dtype=np.int64),
        test_windows=as_windows(sw), test_targets=np.array(st, dtype=np.int64),
        histories=histories, excluded=excluded,
    )


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------
def sample_negatives(positives, n_items: int, o: int, rng, exclude=()) -> np.ndarray:
    """Draw ``o`` distinct items uniformly from those outside ``positives``.

    ``rng`` is a seed or a ``numpy.random.Generator``. Padding and ``exclude``
    are never returned.
    """
    if o < 1:
        raise ValueError("o must be >= 1")
    rng = np.random.default_rng(rng)
    banned = np.union1d(np.fromiter(positives, dtype=np.int64), np.fromiter(exclude, dtype=np.int64))
    eligible = np.setdiff1d(np.arange(1, n_items + 1), banned, assume_unique=False)
    if eligible.size < o:
        raise DataError(f"only {eligible.size} eligible negatives, {o} requested")
    return rng.choice(eligible, size=o, replace=False)


class NegativeSampler:
    """Per-user cache of eligible negatives (items outside the user's history)."""

    def __init__(self, histories: dict[int, np.ndarray], n_items: int):
        self.n_items = n_items
        universe = np.arange(1, n_items + 1)
        self._eligible = {u: np.setdiff1d(universe, h) for u, h in histories.items()}

    def eligible(self, user: int) -> np.ndarray:
        return self._eligible[user]

    def sample(self, user: int, o: int, rng: np.random.Generator) -> np.ndarray:
        pool = self._eligible[user]
        if pool.size < o:
            raise DataError(f"user {user}: only {pool.size} eligible negatives, {o} requested")
        return rng.choice(pool, size=o, replace=False)

    def sample_batch(self, users, o: int, rng: np.random.Generator) -> np.ndarray:
        return np.stack([self.sample(int(u), o, rng) for u in users])


# ---------------------------------------------------------------------------
# synthetic logs with planted interests
# ---------------------------------------------------------------------------
@dataclass
class SyntheticSpec:
    n_users: int = 200
    n_interests: int = 3
    items_per_interest: int = 30
    seq_len: int = 20
    noise_rate: float = 0.0
    seed: int = 0
    # candidate active-interest counts, one drawn per user
    active_counts: tuple[int, ...] = (3,)
    # optional (fraction, count) breakpoints shared by every user, e.g. ((0, 1), (0.5, 2))
    schedule: tuple[tuple[float, int], ...] | None = None
    # explicit disjoint item pools; default is consecutive blocks
    pools: tuple[tuple[int, ...], ...] | None = None


@dataclass
class SyntheticLog:
    log: InteractionLog
    labels: dict[int, np.ndarray]         # per-click interest label (0-based pool index)
    active_counts: dict[int, np.ndarray]  # per-position scheduled number of active interests
    pools: list[np.ndarray]

    def final_window_counts(self, t: int, offset: int = 0) -> dict[int, int]:
        """Distinct planted interests among the ``t`` clicks ending ``offset`` before the last."""
        out = {}
        for u, lab in self.labels.items():
            end = len(lab) - offset
            out[u] = int(np.unique(lab[max(0, end - t):end]).size)
        return out


def _pools(spec: SyntheticSpec) -> list[np.ndarray]:
    if spec.pools is not None:
        pools = [np.asarray(p, dtype=np.int64) for p in spec.pools]
        flat = np.concatenate(pools)
        if np.unique(flat).size != flat.size:
            raise DataError("synthetic interest pools overlap")
        if flat.min() < 1:
            raise DataError("item ids must be >= 1")
        return pools
    ipi = spec.items_per_interest
    return [np.arange(k * ipi + 1, (k + 1) * ipi + 1) for k in range(spec.n_interests)]


def synth_generate(spec: SyntheticSpec) -> SyntheticLog:
    """Generate click sequences whose items come from scheduled active interests."""
    pools = _pools(spec)
    n_pools = len(pools)
    counts_needed = [c for _, c in spec.schedule] if spec.schedule else list(spec.active_counts)
    if max(counts_needed) > n_pools or min(counts_needed) < 1:
        raise DataError(f"active counts {counts_needed} incompatible with {n_pools} pools")
    rng = np.random.default_rng(spec.seed)
    n_items = int(max(p.max() for p in pools))
    sequences, labels, actives = {}, {}, {}
    for u in range(1, spec.n_users + 1):
        order = rng.permutation(n_pools)
        if spec.schedule:
            per_pos = np.zeros(spec.seq_len, dtype=np.int64)
            for frac, c in sorted(spec.schedule):
                per_pos[int(round(frac * spec.seq_len)):] = c
        else:
            per_pos = np.full(spec.seq_len, rng.choice(spec.active_counts), dtype=np.int64)
        used = [set() for _ in range(n_pools)]
        seq, lab = [], []
        for pos in range(spec.seq_len):
            active = order[: per_pos[pos]]
            if spec.noise_rate > 0 and rng.random() < spec.noise_rate and per_pos[pos] < n_pools:
                pool_idx = int(rng.choice(order[per_pos[pos]:]))
            else:
                pool_idx = int(rng.choice(active))
            pool = pools[pool_idx]
            fresh = [i for i in pool if i not in used[pool_idx]]
            item = int(rng.choice(fresh)) if fresh else int(rng.choice(pool))
            used[pool_idx].add(item)
            seq.append(item)
            lab.append(pool_idx)
        sequences[u] = seq
        labels[u] = np.array(lab, dtype=np.int64)
        actives[u] = per_pos
    log_ = InteractionLog(n_users=spec.n_users, n_items=n_items, sequences=sequences)
    return SyntheticLog(log=log_, labels=labels, active_counts=actives, pools=pools)


def write_synthetic(synth: SyntheticLog, path, label_path) -> None:
    """Interaction file (``uit``) plus sidecar ``user position interest_label active_count``."""
    write_interactions(synth.log, path)
    with open(label_path, "w") as fh:
        for u in sorted(synth.labels):
            for pos, (lab, cnt) in enumerate(zip(synth.labels[u], synth.active_counts[u])):
                fh.write(f"{u}\t{pos}\t{lab}\t{cnt}\n")
