"""Training loop, checkpoints and the experiment suite."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .data import NegativeSampler, SplitDataset, leave_one_out_split, load_interactions
from .evaluate import MetricsReport, evaluate
from .model import RDRSR, Batch, Noise

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochStats:
    epoch: int
    loss: float
    ce: float
    rl: float
    reward: float
    mean_h: float
    windows: int
    dropped: int
    seconds: float
    val_ndcg10: float | None = None

    def line(self) -> str:
        return json.dumps({k: v for k, v in self.__dict__.items()})


def trainable_windows(split: SplitDataset) -> np.ndarray:
    """Indices of training windows that contain at least one real item."""
    return np.flatnonzero((split.train_windows > 0).any(axis=1))


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """User-contiguous chunks (windows are stored grouped by user) in shuffled order."""
    chunks = [np.arange(s, min(n, s + batch_size)) for s in range(0, n, batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def train_epoch(model: RDRSR, split: SplitDataset, opt: dc.Adam, epoch: int,
                sampler: NegativeSampler, batch_size: int | None = None,
                index: np.ndarray | None = None) -> EpochStats:
    cfg = model.cfg
    t0 = time.perf_counter()
    index = trainable_windows(split) if index is None else index
    dropped = len(split.train_targets) - len(index)
    batch_size = batch_size or cfg.effective_batch(split.n_users)
    order_rng = np.random.default_rng([cfg.seed, epoch])
    sums = dict(loss=[], ce=[], rl=[], reward=[], h=[])
    for b_idx, rows in enumerate(make_batches(len(index), batch_size, order_rng)):
        sel = index[rows]
        rng = np.random.default_rng([cfg.seed, epoch, b_idx])
        users = split.train_users[sel]
        batch = Batch(split.train_windows[sel], users, split.train_targets[sel],
                      sampler.sample_batch(users, cfg.o, rng))
        noise = Noise.draw(rng, len(sel), cfg.k, cfg.t)
        out = model.forward(batch, noise)
        loss = out.loss
        if not math.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch windows {sel[:5].tolist()}...")
        model.zero_grad()
        loss.backward()
        model.freeze_padding()
        opt.step()
        n = len(sel)
        sums["loss"].append(loss.item() * n)
        sums["ce"].append(float(out.losses.L_CE.data.sum()))
        sums["rl"].append(float(out.losses.L_RL.data.sum()))
        sums["reward"].append(float(out.rewards.R_s.sum()))
        sums["h"].append(float(out.counts.h.sum()))
    n = max(len(index), 1)
    return EpochStats(epoch=epoch, loss=math.fsum(sums["loss"]) / n, ce=math.fsum(sums["ce"]) / n,
                      rl=math.fsum(sums["rl"]) / n, reward=math.fsum(sums["reward"]) / n,
                      mean_h=math.fsum(sums["h"]) / n, windows=len(index), dropped=dropped,
                      seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def _encode_text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode(), dtype=np.uint8).copy()


def _decode_text(a: np.ndarray) -> str:
    return bytes(np.asarray(a, dtype=np.uint8)).decode()


def save_checkpoint(path, model: RDRSR, opt: dc.Adam | None = None, epoch: int = 0,
                    history: list[float] | None = None) -> None:
    arrays = dict(model.state_arrays())
    if opt is not None:
        arrays.update(opt.state_arrays())
    arrays["meta/epoch"] = np.array(epoch, dtype=np.int64)
    arrays["meta/shape"] = np.array([model.n_users, model.n_items], dtype=np.int64)
    arrays["meta/config"] = _encode_text(json.dumps(model.cfg.to_dict(), sort_keys=True))
    arrays["meta/config_hash"] = _encode_text(model.cfg.digest())
    arrays["meta/val_history"] = np.asarray(history or [], dtype=np.float64)
    dc.save_arrays(path, arrays)


@dataclass
class Checkpoint:
    model: RDRSR
    opt: dc.Adam
    epoch: int
    history: list[float]


def load_checkpoint(path) -> Checkpoint:
    arrays = dc.load_arrays(path)
    cfg = RunConfig(**json.loads(_decode_text(arrays["meta/config"])))
    n_users, n_items = (int(x) for x in arrays["meta/shape"])
    model = RDRSR(cfg, n_users, n_items)
    model.load_state_arrays(arrays)
    opt = dc.Adam(model.params, lr=cfg.lr)
    if "adam/t" in arrays:
        opt.load_state_arrays(arrays)
    return Checkpoint(model, opt, int(arrays["meta/epoch"]), arrays["meta/val_history"].tolist())


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------
@dataclass
class ExperimentResult:
    config: RunConfig
    test: MetricsReport
    best_val: MetricsReport | None
    best_epoch: int
    history: list[EpochStats] = field(default_factory=list)
    model: RDRSR | None = None
    split: SplitDataset | None = None

    def summary(self) -> dict:
        return {"config_hash": self.config.digest(), "best_epoch": self.best_epoch,
                "test": self.test.summary(),
                "val": None if self.best_val is None else self.best_val.summary()}


def load_split(cfg: RunConfig) -> SplitDataset:
    log_ = load_interactions(cfg.dataset, cfg.fmt, cfg.min_user, cfg.min_item)
    return leave_one_out_split(log_, cfg.t)


def run_experiment(cfg: RunConfig, split: SplitDataset | None = None, out_dir=None,
                   stop_when=None) -> ExperimentResult:
    """Train with per-epoch validation and early stopping, then test the best epoch.

    ``stop_when(stats, val_report)`` may end training early (e.g. a time budget).
    """
    cfg.validate()
    split = split if split is not None else load_split(cfg)
    model = RDRSR(cfg, split.n_users, split.n_items)
    opt = dc.Adam(model.params, lr=cfg.lr)
    sampler = NegativeSampler(split.histories, split.n_items)
    index = trainable_windows(split)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(cfg.dumps())
        train_log = open(out / "train_log.jsonl", "w")
    best, best_state, best_epoch, stale = -1.0, None, 0, 0
    history, val_hist = [], []
    best_val = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            stats = train_epoch(model, split, opt, epoch, sampler, index=index)
            val = None
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                val = evaluate(model, split, "val", cfg.eval_mode, cfg.o, cfg.seed, sampler)
                stats.val_ndcg10 = val.ndcg[10]
                val_hist.append(val.ndcg[10])
                if val.ndcg[10] > best:
                    best, best_epoch, stale, best_val = val.ndcg[10], epoch, 0, val
                    best_state = {k: v.copy() for k, v in model.state_arrays().items()}
                else:
                    stale += 1
            history.append(stats)
            log.info("epoch %s", stats.line())
            if out:
                train_log.write(stats.line() + "\n")
                train_log.flush()
            if stale > cfg.patience:
                break
            if stop_when is not None and stop_when(stats, val):
                break
    finally:
        if out:
            train_log.close()
    if best_state is not None:
        model.load_state_arrays(best_state)
    test = evaluate(model, split, "test", cfg.eval_mode, cfg.o, cfg.seed, sampler)
    result = ExperimentResult(cfg, test, best_val, best_epoch, history, model, split)
    if out:
        save_checkpoint(out / "checkpoint.npz", model, opt, best_epoch, val_hist)
        write_report(out, result)
    return result


def write_report(out: Path, result: ExperimentResult) -> None:
    out = Path(out)
    (out / "metrics.txt").write_text(result.test.table() + "\n")
    (out / "metrics.jsonl").write_text(result.test.jsonl())
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True))


def sweep_k(cfg: RunConfig, ks=range(1, 8), split: SplitDataset | None = None, out_dir=None):
    """One run per max interest count k, same seed and data."""
    split = split if split is not None else load_split(cfg)
    results = {}
    for k in ks:
        sub = Path(out_dir) / f"k{k}" if out_dir else None
        results[k] = run_experiment(cfg.replace(k=k, fixed_h=0), split, sub)
    if out_dir:
        Path(out_dir, "sweep.txt").write_text(sweep_table(results))
    return results


def sweep_table(results: dict) -> str:
    lines = [f"{'k':>3} {'HR@10':>8} {'NDCG@10':>8} {'HR@50':>8} {'NDCG@50':>8}"]
    for k, r in sorted(results.items()):
        t = r.test
        lines.append(f"{k:>3} {t.hr[10]:>8.4f} {t.ndcg[10]:>8.4f} {t.hr[50]:>8.4f} {t.ndcg[50]:>8.4f}")
    return "\n".join(lines) + "\n"


def ablate_fixed(cfg: RunConfig, h: int, split: SplitDataset | None = None, out_dir=None):
    """Dynamic model with max count h against the fixed-count variant (count sampler off)."""
    split = split if split is not None else load_split(cfg)
    dyn = run_experiment(cfg.replace(k=h, fixed_h=0), split, Path(out_dir) / "dynamic" if out_dir else None)
    fixed = run_experiment(cfg.replace(k=h, fixed_h=h), split, Path(out_dir) / "fixed" if out_dir else None)
    return dyn, fixed
