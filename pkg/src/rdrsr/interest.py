"""Interest-count head: pooled count logits plus Gumbel-max / Gumbel-softmax sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import MASK_VALUE

LOGIT_CLAMP = 30.0
U_CLAMP = 1e-12


@dataclass
class CountDistribution:
    log_f: dc.Tensor | None   # (B, k) log-probabilities over counts 1..k
    z: dc.Tensor              # (B, k) relaxed sample, differentiable through log_f
    h: np.ndarray             # (B,) sampled counts in [1, k]
    g: np.ndarray | None      # (B, k) Gumbel noise used
    temperature: float

    @property
    def f(self) -> np.ndarray | None:
        return None if self.log_f is None else np.exp(self.log_f.data)


def interest_logits(params, F: dc.Tensor, e_u: dc.Tensor, mask: np.ndarray):
    """Attention-pool F against the user embedding and map to k count logits.

    Returns ``(log_f, position_weights)``; ``log_f`` is the log-softmax of the
    clamped logits so that ``exp(log_f)`` is a proper distribution.
    """
    B, t, d = F.shape
    user_term = dc.reshape(e_u @ params["did_wu"], (B, 1, -1))
    scores = (F @ params["did_wf1"] + user_term) @ params["did_wf2"] + params["did_b"]
    scores = dc.reshape(scores, (B, t)) + np.where(mask, 0.0, MASK_VALUE)
    a = dc.softmax(scores, axis=-1)
    pooled = dc.reshape(dc.reshape(a, (B, 1, t)) @ F, (B, d))
    raw = dc.clip(pooled @ params["did_wk"], -LOGIT_CLAMP, LOGIT_CLAMP)
    return dc.log_softmax(raw, axis=-1), a


def gumbel_noise(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), U_CLAMP, 1.0 - U_CLAMP)
    return -np.log(-np.log(u))


def sample_count(log_f, g) -> np.ndarray:
    """argmax_i (g_i + log f_i), reported 1-based; ties go to the lowest index."""
    log_f = np.asarray(log_f.data if isinstance(log_f, dc.Tensor) else log_f, dtype=np.float64)
    return np.argmax(log_f + g, axis=-1) + 1


def relaxed_probs(log_f, g, temperature: float) -> dc.Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    log_f = dc.as_tensor(log_f)
    return dc.softmax((log_f + np.asarray(g, dtype=np.float64)) * (1.0 / temperature), axis=-1)


def draw_counts(log_f: dc.Tensor, temperature: float, g: np.ndarray) -> CountDistribution:
    """Sample h with the Gumbel-max trick and build its relaxation z from the same noise."""
    h = sample_count(log_f, g)
    z = relaxed_probs(log_f, g, temperature)
    return CountDistribution(log_f=log_f, z=z, h=h, g=g, temperature=temperature)


def fixed_counts(batch: int, k: int, h: int) -> CountDistribution:
    """Constant count with a one-hot z; no sampling and no gradient into the head."""
    z = np.zeros((batch, k))
    z[:, h - 1] = 1.0
    return CountDistribution(log_f=None, z=dc.Tensor(z), h=np.full(batch, h, dtype=np.int64),
                             g=None, temperature=float("nan"))
