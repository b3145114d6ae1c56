"""Embedding layer and stacked bi-directional self-attention blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import PAD

MASK_VALUE = -1e9


@dataclass
class EncodedSequence:
    E: dc.Tensor          # (B, t, d) item + position embeddings
    S: dc.Tensor          # (B, t, d) last block attention output
    F: dc.Tensor          # (B, t, d) last block FFN output
    e_u: dc.Tensor        # (B, d)
    mask: np.ndarray      # (B, t) True at real (non-padding) positions
    attention: list[np.ndarray]


def key_mask_bias(mask: np.ndarray) -> np.ndarray:
    """Additive bias (B, 1, t): 0 for real keys, MASK_VALUE for padding."""
    return np.where(mask, 0.0, MASK_VALUE)[:, None, :]


def embed_sequence(params, windows: np.ndarray, users: np.ndarray):
    windows = np.asarray(windows, dtype=np.int64)
    users = np.asarray(users, dtype=np.int64)
    t = params["pos_emb"].shape[0]
    if windows.shape[-1] != t:
        raise dc.ShapeError(f"embed_sequence: window length {windows.shape[-1]} != t={t}")
    n_users = params["user_emb"].shape[0]
    if users.size and (users.min() < 1 or users.max() > n_users):
        raise IndexError(f"user id out of range [1, {n_users}]")
    E = dc.gather_rows(params["item_emb"], windows) + params["pos_emb"]
    e_u = dc.gather_rows(params["user_emb"], users - 1)
    return E, e_u


def self_attention(E: dc.Tensor, wq, wk, wv, key_bias: np.ndarray | None = None):
    """softmax(Q K^T / sqrt(d)) V with Q, K, V linear projections of E; no causal mask."""
    d = E.shape[-1]
    Q, K, V = E @ wq, E @ wk, E @ wv
    logits = (Q @ dc.transpose(K)) * (1.0 / math.sqrt(d))
    if key_bias is not None:
        logits = logits + key_bias
    A = dc.softmax(logits, axis=-1)
    return A @ V, A


def ffn(S: dc.Tensor, w1, b1, w2, b2) -> dc.Tensor:
    return dc.relu(S @ w1 + b1) @ w2 + b2


def encode(params, windows, users, num_blocks: int) -> EncodedSequence:
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    windows = np.asarray(windows, dtype=np.int64)
    mask = windows != PAD
    E, e_u = embed_sequence(params, windows, users)
    bias = key_mask_bias(mask)
    x, S, attn = E, None, []
    for b in range(num_blocks):
        S, A = self_attention(x, params[f"attn{b}_q"], params[f"attn{b}_k"], params[f"attn{b}_v"], bias)
        x = ffn(S, params[f"ffn{b}_w1"], params[f"ffn{b}_b1"], params[f"ffn{b}_w2"], params[f"ffn{b}_b2"])
        attn.append(A.data)
    return EncodedSequence(E=E, S=S, F=x, e_u=e_u, mask=mask, attention=attn)
