"""Run configuration: a flat ``key = value`` file, overridable from the CLI."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

# desk-scale batch used when the dataset has fewer users than this
SMALL_DATASET_USERS = 5000
SMALL_DATASET_BATCH = 256


@dataclass
class RunConfig:
    dataset: str = ""
    fmt: str = "uirt"
    min_user: int = 10
    min_item: int = 10
    d: int = 64
    t: int = 10
    k: int = 4
    o: int = 99
    temperature: float = 10.0
    lambda_o: float = 0.001
    beta: float = 1.0
    num_blocks: int = 2
    policy_hidden: int = 0      # 0 -> d
    lr: float = 0.001
    batch_size: int = 2048
    small_batch: bool = True    # use SMALL_DATASET_BATCH on small datasets
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    fixed_h: int = 0            # >0: fixed interest count, DID sampler off
    eval_mode: str = "full"     # full | sampled
    eval_every: int = 1
    pooling: str = "mean"       # mean (running mean) | pairwise ((p + F) / 2)
    out: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.k < 1 or self.t < 1 or self.d < 1:
            raise ValueError("k, t and d must be >= 1")
        if self.fixed_h < 0 or self.fixed_h > self.k:
            raise ValueError(f"fixed_h must lie in [0, k={self.k}]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lambda_o < 0 or self.beta < 0:
            raise ValueError("lambda_o and beta must be non-negative")
        if self.eval_mode not in ("full", "sampled"):
            raise ValueError(f"eval_mode must be full or sampled, got {self.eval_mode!r}")
        if self.pooling not in ("mean", "pairwise"):
            raise ValueError(f"pooling must be mean or pairwise, got {self.pooling!r}")
        return self

    @property
    def hidden(self) -> int:
        return self.policy_hidden or self.d

    def effective_batch(self, n_users: int) -> int:
        if self.small_batch and n_users < SMALL_DATASET_USERS:
            return min(self.batch_size, SMALL_DATASET_BATCH)
        return self.batch_size

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps({k: v for k, v in self.to_dict().items() if k != "out"}, sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:12]

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _coerce(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config(text: str) -> dict:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(fields[key], raw)
    return values


def load_config(path=None, **overrides) -> RunConfig:
    values = parse_config(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()
