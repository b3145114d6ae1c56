"""Command line entry point: ``rdrsr <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import RunConfig, load_config
from .data import DataError, synth_generate, write_synthetic
from .evaluate import evaluate
from .experiments import run_synthetic, synthetic_config, synthetic_spec
from .model import RDRSR, Batch, Noise
from .train import ablate_fixed, load_checkpoint, load_split, run_experiment, sweep_k, sweep_table

GRAD_CHECK_TOL = 1e-4
GRAD_CHECK_EPS = 5e-4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--dataset", help="interaction log path")
    p.add_argument("--format", dest="fmt", choices=("uirt", "uit"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--fixed-h", dest="fixed_h", type=int)
    p.add_argument("--eval-mode", dest="eval_mode", choices=("full", "sampled"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in ("dataset", "fmt", "seed", "epochs", "k", "fixed_h",
                                                     "eval_mode", "out")}
    cfg_text = "\n".join(args.set)
    if cfg_text:
        from .config import parse_config
        overrides.update(parse_config(cfg_text))
    return load_config(args.config, **overrides)


def _need_dataset(cfg: RunConfig) -> None:
    if not cfg.dataset:
        raise DataError("no dataset given (--dataset or 'dataset =' in the config)")
    if not Path(cfg.dataset).exists():
        raise FileNotFoundError(f"dataset not found: {cfg.dataset}")


def cmd_train(args) -> int:
    cfg = _config(args)
    _need_dataset(cfg)
    res = run_experiment(cfg, out_dir=cfg.out)
    print(res.test.table())
    print(f"checkpoint: {Path(cfg.out) / 'checkpoint.npz'}")
    return 0


def cmd_evaluate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.model.cfg
    if args.dataset:
        cfg = cfg.replace(dataset=args.dataset)
    _need_dataset(cfg)
    split = load_split(cfg)
    mode = args.eval_mode or cfg.eval_mode
    rep = evaluate(ck.model, split, args.split, mode, cfg.o, cfg.seed if args.seed is None else args.seed)
    print(rep.table())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        Path(args.out, "metrics.jsonl").write_text(rep.jsonl())
        Path(args.out, "metrics.txt").write_text(rep.table() + "\n")
    return 0


def cmd_sweep_k(args) -> int:
    cfg = _config(args)
    _need_dataset(cfg)
    ks = range(args.k_min, args.k_max + 1)
    results = sweep_k(cfg, ks, out_dir=cfg.out)
    print(sweep_table(results), end="")
    return 0


def cmd_ablate_fixed(args) -> int:
    cfg = _config(args)
    _need_dataset(cfg)
    h = args.fixed_h or cfg.k
    dyn, fixed = ablate_fixed(cfg, h, out_dir=cfg.out)
    print(f"dynamic (max k={h}) NDCG@10 {dyn.test.ndcg[10]:.4f}  HR@10 {dyn.test.hr[10]:.4f}")
    print(f"fixed   (h={h})     NDCG@10 {fixed.test.ndcg[10]:.4f}  HR@10 {fixed.test.hr[10]:.4f}")
    return 0


def cmd_synth(args) -> int:
    spec = synthetic_spec(n_users=args.users, seed=args.seed or 0)
    out = Path(args.out or "runs/synth")
    if args.generate_only:
        out.mkdir(parents=True, exist_ok=True)
        write_synthetic(synth_generate(spec), out / "synthetic.txt", out / "synthetic.labels")
        print(f"wrote {out / 'synthetic.txt'} and {out / 'synthetic.labels'}")
        return 0
    overrides = {}
    if args.epochs:
        overrides["epochs"] = args.epochs
    cfg = synthetic_config(**overrides)
    res = run_synthetic(spec, cfg, fixed_h=args.fixed_h, out_dir=out)
    print(json.dumps({k: v for k, v in res.summary().items() if not k.startswith("test_")}, indent=2))
    return 0


def grad_check_instance(seed: int, scale: float = 0.5):
    """Full loss on one 3-item window, d=4, t=3, k=2, o=3, noise frozen, h=2.

    Every parameter (biases included) is drawn from N(0, scale**2) so the
    check runs at a generic point rather than on ReLU kinks of zero biases.
    """
    cfg = RunConfig(d=4, t=3, k=2, o=3, num_blocks=2, seed=seed)
    model = RDRSR(cfg, n_users=1, n_items=8)
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    model.params["item_emb"].data[0] = 0.0
    batch = Batch(np.array([[1, 2, 3]]), np.array([1]), np.array([4]), np.array([[5, 6, 7]]))
    noise = Noise.draw(rng, 1, cfg.k, cfg.t)
    noise.gumbel = np.array([[0.0, 5.0]])
    out = model.forward(batch, noise)
    frozen = noise.frozen(out)
    return model, (lambda: model.forward(batch, frozen).loss)


def cmd_grad_check(args) -> int:
    t0 = time.perf_counter()
    model, fn = grad_check_instance(args.seed or 0)
    res = dc.grad_check(fn, model.params, args.eps, richardson=not args.plain)
    ok = res.max_rel_error < GRAD_CHECK_TOL
    print(f"max relative error {res.max_rel_error:.3e} over {res.checked} coordinates "
          f"(worst {res.worst}) in {time.perf_counter() - t0:.2f}s: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdrsr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train, validate, test the best epoch")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--eval-mode", dest="eval_mode", choices=("full", "sampled"))
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-k", help="one run per max interest count k")
    _common(p)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=7)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("ablate-fixed", help="dynamic count vs fixed count")
    _common(p)
    p.set_defaults(func=cmd_ablate_fixed)

    p = sub.add_parser("synth", help="planted-interest synthetic experiment")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--fixed-h", dest="fixed_h", type=int)
    p.add_argument("--generate-only", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=GRAD_CHECK_EPS)
    p.add_argument("--plain", action="store_true", help="single central difference, no extrapolation")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"rdrsr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
