"""Train the desk-scale model on procedural scenes and save it.

    python scripts/train_desk.py --out runs/desk
"""
import argparse
import json
import logging
from pathlib import Path

from gsq import trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--train", type=int, default=64)
    ap.add_argument("--test", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = trainer.desk_config(seed=args.seed)
    if args.epochs:
        cfg = trainer.rescale_schedule(cfg, args.epochs)
    out = Path(args.out)
    run = trainer.desk_experiment(args.train, args.test, args.data_seed, cfg=cfg, out_dir=out)
    scores = trainer.evaluate_modes(run.model, run.test, view_counts=(6,))
    (out / "scores.json").write_text(json.dumps(scores, indent=2))
    print(f"pack {run.result.pack.hash:016x}; " + " ".join(f"{k}={v:.2f}" for k, v in scores.items()))


if __name__ == "__main__":
    main()
