"""Desk run plus a zero-image baseline; prints PSNR per decoding mode for both.

    python scripts/conditioning_ablation.py --train 64 --test 16
    python scripts/conditioning_ablation.py --unpaired --shared-null --p-null 0.2
"""
import argparse
import json
import logging

from gsq import trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--train", type=int, default=64)
    ap.add_argument("--test", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--p-null", type=float, default=None, help="zero-image probability for the conditioned run")
    ap.add_argument("--unpaired", action="store_true", help="draw zero-image samples at --p-null instead of pairing")
    ap.add_argument("--shared-null", action="store_true", help="decode zero images with the conditioned modules")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-baseline", action="store_true")
    ap.add_argument("--out", default=None, help="write the scores as JSON here")
    ap.add_argument("--save", default=None, help="save the conditioned model to this directory")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    over = {"seed": args.seed}
    if args.p_null is not None:
        over["p_null"] = args.p_null
    if args.unpaired:
        over["paired_null"] = False
    cfg = trainer.desk_config(**over)
    if args.epochs:
        cfg = trainer.rescale_schedule(cfg, args.epochs)
    mcfg = trainer.desk_model_config(null_branch=not args.shared_null)
    run = trainer.desk_experiment(args.train, args.test, cfg=cfg, mcfg=mcfg, out_dir=args.save)
    scores = {"conditioned": trainer.evaluate_modes(run.model, run.test, view_counts=(1, 3, 6))}
    if not args.no_baseline:
        base_cfg = trainer.desk_config(**{**over, "p_null": 1.0, "paired_null": False})
        if args.epochs:
            base_cfg = trainer.rescale_schedule(base_cfg, args.epochs)
        res = trainer.train_loop(run.train, base_cfg, mcfg, val=run.test[0])
        scores["baseline"] = trainer.evaluate_modes(res.model, run.test, view_counts=())
    for name, s in scores.items():
        print(name, " ".join(f"{k}={v:.2f}" for k, v in s.items()))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(scores, f, indent=2)


if __name__ == "__main__":
    main()
