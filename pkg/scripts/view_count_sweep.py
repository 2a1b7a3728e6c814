"""PSNR against the number of conditioning images, for a saved model.

    python scripts/view_count_sweep.py runs/desk --test 16
"""
import argparse

from gsq import trainer
from gsq.scenelab import build_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("model_dir")
    ap.add_argument("--train", type=int, default=64, help="size of the training split the model saw")
    ap.add_argument("--test", type=int, default=16)
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()

    model = trainer.load_model(args.model_dir)
    ds = build_dataset(args.train, args.test, seed=args.data_seed)
    test = [trainer.prepare_scene(r, model.cfg) for r in ds.test]
    counts = range(1, trainer.COND_VIEWS + 1)
    s = trainer.evaluate_modes(model, test, view_counts=counts)
    print(f"{'views':>5} {'coarse':>8} {'fine':>8}")
    print(f"{0:>5} {'':>8} {s['none']:8.2f}")
    for n in counts:
        print(f"{n:>5} {s[f'coarse@{n}']:8.2f} {s[f'fine@{n}']:8.2f}")


if __name__ == "__main__":
    main()
