"""Paired-seed cross-validation study on the synthetic thermal corpus.

Generates (or reuses) a seeded corpus, then runs 5-fold cross-validation
for each requested polynomial order across several paired seeds: every
seed trains one model per order on identical folds, so the per-seed
accuracy differences isolate the effect of the order alone. Prints the
per-seed paired accuracies and a small aggregate table.

Usage:
    python3 scripts/desk_experiment.py --out runs/desk --seeds 5 --epochs 3
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from selfonn_kit.cli import STREAM_BATCH, STREAM_INIT, derive_seed
from selfonn_kit.data import load_dataset, make_cv_splits, stratified_ordered_kfold
from selfonn_kit.model import ModelConfig, build_model
from selfonn_kit.synth import SynthConfig, synth_generate
from selfonn_kit.training import TrainConfig, evaluate, fit


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk", help="corpus/work directory")
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--corpus-seed", type=int, default=11)
    p.add_argument("--seeds", type=int, default=5, help="paired seeds to run")
    p.add_argument("--orders", default="1,2",
                   help="comma-separated polynomial orders")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--k", type=int, default=5)
    return p.parse_args()


def corpus_manifest(args) -> Path:
    out = Path(args.out) / "corpus"
    manifest = out / "manifest.tsv"
    if manifest.exists():
        print(f"reusing corpus at {out}")
        return manifest
    print(f"generating {3 * args.per_class} images under {out} ...")
    return synth_generate(out, SynthConfig(per_class=args.per_class,
                                           height=128, width=160,
                                           seed=args.corpus_seed))


def cross_validate(dataset, splits, q, seed_root, args):
    config = ModelConfig(q_order=q,
                         input_shape=tuple(dataset.images[0].shape),
                         block_filters=(4, 4, 4), kernel_sizes=(5, 3, 2),
                         dense_units=16, classes=3)
    accs = []
    for fold, split in enumerate(splits):
        model = build_model(config,
                            derive_seed(seed_root, STREAM_INIT, q, fold))
        tc = TrainConfig(learning_rate=args.lr, batch_size=args.batch,
                         max_epochs=args.epochs,
                         seed=derive_seed(seed_root, STREAM_BATCH, q, fold))
        tr = dataset.subset(split.train_indices)
        va = dataset.subset(split.val_indices)
        fit(model, tr[0], tr[1], va[0], va[1], tc)
        te_x, te_y = dataset.subset(split.test_indices)
        _, acc, _ = evaluate(model, te_x, te_y)
        accs.append(acc)
    return accs


def main():
    args = parse_args()
    orders = [int(v) for v in args.orders.split(",")]
    manifest = corpus_manifest(args)
    dataset = load_dataset(manifest, half_resolution=True)
    print(f"{len(dataset)} images at {dataset.images[0].shape[1]}x"
          f"{dataset.images[0].shape[2]} after halving")
    splits = make_cv_splits(stratified_ordered_kfold(dataset.labels, args.k))

    results = {}  # (seed, q) -> fold accuracies
    start = time.perf_counter()
    for seed in range(args.seeds):
        for q in orders:
            t0 = time.perf_counter()
            accs = cross_validate(dataset, splits, q, seed, args)
            results[(seed, q)] = accs
            print(f"seed {seed} q={q}: mean {np.mean(accs):.4f} "
                  f"folds {[f'{a:.3f}' for a in accs]} "
                  f"({time.perf_counter() - t0:.0f}s)")

    print(f"\ntotal {time.perf_counter() - start:.0f}s")
    print(f"\n{'q':>2}  {'mean':>7}  {'std':>7}  per-seed means")
    for q in orders:
        seed_means = [float(np.mean(results[(s, q)]))
                      for s in range(args.seeds)]
        print(f"{q:>2}  {np.mean(seed_means):>7.4f}  "
              f"{np.std(seed_means):>7.4f}  "
              + "  ".join(f"{v:.4f}" for v in seed_means))
    if len(orders) == 2:
        lo, hi = orders
        wins = sum(np.mean(results[(s, hi)]) >= np.mean(results[(s, lo)])
                   for s in range(args.seeds))
        print(f"\nq={hi} matched or beat q={lo} in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
