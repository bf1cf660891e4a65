#!/usr/bin/env python3
"""Desk-scale sweep over the structural model variants.

Trains each variant briefly on the same synthetic farm and prints a
comparison table (validation loss and test MAE). This mirrors the
ablation workflow: single scale, two scales, four scales, no skip
connections, single-branch models, and attention without fusion.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from hsttn import (  # noqa: E402
    ModelConfig,
    TrainConfig,
    apply_zscore,
    fit_zscore,
    make_variant,
    make_windows,
    synth_generate,
    train,
    variant_config,
)
from hsttn.evaluation import evaluate_model, evaluate_persistence  # noqa: E402
from hsttn.model import VARIANT_NAMES  # noqa: E402


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=29)
    parser.add_argument("--epochs", type=int, default=15)
    parser.add_argument("--noise", type=float, default=0.05)
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    rs = synth_generate(4, 720, 5, seed=args.seed, noise_scale=args.noise)
    stats = fit_zscore(rs, (0, 480))
    normed = apply_zscore(rs, stats)
    h = f = 24
    train_w = make_windows(normed, h, f, stride=4, start=0, end=480)
    val_w = make_windows(normed, h, f, stride=h, start=480, end=600)
    test_w = make_windows(normed, h, f, stride=12, start=600)
    target = rs.target_index

    base = ModelConfig(n_turbines=4, history_len=h, horizon_len=f, n_channels=5,
                       d_model=8, n_heads=2, pool_factors=(3, 2), dropout_rate=0.0)
    tc = TrainConfig(initial_lr=5e-3, lr_decay=0.97, batch_size=4,
                     max_epochs=args.epochs, patience=args.epochs, seed=args.seed)

    print(f"{'variant':<10} {'scales':>6} {'params':>7} {'val loss':>10} "
          f"{'test MAE kW':>12} {'time':>6}")
    for name in VARIANT_NAMES:
        cfg = variant_config(base, name)
        model = make_variant(cfg, seed=args.seed)
        n_params = sum(t.data.size for t in model.params.trainable().values())
        started = time.monotonic()
        best, _ = train(model, train_w, val_w, tc, stats)
        model.params.load_arrays(best.parameters)
        report = evaluate_model(model, test_w, stats, target)
        print(f"{name:<10} {cfg.n_scales:>6} {n_params:>7} {best.val_loss:>10.4f} "
              f"{report.mae:>12.2f} {time.monotonic() - started:>5.0f}s")

    persist = evaluate_persistence(test_w, stats, target)
    print(f"{'persist':<10} {'-':>6} {'-':>7} {'-':>10} {persist.mae:>12.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
