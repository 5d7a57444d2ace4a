#!/usr/bin/env python3
"""Desk-scale capability experiment: overfit the cascade on a handful of
synthetic episodes and report how far each stage drives its objective.

Writes the stage histories as CSV next to the chosen output prefix and
prints a compact summary table.
"""

import argparse
import time
from dataclasses import replace

from bpwave import datapipe, models, pipeline, tensorops, trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--episodes", type=int, default=16)
    ap.add_argument("--width", type=float, default=1 / 16)
    ap.add_argument("--approx-epochs", type=int, default=200)
    ap.add_argument("--refine-epochs", type=int, default=600)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--store-seed", type=int, default=42)
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--out-prefix", default="overfit")
    args = ap.parse_args()

    store = datapipe.synth_generate(args.episodes, seed=args.store_seed)
    prep = pipeline.preprocess_store(store)
    x, y = trainer.episodes_to_arrays(prep)

    config = trainer.TrainConfig(
        epochs=args.approx_epochs, batch_size=args.batch_size, seed=args.seed
    )
    approx = models.build_unet1d(
        models.UNet1DConfig.scaled(args.width, input_length=1024), seed=args.seed
    )
    t0 = time.time()
    result = trainer.train_network(approx, prep, None, config, which="approx")
    approx_seconds = time.time() - t0
    trainer.write_history_csv(f"{args.out_prefix}_approx_history.csv", result.history)

    approx_pred = trainer.predict_batched(approx, x)
    mse_in = tensorops.mse_loss(approx_pred, y)[0]

    refine = models.build_multiresunet1d(
        models.MultiResUNet1DConfig.scaled(args.width, input_length=1024), seed=args.seed
    )
    t0 = time.time()
    refine_result = trainer.train_network(
        refine, prep, None, replace(config, epochs=args.refine_epochs),
        which="refine", approx_network=approx,
    )
    refine_seconds = time.time() - t0
    trainer.write_history_csv(f"{args.out_prefix}_refine_history.csv", refine_result.history)

    refined = trainer.predict_batched(refine, approx_pred)
    mse_out = tensorops.mse_loss(refined, y)[0]

    h = result.history
    print(f"{'stage':<14} {'objective':<10} {'first':>10} {'last':>10} {'ratio':>8} {'time':>7}")
    print(
        f"{'approximation':<14} {'MAE':<10} {h[0].train_loss:>10.2f} {h[-1].train_loss:>10.2f} "
        f"{h[-1].train_loss / h[0].train_loss:>8.3f} {approx_seconds:>6.0f}s"
    )
    rh = refine_result.history
    print(
        f"{'refinement':<14} {'MSE':<10} {rh[0].train_loss:>10.2f} {rh[-1].train_loss:>10.2f} "
        f"{rh[-1].train_loss / rh[0].train_loss:>8.3f} {refine_seconds:>6.0f}s"
    )
    print(
        f"\nwaveform MSE through the cascade: {mse_in:.2f} (approximation) -> "
        f"{mse_out:.2f} (refined), x{mse_out / mse_in:.3f}"
    )


if __name__ == "__main__":
    main()
