"""Which parameters each training regime updates.

The toy U-Net is split the same way as the full-size model: every weight,
the transformer blocks only, or the attention projections only. A few
transformer-only steps started from a trained checkpoint show that every
parameter outside the selection stays bit-identical.

Run:  python demos/04_selective_training.py [demo_out/model.ckpt] [--steps 20]
"""

import argparse
import dataclasses

import torch

from flatlay.codec import build_codec
from flatlay.config import RunConfig
from flatlay.conditioning import encode_pairs
from flatlay.synth import synthesize
from flatlay.trainer import Trainer, load_model
from flatlay.unet import FULL_SIZE_PARAM_COUNTS_M, build_unet, count_params, select_trainable


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("checkpoint", nargs="?", help="start from trained weights (default: random init)")
    parser.add_argument("--steps", type=int, default=20)
    args = parser.parse_args()

    cfg = RunConfig()
    if args.checkpoint:
        model, codec, sched, _ = load_model(args.checkpoint)
    else:
        sched = cfg.schedule.build()
        model, codec = build_unet(cfg.unet, sched), build_codec(cfg.codec)
        # out_conv starts at zero, which blocks every upstream gradient
        torch.nn.init.normal_(model.out_conv.weight, std=0.05, generator=torch.Generator().manual_seed(0))

    print(f"{'selector':<12} {'toy U-Net':>12} {'full size (M)':>14}")
    for sel in ("full", "transformer", "attention"):
        print(f"{sel:<12} {count_params(model, sel):>12,} {FULL_SIZE_PARAM_COUNTS_M[sel]:>14.2f}")

    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    trainer = Trainer(model, codec, sched, dataclasses.replace(cfg.train, selector="transformer"))
    lat = encode_pairs(synthesize(8 * args.steps, 4), codec)
    for step in range(args.steps):
        loss = trainer.train_step(lat[torch.arange(8 * step, 8 * step + 8)])
    print(f"{args.steps} transformer-only steps, last loss {loss:.4f}")

    selected = set(select_trainable(model, "transformer"))
    moved = [n for n, p in model.named_parameters() if not torch.equal(p, before[n])]
    print(f"tensors changed: {len(moved)} of {len(selected)} selected, "
          f"{len(set(moved) - selected)} outside the selection")


if __name__ == "__main__":
    main()
