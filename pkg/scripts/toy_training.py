"""Train the default denoiser on 16 synthetic 16x16 images and report the loss drop."""

import argparse

from facediff.experiments import toy_training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--images", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="write the per-step loss here")
    args = ap.parse_args()
    r = toy_training(args.steps, args.images, seed=args.seed)
    print(f"init loss {r.init_loss:.4f} (expected 1 +- {r.init_se:.4f})")
    print(f"first-50 mean {r.first_mean:.4f}, last-50 mean {r.last_mean:.4f}, "
          f"ratio {r.last_mean / r.first_mean:.3f}, {r.seconds:.0f}s")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("step,loss\n")
            f.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(r.losses))


if __name__ == "__main__":
    main()
