"""Command-line entry point: degrade, render3d, train, restore, eval, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("facediff")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def image_seeds(seed: int, index: int) -> tuple[int, int]:
    """Independent (parameter, noise) seeds for the index-th image of a run."""
    a, b = np.random.SeedSequence([seed, index]).generate_state(2)
    return int(a), int(b)


def write_meta(out_dir: Path, **extra) -> None:
    from .degrade import quant_tables
    from .morphable3d import PRIOR_VERSION

    meta = {
        "package_version": __version__,
        "prior_model_format": PRIOR_VERSION,
        "quant_tables": quant_tables()["version"],
        **extra,
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_prior(cfg: RunConfig, override: str | None):
    from .morphable3d import load_prior_model, synth_prior_model

    path = override or cfg.paths.prior_model
    if path:
        return load_prior_model(path), str(path)
    return synth_prior_model(cfg.model.prior_seed, cfg.model.prior_vertices), \
        f"synthetic(seed={cfg.model.prior_seed}, V={cfg.model.prior_vertices})"


def _require(*paths) -> None:
    for p in paths:
        if not p or not Path(p).exists():
            raise UsageError(f"missing required path: {p or '(empty)'}")


def _prepare_out(out: str, *inputs: str) -> Path:
    out_path = Path(out)
    for inp in inputs:
        if out_path.resolve() == Path(inp).resolve():
            raise UsageError(f"output directory {out} must differ from input {inp}")
    out_path.mkdir(parents=True, exist_ok=True)
    return out_path


def cmd_degrade(args, cfg: RunConfig) -> int:
    from .degrade import degrade_pipeline, sample_degradation, write_manifest
    from .imageio import list_pngs, read_png, write_png

    _require(args.input)
    out = _prepare_out(args.output, args.input)
    seed = cfg.degrade.seed if args.seed is None else args.seed
    rows = []
    for i, path in enumerate(list_pngs(args.input)):
        pseed, nseed = image_seeds(seed, i)
        params = sample_degradation(pseed)
        write_png(out / path.name, degrade_pipeline(read_png(path), params, nseed))
        rows.append((path.name, params, nseed))
    write_manifest(out / "manifest.csv", rows)
    write_meta(out, command="degrade", seed=seed, config_digest=cfg.digest())
    print(f"degraded {len(rows)} images into {out}")
    return EXIT_OK


def cmd_make_prior(args, cfg: RunConfig) -> int:
    from .morphable3d import save_prior_model, synth_prior_model

    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_prior_model(out, synth_prior_model(args.seed, args.vertices))
    print(f"wrote prior model with {args.vertices} vertices to {out}")
    return EXIT_OK


def cmd_render3d(args, cfg: RunConfig) -> int:
    from .imageio import write_png
    from .morphable3d import read_coeff_file, render_mesh, split_coeffs

    _require(args.coeffs, *( [args.prior] if args.prior else []))
    out = _prepare_out(args.output)
    model, prior_src = _load_prior(cfg, args.prior)
    size = args.size or cfg.model.image_size
    coeffs = read_coeff_file(args.coeffs)
    for stem, v in coeffs.items():
        r = render_mesh(model, split_coeffs(v), size, size)
        write_png(out / f"{stem}.png", r.image)
    write_meta(out, command="render3d", prior=prior_src, config_digest=cfg.digest())
    print(f"rendered {len(coeffs)} priors into {out}")
    return EXIT_OK


def _load_pairs(img_dir: str, coeff_file: str, model, size: int):
    """Images from ``img_dir`` with their renders, matched by filename stem."""
    from .imageio import list_pngs, read_png
    from .morphable3d import read_coeff_file, render_mesh, split_coeffs

    coeffs = read_coeff_file(coeff_file)
    names, imgs, renders = [], [], []
    for path in list_pngs(img_dir):
        if path.stem not in coeffs:
            raise ValueError(f"no coefficients for {path.name} in {coeff_file}")
        img = read_png(path)
        if img.shape[:2] != (size, size):
            raise ValueError(f"{path.name} is {img.shape[1]}x{img.shape[0]}, model expects {size}x{size}")
        names.append(path.stem)
        imgs.append(img)
        renders.append(render_mesh(model, split_coeffs(coeffs[path.stem]), size, size).image)
    if not names:
        raise ValueError(f"no PNG images in {img_dir}")
    return names, np.stack(imgs), np.stack(renders)


def cmd_train(args, cfg: RunConfig) -> int:
    from .denoiser import to_model_space, train_loop

    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out:
        cfg.paths.out_dir = args.out
    _require(cfg.paths.hq_dir, cfg.paths.coeff_file, *([cfg.paths.prior_model] if cfg.paths.prior_model else []))
    out = _prepare_out(cfg.paths.out_dir, cfg.paths.hq_dir)
    prior, prior_src = _load_prior(cfg, None)
    size = cfg.model.image_size
    _, imgs, renders = _load_pairs(cfg.paths.hq_dir, cfg.paths.coeff_file, prior, size)
    state = train_loop(to_model_space(imgs), renders, cfg.model.denoiser(), cfg.train.steps,
                       seed=cfg.train.seed, sched=cfg.schedule.build(), train=cfg.train.build(),
                       out_dir=out)
    (out / "config.ini").write_text(cfg.serialize())
    write_meta(out, command="train", seed=cfg.train.seed, config_digest=cfg.digest(),
               model_digest=cfg.model.denoiser().digest(), prior=prior_src, steps=state.step)
    print(f"trained {state.step} steps, final loss {state.losses[-1] if state.losses else float('nan'):.5f}")
    return EXIT_OK


def cmd_restore(args, cfg: RunConfig) -> int:
    from .denoiser import load_checkpoint
    from .imageio import list_pngs, read_png, write_png
    from .morphable3d import read_coeff_file, render_mesh, split_coeffs
    from .restore import FileRestorer, initial_restore, make_restorer, truncated_restore, write_gamma_logs

    _require(args.checkpoint, args.lq_dir, args.coeffs, *([args.prior] if args.prior else []))
    out = _prepare_out(args.output, args.lq_dir)
    N = cfg.restore.truncation if args.truncation is None else args.truncation
    use_ema = cfg.restore.use_ema if args.ema is None else args.ema
    seed = cfg.restore.seed if args.seed is None else args.seed
    sched = cfg.schedule.build()
    if not 0 <= N <= sched.T:
        raise UsageError(f"--truncation {N} outside [0, {sched.T}]")

    state = load_checkpoint(args.checkpoint)
    model = state.ema_model() if use_ema else state.model
    size = model.config.image_size
    prior, prior_src = _load_prior(cfg, args.prior)
    coeffs = read_coeff_file(args.coeffs)
    restorer = make_restorer(cfg.restore.restorer, cfg.restore.restorer_dir or None)
    count = 0
    for i, path in enumerate(list_pngs(args.lq_dir)):
        if path.stem not in coeffs:
            raise ValueError(f"no coefficients for {path.name}")
        x_lq = read_png(path)
        if x_lq.shape[:2] != (size, size):
            raise ValueError(f"{path.name} is {x_lq.shape[1]}x{x_lq.shape[0]}, model expects {size}x{size}")
        r = restorer.for_stem(path.stem) if isinstance(restorer, FileRestorer) else restorer
        x_init = initial_restore(x_lq, r)
        x_3d = render_mesh(prior, split_coeffs(coeffs[path.stem]), size, size).image
        run = truncated_restore(x_init, x_3d, model, sched, N, seed=image_seeds(seed, i)[1])
        write_png(out / path.name, run.output)
        write_gamma_logs(run, out, path.stem)
        count += 1
    write_meta(out, command="restore", seed=seed, truncation=N, ema=use_ema, restorer=restorer.name,
               config_digest=cfg.digest(), model_digest=model.config.digest(), prior=prior_src)
    print(f"restored {count} images into {out}")
    return EXIT_OK


def eval_report(pred_dir: str, gt_dir: str, refs: list[str]) -> list[str]:
    from .imageio import list_pngs, read_png
    from .metrics import feature_stats, frechet_distance, psnr, ssim, to_gray

    gt = {p.name: p for p in list_pngs(gt_dir)}
    preds = [p for p in list_pngs(pred_dir) if p.name in gt]
    if not preds:
        raise ValueError(f"no matching PNG filenames between {pred_dir} and {gt_dir}")
    lines = ["filename,psnr_gray,ssim_gray"]
    pred_imgs = []
    for p in preds:
        a, b = read_png(p), read_png(gt[p.name])
        pred_imgs.append(a)
        lines.append(f"{p.name},{psnr(to_gray(a), to_gray(b)):.6f},{ssim(a, b):.6f}")
    footer = []
    if len(pred_imgs) >= 2:
        s_pred = feature_stats(pred_imgs)
        footer.append(f"frechet_gt={frechet_distance(s_pred, feature_stats(read_png(p) for p in gt.values())):.6f}")
        for k, ref in enumerate(refs, 1):
            s_ref = feature_stats(read_png(p) for p in list_pngs(ref))
            footer.append(f"frechet_ref{k}={frechet_distance(s_pred, s_ref):.6f}")
    else:
        footer.append("frechet_gt=nan")
    lines.append("# " + " ".join(footer))
    return lines


def cmd_eval(args, cfg: RunConfig) -> int:
    _require(args.pred, args.gt, *args.ref)
    lines = eval_report(args.pred, args.gt, args.ref)
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facediff", description=__doc__)
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("degrade", help="synthesize low-quality images")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_degrade)

    s = sub.add_parser("make-prior", help="write a synthetic prior model file")
    s.add_argument("output")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--vertices", type=int, default=1024)
    s.set_defaults(fn=cmd_make_prior)

    s = sub.add_parser("render3d", help="render 3D priors from a coefficient file")
    s.add_argument("coeffs")
    s.add_argument("output")
    s.add_argument("--prior")
    s.add_argument("--size", type=int)
    s.set_defaults(fn=cmd_render3d)

    s = sub.add_parser("train", help="train the guided denoiser")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("restore", help="truncated guided sampling from low-quality inputs")
    s.add_argument("checkpoint")
    s.add_argument("lq_dir")
    s.add_argument("coeffs")
    s.add_argument("output")
    s.add_argument("--truncation", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--prior")
    s.add_argument("--ema", action=argparse.BooleanOptionalAction, default=None)
    s.set_defaults(fn=cmd_restore)

    s = sub.add_parser("eval", help="PSNR/SSIM per file and Frechet distances")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--ref", action="append", default=[])
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.set_defaults(fn=cmd_selftest)

    # --config and --seed are accepted after the subcommand too.
    for name in ("degrade", "render3d", "train", "restore", "eval", "selftest", "make-prior"):
        sub.choices[name].add_argument("--config", dest="sub_config")
    return p


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.sub_config or args.config)
        return args.fn(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigError):
            print(parser.format_usage(), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        stage = getattr(args, "command", "?") if "args" in locals() else "?"
        print(f"error [{stage}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
