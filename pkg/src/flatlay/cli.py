"""Command-line entry point: ``flatlay <command> ...``.

Commands: synth, train, infer, eval, seed-sweep, params.
Exit codes: 0 success, 1 I/O failure, 2 validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import collections
import logging
import re
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .errors import CheckpointError, ConfigError, DatasetError, NumericError, ShapeError
from .metrics import evaluate_images, seed_sweep, sweep_summary, write_report_csv, write_summary_json
from .unet import FULL_SIZE_PARAM_COUNTS_M, ParamGroupSelector, build_unet, count_params

log = logging.getLogger("flatlay")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class IdMismatch(ValueError):
    pass


def _out(msg: str = "") -> None:
    print(msg, flush=True)


# --- commands -----------------------------------------------------------------------


def cmd_synth(args, overrides) -> int:
    from .synth import CATEGORIES, generate_dataset

    if overrides:
        raise ConfigError(f"synth takes no config overrides: {overrides}")
    rows = generate_dataset(args.n, args.seed, args.out, (args.height, args.width))
    cats = collections.Counter(r["category"] for r in rows)
    views = collections.Counter(r["body_view"] for r in rows)
    _out(f"wrote {len(rows)} pairs to {args.out}")
    _out("categories: " + ", ".join(f"{c}={cats[c]}" for c in CATEGORIES))
    _out("body views: " + ", ".join(f"{v}={n}" for v, n in sorted(views.items())))
    return EXIT_OK


def _param_table(cfg: RunConfig) -> list[str]:
    model = build_unet(cfg.unet, cfg.schedule.build())
    lines = [f"{'selector':<12} {'trainable':>12} {'full-size model':>16}"]
    for sel in ParamGroupSelector:
        lines.append(f"{sel.value:<12} {count_params(model, sel):>12,} {FULL_SIZE_PARAM_COUNTS_M[sel.value]:>15.2f}M")
    return lines


def cmd_params(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    for line in _param_table(cfg):
        _out(line)
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    from .checkpoint import read_container
    from .synth import load_dataset
    from .trainer import load_checkpoint, train_loop, write_loss_csv

    if args.selector:
        overrides = [*overrides, f"train.selector={args.selector}"]
    cfg = load_config(args.config, overrides)
    for line in _param_table(cfg):
        _out(line)
    if not cfg.paths.dataset_dir:
        raise ConfigError("paths.dataset_dir: required for training")
    pairs = load_dataset(cfg.paths.dataset_dir, strict=True)
    ckpt = Path(cfg.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    report = Path(cfg.paths.report_dir)
    report.mkdir(parents=True, exist_ok=True)

    trainer = init = None
    if args.resume and ckpt.exists():
        trainer = load_checkpoint(ckpt, cfg.train)
        _out(f"resuming from {ckpt} at step {trainer.step}")
    elif cfg.paths.init_checkpoint:
        init = {k: v for k, v in read_container(cfg.paths.init_checkpoint)[1].items() if k.startswith("param/")}

    def progress(rows):
        _out("  ".join(f"epoch {r['epoch']} {r['split']} {r['loss']:.5f}" for r in rows))

    result = train_loop(
        pairs, cfg.train, cfg.unet, cfg.codec, cfg.schedule.build(),
        trainer=trainer, init_params=init, checkpoint_path=ckpt, progress=progress,
    )
    result.trainer.save(ckpt)
    write_loss_csv(result.history, report / "losses.csv")
    _out(f"checkpoint: {ckpt}")
    _out(f"losses: {report / 'losses.csv'}")
    return EXIT_OK


def _load_checked(checkpoint, cfg: RunConfig | None):
    from .trainer import load_model

    if not checkpoint or not Path(checkpoint).exists():
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    model, codec, sched, train_cfg = load_model(checkpoint)
    if cfg is not None:
        for name, mine, theirs in (
            ("codec", cfg.codec.to_dict(), codec.config.to_dict()),
            ("unet", cfg.unet.to_dict(), model.config.to_dict()),
        ):
            diff = sorted(k for k in mine if mine[k] != theirs.get(k))
            if diff:
                raise ConfigError(f"checkpoint/config mismatch: {', '.join(f'{name}.{k}' for k in diff)}")
    return model, codec, sched, train_cfg


def _maybe_config(args, overrides):
    if args.config is None and not overrides:
        return None
    return load_config(args.config, overrides)


def cmd_infer(args, overrides) -> int:
    from .sampler import batch_sample, write_samples
    from .synth import load_dataset

    cfg = _maybe_config(args, overrides)
    checkpoint = args.checkpoint or (cfg.paths.checkpoint if cfg else None)
    data = args.data or (cfg.paths.dataset_dir if cfg else None)
    if not data:
        raise ConfigError("infer needs --data (or paths.dataset_dir)")
    steps = args.steps or (cfg.sample.steps if cfg else 50)
    eta = cfg.sample.eta if cfg else 0.0
    model, codec, sched, train_cfg = _load_checked(checkpoint, cfg)
    pairs = load_dataset(data)
    out_dir = Path(args.out or Path(cfg.paths.report_dir if cfg else ".") / "samples")
    samples = batch_sample(model, codec, sched, pairs, args.seed, steps, eta,
                           swap_slots=train_cfg.swap_slots, mask_channel=train_cfg.mask_channel)
    paths = write_samples(samples, args.seed, out_dir)
    _out(f"wrote {len(paths)} images to {out_dir}")
    return EXIT_OK


_SEED_SUFFIX = re.compile(r"^(?P<id>.+)_seed(?P<seed>-?\d+)$")


def _image_index(directory: Path, seed=None) -> dict[str, Path]:
    """``{id: path}`` for the PNGs of ``directory``; ``<id>_seed<k>`` names are matched on ``seed``."""
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    index, seeds = {}, set()
    for p in sorted(directory.glob("*.png")):
        m = _SEED_SUFFIX.match(p.stem)
        if m:
            seeds.add(int(m["seed"]))
            if seed is not None and int(m["seed"]) != seed:
                continue
            index[m["id"]] = p
        else:
            index[p.stem] = p
    if seed is None and len(seeds) > 1:
        raise ConfigError(f"{directory} holds images for seeds {sorted(seeds)}; pick one with --seed")
    return index


def cmd_eval(args, overrides) -> int:
    from .metrics import RandomConvFeatures
    from .synth import read_manifest, read_png

    if overrides:
        raise ConfigError(f"eval takes no config overrides: {overrides}")
    gen_dir, truth_root = Path(args.generated), Path(args.truth)
    truth_dir = truth_root / "cloth" if (truth_root / "cloth").is_dir() else truth_root
    gen, truth = _image_index(gen_dir, args.seed), _image_index(truth_dir)
    if set(gen) != set(truth):
        missing, extra = sorted(set(truth) - set(gen)), sorted(set(gen) - set(truth))
        raise IdMismatch(f"id sets differ: missing from generated {missing}; not in truth {extra}")
    ids = sorted(truth)
    manifest = truth_root / "manifest.csv"
    meta = read_manifest(manifest) if manifest.exists() else {}
    cats = [meta.get(i, {}).get("category", "") for i in ids]
    report = evaluate_images(
        [read_png(gen[i])[:3] for i in ids], [read_png(truth[i])[:3] for i in ids],
        cats if any(cats) else None, RandomConvFeatures(), seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv([report], out / "eval.csv")
    write_summary_json(
        {"report": report.row(), "per_category": report.per_category, "feature_extractor": "random_conv"},
        out / "eval.json",
    )
    _out(f"n={report.n_images} ssim={report.ssim:.4f} fid={report.fid:.6f} kid={report.kid:.6f}")
    return EXIT_OK


def parse_seeds(text: str) -> list[int]:
    """``"1,2,5"`` or ``"1..10"`` (inclusive) or a mix: ``"1..3,7"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = (int(v) for v in part.split(".."))
            if hi < lo:
                raise ConfigError(f"--seeds: empty range {part!r}")
            seeds.extend(range(lo, hi + 1))
        elif part:
            seeds.append(int(part))
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError(f"--seeds: need distinct seeds, got {text!r}")
    return seeds


def cmd_seed_sweep(args, overrides) -> int:
    from .synth import load_dataset

    cfg = _maybe_config(args, overrides)
    try:
        seeds = parse_seeds(args.seeds)
    except ValueError as exc:
        raise ConfigError(f"--seeds: {exc}") from exc
    checkpoint = args.checkpoint or (cfg.paths.checkpoint if cfg else None)
    data = args.data or (cfg.paths.dataset_dir if cfg else None)
    if not data:
        raise ConfigError("seed-sweep needs --data (or paths.dataset_dir)")
    steps = args.steps or (cfg.sample.steps if cfg else 50)
    model, codec, sched, train_cfg = _load_checked(checkpoint, cfg)
    pairs = load_dataset(data, strict=True)
    if any(p.garment is None for p in pairs):
        raise ConfigError(f"{data}: seed sweeps need ground-truth flat-lays (cloth/)")
    reports = seed_sweep(model, codec, sched, pairs, seeds, steps,
                         swap_slots=train_cfg.swap_slots, mask_channel=train_cfg.mask_channel)
    out = Path(args.out or (cfg.paths.report_dir if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(reports, out / "sweep.csv")
    summary = sweep_summary(reports)
    write_summary_json(summary, out / "sweep_summary.json")
    _out(f"{'rank':>4} {'seed':>6} {'ssim':>8} {'fid':>12} {'kid':>12}")
    for rank, r in enumerate(reports, 1):
        _out(f"{rank:>4} {r.seed:>6} {r.ssim:>8.4f} {r.fid:>12.6f} {r.kid:>12.6f}")
    _out(f"fid spread: {summary['fid_spread']:.6f}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flatlay", description="Mask-conditioned latent diffusion for flat-lay garments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("n", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=48)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config")
    s.add_argument("--selector", choices=[x.value for x in ParamGroupSelector])
    s.add_argument("--resume", action="store_true", help="continue from paths.checkpoint if it exists")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="generate flat-lays for a dataset")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score generated images against ground truth")
    s.add_argument("generated")
    s.add_argument("truth")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("seed-sweep", help="evaluate a model under many sampling seeds")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--seeds", required=True, help='e.g. "1..10" or "36,52,94"')
    s.add_argument("--steps", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_seed_sweep)

    s = sub.add_parser("params", help="print trainable parameter counts per selector")
    s.add_argument("--config")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    bad = [r for r in rest if not (r.startswith("--") and "=" in r and "." in r.split("=", 1)[0])]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, rest)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, ShapeError, IdMismatch) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
