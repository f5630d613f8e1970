"""Command-line entry point: synthesis, splitting, training, inference, evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run writes a
reproducibility header (seed, config hash, version) into its output
directory and refuses to clobber existing output unless --overwrite is set.
"""

import argparse
import difflib
import json
import logging
import os
import sys

from . import __version__
from . import data as data_mod
from . import imaging, metrics
from .errors import ConfigurationError, ToolkitError
from .fixtures import generate_fixture_corpus
from .haze import NightParams
from .training import TrainConfig, config_hash, train_stage1, train_stage2

logger = logging.getLogger("nde")

SUBCOMMANDS = ("synthesize", "split", "train-decom", "train-full", "infer", "eval", "cascade-eval", "grid")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(p, seed_default=0):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overwrite", action="store_true", help="replace existing output")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser():
    parser = _Parser(prog="nde", description="nighttime dehaze-enhancement toolkit")
    parser.add_argument("--version", action="version", version=f"nde {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synthesize", parents=[], help="build the nighttime-hazed corpus + manifest")
    p.add_argument("--src", default=os.environ.get("NDE_DATA_ROOT"),
                   help="source root with clear/ plus depth/ or hazy/ (default: $NDE_DATA_ROOT)")
    p.add_argument("--preset", choices=["desk"], help="desk: generate the 8-scene fixture corpus when --src is absent")
    p.add_argument("--a", type=float, default=1.0, help="atmospheric light A")
    p.add_argument("--betas", default="0.08,0.16", help="comma-separated scattering coefficients")
    p.add_argument("--v-scale", type=float, default=0.5)
    p.add_argument("--gamma-dark", type=float, default=2.5)
    p.add_argument("--depth-max", type=float, default=20.0, help="scene units for normalized depth maps")
    _add_common(p)

    p = sub.add_parser("split", help="assign scenes to train/test partitions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratio", default="3:1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output manifest path (default: rewrite in place)")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("-v", "--verbose", action="count", default=0)

    for name, help_text in (("train-decom", "stage 1: train the decomposition net"),
                            ("train-full", "stage 2 (optionally preceded by stage 1)")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--data-root", default=os.environ.get("NDE_DATA_ROOT"),
                       help="override the corpus root recorded in the manifest")
        p.add_argument("--preset", choices=["desk"])
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override (repeatable, wins over --config)")
        if name == "train-full":
            p.add_argument("--stage1", help="existing stage-1 checkpoint (default: train it first)")
        _add_common(p)

    p = sub.add_parser("infer", help="run the full pipeline on an image or directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--intermediates", action="store_true", help="also write I_N, R_N, I_Y, R_Y")
    _add_common(p)

    p = sub.add_parser("eval", help="score a trained checkpoint on a manifest partition")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--data-root", default=os.environ.get("NDE_DATA_ROOT"))
    p.add_argument("--partition", default="test", choices=["train", "test"])
    _add_common(p)

    p = sub.add_parser("cascade-eval", help="score a cascade of processing stages")
    p.add_argument("--stage", action="append", default=[], metavar="SPEC",
                   help="identity | gamma:G | model:CKPT | cmd:PROGRAM ARGS (repeatable, in order)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data-root", default=os.environ.get("NDE_DATA_ROOT"))
    p.add_argument("--partition", default="test", choices=["train", "test"])
    _add_common(p)

    p = sub.add_parser("grid", help="emit a labeled comparison grid image")
    p.add_argument("--row", action="append", default=[], metavar="LABEL=IMG1,IMG2,...",
                   help="one labeled row of images (repeatable)")
    _add_common(p)

    return parser


def _prepare_out_dir(path, overwrite):
    if os.path.exists(path) and os.listdir(path):
        if not overwrite:
            raise ToolkitError(f"output directory {path} is not empty; pass --overwrite to replace")
    os.makedirs(path, exist_ok=True)


def _write_header(out_dir, seed, cfg_hash_value):
    header = {"seed": seed, "config_hash": cfg_hash_value, "version": __version__}
    with open(os.path.join(out_dir, "run_header.json"), "w") as fh:
        json.dump(header, fh, indent=1)


def _args_hash(args, keys):
    import hashlib

    doc = json.dumps({k: getattr(args, k, None) for k in keys}, sort_keys=True, default=str)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _parse_config_file(path):
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip().strip("\"'")
    return mapping


def _train_config(args):
    base = TrainConfig.desk(seed=args.seed) if args.preset == "desk" else TrainConfig(seed=args.seed)
    mapping = {}
    if args.config:
        mapping.update(_parse_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    try:
        return TrainConfig.from_mapping(mapping, base=base)
    except ConfigurationError as exc:
        raise _UsageError(str(exc)) from exc


def _cmd_synthesize(args):
    _prepare_out_dir(args.out, args.overwrite)
    src = args.src
    if src is None:
        if args.preset != "desk":
            raise _UsageError("--src is required unless --preset desk generates the fixture corpus")
        src = os.path.join(args.out, "source")
        generate_fixture_corpus(src, seed=args.seed)
        logger.info("generated fixture corpus under %s", src)
    betas = tuple(float(b) for b in args.betas.split(","))
    night = NightParams(v_scale=args.v_scale, gamma_dark=args.gamma_dark)
    manifest = data_mod.synthesize_corpus(src, args.out, A=args.a, betas=betas, night=night,
                                          depth_max=args.depth_max)
    data_mod.save_manifest(manifest, os.path.join(args.out, "manifest.json"))
    _write_header(args.out, args.seed, _args_hash(args, ["a", "betas", "v_scale", "gamma_dark", "depth_max"]))
    print(f"{manifest.variant_count()} nighttime hazy images across {len(manifest.records)} scenes")
    return 0


def _cmd_split(args):
    manifest = data_mod.load_manifest(args.manifest)
    ratio_parts = args.ratio.split(":")
    if len(ratio_parts) != 2:
        raise _UsageError(f"--ratio expects TRAIN:TEST, got {args.ratio!r}")
    ratio = (int(ratio_parts[0]), int(ratio_parts[1]))
    out_path = args.out or args.manifest
    if os.path.exists(out_path) and not args.overwrite:
        raise ToolkitError(f"{out_path} exists; pass --overwrite to replace")
    split = data_mod.split_scenes(manifest, ratio=ratio, seed=args.seed)
    data_mod.save_manifest(split, out_path)
    n_train = len(split.scenes("train"))
    n_test = len(split.scenes("test"))
    print(f"{n_train} train / {n_test} test scenes -> {out_path}")
    return 0


def _cmd_train_decom(args):
    _prepare_out_dir(args.out, args.overwrite)
    cfg = _train_config(args)
    manifest = data_mod.load_manifest(args.manifest, root=args.data_root)
    _write_header(args.out, cfg.seed, config_hash(cfg))
    result = train_stage1(manifest, cfg, out_dir=args.out)
    print(f"stage1 eval cross-reconstruction loss: initial {result.initial_eval['decom']:.4f} "
          f"-> final {result.final_eval['decom']:.4f}")
    return 0


def _cmd_train_full(args):
    _prepare_out_dir(args.out, args.overwrite)
    cfg = _train_config(args)
    manifest = data_mod.load_manifest(args.manifest, root=args.data_root)
    _write_header(args.out, cfg.seed, config_hash(cfg))
    stage1 = args.stage1
    if stage1 is None:
        result1 = train_stage1(manifest, cfg, out_dir=args.out)
        stage1 = result1.path
        print(f"stage1 eval loss: initial {result1.initial_eval['total']:.4f} "
              f"-> final {result1.final_eval['total']:.4f}")
    result = train_stage2(manifest, stage1, cfg, out_dir=args.out)
    print(f"stage2 eval reconstruction loss: initial {result.initial_eval['total']:.4f} "
          f"-> final {result.final_eval['total']:.4f}")
    return 0


def _iter_input_images(path):
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            if name.lower().endswith((".png", ".jpg", ".jpeg")):
                yield os.path.join(path, name)
    else:
        yield path


def _cmd_infer(args):
    from .training import RestorationPipeline

    _prepare_out_dir(args.out, args.overwrite)
    pipeline = RestorationPipeline(args.ckpt)
    _write_header(args.out, pipeline.config.seed, config_hash(pipeline.config))
    count = 0
    for img_path in _iter_input_images(args.input):
        stem = os.path.splitext(os.path.basename(img_path))[0]
        outputs = pipeline.run(imaging.load_image(img_path))
        imaging.save_image(outputs["S_Y"], os.path.join(args.out, f"{stem}_restored.png"))
        if args.intermediates:
            for key in ("I_N", "R_N", "I_Y", "R_Y"):
                imaging.save_image(outputs[key], os.path.join(args.out, f"{stem}_{key}.png"))
        count += 1
    print(f"restored {count} image(s) -> {args.out}")
    return 0


def _make_stage(spec):
    from .training import RestorationPipeline

    if spec == "identity":
        return metrics.CascadeStage(name="identity", fn=lambda img: img)
    if spec.startswith("gamma:"):
        g = float(spec.split(":", 1)[1])
        return metrics.CascadeStage(name=spec, fn=lambda img: imaging.gamma_correct(img, g))
    if spec.startswith("model:"):
        pipeline = RestorationPipeline(spec.split(":", 1)[1])
        return metrics.CascadeStage(name=spec, fn=pipeline)
    if spec.startswith("cmd:"):
        return metrics.CascadeStage(name=spec, command=spec.split(":", 1)[1].split())
    raise _UsageError(f"cannot parse stage {spec!r}; expected identity, gamma:G, model:CKPT or cmd:...")


def _cmd_eval(args):
    from .training import RestorationPipeline

    _prepare_out_dir(args.out, args.overwrite)
    manifest = data_mod.load_manifest(args.manifest, root=args.data_root)
    pipeline = RestorationPipeline(args.ckpt)
    _write_header(args.out, args.seed, _args_hash(args, ["ckpt", "partition"]))
    record = metrics.evaluate(pipeline, manifest, partition=args.partition, out_dir=args.out)
    print(f"{record.count} images: mean SSIM {record.mean_ssim:.4f}, mean PSNR {record.mean_psnr:.2f} dB"
          + (f" ({record.error_count} failed)" if record.error_count else ""))
    return 0


def _cmd_cascade_eval(args):
    if not args.stage:
        raise _UsageError("at least one --stage is required")
    _prepare_out_dir(args.out, args.overwrite)
    manifest = data_mod.load_manifest(args.manifest, root=args.data_root)
    spec = metrics.CascadeSpec([_make_stage(s) for s in args.stage])
    _write_header(args.out, args.seed, _args_hash(args, ["stage", "partition"]))
    record = metrics.evaluate(spec, manifest, partition=args.partition, out_dir=args.out)
    print(f"{record.count} images: mean SSIM {record.mean_ssim:.4f}, mean PSNR {record.mean_psnr:.2f} dB"
          + (f" ({record.error_count} failed)" if record.error_count else ""))
    return 0


def _cmd_grid(args):
    if not args.row:
        raise _UsageError("at least one --row is required")
    _prepare_out_dir(args.out, args.overwrite)
    rows = []
    for row_spec in args.row:
        if "=" not in row_spec:
            raise _UsageError(f"--row expects LABEL=IMG1,IMG2,..., got {row_spec!r}")
        label, paths = row_spec.split("=", 1)
        rows.append((label, [imaging.load_image(p) for p in paths.split(",")]))
    out_path = os.path.join(args.out, "grid.png")
    metrics.emit_comparison_grid(rows, path=out_path)
    _write_header(args.out, args.seed, _args_hash(args, ["row"]))
    print(f"grid -> {out_path}")
    return 0


_HANDLERS = {
    "synthesize": _cmd_synthesize,
    "split": _cmd_split,
    "train-decom": _cmd_train_decom,
    "train-full": _cmd_train_full,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "cascade-eval": _cmd_cascade_eval,
    "grid": _cmd_grid,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        message = str(exc)
        print(f"error: {message}", file=sys.stderr)
        if "invalid choice" in message and argv:
            bad = next((a for a in argv if not a.startswith("-")), "")
            close = difflib.get_close_matches(bad, SUBCOMMANDS, n=1)
            if close:
                print(f"did you mean {close[0]!r}?", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version paths
        return int(exc.code or 0)

    if args.command is None:
        parser.print_help()
        return 1
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", 0) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ToolkitError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
