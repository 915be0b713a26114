"""Command-line entry point: ``flash2ambient {train,infer,eval,attn,synth}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import data, imagecore, metrics, networks, trainer

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

log = logging.getLogger("flash2ambient")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclasses.dataclass
class CommandOutcome:
    exit_code: int
    summary: str
    artifacts: list[Path] = dataclasses.field(default_factory=list)


def _add_config_flags(p: argparse.ArgumentParser):
    for f in dataclasses.fields(trainer.RunConfig):
        names = {f"--{f.name}", f"--{f.name.replace('_', '-')}"}
        if f.name == "lam":
            names |= {"--lambda"}
        p.add_argument(*sorted(names), dest=f.name, default=None, metavar="VALUE")


def cmd_train(args) -> CommandOutcome:
    overrides = {f: getattr(args, f) for f in trainer.config_fields() if getattr(args, f) is not None}
    try:
        values = trainer.read_config_file(args.config) if args.config else {}
        values.update(trainer.parse_overrides(overrides))
        config = trainer.RunConfig(**values)
    except (trainer.ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from exc
    if config.manifest is None:
        raise UsageError("a manifest is required (config key or --manifest)")
    try:
        bundle, rows = trainer.train(config, resume=args.resume)
    except (
        trainer.ConfigError,
        data.ManifestError,
        networks.CheckpointError,
        networks.ArchiveError,
        FileNotFoundError,
    ) as exc:
        raise DataError(str(exc)) from exc
    out = Path(config.output_dir)
    summary = f"trained {config.ablation.value} for {bundle.training_meta['epoch']} epoch(s), {len(rows)} step(s)"
    if rows:
        last = rows[-1]
        summary += f"; last R={last['reconstruction']:.4f} L={last['total_g']:.4f}"
    summary += f"; discriminator {'allocated' if bundle.discriminator is not None else 'absent'}"
    return CommandOutcome(EXIT_OK, summary, [out / "final.safetensors", out / "train_log.jsonl"])


def _collect_inputs(paths: list[str]) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        else:
            files.append(p)
    return files


def cmd_infer(args) -> CommandOutcome:
    bundle = _load_bundle(args.checkpoint)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, failed = [], []
    for path in _collect_inputs(args.inputs):
        try:
            img = imagecore.load_image(path)
        except (OSError, ValueError) as exc:
            print(f"error: cannot read {path}: {exc}", file=sys.stderr)
            failed.append(path)
            continue
        target = out_dir / f"{path.stem}.png"
        if target.exists():
            log.info("overwriting %s", target)
        imagecore.save_image(networks.infer_image(bundle.generator, img), target)
        written.append(target)
    summary = f"wrote {len(written)} image(s), {len(failed)} failed"
    return CommandOutcome(EXIT_DATA if failed else EXIT_OK, summary, written)


def _load_bundle(path) -> networks.ModelBundle:
    try:
        return networks.load_checkpoint(path)
    except networks.CheckpointError as exc:
        raise DataError(str(exc)) from exc


def cmd_eval(args) -> CommandOutcome:
    bundle = _load_bundle(args.checkpoint)
    try:
        manifest = data.load_manifest(args.manifest)
    except (OSError, data.ManifestError) as exc:
        raise DataError(str(exc)) from exc
    if not manifest.split("test"):
        raise DataError(f"{args.manifest}: test split is empty")
    report = metrics.evaluate(manifest, bundle)
    report_path = Path(args.report) if args.report else Path(args.checkpoint).with_suffix(".eval.tsv")
    report.write(report_path)
    print(metrics.format_table([(args.label, report.mean_psnr, report.mean_ssim)]))
    for pid, msg in report.errors:
        print(f"error: {pid}: {msg}", file=sys.stderr)
    code = EXIT_DATA if report.errors else EXIT_OK
    return CommandOutcome(code, f"evaluated {len(report.per_image)} pair(s)", [report_path])


def cmd_attn(args) -> CommandOutcome:
    try:
        flash = imagecore.load_image(args.flash)
        ambient = imagecore.load_image(args.ambient)
        m = imagecore.attention_map(ambient, flash)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    imagecore.save_attention_png(m, args.output)
    return CommandOutcome(EXIT_OK, f"attention mean {m.mean():.4f}, min {m.min():.4f}", [Path(args.output)])


def cmd_synth(args) -> CommandOutcome:
    if args.count < 0 or args.test_count < 0:
        raise UsageError("counts must be non-negative")
    falloff = None if args.no_falloff else tuple(args.falloff)
    manifest, written = data.write_synth_dataset(
        args.output,
        args.count,
        args.test_count,
        seed=args.seed,
        size=(args.height, args.width),
        shadow_polygons=args.shadows,
        flash_falloff=falloff,
        noise_level=args.noise,
    )
    return CommandOutcome(EXIT_OK, f"wrote {args.count + args.test_count} pair(s) and {manifest}", written)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flash2ambient", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="translate flash images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mean PSNR/SSIM on the manifest's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", help="report path (default: next to the checkpoint)")
    p.add_argument("--label", default="Ours")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn", help="write the attention map of a flash/ambient pair")
    p.add_argument("flash")
    p.add_argument("ambient")
    p.add_argument("output")
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("synth", help="write a synthetic paired dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--count", type=int, default=8, help="train pairs")
    p.add_argument("--test-count", type=int, default=0, help="additional test pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--shadows", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--falloff", type=float, nargs=3, default=(1.8, 0.5, 0.2), metavar=("PEAK", "FLOOR", "WIDTH"))
    p.add_argument("--no-falloff", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def run(argv=None) -> CommandOutcome:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(EXIT_USAGE, str(exc))
    except SystemExit as exc:  # --help
        return CommandOutcome(int(exc.code or 0), "")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        outcome = args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(EXIT_USAGE, str(exc))
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(EXIT_DATA, str(exc))
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return CommandOutcome(EXIT_RUNTIME, str(exc))
    if outcome.summary:
        print(outcome.summary)
    return outcome


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
