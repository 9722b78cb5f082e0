"""
Command-line entry point: generate | train | crossval | eval | report.

Exit codes: 0 success, 1 runtime failure (diverged training, I/O), 2 usage or
validation error.
"""
import argparse
import logging
import os
import sys

from models.clip_info import SamplingPolicy, SynthSpec
from models.configs import TrainConfig, config_digest
from models.errors import LsptmError, ValidationError
from models.report_info import EvalReport, FoldResult
from services.backbones import REGISTRY, display_name
from services.checkpoint import load_checkpoint, load_header, load_run_config, save_checkpoint
from services.clip_pipeline import ClipLoaderService
from services.crossval import load_training_clips, per_class_breakdown, run_crossval
from services.dataset import generate_synthetic, load_manifest
from services.metrics import (compare_reports, compute_metrics, emit_report, format_margins, load_report,
                              pool, tally)
from services.settings import Settings, configure_logging
from services.trainer import fit, predict_classes

logger = logging.getLogger("lsptm")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DEFAULT_STRIDE = 2


def _write_bytes(path, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)


def _train_config(args) -> TrainConfig:
    overrides = {"backbone": args.backbone, "seed": getattr(args, "seed", None), "init": getattr(args, "init", None)}
    if args.config:
        return TrainConfig.from_json_file(args.config, **overrides)
    return TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


class LsptmCommands:
    def __init__(self, settings=None):
        self.settings = settings or Settings()

    def cmd_generate(self, args):
        spec = SynthSpec.from_json_file(args.spec)
        manifest = generate_synthetic(spec, args.out, workers=args.workers, progress=self.settings.progress)
        print(manifest)
        return EXIT_OK

    def cmd_train(self, args):
        config = _train_config(args)
        entries = load_manifest(args.manifest)
        clips = load_training_clips(entries, config, config.seed)
        params, trace = fit(clips, config, progress=self.settings.progress)
        for epoch, loss in enumerate(trace, start=1):
            print(f"[{epoch}/{len(trace)}] epoch {epoch}: loss {loss:.6f}")
        save_checkpoint(params, config, args.out)
        print(args.out)
        return EXIT_OK

    def cmd_crossval(self, args):
        config = _train_config(args)
        jobs = args.jobs if args.jobs is not None else self.settings.jobs

        def on_fold(result: FoldResult, done, total):
            c = result.confusion
            print(f"[{done}/{total}] fold {result.fold}: tp={c.tp} fn={c.fn} fp={c.fp} tn={c.tn}")

        report = run_crossval(args.manifest, config, k=args.k, seed=args.seed, jobs=jobs, on_fold=on_fold)
        _write_bytes(args.out, emit_report(report, "json"))
        print(args.out)
        return EXIT_OK

    def cmd_eval(self, args):
        params = load_checkpoint(args.ckpt, expected_backbone=args.backbone)
        header = load_header(args.ckpt)
        run_config = load_run_config(args.ckpt, header)
        model = REGISTRY[params.backbone].config_class.from_dict(params.config)
        mean, std = tuple(header["norm_mean"]), tuple(header["norm_std"])
        # flags override what the checkpoint was trained with
        stride = args.stride
        if stride is None:
            stride = run_config.sampling["stride"] if run_config else DEFAULT_STRIDE
        positive_class = args.positive_class
        if positive_class is None:
            positive_class = run_config.positive_class if run_config else 1
        entries = load_manifest(args.manifest)
        loader = ClipLoaderService(model.input_size, (mean, std))
        clips = loader.load_entries(entries, lambda i, e: SamplingPolicy(model.num_frames, stride))

        predictions = predict_classes(params, clips)
        confusion = tally([c.label for c in clips], predictions, positive_class)
        fold = FoldResult(fold=0, confusion=confusion, metrics=compute_metrics(confusion),
                          test_indices=list(range(len(entries))))
        report = EvalReport(backbone=params.backbone, display_name=display_name(params.backbone),
                            config_digest=header.get("run_digest") or config_digest(params.config),
                            folds=[fold], pooled=pool([confusion]), metrics=compute_metrics(confusion),
                            k=1, seed=0, positive_class=positive_class,
                            per_class=per_class_breakdown(entries, dict(enumerate(predictions.tolist()))))
        _write_bytes(args.out, emit_report(report, "json"))
        print(args.out)
        return EXIT_OK

    def cmd_report(self, args):
        reports = [load_report(path) for path in args.inputs]
        sys.stdout.write(emit_report(reports, args.format).decode("utf-8"))
        if args.compare:
            sys.stdout.write(format_margins(compare_reports(reports, args.compare), args.compare))
        return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="lsptm", description="Laryngoscopic video classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    backbones = sorted(REGISTRY)

    p = sub.add_parser("generate", help="write a synthetic clip dataset")
    p.add_argument("--spec", required=True, help="SynthSpec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train one model on a whole manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", choices=backbones)
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--init", default=None, help="checkpoint path or 'scratch'")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", choices=backbones)
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--k", type=int, help="number of folds (default 10, or the folds fixed in the manifest)")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="parallel folds (default LSPTM_JOBS)")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", choices=backbones, help="reject checkpoints of any other backbone")
    p.add_argument("--stride", type=int, help="sampling stride (default: the one the checkpoint was trained with)")
    p.add_argument("--positive-class", type=int, choices=(0, 1), help="default: the trained positive class")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("report", help="render stored reports")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="report JSON files")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--compare", help="print margins against this backbone")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        settings = configure_logging(Settings())
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    commands = LsptmCommands(settings)
    handler = getattr(commands, f"cmd_{args.command}")
    try:
        return handler(args)
    except ValidationError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LsptmError, OSError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
