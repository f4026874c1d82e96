"""
Command-line surface.

    python main.py gen-data --out data/synthetic
    python main.py pretrain --data data/synthetic --config configs/desk.json
    python main.py finetune --data data/synthetic --checkpoint runs/stage1.ckpt
    python main.py eval --data data/synthetic --checkpoint runs/stage2.ckpt
    python main.py gradcheck
    python main.py regress-joints --regressor reg.bin --out keypoints/ mesh_*.obj
    python main.py export-features --data data/synthetic --checkpoint runs/stage2.ckpt --split query
    python main.py ablation --seeds 0 1 2

Exit codes: 0 success, 1 validation error (bad flags, config, input files),
2 runtime failure.
"""

import argparse
import logging
import os
import shutil
import sys
from typing import List, Optional, Sequence

import tabulate
from dotenv import load_dotenv

from src.ablation import format_report, run_ablation, summarize, write_ablation
from src.config import ExperimentConfig, load_config
from src.errors import EXIT_OK, EXIT_RUNTIME, ConfigurationError, exit_code_for
from src.evaluation import evaluate_features, load_features, save_features, write_report
from src.experiment import build_model, evaluate_cross_modal, evaluate_retrieval, load_graph
from src.gradcheck import DEFAULT_SEEDS, TOLERANCE, check_names, run_gradchecks
from src.ingest import JointRegressor, regress_mesh_sequence, write_skeleton_json
from src.model import load_checkpoint, save_checkpoint
from src.run_log import RunLog
from src.synthetic import MANIFEST, SPLITS, generate_dataset, load_dataset, save_dataset
from src.trainer import FEATURE_KINDS, extract_features, retrieval_kind, train_stage1, train_stage2

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class CommandParser(argparse.ArgumentParser):
    """Argument errors become ConfigurationError so they map to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(f"{self.prog}: {message}")


def setup_logging() -> None:
    load_dotenv()
    level = os.getenv("REID_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(format=LOG_FORMAT, level=getattr(logging, level, logging.INFO))


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.overrides, args.seed)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if not args.deterministic:
        logger.warning("--no-deterministic has no effect: every code path is single-threaded and seeded")
    return cfg


def _target(path: str, force: bool) -> str:
    if os.path.exists(path) and not force:
        raise ConfigurationError(f"{path} already exists (pass --force to overwrite)")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    return path


def _output(args, cfg: ExperimentConfig, name: str) -> str:
    return args.out or os.path.join(cfg.output_dir, name)


def _fresh_log(checkpoint_path: str) -> RunLog:
    """Epoch log next to the checkpoint; a rerun starts a new file."""
    path = os.path.splitext(checkpoint_path)[0] + ".jsonl"
    if os.path.exists(path):
        os.remove(path)
    return RunLog(path)


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    root = args.out
    if os.path.exists(os.path.join(root, MANIFEST)):
        if not args.force:
            raise ConfigurationError(f"{root} already holds a dataset (pass --force to overwrite)")
        shutil.rmtree(root)
    splits = generate_dataset(cfg.data, load_graph(cfg))
    manifest = save_dataset(root, splits, cfg.data)
    print(f"Wrote {manifest}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _target(_output(args, cfg, "stage1.ckpt"), args.force)
    splits = load_dataset(args.data)
    model = build_model(cfg, splits)
    log = _fresh_log(out)
    train_stage1(model, splits, cfg, log)
    save_checkpoint(model, out)
    result = evaluate_cross_modal(model, splits, cfg)
    write_report(os.path.splitext(out)[0] + ".metrics.json", result, extra={"protocol": "skeleton-to-visual"})
    print(f"Stage 1 checkpoint: {out} (cross-modal rank1={result.rank(1):.4f}, mAP={result.mAP:.4f})")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _target(_output(args, cfg, "stage2.ckpt"), args.force)
    splits = load_dataset(args.data)
    model = load_checkpoint(build_model(cfg, splits), args.checkpoint)
    log = _fresh_log(out)
    train_stage2(model, splits, cfg, log)
    save_checkpoint(model, out)
    print(f"Stage 2 checkpoint: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.query_features or args.gallery_features:
        if not (args.query_features and args.gallery_features):
            raise ConfigurationError("--query-features and --gallery-features go together")
        query, gallery = load_features(args.query_features), load_features(args.gallery_features)
        result = evaluate_features(query.features, query.pids, query.camids,
                                   gallery.features, gallery.pids, gallery.camids,
                                   exclude_same_camera=cfg.eval.exclude_same_camera)
        protocol = "features"
    else:
        if not (args.data and args.checkpoint):
            raise ConfigurationError("eval needs --data and --checkpoint, or feature files")
        splits = load_dataset(args.data)
        model = load_checkpoint(build_model(cfg, splits), args.checkpoint)
        if args.cross_modal:
            result, protocol = evaluate_cross_modal(model, splits, cfg), "skeleton-to-visual"
        else:
            result, protocol = evaluate_retrieval(model, splits, cfg), retrieval_kind(cfg)
    report_path = _target(_output(args, cfg, "metrics.json"), True)
    report = write_report(report_path, result, per_query=cfg.eval.per_query, extra={"protocol": protocol})
    rows = [["mAP", f"{report['mAP']:.4f}"]] + [[f"Rank-{k}", f"{v:.4f}"] for k, v in report["cmc"].items()]
    print(tabulate.tabulate(rows, headers=["Metric", "Value"], tablefmt="grid"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.only or check_names()
    unknown = sorted(set(names) - set(check_names()))
    if unknown:
        raise ConfigurationError(f"unknown gradcheck names: {unknown}")
    seed = args.seed if args.seed is not None else 0
    results = run_gradchecks(names, seeds=args.seeds, base_seed=seed)
    rows = [[r.name, r.seeds, f"{r.max_error:.3e}", "pass" if r.passed else "FAIL"] for r in results]
    print(tabulate.tabulate(rows, headers=["Check", "Seeds", "Max error", f"tol {TOLERANCE:g}"], tablefmt="grid"))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"{len(failed)} gradient checks above tolerance: {failed}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_regress_joints(args) -> int:
    regressor = JointRegressor.load(args.regressor)
    seq = regress_mesh_sequence(args.meshes, regressor, pid=args.pid, camid=args.camid)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigurationError(f"{args.out} is not empty (pass --force to overwrite)")
    write_skeleton_json(args.out, seq, regressor.joint_names)
    print(f"Wrote {seq.length} frames of keypoints to {args.out}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    cfg = _config(args)
    splits = load_dataset(args.data)
    model = load_checkpoint(build_model(cfg, splits), args.checkpoint)
    kind = args.kind or retrieval_kind(cfg)
    features = extract_features(model, splits.split(args.split), cfg, kind)
    out = _target(_output(args, cfg, f"{args.split}.{kind}.feat"), args.force)
    path, sidecar = save_features(out, features)
    print(f"Wrote {len(features.pids)} {kind} features to {path} (+ {sidecar})")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = _config(args)
    frame = run_ablation(cfg, args.seeds, args.variants)
    summary = summarize(frame)
    out = _target(_output(args, cfg, "ablation.json"), args.force)
    write_ablation(out, frame, summary)
    print(format_report(summary))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="Seed for every random stream")
    p.add_argument("--force", action="store_true", help="Overwrite existing outputs")
    if training:
        p.add_argument("--config", default=None, help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="Config override, repeatable")
        p.add_argument("--output-dir", default=None, help="Directory for default output paths")
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                       help="Bitwise-reproducible execution (default on)")


def build_parser() -> argparse.ArgumentParser:
    parser = CommandParser(prog="reid", description="Skeleton-guided video person re-identification")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    p = subparsers.add_parser("gen-data", help="Generate the synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True, help="Dataset directory")
    p.set_defaults(handler=cmd_gen_data)

    p = subparsers.add_parser("pretrain", help="Stage 1: skeleton-image contrastive alignment")
    _common(p)
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--out", default=None, help="Checkpoint path (default <output-dir>/stage1.ckpt)")
    p.set_defaults(handler=cmd_pretrain)

    p = subparsers.add_parser("finetune", help="Stage 2: identity finetuning")
    _common(p)
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--checkpoint", required=True, help="Stage-1 checkpoint")
    p.add_argument("--out", default=None, help="Checkpoint path (default <output-dir>/stage2.ckpt)")
    p.set_defaults(handler=cmd_finetune)

    p = subparsers.add_parser("eval", help="Retrieval metrics (mAP, CMC)")
    _common(p)
    p.add_argument("--data", default=None, help="Dataset directory")
    p.add_argument("--checkpoint", default=None, help="Model checkpoint")
    p.add_argument("--cross-modal", action="store_true", help="Skeleton queries against a visual gallery")
    p.add_argument("--query-features", default=None, help="Feature file for queries")
    p.add_argument("--gallery-features", default=None, help="Feature file for the gallery")
    p.add_argument("--out", default=None, help="Report path (default <output-dir>/metrics.json)")
    p.set_defaults(handler=cmd_eval)

    p = subparsers.add_parser("gradcheck", help="Finite-difference gradient checks")
    _common(p, training=False)
    p.add_argument("--seeds", type=int, default=DEFAULT_SEEDS, help="Random instances per check")
    p.add_argument("--only", nargs="+", default=None, metavar="NAME", help="Run a subset of checks")
    p.set_defaults(handler=cmd_gradcheck)

    p = subparsers.add_parser("regress-joints", help="Regress 3D keypoints from .obj meshes")
    _common(p, training=False)
    p.add_argument("--regressor", required=True, help="Joint regressor file")
    p.add_argument("--out", required=True, help="Directory for frame_XXXX.json files")
    p.add_argument("--pid", type=int, default=-1)
    p.add_argument("--camid", type=int, default=-1)
    p.add_argument("meshes", nargs="+", help=".obj files in frame order")
    p.set_defaults(handler=cmd_regress_joints)

    p = subparsers.add_parser("export-features", help="Write retrieval features for a split")
    _common(p)
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--checkpoint", required=True, help="Model checkpoint")
    p.add_argument("--split", choices=SPLITS, default="query")
    p.add_argument("--kind", choices=FEATURE_KINDS, default=None)
    p.add_argument("--out", default=None, help="Feature file path")
    p.set_defaults(handler=cmd_export_features)

    p = subparsers.add_parser("ablation", help="Train the module ablation grid over seeds")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=None)
    p.add_argument("--out", default=None, help="JSON report path (default <output-dir>/ablation.json)")
    p.set_defaults(handler=cmd_ablation)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run one subcommand and return its exit code."""
    setup_logging()
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
        return args.handler(args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        return exit_code_for(e)


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run(argv))
