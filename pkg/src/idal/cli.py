"""``idal`` command line: synth, train, segment, loo.

Exit codes: 0 ok, 2 configuration, 3 training, 4 segmentation,
5 evaluation preconditions.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .evaluation import METHODS, EvaluationError, leave_one_out, write_reports
from .forest import ForestError
from .naf import NafError
from .pipeline import (
    IdalConfig,
    IdalModel,
    PipelineError,
    SimilarityMatrix,
    TrainingError,
    prepare_dataset,
    prepare_query,
    segment,
    segment_oracle_prepared,
    segment_pooled_prepared,
    similarity_to_target,
    train_offline_prepared,
)
from .preprocess import NormalizationError
from .synth import SynthConfig, SynthError, generate_dataset
from .volume_io import CaseError, VolumeIOError, load_case, load_dataset, read_manifest

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_SEGMENT, EXIT_EVAL = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def build_config(args) -> IdalConfig:
    """Config file first, then any flag given on the command line."""
    doc: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot read config {args.config}: {exc}") from exc
        known = {f.name for f in fields(IdalConfig)}
        unknown = set(doc) - known
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config keys: {sorted(unknown)}")
    overrides = {"seed": args.seed, "k": args.k, "n_trees": args.trees, "threads": args.threads}
    doc.update({key: v for key, v in overrides.items() if v is not None})
    doc.setdefault("threads", default_threads())
    try:
        cfg = IdalConfig.from_dict(doc)
    except (TypeError, ValueError, NafError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid configuration: {exc}") from exc
    if cfg.k < 1 or cfg.n_trees < 1 or cfg.threads < 1:
        raise CliError(EXIT_CONFIG, "k, trees and threads must be >= 1")
    return cfg


def load_cases(manifest_path):
    try:
        return load_dataset(read_manifest(manifest_path))
    except (VolumeIOError, CaseError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def read_sim(path) -> SimilarityMatrix:
    try:
        return SimilarityMatrix.from_csv(path)
    except (OSError, ValueError, PipelineError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot reuse similarity matrix {path}: {exc}") from exc


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(n_cases=args.cases, n_clusters=args.clusters, dims=(args.dims,) * 3,
                          seed=args.seed)
        manifest = generate_dataset(cfg, args.out)
    except SynthError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    cases = load_cases(args.manifest)
    sim = read_sim(args.reuse_sim) if args.reuse_sim else None
    if sim is not None and set(sim.case_ids) != {c.case_id for c in cases}:
        raise CliError(EXIT_CONFIG, "reused similarity matrix ids do not match the manifest")
    try:
        for case in cases:
            if case.gt_mask is None or case.sur_mask is None:
                raise TrainingError(case.case_id, "training needs gt and sur masks")
        prepared, csf = prepare_dataset(cases, cfg)
        model = train_offline_prepared(prepared, csf, cfg, sim)
    except (TrainingError, ForestError, NafError, NormalizationError, PipelineError) as exc:
        raise CliError(EXIT_TRAINING, f"training failed: {exc}") from exc
    model.manifest = str(Path(args.manifest).resolve())
    model.save(args.out)
    print(json.dumps({"model": str(args.out), "training_ids": model.training_ids}))
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = build_config(args)
    try:
        manifest = read_manifest(args.manifest)
        entry = manifest.entry(args.case)
    except (VolumeIOError, CaseError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    except KeyError:
        raise CliError(EXIT_CONFIG, f"case {args.case} not in {args.manifest}") from None
    try:
        target = load_case(entry)
    except (VolumeIOError, CaseError) as exc:
        raise CliError(EXIT_SEGMENT, str(exc)) from exc

    try:
        if args.method == "idal":
            if not args.model:
                raise CliError(EXIT_CONFIG, "--method idal needs --model")
            model = IdalModel.load(args.model)
            if args.k is None:
                cfg = model.config
            result = segment(model, target, cfg.k)
        else:
            if args.method == "oracle" and target.gt_mask is None:
                raise CliError(EXIT_SEGMENT, f"{target.case_id}: the oracle needs the target's gt mask")
            rest = [load_case(e) for e in manifest.cases if e.case_id != target.case_id]
            if not rest:
                raise CliError(EXIT_CONFIG, "the manifest holds no training cases besides the target")
            prepared, csf = prepare_dataset(rest, cfg)
            bundles = {pc.case_id: pc.bundle for pc in prepared if pc.bundle is not None}
            if not bundles:
                raise CliError(EXIT_TRAINING, "no training case has a SUR mask")
            query = prepare_query(target, csf, cfg)
            if args.method == "pooled":
                result = segment_pooled_prepared(list(bundles.values()), query, cfg)
            else:
                sim = read_sim(args.reuse_sim) if args.reuse_sim else None
                if sim is None:
                    sim = similarity_to_target(prepared, query, target.gt_mask.data.astype(bool), cfg)
                result = segment_oracle_prepared(bundles, sim, query, cfg)
    except CliError:
        raise
    except (TrainingError, ForestError, NafError) as exc:
        raise CliError(EXIT_TRAINING, f"training failed: {exc}") from exc
    except (NormalizationError, PipelineError, VolumeIOError, CaseError, KeyError) as exc:
        raise CliError(EXIT_SEGMENT, f"segmentation failed: {exc}") from exc

    result.save(args.out, target.t1)
    print(json.dumps({"case_id": target.case_id, "method": args.method,
                      "selected_ids": result.selected_case_ids, "out": str(args.out)}))
    return EXIT_OK


def cmd_loo(args) -> int:
    cfg = build_config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods or set(methods) - set(METHODS):
        raise CliError(EXIT_CONFIG, f"--methods must be a comma list from {METHODS}")
    cases = load_cases(args.manifest)
    need = max(cfg.k + 1, 4) if set(methods) & {"idal", "oracle"} else 4
    if len(cases) < need:
        raise CliError(EXIT_EVAL, f"leave-one-out needs at least {need} cases, got {len(cases)}")
    sim = read_sim(args.reuse_sim) if args.reuse_sim else None
    try:
        prepared, _ = prepare_dataset(cases, cfg)
        report = leave_one_out(prepared, methods, cfg, sim)
    except EvaluationError as exc:
        raise CliError(EXIT_EVAL, str(exc)) from exc
    except (TrainingError, ForestError, NafError, NormalizationError, PipelineError) as exc:
        raise CliError(EXIT_TRAINING, f"training failed: {exc}") from exc
    summary = write_reports(report, args.out)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, manifest: bool = True) -> None:
    if manifest:
        p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("-k", type=int, default=None, help="neighbours used by the input-specific classifier")
    p.add_argument("--trees", type=int, default=None, help="trees per voxel classifier")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: available cores)")
    p.add_argument("--reuse-sim", default=None, help="similarity matrix CSV to reuse instead of rebuilding")
    p.add_argument("--config", default=None, help="JSON run config; flags override it")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="idal", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=18)
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--dims", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="build the similarity matrix and fit the case retrieval forest")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one manifest case")
    _common(p)
    p.add_argument("--case", required=True, help="case id inside --manifest")
    p.add_argument("--method", choices=METHODS, default="idal")
    p.add_argument("--model", default=None, help="model directory from `idal train` (method idal)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("loo", help="leave-one-out comparison with CSV/JSON reports")
    _common(p)
    p.add_argument("--methods", default=",".join(METHODS))
    p.set_defaults(func=cmd_loo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"idal {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
