"""Command-line entry point: generate, train, evaluate, ablate, dvdp-curve."""

import argparse
import json
import logging
import os
import sys

from .data import (DatasetSplits, SyntheticConfig, default_schema, export_dataset,
                   generate_synthetic_dataset, load_mars_layout, query_gallery_split, split_identities)
from .errors import ReIDError
from .evaluation import cross_dataset_eval, evaluate_model
from .experiment import (ExperimentConfig, LOSS_KEYS, load_config_file, load_splits, run_ablation,
                         run_dvdp_curve, summarize, train)
from .model import load_checkpoint

logger = logging.getLogger("aitl_reid")


def _add_experiment_flags(p):
    p.add_argument("--config", help="JSON experiment config; flags below override it")
    p.add_argument("--data-root", help="MARS-style dataset directory (default: synthetic benchmark)")
    p.add_argument("--identities", type=int, help="synthetic identities (train + test)")
    p.add_argument("--data-seed", type=int, help="synthetic generator seed")
    p.add_argument("--scale", choices=["toy", "full"])
    p.add_argument("--losses", help=f"comma-separated subset of {','.join(LOSS_KEYS)}")
    p.add_argument("--attention", dest="attention", action="store_true", default=None)
    p.add_argument("--no-attention", dest="attention", action="store_false")
    p.add_argument("--temporal-conv", choices=["dilated", "pad1"])
    p.add_argument("-P", type=int, dest="P")
    p.add_argument("-K", type=int, dest="K")
    p.add_argument("-T", type=int, dest="T")
    p.add_argument("--tri-margin", type=float)
    p.add_argument("--aitl-margin", type=float)
    p.add_argument("--aitl-reduction", choices=["sum", "mean"])
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--double", action="store_true", default=None, help="train in float64")
    p.add_argument("--out-dir")


def resolve_config(args):
    """File config first, then every flag that was actually given."""
    cfg = load_config_file(args.config) if args.config else ExperimentConfig()
    over = {}
    for key in ("data_root", "scale", "attention", "temporal_conv", "P", "K", "T", "tri_margin",
                "aitl_margin", "aitl_reduction", "optimizer", "lr", "epochs", "seed", "eval_every",
                "double", "out_dir"):
        value = getattr(args, key, None)
        if value is not None:
            over[key] = value
    if args.losses is not None:
        over["losses"] = [s.strip() for s in args.losses.split(",") if s.strip()]
    synthetic = dict(cfg.synthetic)
    if args.identities is not None:
        synthetic["identities"] = args.identities
    if args.data_seed is not None:
        synthetic["seed"] = args.data_seed
    if synthetic != cfg.synthetic:
        over["synthetic"] = synthetic
    return cfg.replace(**over) if over else cfg


def _dump(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_generate(args):
    cfg = SyntheticConfig(identities=args.identities, tracklets_per_identity=args.tracklets,
                          frames_per_tracklet=(args.min_frames, args.max_frames),
                          occlusion_prob=args.occlusion_prob, seed=args.seed)
    schema = default_schema()
    tracklets = generate_synthetic_dataset(schema, cfg)
    export_dataset(tracklets, args.out_dir, schema)
    _dump({"out_dir": args.out_dir, "tracklets": len(tracklets), "identities": cfg.identities})
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    result = train(cfg, out_dir=cfg.out_dir)
    _dump(result.final.to_json())
    return 0


def _external_splits(root, train_fraction, query_fraction, seed):
    tracklets, schema = load_mars_layout(root)
    _, test = split_identities(tracklets, train_fraction)
    query, gallery = query_gallery_split(test, query_fraction, seed=seed)
    return DatasetSplits(schema, [], query, gallery, tag=os.path.basename(os.path.normpath(root)))


def cmd_evaluate(args):
    model, _ = load_checkpoint(args.checkpoint)
    run_manifest = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "manifest.json")
    if args.config or args.data_root or not os.path.isfile(run_manifest):
        cfg = resolve_config(args)
        train_tag = None
    else:
        with open(run_manifest) as fh:
            saved = json.load(fh)
        cfg = ExperimentConfig.from_json(saved["config"])
        train_tag = saved.get("dataset")
    if args.gallery_from_other_dataset:
        splits = _external_splits(args.gallery_from_other_dataset, cfg.train_fraction,
                                  cfg.query_fraction, cfg.seed)
        result = cross_dataset_eval(model, train_tag or "train", splits, cfg.T, cfg.eval_clips)
    else:
        splits = load_splits(cfg)
        result = evaluate_model(model, splits.query, splits.gallery, cfg.T, cfg.eval_clips)
        result.tag = splits.tag
    out = result.to_json()
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "evaluation.json"), "w") as fh:
            json.dump(out, fh, indent=2)
    _dump(out)
    return 0


def cmd_ablate(args):
    cfg = resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    results = run_ablation(cfg, seeds=seeds, out_dir=cfg.out_dir)
    _dump(summarize(results))
    return 0


def cmd_dvdp_curve(args):
    cfg = resolve_config(args)
    runs = run_dvdp_curve(cfg, out_dir=cfg.out_dir)
    _dump({tag: {"final_dvdp": r.trace.dvdp[-1], "final_mAP": r.final.mAP} for tag, r in runs.items()})
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="aitl-reid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render the synthetic benchmark to disk")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--identities", type=int, default=100)
    p.add_argument("--tracklets", type=int, default=6, help="tracklets per identity")
    p.add_argument("--min-frames", type=int, default=8)
    p.add_argument("--max-frames", type=int, default=16)
    p.add_argument("--occlusion-prob", type=float, default=0.35)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank a query/gallery split with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gallery-from-other-dataset", metavar="ROOT",
                   help="evaluate on the test split of another MARS-style dataset")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train the five ablation variants")
    _add_experiment_flags(p)
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dvdp-curve", help="train with and without AITL, recording DVDP per epoch")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_dvdp_curve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ReIDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
