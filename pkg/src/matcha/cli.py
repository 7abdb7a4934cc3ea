"""Command-line surface: fuse, train, match, eval-geometric, eval-semantic,
eval-temporal, heatmap, synth.

Exit codes: 0 ok, 2 input contract violation, 3 file format error,
4 numerical failure. All artifacts are written atomically; configuration is
validated before anything is written. MATCHA_DATA_DIR provides the default
root for relative dataset paths.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from matcha.datasets import (
    BenchConfig,
    load_geometric_pairs,
    load_semantic_pairs,
    load_temporal_sequences,
    write_benchmark,
)
from matcha.errors import ConfigError, DomainError, FormatError, MatchaError
from matcha.evaluate import (
    evaluate_geometric,
    evaluate_semantic,
    evaluate_temporal,
    report_to_json,
    report_to_text,
    write_pgm,
    write_report,
)
from matcha.featuremap import read_feature_map, feature_file_name, write_feature_map
from matcha.fusion import (
    FusionConfig,
    fusion_forward,
    merge_partial,
    merge_unified,
    read_params,
    write_params,
)
from matcha.geometry import RansacConfig
from matcha.matching import (
    mutual_nn_match,
    read_keypoints,
    sample_descriptors,
    similarity_heatmap,
    write_matches,
)
from matcha.losses import LossConfig
from matcha.synth import PoseSceneConfig
from matcha.train import train, train_config_from_json, TrainConfig

DATA_DIR_ENV = "MATCHA_DATA_DIR"


def _resolve_dataset(path):
    if os.path.isabs(path) or os.path.exists(path):
        return path
    root = os.environ.get(DATA_DIR_ENV)
    if root:
        candidate = os.path.join(root, path)
        if os.path.exists(candidate):
            return candidate
    return path


def _load_run_config(path):
    """Optional JSON with sections overriding per-command defaults."""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise DomainError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return doc


def _section(doc, key, cls):
    if key not in doc:
        return None
    body = doc[key]
    if not isinstance(body, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(body) - known
    if unknown:
        raise ConfigError(f"unknown fields in {key!r}: {sorted(unknown)}")
    return cls(**body)


def _common_flags(parser):
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=0, help="random seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads")
    parser.add_argument("--report", choices=("json", "text"), default="json")


def _alphas(text):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad alphas {text!r}; expected comma-separated floats") from None
    return values


# -- commands ------------------------------------------------------------


def cmd_fuse(args):
    doc = _load_run_config(args.config)
    config = _section(doc, "fusion", FusionConfig) or FusionConfig()
    params = read_params(args.params, expected_config=config)
    semantic = read_feature_map(args.semantic)
    geometric = read_feature_map(args.geometric)
    for fmap, want, label in ((semantic, "semantic_raw", "semantic"),
                              (geometric, "geometric_raw", "geometric")):
        if fmap.role != want:
            raise DomainError(f"{label} input has role {fmap.role!r}, expected {want!r}")
    dino = None
    if not args.no_dino:
        if args.dino is None:
            raise DomainError("--dino is required unless --no-dino is given")
        dino = read_feature_map(args.dino)
        if dino.role != "dino":
            raise DomainError(f"dino input has role {dino.role!r}, expected 'dino'")
    sem_fused, geo_fused = fusion_forward(semantic, geometric, config, params)
    if dino is None:
        out = merge_partial(geo_fused, sem_fused, config)
    else:
        out = merge_unified(geo_fused, sem_fused, dino, config)
    path = args.output
    if not path.endswith(".mtf"):
        path = feature_file_name(path, out.role)
    write_feature_map(path, out)
    ds = config.semantic_channel_stride
    dt = config.dino_channel_stride
    print(f"semantic stride {ds}, object stride {dt}")
    print(
        f"channels: geometric {config.out_dim_geometric} + semantic "
        f"{config.out_dim_semantic}/{ds} = {config.merged_dim}"
        + ("" if dino is None else
           f"; + object {config.dino_dim}/{dt} = {config.unified_dim}")
    )
    print(f"wrote {out.channels}-channel {out.role} map to {path}")
    return 0


def cmd_train(args):
    with open(args.config, "r", encoding="utf-8") as f:
        config = train_config_from_json(f.read())
    config.validate_scene_dims()
    progress = None
    if args.verbose:
        def progress(row):
            if row.step % 100 == 0:
                print(f"step {row.step} stage {row.stage} loss {row.loss_total:.4f}",
                      flush=True)
    params, _ = train(
        config,
        log_path=args.log,
        checkpoint_path=args.checkpoint,
        checkpoint_every=args.checkpoint_every,
        resume_from=args.resume,
        progress=progress,
    )
    write_params(args.output_params, params)
    print(f"wrote params to {args.output_params}" + (f" and log to {args.log}" if args.log else ""))
    return 0


def cmd_match(args):
    map_a = read_feature_map(args.map_a)
    map_b = read_feature_map(args.map_b)
    kps_a = read_keypoints(args.keypoints_a)
    kps_b = read_keypoints(args.keypoints_b)
    normalize = not args.raw_similarity
    matches = mutual_nn_match(
        sample_descriptors(map_a, kps_a, normalize=normalize),
        sample_descriptors(map_b, kps_b, normalize=normalize),
    )
    write_matches(args.output, matches)
    print(f"wrote {len(matches)} matches to {args.output}")
    return 0


def cmd_eval_geometric(args):
    doc = _load_run_config(args.config)
    ransac = _section(doc, "ransac", RansacConfig) or RansacConfig(seed=args.seed)
    kind, pairs = load_geometric_pairs(_resolve_dataset(args.dataset))
    if not pairs:
        print("no pairs in dataset", file=sys.stderr)
        write_report(args.output, {"protocol": "geometric", "num_pairs": 0, "pairs": []},
                     args.report)
        return 0
    report = evaluate_geometric(pairs, ransac, threads=args.threads,
                                normalize=not args.raw_similarity)
    write_report(args.output, report, args.report)
    _print_summary(report)
    return 0


def cmd_eval_semantic(args):
    doc = _load_run_config(args.config)
    alphas = _alphas(args.alphas) if args.alphas else tuple(doc.get("alphas", (0.05, 0.1, 0.15)))
    pairs = load_semantic_pairs(_resolve_dataset(args.dataset))
    report = evaluate_semantic(pairs, alphas=alphas, norm_mode=args.norm,
                               threads=args.threads,
                               normalize=not args.raw_similarity)
    write_report(args.output, report, args.report)
    _print_summary(report)
    return 0


def cmd_eval_temporal(args):
    doc = _load_run_config(args.config)
    alphas = _alphas(args.alphas) if args.alphas else tuple(doc.get("alphas", (0.05, 0.1, 0.15)))
    sequences = load_temporal_sequences(_resolve_dataset(args.dataset))
    reports = [
        evaluate_temporal(seq, alphas=alphas, threads=args.threads,
                          normalize=not args.raw_similarity)
        for seq in sequences
    ]
    merged = {
        "protocol": "temporal",
        "alphas": list(alphas),
        "num_sequences": len(reports),
        "sequences": reports,
    }
    scored = [r["pck_mean"] for r in reports if "pck_mean" in r]
    if scored:
        merged["pck_mean"] = [float(v) for v in np.mean(scored, axis=0)]
    if args.report == "json":
        from matcha.ioutil import atomic_write_text

        atomic_write_text(args.output, report_to_json(merged))
    else:
        from matcha.ioutil import atomic_write_text

        parts = [report_to_text(r) for r in reports]
        atomic_write_text(args.output, "\n".join(parts))
    _print_summary(merged)
    return 0


def cmd_heatmap(args):
    query_map = read_feature_map(args.query_map)
    target_map = read_feature_map(args.target_map)
    try:
        x, y = (float(v) for v in args.point.split(","))
    except ValueError:
        raise ConfigError(f"bad --point {args.point!r}; expected X,Y") from None
    heat = similarity_heatmap(query_map, (x, y), target_map)
    write_pgm(args.output, heat.data)
    print(f"wrote {heat.width}x{heat.height} heatmap to {args.output}")
    return 0


def cmd_synth(args):
    doc = _load_run_config(args.config)
    pose_cfg = _section(doc, "pose_scene", PoseSceneConfig)
    kwargs = {k: v for k, v in doc.items() if k not in ("pose_scene",)}
    known = {f.name for f in dataclasses.fields(BenchConfig)}
    unknown = set(kwargs) - known
    if unknown:
        raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
    kwargs.update(kind=args.kind, count=args.count, seed=args.seed)
    if pose_cfg is not None:
        kwargs["pose"] = pose_cfg
    cfg = BenchConfig(**kwargs)
    out = args.output
    if not os.path.isabs(out):
        root = os.environ.get(DATA_DIR_ENV)
        if root and not os.path.exists(os.path.dirname(out) or "."):
            out = os.path.join(root, out)
    manifest = write_benchmark(out, cfg)
    n = len(manifest.get("pairs", manifest.get("sequences", [])))
    print(f"wrote {cfg.kind} benchmark with {n} entries to {out}")
    return 0


def _print_summary(report):
    for key in ("mma_mean", "pose_auc", "pck_mean"):
        if key in report:
            print(f"{key}: {['%.4f' % v for v in report[key]]}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="matcha",
        description="Unified correspondence features: fusion, training, matching, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse raw feature maps into a unified descriptor map")
    _common_flags(p)
    p.add_argument("--semantic", required=True, help="semantic_raw MTF file")
    p.add_argument("--geometric", required=True, help="geometric_raw MTF file")
    p.add_argument("--dino", help="object-level (dino role) MTF file")
    p.add_argument("--no-dino", action="store_true",
                   help="emit the lighter merged map without the object branch")
    p.add_argument("--params", required=True, help="MFP params file")
    p.add_argument("--output", required=True, help="output stem or .mtf path")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("train", help="run two-stage training")
    _common_flags(p)
    p.add_argument("--config", required=True, help="TrainConfig JSON")
    p.add_argument("--output-params", required=True)
    p.add_argument("--log", help="loss log CSV path")
    p.add_argument("--checkpoint", help="checkpoint npz path")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", help="resume from checkpoint npz")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("match", help="mutual nearest-neighbor matching")
    _common_flags(p)
    p.add_argument("--map-a", required=True)
    p.add_argument("--map-b", required=True)
    p.add_argument("--keypoints-a", required=True)
    p.add_argument("--keypoints-b", required=True)
    p.add_argument("--output", required=True, help="matches CSV")
    p.add_argument("--raw-similarity", action="store_true",
                   help="match on raw dot products instead of cosines")
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("eval-geometric", help="MMA / pose AUC protocol")
    _common_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--raw-similarity", action="store_true")
    p.set_defaults(fn=cmd_eval_geometric)

    p = sub.add_parser("eval-semantic", help="PCK protocol with dense argmax")
    _common_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--alphas", help="comma-separated increasing thresholds")
    p.add_argument("--norm", choices=("bbox", "image"), default="bbox")
    p.add_argument("--raw-similarity", action="store_true")
    p.set_defaults(fn=cmd_eval_semantic)

    p = sub.add_parser("eval-temporal", help="first-frame-to-all PCK protocol")
    _common_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--alphas", help="comma-separated increasing thresholds")
    p.add_argument("--raw-similarity", action="store_true")
    p.set_defaults(fn=cmd_eval_temporal)

    p = sub.add_parser("heatmap", help="query-point cosine similarity heatmap (PGM)")
    _common_flags(p)
    p.add_argument("--query-map", required=True)
    p.add_argument("--target-map", required=True)
    p.add_argument("--point", required=True, help="query image point X,Y")
    p.add_argument("--output", required=True, help="output PGM path")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("synth", help="materialize a synthetic benchmark directory")
    _common_flags(p)
    p.add_argument("--kind", required=True,
                   choices=("homography", "pose", "semantic", "temporal"))
    p.add_argument("--output", required=True, help="benchmark directory")
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(fn=cmd_synth)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MatchaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
