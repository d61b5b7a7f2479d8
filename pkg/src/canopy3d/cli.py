"""Command-line front end wiring every stage into one reproducible run.

Subcommands: synth, segment, describe, encode, train, eval, pipeline.
All file outputs go through temp-file-plus-rename so a failed command
leaves no partial files; datasets signal completeness by writing their
manifest last.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import tempfile
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .cloud import PLY_FORMAT, PointCloud, compute_resolution, load_cloud, save_cloud
from .config import (PipelineConfig, derive_seed, load_config,
                     config_to_toml, validate_config)
from .descriptors import compute_descriptors, load_descriptors, save_descriptors
from .encoding import fit_gmm, fit_kmeans, save_codebook, save_gmm
from .errors import (ConfigError, ModelBundleError, NoCanopyError,
                     PipelineError)
from .harness import (LOCAL_KINDS, NORMAL_RADIUS_FACTOR, evaluate, fit_models,
                      load_bundle, prepare_plant, save_bundle, split_dataset)
from .keypoints import detect_keypoints
from .network import forward_aggregated, forward_global, sample_pointset
from .normals import estimate_normals
from .segmentation import run_vccs, save_segmentation, segment_canopy
from .synth import (PlantParams, generate_dataset, read_manifest,
                    write_dataset)


def _synth_params(config: PipelineConfig) -> PlantParams:
    syn = config.synth
    return PlantParams(leaf_count=syn.leaf_count,
                       points_per_leaf=syn.points_per_leaf,
                       ground_points=syn.ground_points,
                       pot_points=syn.pot_points,
                       stem_points=syn.stem_points)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NO_CANOPY = 3

NET_METHODS = ("net-global", "net-agg")


def _thread_cap() -> int:
    """Worker cap from CANOPY3D_THREADS; stages run on one worker, which
    always respects the cap."""
    raw = os.environ.get("CANOPY3D_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"CANOPY3D_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError("CANOPY3D_THREADS must be >= 1")
    return cap


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_save(save_fn, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        save_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_descriptors(ds, path: Path) -> None:
    # save_descriptors writes a .kp companion next to its target, so both
    # files have to move together.
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    tmp_path = Path(tmp)
    kp_tmp = tmp_path.with_suffix(".kp")
    try:
        save_descriptors(ds, tmp_path)
        os.replace(kp_tmp, path.with_suffix(".kp"))
        os.replace(tmp_path, path)
    except BaseException:
        for leftover in (tmp_path, kp_tmp):
            if leftover.exists():
                leftover.unlink()
        raise


def _load_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out"] = args.out
    if updates:
        config = dataclasses.replace(config, **updates)
        validate_config(config)
    return config


def _segment_cloud(cloud: PointCloud, config: PipelineConfig):
    seg_cfg = config.segment
    resolution = compute_resolution(cloud)
    r_voxel = seg_cfg.r_voxel or seg_cfg.voxel_factor * resolution
    seg = run_vccs(cloud, r_voxel, seg_cfg.seed_factor * r_voxel,
                   weights=(seg_cfg.w_color, seg_cfg.w_spatial,
                            seg_cfg.w_feature),
                   min_occupied=seg_cfg.min_occupied)
    return seg, segment_canopy(cloud, seg, seg_cfg.exg_threshold)


def _load_dataset(data_dir: Path) -> List[Tuple]:
    manifest = data_dir / "manifest.csv"
    if not manifest.is_file():
        raise PipelineError(f"dataset manifest not found: {manifest}")
    out = []
    for row in read_manifest(manifest):
        cloud = load_cloud(data_dir / Path(row.path).name, PLY_FORMAT)
        out.append((row, cloud))
    return out


def _prepare_split(records, ids, config, split_tag):
    plants = []
    for i in ids:
        row, cloud = records[i]
        plant = prepare_plant(row.plant_id, row.class_label, cloud, config)
        plant.split = split_tag
        plants.append(plant)
    return plants


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    config = _load_config(args)
    syn = config.synth
    control = args.control if args.control is not None else syn.control
    drought = args.drought if args.drought is not None else syn.drought
    out_dir = Path(args.out) if args.out else config.out_dir() / "dataset"
    clouds, manifest = generate_dataset(
        control, drought,
        severity_range=(syn.severity_min, syn.severity_max),
        base_seed=derive_seed(config.seed, "synth"),
        params=_synth_params(config))
    rows = write_dataset(clouds, manifest, out_dir)
    print(f"wrote {len(rows)} plants to {out_dir}")
    return EXIT_OK


def cmd_segment(args) -> int:
    config = _load_config(args)
    cloud = load_cloud(args.infile, PLY_FORMAT)
    seg, canopy = _segment_cloud(cloud, config)
    out_dir = Path(args.out) if args.out else config.out_dir()
    stem = Path(args.infile).stem
    _atomic_save(lambda p: save_cloud(canopy.canopy, p, PLY_FORMAT),
                 out_dir / f"{stem}_canopy.ply")
    _atomic_save(lambda p: save_segmentation(seg, canopy, p),
                 out_dir / f"{stem}_segmentation.txt")
    print(f"{stem}: {len(canopy.canopy)} of {len(cloud)} points in canopy, "
          f"{len(seg.supervoxels)} supervoxels")
    return EXIT_OK


def _describe_net(args, config, cloud: PointCloud, method: str) -> np.ndarray:
    pointset = sample_pointset(cloud, config.network.n_points,
                               seed=derive_seed(config.seed, "pointset",
                                                Path(args.infile).stem))
    if args.models:
        bundle = load_bundle(args.models)
        params = bundle.net_fine if args.fine_tuned else bundle.net_pre
        gmm = bundle.net_gmm_fine if args.fine_tuned else bundle.net_gmm_pre
    else:
        if method == "net-agg":
            raise ModelBundleError(
                "net-agg needs --models (its Fisher Vector encoder is fit "
                "during training)")
        from .harness import _pretrain_network
        params, gmm = _pretrain_network(config), None
    if method == "net-global":
        return forward_global(pointset, params)[0]
    return forward_aggregated(pointset, params, gmm)


def cmd_describe(args) -> int:
    config = _load_config(args)
    cloud = load_cloud(args.infile, PLY_FORMAT)
    out_dir = Path(args.out) if args.out else config.out_dir()
    stem = Path(args.infile).stem
    method = args.method
    if method in NET_METHODS:
        vec = _describe_net(args, config, cloud, method)
        text = (f"KIND {method}\nDIM {vec.shape[0]}\nCOUNT 1\n"
                + " ".join(repr(float(v)) for v in vec) + "\n")
        path = out_dir / f"{stem}_{method}.txt"
        _atomic_text(path, text)
        print(f"wrote {path}")
        return EXIT_OK
    res = compute_resolution(cloud)
    if not cloud.has_normals:
        cloud = estimate_normals(cloud, NORMAL_RADIUS_FACTOR * res)
    keypoints = detect_keypoints(
        cloud, config.describe.keypoint_method,
        spacing=config.describe.keypoint_spacing_factor * res,
        resolution=res)
    ds = compute_descriptors(cloud, keypoints, method,
                             config.describe.support_factor * res)
    path = out_dir / f"{stem}_{method}.txt"
    _atomic_descriptors(ds, path)
    print(f"wrote {len(ds)} x {ds.dim} descriptors to {path}")
    return EXIT_OK


def cmd_encode(args) -> int:
    config = _load_config(args)
    in_dir = Path(args.indir)
    kind = args.kind
    rows = []
    for path in sorted(in_dir.glob("*.txt")):
        # Peek at the header so files of other kinds (including single-row
        # network features, which carry no keypoint companion) are skipped
        # without a full parse.
        with open(path) as fh:
            header = fh.readline().split()
        if len(header) != 2 or header[0] != "KIND" or header[1] != kind:
            continue
        ds = load_descriptors(path)
        rows.append(ds.rows)
    if not rows:
        raise PipelineError(f"no {kind} descriptor files found in {in_dir}")
    pooled = np.vstack(rows)
    out_dir = Path(args.out) if args.out else config.out_dir() / "models"
    gmm = fit_gmm(pooled, config.encode.gmm_k,
                  seed=derive_seed(config.seed, "gmm", kind))
    codebook = fit_kmeans(pooled, config.encode.bovw_k,
                          seed=derive_seed(config.seed, "kmeans", kind))
    _atomic_save(lambda p: save_gmm(gmm, p), out_dir / f"gmm_{kind}.txt")
    _atomic_save(lambda p: save_codebook(codebook, p),
                 out_dir / f"codebook_{kind}.txt")
    print(f"fit {kind} encoders on {len(pooled)} descriptors -> {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    records = _load_dataset(Path(args.data))
    train_ids, _ = split_dataset([r.class_label for r, _ in records],
                                 config.split.n_train, config.seed)
    plants = _prepare_split(records, train_ids, config, "train")
    bundle = fit_models(plants, config)
    out_dir = Path(args.out) if args.out else config.out_dir() / "models"
    save_bundle(bundle, out_dir)
    trained = len(bundle.classifiers)
    print(f"trained {trained} method rows -> {out_dir}")
    if bundle.errors:
        for slug, message in sorted(bundle.errors.items()):
            print(f"  {slug}: {message}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    records = _load_dataset(Path(args.data))
    bundle = load_bundle(args.models)
    _, test_ids = split_dataset([r.class_label for r, _ in records],
                                config.split.n_train, config.seed)
    plants = _prepare_split(records, test_ids, config, "test")
    report = evaluate(bundle, plants, config)
    out_dir = Path(args.out) if args.out else config.out_dir()
    _write_report(report, out_dir)
    print(report.render_text())
    return EXIT_OK


def _write_report(report, out_dir: Path) -> None:
    _atomic_text(out_dir / "report.txt", report.render_text())
    _atomic_text(out_dir / "report.csv", report.to_csv())
    _atomic_text(out_dir / "timing.csv", report.timing_csv())


def cmd_pipeline(args) -> int:
    config = _load_config(args)
    out_root = config.out_dir()
    syn = config.synth
    clouds, manifest = generate_dataset(
        syn.control, syn.drought,
        severity_range=(syn.severity_min, syn.severity_max),
        base_seed=derive_seed(config.seed, "synth"),
        params=_synth_params(config))
    data_dir = out_root / "dataset"
    write_dataset(clouds, manifest, data_dir)
    records = _load_dataset(data_dir)
    labels = [r.class_label for r, _ in records]
    train_ids, test_ids = split_dataset(labels, config.split.n_train,
                                        config.seed)
    train_plants = _prepare_split(records, train_ids, config, "train")
    test_plants = _prepare_split(records, test_ids, config, "test")
    bundle = fit_models(train_plants, config)
    save_bundle(bundle, out_root / "models")
    report = evaluate(bundle, test_plants, config)
    _write_report(report, out_root)
    _atomic_text(out_root / "run_config.toml", config_to_toml(config))
    print(report.render_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canopy3d",
        description="3D plant phenotyping pipeline: synthesize, segment, "
                    "describe, encode, train, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--out", help="output directory override")

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    common(p)
    p.add_argument("--control", type=int, help="number of control plants")
    p.add_argument("--drought", type=int, help="number of drought plants")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("segment", help="extract the canopy from one cloud")
    common(p)
    p.add_argument("--in", dest="infile", required=True, help="input PLY")
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("describe", help="compute descriptors for one cloud")
    common(p)
    p.add_argument("--in", dest="infile", required=True, help="input PLY")
    p.add_argument("--method", required=True,
                   choices=list(LOCAL_KINDS) + list(NET_METHODS))
    p.add_argument("--models", help="model bundle dir (for net methods)")
    p.add_argument("--fine-tuned", action="store_true",
                   help="use the fine-tuned network from --models")
    p.set_defaults(fn=cmd_describe)

    p = sub.add_parser("encode", help="fit FV/BoVW encoders from descriptors")
    common(p)
    p.add_argument("--in", dest="indir", required=True,
                   help="directory of descriptor files")
    p.add_argument("--kind", required=True, choices=LOCAL_KINDS)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("train", help="train all method rows on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained models on the test split")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--models", required=True, help="model bundle directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    common(p)
    p.set_defaults(fn=cmd_pipeline)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _thread_cap()
        return args.fn(args)
    except NoCanopyError as exc:
        print(f"error: no canopy found: {exc}", file=sys.stderr)
        return EXIT_NO_CANOPY
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
