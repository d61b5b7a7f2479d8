"""End-to-end training and evaluation over the ten benchmark methods.

Each plant cloud is segmented to its canopy, described by keypoint
descriptors and a sampled point set, encoded (FV / BoVW / network
features), standardized, and classified by a linear SVM.  The report
mirrors the descriptor-by-encoding accuracy/timing table layout.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cloud import PointCloud, compute_resolution
from .config import PipelineConfig, derive_seed
from .descriptors import DESCRIPTOR_DIMS, compute_descriptors
from .encoding import (Codebook, GmmModel, encode_bovw, encode_fv, fit_gmm,
                       fit_kmeans, load_codebook, load_gmm, save_codebook,
                       save_gmm)
from .errors import ModelBundleError, PipelineError
from .keypoints import detect_keypoints
from .network import (NetworkParams, TrainConfig, fine_tune, forward_aggregated,
                      forward_global, load_network, point_descriptors,
                      sample_pointset, save_network, train)
from .normals import estimate_normals
from .svm import SvmModel, load_svm, predict, save_svm, train_svm
from .synth import CONTROL, DROUGHT, generate_shape_dataset

LOCAL_KINDS = ("shot", "rops", "fpfh")
NORMAL_RADIUS_FACTOR = 4.0
NET_CLASS_OF = {CONTROL: 0, DROUGHT: 1}


@dataclass(frozen=True)
class MethodSpec:
    method: str
    encoding: str
    kind: str                  # "shot" | "rops" | "fpfh" | "net"
    fine_tuned: bool = False

    @property
    def display(self) -> str:
        return f"{self.method} ({self.encoding})"

    @property
    def slug(self) -> str:
        return (f"{self.method} {self.encoding}".lower()
                .replace(" ", "-"))


METHOD_ROWS: Tuple[MethodSpec, ...] = (
    MethodSpec("SHOT", "FV", "shot"),
    MethodSpec("SHOT", "BoVW", "shot"),
    MethodSpec("RoPS", "FV", "rops"),
    MethodSpec("RoPS", "BoVW", "rops"),
    MethodSpec("FPFH", "FV", "fpfh"),
    MethodSpec("FPFH", "BoVW", "fpfh"),
    MethodSpec("PointNet", "Global", "net"),
    MethodSpec("PointNet", "Aggregation", "net"),
    MethodSpec("Fine tuned PointNet", "Global", "net", fine_tuned=True),
    MethodSpec("Fine tuned PointNet", "Aggregation", "net", fine_tuned=True),
)


# ---------------------------------------------------------------------------
# feature standardization

@dataclass(frozen=True)
class StandardScaler:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        return (features - self.mean) / self.scale


def fit_scaler(features: np.ndarray) -> StandardScaler:
    features = np.asarray(features, dtype=float)
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return StandardScaler(mean, scale)


def save_scaler(scaler: StandardScaler, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"SCALERV1 {scaler.mean.shape[0]}\n")
        for row in (scaler.mean, scaler.scale):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_scaler(path) -> StandardScaler:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3 or not lines[0].startswith("SCALERV1 "):
        raise ModelBundleError(f"{path}: expected SCALERV1 header")
    d = int(lines[0].split()[1])
    mean = np.array([float(v) for v in lines[1].split()])
    scale = np.array([float(v) for v in lines[2].split()])
    if mean.shape != (d,) or scale.shape != (d,):
        raise ModelBundleError(f"{path}: row length does not match header")
    return StandardScaler(mean, scale)


# ---------------------------------------------------------------------------
# per-plant preparation

@dataclass
class PreparedPlant:
    plant_id: str
    class_label: str
    canopy: PointCloud
    keypoints: np.ndarray
    descriptors: Dict[str, np.ndarray]
    describe_seconds: Dict[str, float]
    pointset: np.ndarray
    split: str = ""            # "train" / "test" once assigned


def prepare_plant(plant_id: str, class_label: str, cloud: PointCloud,
                  config: PipelineConfig,
                  canopy: Optional[PointCloud] = None) -> PreparedPlant:
    """Segment the canopy (unless given) and compute every feature family."""
    from .segmentation import run_vccs, segment_canopy

    seg_cfg = config.segment
    if canopy is None:
        resolution = compute_resolution(cloud)
        r_voxel = seg_cfg.r_voxel or seg_cfg.voxel_factor * resolution
        seg = run_vccs(cloud, r_voxel, seg_cfg.seed_factor * r_voxel,
                       weights=(seg_cfg.w_color, seg_cfg.w_spatial,
                                seg_cfg.w_feature),
                       min_occupied=seg_cfg.min_occupied)
        canopy = segment_canopy(cloud, seg, seg_cfg.exg_threshold).canopy

    res = compute_resolution(canopy)
    canopy = estimate_normals(canopy, NORMAL_RADIUS_FACTOR * res)
    spacing = config.describe.keypoint_spacing_factor * res
    keypoints = detect_keypoints(canopy, config.describe.keypoint_method,
                                 spacing=spacing, resolution=res)
    support = config.describe.support_factor * res
    descriptors = {}
    describe_seconds = {}
    for kind in LOCAL_KINDS:
        start = time.perf_counter()
        ds = compute_descriptors(canopy, keypoints, kind, support)
        describe_seconds[kind] = time.perf_counter() - start
        if len(ds) == 0:
            raise PipelineError(f"{plant_id}: no {kind} descriptors survived")
        descriptors[kind] = ds.rows

    pointset = sample_pointset(canopy, config.network.n_points,
                               seed=derive_seed(config.seed, "pointset",
                                                plant_id))
    return PreparedPlant(plant_id, class_label, canopy, keypoints,
                         descriptors, describe_seconds, pointset)


def split_dataset(class_labels: Sequence[str], n_train: int,
                  seed: int) -> Tuple[List[int], List[int]]:
    """Stratified deterministic split; returns (train, test) index lists."""
    labels = list(class_labels)
    total = len(labels)
    if not 2 <= n_train < total:
        raise PipelineError(f"cannot split {total} plants into "
                            f"{n_train} train")
    classes = sorted(set(labels))
    rng = np.random.default_rng(derive_seed(seed, "split"))
    quota = {c: int(round(n_train * labels.count(c) / total))
             for c in classes}
    drift = n_train - sum(quota.values())
    quota[classes[0]] += drift
    train_ids: List[int] = []
    for c in classes:
        members = [i for i, lab in enumerate(labels) if lab == c]
        if not 1 <= quota[c] < len(members):
            raise PipelineError(f"split leaves class {c!r} without both "
                                f"train and test members")
        picked = rng.permutation(len(members))[:quota[c]]
        train_ids.extend(members[j] for j in picked)
    train_set = set(train_ids)
    return sorted(train_ids), [i for i in range(total) if i not in train_set]


# ---------------------------------------------------------------------------
# model fitting

@dataclass
class ModelBundle:
    gmms: Dict[str, GmmModel]
    codebooks: Dict[str, Codebook]
    net_pre: NetworkParams
    net_fine: NetworkParams
    net_gmm_pre: GmmModel
    net_gmm_fine: GmmModel
    classifiers: Dict[str, Tuple[StandardScaler, SvmModel]]
    errors: Dict[str, str] = field(default_factory=dict)


def _subsample(rows: np.ndarray, cap: int, seed: int) -> np.ndarray:
    if len(rows) <= cap:
        return rows
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(rows), size=cap, replace=False))
    return rows[idx]


def _pretrain_network(config: PipelineConfig) -> NetworkParams:
    clouds, labels = generate_shape_dataset(
        config.network.pretrain_per_class,
        seed=derive_seed(config.seed, "shapes"))
    pointsets = [sample_pointset(cloud, config.network.n_points,
                                 seed=derive_seed(config.seed, "shape-ps",
                                                  str(i)))
                 for i, cloud in enumerate(clouds)]
    tc = TrainConfig(epochs=config.network.pretrain_epochs,
                     lr=config.network.lr, batch=config.network.batch,
                     lam=config.network.lam,
                     momentum=config.network.momentum,
                     seed=derive_seed(config.seed, "pretrain"))
    return train(pointsets, labels, tc)


def _net_features(spec: MethodSpec, plant: PreparedPlant,
                  bundle: ModelBundle) -> np.ndarray:
    params = bundle.net_fine if spec.fine_tuned else bundle.net_pre
    if spec.encoding == "Global":
        return forward_global(plant.pointset, params)[0]
    gmm = bundle.net_gmm_fine if spec.fine_tuned else bundle.net_gmm_pre
    return forward_aggregated(plant.pointset, params, gmm)


def _local_features(spec: MethodSpec, plant: PreparedPlant,
                    bundle: ModelBundle) -> np.ndarray:
    rows = plant.descriptors[spec.kind]
    if spec.encoding == "FV":
        return encode_fv(bundle.gmms[spec.kind], rows)
    return encode_bovw(bundle.codebooks[spec.kind], rows)


def row_features(spec: MethodSpec, plant: PreparedPlant,
                 bundle: ModelBundle) -> np.ndarray:
    if spec.kind == "net":
        return _net_features(spec, plant, bundle)
    return _local_features(spec, plant, bundle)


def fit_models(train_plants: Sequence[PreparedPlant],
               config: PipelineConfig) -> ModelBundle:
    """Fit codebooks, GMMs, networks, and one scaler+SVM per method row."""
    if any(p.split == "test" for p in train_plants):
        raise PipelineError("test-split plant passed to fit_models")
    labels = [p.class_label for p in train_plants]
    if len(set(labels)) < 2:
        raise PipelineError("training split must contain both classes")
    cap = config.encode.max_train_descriptors

    gmms: Dict[str, GmmModel] = {}
    codebooks: Dict[str, Codebook] = {}
    errors: Dict[str, str] = {}
    for kind in LOCAL_KINDS:
        pooled = np.vstack([p.descriptors[kind] for p in train_plants])
        pooled = _subsample(pooled, cap,
                            derive_seed(config.seed, "subsample", kind))
        try:
            gmms[kind] = fit_gmm(pooled, config.encode.gmm_k,
                                 seed=derive_seed(config.seed, "gmm", kind))
        except PipelineError as exc:
            for spec in METHOD_ROWS:
                if spec.kind == kind and spec.encoding == "FV":
                    errors[spec.slug] = f"GMM fit failed: {exc}"
        try:
            codebooks[kind] = fit_kmeans(
                pooled, config.encode.bovw_k,
                seed=derive_seed(config.seed, "kmeans", kind))
        except PipelineError as exc:
            for spec in METHOD_ROWS:
                if spec.kind == kind and spec.encoding == "BoVW":
                    errors[spec.slug] = f"codebook fit failed: {exc}"

    net_pre = _pretrain_network(config)
    tc = TrainConfig(epochs=config.network.finetune_epochs,
                     lr=config.network.lr, batch=config.network.batch,
                     lam=config.network.lam, momentum=config.network.momentum,
                     seed=derive_seed(config.seed, "finetune"))
    net_fine = fine_tune(net_pre,
                         [p.pointset for p in train_plants],
                         [NET_CLASS_OF[lab] for lab in labels], tc)

    net_gmms = {}
    for tag, params in (("pre", net_pre), ("fine", net_fine)):
        pooled = np.vstack([point_descriptors(p.pointset, params)
                            for p in train_plants])
        pooled = _subsample(pooled, cap,
                            derive_seed(config.seed, "subsample-net", tag))
        net_gmms[tag] = fit_gmm(pooled, config.encode.gmm_k,
                                seed=derive_seed(config.seed, "net-gmm", tag))

    bundle = ModelBundle(gmms, codebooks, net_pre, net_fine,
                         net_gmms["pre"], net_gmms["fine"], {}, errors)

    for spec in METHOD_ROWS:
        if spec.slug in errors:
            continue
        try:
            feats = np.array([row_features(spec, p, bundle)
                              for p in train_plants])
            scaler = fit_scaler(feats)
            model = train_svm(scaler.transform(feats), labels,
                              c=config.svm.c, epochs=config.svm.epochs)
            bundle.classifiers[spec.slug] = (scaler, model)
        except Exception as exc:          # any stage failure marks the row
            errors[spec.slug] = f"training failed: {exc}"
    return bundle


# ---------------------------------------------------------------------------
# evaluation report

@dataclass(frozen=True)
class MethodRow:
    method: str
    encoding: str
    accuracy: Optional[float]          # percent, None when failed
    seconds: Optional[float]
    confusion: Optional[Tuple[int, int, int, int]]   # tn, fp, fn, tp
    error: Optional[str] = None

    @property
    def display(self) -> str:
        return f"{self.method} ({self.encoding})"


@dataclass(frozen=True)
class EvalReport:
    rows: Tuple[MethodRow, ...]

    def row(self, display: str) -> MethodRow:
        for r in self.rows:
            if r.display == display:
                return r
        raise KeyError(display)

    def render_text(self) -> str:
        lines = [f"{'Descriptor':<38}{'Accuracy (%)':>14}"
                 f"{'Time (s) [mean/model]':>24}"]
        lines.append("-" * 76)
        for r in self.rows:
            if r.accuracy is None:
                lines.append(f"{r.display:<38}{'FAILED':>14}{'-':>24}")
            else:
                lines.append(f"{r.display:<38}{r.accuracy:>14.1f}"
                             f"{r.seconds:>24.2f}")
        lines.append("")
        for r in self.rows:
            if r.confusion is not None:
                tn, fp, fn, tp = r.confusion
                lines.append(f"{r.display}: confusion "
                             f"[control: {tn} correct, {fp} wrong | "
                             f"drought: {tp} correct, {fn} wrong]")
            elif r.error:
                lines.append(f"{r.display}: {r.error}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["method,encoding,accuracy"]
        for r in self.rows:
            acc = "FAILED" if r.accuracy is None else f"{r.accuracy:.1f}"
            lines.append(f"{r.method},{r.encoding},{acc}")
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        lines = ["method,encoding,seconds"]
        for r in self.rows:
            sec = "FAILED" if r.seconds is None else f"{r.seconds:.6f}"
            lines.append(f"{r.method},{r.encoding},{sec}")
        return "\n".join(lines) + "\n"


def _evaluate_row(spec: MethodSpec, bundle: ModelBundle,
                  test_plants: Sequence[PreparedPlant],
                  config: PipelineConfig) -> MethodRow:
    if spec.slug in bundle.errors:
        return MethodRow(spec.method, spec.encoding, None, None, None,
                         bundle.errors[spec.slug])
    if spec.slug not in bundle.classifiers:
        return MethodRow(spec.method, spec.encoding, None, None, None,
                         "model bundle missing this method")
    scaler, model = bundle.classifiers[spec.slug]
    feats = []
    seconds = []
    for plant in test_plants:
        start = time.perf_counter()
        vec = row_features(spec, plant, bundle)
        elapsed = time.perf_counter() - start
        if spec.kind != "net":
            elapsed += plant.describe_seconds[spec.kind]
        feats.append(vec)
        seconds.append(elapsed)
    feats = np.array(feats)
    start = time.perf_counter()
    labels, _ = predict(model, scaler.transform(feats))
    classify = (time.perf_counter() - start) / len(test_plants)
    truth = [p.class_label for p in test_plants]
    tn = sum(1 for t, p in zip(truth, labels) if t == CONTROL and p == CONTROL)
    fp = sum(1 for t, p in zip(truth, labels) if t == CONTROL and p == DROUGHT)
    fn = sum(1 for t, p in zip(truth, labels) if t == DROUGHT and p == CONTROL)
    tp = sum(1 for t, p in zip(truth, labels) if t == DROUGHT and p == DROUGHT)
    accuracy = 100.0 * (tn + tp) / len(truth)
    mean_seconds = float(np.mean(seconds) + classify)
    return MethodRow(spec.method, spec.encoding, accuracy, mean_seconds,
                     (tn, fp, fn, tp))


def evaluate(bundle: ModelBundle, test_plants: Sequence[PreparedPlant],
             config: PipelineConfig) -> EvalReport:
    """Accuracy and mean per-model time for every method row."""
    if not test_plants:
        raise PipelineError("no test plants to evaluate")
    if any(p.split == "train" for p in test_plants):
        raise PipelineError("train-split plant passed to evaluate")
    rows = []
    for spec in METHOD_ROWS:
        try:
            rows.append(_evaluate_row(spec, bundle, test_plants, config))
        except Exception as exc:       # row fails, run continues
            rows.append(MethodRow(spec.method, spec.encoding, None, None,
                                  None, f"evaluation failed: {exc}"))
    return EvalReport(tuple(rows))


# ---------------------------------------------------------------------------
# bundle persistence

def save_bundle(bundle: ModelBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for kind, gmm in bundle.gmms.items():
        save_gmm(gmm, out / f"gmm_{kind}.txt")
    for kind, cb in bundle.codebooks.items():
        save_codebook(cb, out / f"codebook_{kind}.txt")
    save_network(bundle.net_pre, out / "net_pretrained.txt")
    save_network(bundle.net_fine, out / "net_finetuned.txt")
    save_gmm(bundle.net_gmm_pre, out / "gmm_net_pre.txt")
    save_gmm(bundle.net_gmm_fine, out / "gmm_net_fine.txt")
    for slug, (scaler, model) in bundle.classifiers.items():
        save_scaler(scaler, out / f"scaler_{slug}.txt")
        save_svm(model, out / f"svm_{slug}.txt")
    lines = ["BUNDLEV1"]
    for spec in METHOD_ROWS:
        if spec.slug in bundle.errors:
            lines.append(f"row {spec.slug} failed "
                         f"{bundle.errors[spec.slug]}")
        else:
            lines.append(f"row {spec.slug} ok")
    (out / "bundle.txt").write_text("\n".join(lines) + "\n")


def load_bundle(bundle_dir) -> ModelBundle:
    out = Path(bundle_dir)
    manifest = out / "bundle.txt"
    if not manifest.is_file():
        raise ModelBundleError(f"model bundle missing: {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != "BUNDLEV1":
        raise ModelBundleError(f"{manifest}: expected BUNDLEV1 header")
    errors: Dict[str, str] = {}
    ok_slugs = []
    for line in lines[1:]:
        parts = line.split(maxsplit=3)
        if len(parts) < 3 or parts[0] != "row":
            raise ModelBundleError(f"{manifest}: malformed row line")
        if parts[2] == "ok":
            ok_slugs.append(parts[1])
        else:
            errors[parts[1]] = parts[3] if len(parts) > 3 else "failed"

    def _need(name: str) -> Path:
        p = out / name
        if not p.is_file():
            raise ModelBundleError(f"model bundle missing: {p}")
        return p

    gmms = {k: load_gmm(_need(f"gmm_{k}.txt")) for k in LOCAL_KINDS
            if (out / f"gmm_{k}.txt").is_file()}
    codebooks = {k: load_codebook(_need(f"codebook_{k}.txt"))
                 for k in LOCAL_KINDS
                 if (out / f"codebook_{k}.txt").is_file()}
    bundle = ModelBundle(
        gmms, codebooks,
        load_network(_need("net_pretrained.txt")),
        load_network(_need("net_finetuned.txt")),
        load_gmm(_need("gmm_net_pre.txt")),
        load_gmm(_need("gmm_net_fine.txt")),
        {}, errors)
    for slug in ok_slugs:
        scaler = load_scaler(_need(f"scaler_{slug}.txt"))
        model = load_svm(_need(f"svm_{slug}.txt"))
        bundle.classifiers[slug] = (scaler, model)
    return bundle
