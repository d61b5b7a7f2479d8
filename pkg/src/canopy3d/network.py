"""Point-set classification network with hand-rolled backpropagation.

A small PointNet-style stack: an input-transform subnetwork predicts a 3x3
matrix applied to xyz, a shared per-point MLP feeds an element-wise max
pool into a global feature, and a linear head classifies.  An aggregation
MLP maps [per-point feature ‖ global feature] to per-point local
descriptors for Fisher Vector pooling.

Every forward pass canonicalizes point order first, which makes the global
feature and everything derived from it bit-identical under input
permutation rather than merely close.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cloud import PointCloud
from .encoding import GmmModel, encode_fv
from .errors import ModelBundleError, TrainingDivergedError

N_CHANNELS = 6
DEFAULT_POINTS = 1024
GLOBAL_DIM = 256
POINT_FEATURE_DIM = 64      # L: per-point feature tap
LOCAL_DESC_DIM = 64         # L': aggregation MLP output

TRANSFORM_SIZES = ((N_CHANNELS, 32), (32, 32), (32, 16), (16, 9))
MLP_SIZES = ((N_CHANNELS, 64), (64, 64), (64, POINT_FEATURE_DIM),
             (POINT_FEATURE_DIM, 128), (128, GLOBAL_DIM))
HEAD_HIDDEN = 64
AGG_SIZES = ((POINT_FEATURE_DIM + GLOBAL_DIM, 128), (128, LOCAL_DESC_DIM))
_TRANSFORM_POOL_AT = 2      # per-point layers before the subnet's max-pool


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.01
    batch: int = 8
    lam: float = 0.001       # orthogonality regularizer weight
    momentum: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class NetworkParams:
    arrays: Dict[str, np.ndarray]
    loss_trace: Tuple[float, ...] = field(default=(), compare=False)
    pre_accuracy: Optional[float] = field(default=None, compare=False)
    post_accuracy: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        expected = dict(_layer_shapes(self.n_classes))
        if set(self.arrays) != set(expected):
            raise ValueError("parameter set does not match the architecture")
        for name, shape in expected.items():
            arr = self.arrays[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, "
                                 f"got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
            arr.flags.writeable = False

    @property
    def n_classes(self) -> int:
        return self.arrays["h1.b"].shape[0]

    def mutable_copy(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays.items()}


def _layer_shapes(n_classes: int) -> List[Tuple[str, tuple]]:
    shapes = []
    for i, (a, b) in enumerate(TRANSFORM_SIZES):
        shapes += [(f"t{i}.W", (a, b)), (f"t{i}.b", (b,))]
    for i, (a, b) in enumerate(MLP_SIZES):
        shapes += [(f"m{i}.W", (a, b)), (f"m{i}.b", (b,))]
    head = ((GLOBAL_DIM, HEAD_HIDDEN), (HEAD_HIDDEN, n_classes))
    for i, (a, b) in enumerate(head):
        shapes += [(f"h{i}.W", (a, b)), (f"h{i}.b", (b,))]
    for i, (a, b) in enumerate(AGG_SIZES):
        shapes += [(f"a{i}.W", (a, b)), (f"a{i}.b", (b,))]
    return shapes


def init_params(n_classes: int, seed: int = 0) -> NetworkParams:
    """He-initialized weights; the transform's last layer starts as zero
    weights with an identity bias so the network begins at T = I."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _layer_shapes(n_classes):
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    arrays["t3.W"] = np.zeros(TRANSFORM_SIZES[3])
    arrays["t3.b"] = np.eye(3).ravel()
    return NetworkParams(arrays)


def sample_pointset(cloud: PointCloud, n: int = DEFAULT_POINTS,
                    seed: int = 0) -> np.ndarray:
    """(n, 6) array of [normalized xyz, rgb] rows sampled from the cloud.

    Without replacement when the cloud is large enough; otherwise every
    original point appears and the remainder is drawn with replacement.
    xyz is centered on the sample centroid and scaled to unit max radius.
    """
    m = len(cloud)
    if m == 0:
        raise ValueError("cannot sample from an empty cloud")
    rng = np.random.default_rng(seed)
    if m >= n:
        idx = rng.choice(m, size=n, replace=False)
    else:
        idx = np.concatenate([np.arange(m),
                              rng.choice(m, size=n - m, replace=True)])
    xyz = cloud.positions[idx].astype(float)
    xyz = xyz - xyz.mean(axis=0)
    radius = np.linalg.norm(xyz, axis=1).max()
    if radius > 0:
        xyz = xyz / radius
    return np.hstack([xyz, cloud.colors[idx]])


def _canonical(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != N_CHANNELS:
        raise ValueError(f"pointset must be (N, {N_CHANNELS})")
    return points[np.lexsort(points.T[::-1])]


# ---------------------------------------------------------------------------
# forward / backward

def _forward(arrays: Dict[str, np.ndarray], points: np.ndarray) -> dict:
    """Full forward pass; returns every intermediate needed for backward."""
    x = _canonical(points)
    c = {"x": x}

    # transform subnet: per-point MLP, max-pool, dense to 9 values
    z = x
    for i in range(_TRANSFORM_POOL_AT):
        a = z @ arrays[f"t{i}.W"] + arrays[f"t{i}.b"]
        c[f"ta{i}"], z = a, np.maximum(a, 0.0)
        c[f"tz{i}"] = z
    c["t_pool_idx"] = z.argmax(axis=0)
    pooled = z[c["t_pool_idx"], np.arange(z.shape[1])]
    c["t_pooled"] = pooled
    a = pooled @ arrays["t2.W"] + arrays["t2.b"]
    c["ta2"] = a
    z3 = np.maximum(a, 0.0)
    c["tz2"] = z3
    t9 = z3 @ arrays["t3.W"] + arrays["t3.b"]
    T = t9.reshape(3, 3)
    c["T"] = T

    x1 = np.hstack([x[:, :3] @ T, x[:, 3:]])
    c["x1"] = x1

    # shared MLP with ReLU, element-wise max pool
    z = x1
    for i in range(len(MLP_SIZES)):
        a = z @ arrays[f"m{i}.W"] + arrays[f"m{i}.b"]
        c[f"ma{i}"], z = a, np.maximum(a, 0.0)
        c[f"mz{i}"] = z
    c["g_pool_idx"] = z.argmax(axis=0)
    g = z[c["g_pool_idx"], np.arange(z.shape[1])]
    c["g"] = g

    ah = g @ arrays["h0.W"] + arrays["h0.b"]
    c["ha"] = ah
    h = np.maximum(ah, 0.0)
    c["hz"] = h
    c["logits"] = h @ arrays["h1.W"] + arrays["h1.b"]
    return c


def _loss_and_grads(arrays: Dict[str, np.ndarray], points: np.ndarray,
                    label: int, lam: float) -> Tuple[float, Dict[str, np.ndarray]]:
    # divergence shows up as a non-finite loss, handled by the caller
    with np.errstate(over="ignore", invalid="ignore"):
        return _loss_and_grads_inner(arrays, points, label, lam)


def _loss_and_grads_inner(arrays, points, label, lam):
    c = _forward(arrays, points)
    logits = c["logits"]
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    log_probs = shifted - log_z
    probs = np.exp(log_probs)

    T = c["T"]
    err = T @ T.T - np.eye(3)
    loss = float(-log_probs[label] + lam * (err ** 2).sum())

    grads = {k: np.zeros_like(v) for k, v in arrays.items()}

    dlogits = probs.copy()
    dlogits[label] -= 1.0
    grads["h1.W"] = np.outer(c["hz"], dlogits)
    grads["h1.b"] = dlogits
    dh = arrays["h1.W"] @ dlogits
    dah = dh * (c["ha"] > 0)
    grads["h0.W"] = np.outer(c["g"], dah)
    grads["h0.b"] = dah
    dg = arrays["h0.W"] @ dah

    dz = np.zeros_like(c["mz4"])
    dz[c["g_pool_idx"], np.arange(dz.shape[1])] = dg
    for i in reversed(range(len(MLP_SIZES))):
        da = dz * (c[f"ma{i}"] > 0)
        below = c["x1"] if i == 0 else c[f"mz{i - 1}"]
        grads[f"m{i}.W"] = below.T @ da
        grads[f"m{i}.b"] = da.sum(axis=0)
        dz = da @ arrays[f"m{i}.W"].T
    dx1 = dz

    x = c["x"]
    dT = x[:, :3].T @ dx1[:, :3]
    dT += lam * 4.0 * (err @ T)

    dt9 = dT.ravel()
    grads["t3.W"] = np.outer(c["tz2"], dt9)
    grads["t3.b"] = dt9
    dz3 = arrays["t3.W"] @ dt9
    da3 = dz3 * (c["ta2"] > 0)
    grads["t2.W"] = np.outer(c["t_pooled"], da3)
    grads["t2.b"] = da3
    dpooled = arrays["t2.W"] @ da3

    dz = np.zeros_like(c["tz1"])
    dz[c["t_pool_idx"], np.arange(dz.shape[1])] = dpooled
    for i in reversed(range(_TRANSFORM_POOL_AT)):
        da = dz * (c[f"ta{i}"] > 0)
        below = x if i == 0 else c[f"tz{i - 1}"]
        grads[f"t{i}.W"] = below.T @ da
        grads[f"t{i}.b"] = da.sum(axis=0)
        dz = da @ arrays[f"t{i}.W"].T

    return loss, grads


# ---------------------------------------------------------------------------
# public forward views

def input_transform(points: np.ndarray,
                    params: NetworkParams) -> Tuple[np.ndarray, np.ndarray]:
    """Apply the predicted 3x3 matrix to xyz; returns (pointset, T)."""
    c = _forward(params.arrays, points)
    return c["x1"], c["T"]


def forward_global(points: np.ndarray,
                   params: NetworkParams) -> Tuple[np.ndarray, np.ndarray]:
    """(GlobalFeature, per-point L-dim features in canonical row order)."""
    c = _forward(params.arrays, points)
    return c["g"], c["mz2"]


def point_descriptors(points: np.ndarray, params: NetworkParams) -> np.ndarray:
    """(N, L') local descriptors from the aggregation MLP."""
    c = _forward(params.arrays, points)
    n = c["mz2"].shape[0]
    joint = np.hstack([c["mz2"], np.tile(c["g"], (n, 1))])
    hidden = np.maximum(joint @ params.arrays["a0.W"] + params.arrays["a0.b"],
                        0.0)
    return hidden @ params.arrays["a1.W"] + params.arrays["a1.b"]


def forward_aggregated(points: np.ndarray, params: NetworkParams,
                       gmm: GmmModel) -> np.ndarray:
    """[GlobalFeature ‖ Fisher Vector of per-point local descriptors]."""
    c = _forward(params.arrays, points)
    n = c["mz2"].shape[0]
    joint = np.hstack([c["mz2"], np.tile(c["g"], (n, 1))])
    hidden = np.maximum(joint @ params.arrays["a0.W"] + params.arrays["a0.b"],
                        0.0)
    local = hidden @ params.arrays["a1.W"] + params.arrays["a1.b"]
    if gmm.dim != local.shape[1]:
        raise ValueError(f"GMM dimension {gmm.dim} does not match "
                         f"local descriptor dimension {local.shape[1]}")
    return np.concatenate([c["g"], encode_fv(gmm, local)])


def predict_logits(points: np.ndarray, params: NetworkParams) -> np.ndarray:
    return _forward(params.arrays, points)["logits"]


def predict_class(points: np.ndarray, params: NetworkParams) -> int:
    return int(np.argmax(predict_logits(points, params)))


def accuracy(params: NetworkParams, pointsets: Sequence[np.ndarray],
             labels: Sequence[int]) -> float:
    hits = sum(predict_class(ps, params) == int(y)
               for ps, y in zip(pointsets, labels))
    return hits / len(labels)


# ---------------------------------------------------------------------------
# training

def train(pointsets: Sequence[np.ndarray], labels: Sequence[int],
          config: TrainConfig,
          params_init: Optional[NetworkParams] = None) -> NetworkParams:
    """Mini-batch SGD with momentum on cross-entropy + orthogonality loss.

    Deterministic given config.seed; raises TrainingDivergedError on a
    non-finite loss.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise ValueError("training requires at least 2 classes present")
    if params_init is None:
        params_init = init_params(n_classes, seed=config.seed)
    if params_init.n_classes != n_classes and \
            params_init.n_classes < n_classes:
        raise ValueError(f"network has {params_init.n_classes} outputs but "
                         f"labels require {n_classes}")

    arrays = params_init.mutable_copy()
    velocity = {k: np.zeros_like(v) for k, v in arrays.items()}
    rng = np.random.default_rng(config.seed)
    m = len(pointsets)

    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(m)
        epoch_loss = 0.0
        for start in range(0, m, config.batch):
            batch = order[start:start + config.batch]
            total = {k: np.zeros_like(v) for k, v in arrays.items()}
            for i in batch:
                loss, grads = _loss_and_grads(arrays, pointsets[i],
                                              int(labels[i]), config.lam)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, sample {i} "
                        f"(lr={config.lr}, lam={config.lam})")
                epoch_loss += loss
                for k in total:
                    total[k] += grads[k]
            scale = 1.0 / len(batch)
            for k in arrays:
                velocity[k] = config.momentum * velocity[k] \
                    - config.lr * scale * total[k]
                arrays[k] = arrays[k] + velocity[k]
        trace.append(epoch_loss / m)

    return NetworkParams(arrays, tuple(trace),
                         params_init.pre_accuracy, params_init.post_accuracy)


def fine_tune(params_init: NetworkParams, pointsets: Sequence[np.ndarray],
              labels: Sequence[int], config: TrainConfig) -> NetworkParams:
    """Continue training from existing parameters.

    If the new label set needs a different head width, only the head is
    re-initialized (from a seed derived from config.seed); the backbone
    transfers.  Records accuracy on the given data before and after.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    arrays = params_init.mutable_copy()
    if n_classes != params_init.n_classes:
        head_rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, 0x4EAD)))
        arrays["h0.W"] = head_rng.normal(
            0.0, np.sqrt(2.0 / GLOBAL_DIM), (GLOBAL_DIM, HEAD_HIDDEN))
        arrays["h0.b"] = np.zeros(HEAD_HIDDEN)
        arrays["h1.W"] = head_rng.normal(
            0.0, np.sqrt(2.0 / HEAD_HIDDEN), (HEAD_HIDDEN, n_classes))
        arrays["h1.b"] = np.zeros(n_classes)
    start = NetworkParams(arrays)
    pre = accuracy(start, pointsets, labels)
    trained = train(pointsets, labels, config, params_init=start)
    post = accuracy(trained, pointsets, labels)
    return NetworkParams(trained.mutable_copy(), trained.loss_trace, pre, post)


# ---------------------------------------------------------------------------
# serialization

def save_network(params: NetworkParams, path) -> None:
    with open(path, "w") as fh:
        fh.write("NETV1\n")
        for name in sorted(params.arrays):
            arr = params.arrays[name]
            mat = np.atleast_2d(arr)
            fh.write(f"LAYER {name} {mat.shape[0]} {mat.shape[1]}\n")
            for row in mat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_network(path) -> NetworkParams:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "NETV1":
        raise ModelBundleError(f"{path}: expected NETV1 header")
    arrays = {}
    i = 1
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 4 or head[0] != "LAYER":
            raise ModelBundleError(f"{path}:{i + 1}: expected LAYER record")
        name, rows, cols = head[1], int(head[2]), int(head[3])
        if i + rows >= len(lines):
            raise ModelBundleError(f"{path}: truncated layer {name}")
        try:
            mat = np.array([[float(v) for v in lines[i + 1 + r].split()]
                            for r in range(rows)], dtype=float)
        except ValueError:
            raise ModelBundleError(f"{path}: layer {name} has malformed rows")
        if mat.shape != (rows, cols):
            raise ModelBundleError(f"{path}: layer {name} shape mismatch")
        arrays[name] = mat[0] if name.endswith(".b") else mat
        i += 1 + rows
    try:
        return NetworkParams(arrays)
    except ValueError as exc:
        raise ModelBundleError(f"{path}: {exc}")
