"""Linear two-class SVM trained by primal subgradient descent.

Minimizes (1/2)||w||^2 + C * sum(hinge(y_i * (w.x_i + b))) over the
control/drought labeling.  Drought is the positive class; a point exactly
on the hyperplane predicts control.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from .errors import ModelBundleError
from .synth import CONTROL, DROUGHT

DEFAULT_C = 1.0
DEFAULT_EPOCHS = 1000


@dataclass(frozen=True)
class SvmModel:
    weights: np.ndarray
    bias: float
    c: float
    objective_trace: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=float))
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "c", float(self.c))
        w.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


def _signed_labels(labels: Sequence) -> np.ndarray:
    y = np.empty(len(labels))
    for i, lab in enumerate(labels):
        if lab == DROUGHT:
            y[i] = 1.0
        elif lab == CONTROL:
            y[i] = -1.0
        else:
            raise ValueError(f"unknown class label: {lab!r}")
    return y


def svm_objective(w: np.ndarray, b: float, features: np.ndarray,
                  y: np.ndarray, c: float) -> float:
    margins = y * (features @ w + b)
    hinge = np.maximum(0.0, 1.0 - margins)
    return float(0.5 * w @ w + c * hinge.sum())


def train_svm(features: np.ndarray, labels: Sequence, c: float = DEFAULT_C,
              epochs: int = DEFAULT_EPOCHS) -> SvmModel:
    """Full-batch subgradient descent with averaged iterates.

    The weight step follows the 1/(lambda*t) schedule with
    lambda = 1/(m*C); the unregularized bias uses a 1/t step to stay
    stable.  The recorded objective trace is evaluated at the averaged
    iterate, starting from the zero initialization.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or len(features) != len(labels):
        raise ValueError("features must be (m, d) aligned with labels")
    if not np.all(np.isfinite(features)):
        raise ValueError("features must be finite")
    y = _signed_labels(labels)
    if len(np.unique(y)) < 2:
        raise ValueError("training requires both classes")
    if c <= 0:
        raise ValueError("C must be positive")
    if np.all(features == features[0]):
        warnings.warn("all feature rows are identical; "
                      "classes are indistinguishable")

    m, d = features.shape
    lam = 1.0 / (m * c)
    w = np.zeros(d)
    b = 0.0
    w_sum = np.zeros(d)
    b_sum = 0.0
    trace = [svm_objective(w, b, features, y, c)]
    for t in range(1, epochs + 1):
        margins = y * (features @ w + b)
        viol = margins < 1.0
        grad_w = lam * w - (y[viol] @ features[viol]) / m
        grad_b = -y[viol].sum() / m
        w = w - grad_w / (lam * t)
        b = b - grad_b / t
        w_sum += w
        b_sum += b
        trace.append(svm_objective(w_sum / t, b_sum / t, features, y, c))
    return SvmModel(w_sum / epochs, b_sum / epochs, c, tuple(trace))


def decision_values(model: SvmModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    single = features.ndim == 1
    rows = features[None, :] if single else features
    if rows.shape[1] != model.dim:
        raise ValueError(f"feature dimension {rows.shape[1]} does not "
                         f"match model dimension {model.dim}")
    vals = rows @ model.weights + model.bias
    return vals[0] if single else vals


def predict(model: SvmModel, features: np.ndarray):
    """(labels, margins): drought where the margin is strictly positive."""
    margins = decision_values(model, features)
    vals = np.atleast_1d(margins)
    labels = np.where(vals > 0, DROUGHT, CONTROL)
    if np.isscalar(margins) or margins.ndim == 0:
        return str(labels[0]), float(margins)
    return labels.astype(object), vals


def save_svm(model: SvmModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"SVMV1 {model.dim}\n")
        fh.write(" ".join(repr(float(v)) for v in model.weights) + "\n")
        fh.write(f"{model.bias!r} {model.c!r}\n")


def load_svm(path) -> SvmModel:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ModelBundleError(f"cannot read {path}: {exc}")
    if len(lines) < 3 or not lines[0].startswith("SVMV1 "):
        raise ModelBundleError(f"{path}: expected SVMV1 header")
    try:
        d = int(lines[0].split()[1])
        w = np.array([float(v) for v in lines[1].split()])
        bias_s, c_s = lines[2].split()
        model = SvmModel(w, float(bias_s), float(c_s))
    except (ValueError, IndexError) as exc:
        raise ModelBundleError(f"{path}: malformed SVM file ({exc})")
    if model.dim != d:
        raise ModelBundleError(f"{path}: header dimension {d} does not "
                               f"match {model.dim} weights")
    return model
