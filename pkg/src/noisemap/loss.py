"""
Noise-robust DMI loss and the binary cross-entropy baseline.

The joint matrix is oriented with predicted classes on the rows and label
classes on the columns: ``u[a][b] = mean_i probs_i[a] * labels_i[b]``.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DomainError, EmptyBatchError
from .tensor import Tensor


DMI_EPS = 1e-8
BCE_EPS = 1e-7

Labels = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class JointMatrix:
    """Empirical K x K joint distribution of predictions and labels."""

    tensor: Tensor
    n: int

    @property
    def u(self) -> np.ndarray:
        return self.tensor.data

    @property
    def k(self) -> int:
        return int(self.tensor.shape[0])

    def det(self) -> float:
        return float(np.linalg.det(self.u.astype(np.float64)))


def flatten_pixels(scores: Tensor) -> Tensor:
    """(B, K, H, W) -> (B*H*W, K), pixels as samples."""
    if len(scores.shape) != 4:
        raise ArgumentError(f"Expected (batch, classes, height, width), got {scores.shape}")
    batch, classes, height, width = scores.shape
    return T.reshape(T.transpose(scores, (0, 2, 3, 1)), (batch * height * width, classes))


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DomainError(f"Labels must lie in [0, {classes}), found range [{labels.min()}, {labels.max()}]")
    return np.eye(classes, dtype=dtype)[labels]


def _label_matrix(labels: Labels, n: int, k: int, dtype) -> np.ndarray:
    values = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if values.shape == (n, k):
        matrix = values.astype(dtype, copy=False)
    else:
        matrix = one_hot(values, k, dtype=dtype)
    if matrix.shape != (n, k):
        raise ArgumentError(f"Labels of shape {matrix.shape} do not match predictions ({n}, {k})")
    if not np.allclose(matrix.sum(axis=1), 1.0, atol=1e-4):
        raise DomainError("Label rows must sum to 1")
    return matrix


def joint_matrix(probs: Tensor, labels: Labels) -> JointMatrix:
    """Differentiable joint matrix from predicted distributions and one-hot or soft labels."""
    if len(probs.shape) != 2:
        raise ArgumentError(f"Expected probabilities of shape (N, K), got {probs.shape}")
    n, k = probs.shape
    if n == 0:
        raise EmptyBatchError("Joint matrix needs at least one sample")
    if not np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-3):
        raise DomainError("Prediction rows must sum to 1")

    label_matrix = Tensor(_label_matrix(labels, n, k, probs.dtype))
    u = T.scale(T.matmul(T.transpose(probs, (1, 0)), label_matrix), 1.0 / n)
    return JointMatrix(tensor=u, n=n)


def dmi_loss(probs: Tensor, labels: Labels) -> Tensor:
    """-log |det U|, with |det U| clamped below at 1e-8."""
    if len(probs.shape) != 2 or probs.shape[1] != 2:
        raise ArgumentError(f"DMI loss is defined here for K = 2, got predictions of shape {probs.shape}")
    joint = joint_matrix(probs, labels)
    mutual_information = T.clip(T.abs_(T.det2x2(joint.tensor)), DMI_EPS, None)
    return T.scale(T.log(mutual_information), -1.0)


def bce_loss(probs: Tensor, labels: Labels) -> Tensor:
    """Mean binary cross-entropy of positive-class probabilities, clamped to [1e-7, 1 - 1e-7]."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    y = y.reshape(probs.shape).astype(probs.dtype)
    p = T.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    positive = T.mul(T.log(p), y)
    negative = T.mul(T.log(T.add(T.scale(p, -1.0), 1.0)), 1.0 - y)
    return T.scale(T.mean(T.add(positive, negative)), -1.0)
