"""Diagnostics: subspace similarity, weight-update norms, forgetting loss.

Subspace similarity phi(A, B) = ||U1[:, :r]^T U2[:, :r]||_F^2 / r compares the
leading r left singular directions of two matrices; 1 means identical
subspaces, 0 orthogonal ones.

The forgetting loss is the cross entropy between the pretrained model's
predictive distribution (taken as the soft target) and the finetuned model's,
averaged over an evaluation set. The direction of the divergence is a
convention, not a law, so reports carry it explicitly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .adapters import load_adapters, merge
from .errors import ConfigError, ShapeError
from .model import ToyModel, predict_proba
from .store import TensorStore
from .svd import svd
from .tensor import as_matrix

PROB_FLOOR = 1e-12

_WEIGHT_NAME = re.compile(r"^layer(\d+)\.([qkvo])$")

FORGETTING_DIRECTION = "cross_entropy(pretrained -> finetuned)"


def subspace_similarity(m1, m2, r: int) -> float:
    """phi of the rank-r left singular subspaces of two matrices."""
    m1 = as_matrix(m1)
    m2 = as_matrix(m2)
    if m1.shape[0] != m2.shape[0]:
        raise ShapeError(f"row counts differ: {m1.shape[0]} vs {m2.shape[0]}")
    k = min(min(m1.shape), min(m2.shape))
    if not (1 <= r <= k):
        raise ConfigError(f"rank must satisfy 1 <= r <= {k}, got {r}")
    u1 = svd(m1).u[:, :r]
    u2 = svd(m2).u[:, :r]
    return float(np.linalg.norm(u1.T @ u2) ** 2 / r)


@dataclass(frozen=True)
class SimilarityReport:
    phi: list[float]
    rank: int
    projection: str

    def to_dict(self) -> dict:
        return {
            "metric": "subspace_similarity",
            "per_layer": list(self.phi),
            "params": {"rank": self.rank, "projection": self.projection},
        }


@dataclass(frozen=True)
class ForgettingReport:
    value: float
    sample_count: int
    direction: str = FORGETTING_DIRECTION

    def to_dict(self) -> dict:
        return {
            "metric": "forgetting_loss",
            "value": self.value,
            "params": {"sample_count": self.sample_count, "direction": self.direction},
        }


def _layer_weights(store: TensorStore, proj: str) -> dict[int, np.ndarray]:
    """Per-layer effective weight for one projection kind.

    Full checkpoints contribute the raw matrices; adapter checkpoints
    contribute merge(base + scale b a). Adapter checkpoints lacking the
    requested projection (rank 0) contribute nothing.
    """
    weights: dict[int, np.ndarray] = {}
    for name in store.names():
        match = _WEIGHT_NAME.match(name)
        if match and match.group(2) == proj:
            weights[int(match.group(1))] = store[name]
    if weights:
        return weights
    adapters, _ = load_adapters(store)
    for i, per_layer in adapters.items():
        if proj in per_layer:
            weights[i] = merge(per_layer[proj])
    return weights


def _layer_updates(store: TensorStore, proj: str) -> dict[int, np.ndarray]:
    """Per-layer full-size update matrix scale * b a for one projection kind."""
    adapters, _ = load_adapters(store)
    return {
        i: per_layer[proj].scale * (per_layer[proj].b @ per_layer[proj].a)
        for i, per_layer in adapters.items()
        if proj in per_layer
    }


def similarity_report(a_store: TensorStore, b_store: TensorStore, proj: str, r: int) -> SimilarityReport:
    """Per-layer phi between two checkpoints for one projection kind.

    Adapter checkpoints are compared through their full-size update matrices;
    full checkpoints through the raw weights.
    """
    def matrices(store: TensorStore) -> dict[int, np.ndarray]:
        if any(_WEIGHT_NAME.match(name) for name in store.names()):
            return _layer_weights(store, proj)
        return _layer_updates(store, proj)

    left = matrices(a_store)
    right = matrices(b_store)
    layers = sorted(set(left) & set(right))
    if not layers:
        raise ConfigError(f"no common layers carry projection {proj!r}")
    phi = [subspace_similarity(left[i], right[i], r) for i in layers]
    return SimilarityReport(phi=phi, rank=r, projection=proj)


def delta_norms(pretrained: TensorStore, finetuned: TensorStore, proj: str) -> list[float]:
    """Per-layer Frobenius norm of the weight change for one projection kind."""
    pre = _layer_weights(pretrained, proj)
    ft = _layer_weights(finetuned, proj)
    common = sorted(set(pre) & set(ft))
    if not common:
        raise ConfigError(f"no common layers carry projection {proj!r}")
    norms = []
    for i in common:
        if pre[i].shape != ft[i].shape:
            raise ShapeError(
                f"layer{i}.{proj} shapes differ: {pre[i].shape} vs {ft[i].shape}"
            )
        norms.append(float(np.linalg.norm(ft[i] - pre[i])))
    return norms


def forgetting_loss(pre_model: ToyModel, ft_model: ToyModel, tokens: np.ndarray) -> ForgettingReport:
    """Mean cross entropy from the pretrained predictions to the finetuned ones."""
    if pre_model.cfg != ft_model.cfg:
        raise ConfigError("models have different configurations")
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ConfigError("evaluation set must be a nonempty 2-D token array")
    p_pre = predict_proba(pre_model, tokens)
    p_ft = predict_proba(ft_model, tokens)
    ce = -(p_pre * np.log(np.maximum(p_ft, PROB_FLOOR))).sum(axis=1)
    return ForgettingReport(value=float(ce.mean()), sample_count=int(tokens.shape[0]))
