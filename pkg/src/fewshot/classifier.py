"""Image-to-class classification over local descriptors.

A query image is scored against each class by summing, over all of its
descriptors, the cosine similarities to the k nearest descriptors in
that class's pooled support descriptors. Ties (equal similarity, equal
class scores) break toward the lower index so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embedder import DescriptorMap
from .errors import ConfigurationError, UsageError
from .nn import normalize_rows
from .tensor import Tensor, as_tensor, concat, matmul, reshape, take_along_last, transpose, tsum


@dataclass
class ClassPool:
    """All support descriptors of one class, stacked row-wise."""

    class_id: int
    descriptors: Tensor  # (n_pool, D)
    unit: Tensor  # row-normalised copy (zero rows stay zero)

    @classmethod
    def from_maps(cls, class_id: int, maps: Sequence[DescriptorMap]) -> "ClassPool":
        rows = concat([m.descriptors() for m in maps], axis=0)
        return cls(class_id=class_id, descriptors=rows, unit=normalize_rows(rows))

    @classmethod
    def from_matrix(cls, class_id: int, matrix) -> "ClassPool":
        rows = as_tensor(matrix)
        return cls(class_id=class_id, descriptors=rows, unit=normalize_rows(rows))

    def __len__(self) -> int:
        return self.descriptors.shape[0]


@dataclass
class ClassScores:
    """Per-class summed similarities and the resulting label."""

    scores: np.ndarray
    label: int
    k: int


def _check_k(k: int, pool_size: int) -> None:
    if not 1 <= k <= pool_size:
        raise ConfigurationError(
            f"k={k} is out of range for a pool of {pool_size} descriptors"
        )


def _topk_indices(sims: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values: descending, ties to lower index
    return np.argsort(-sims, axis=-1, kind="stable")[..., :k]


def cosine_topk(q, pool: ClassPool, k: int) -> np.ndarray:
    """The k largest cosine similarities of ``q`` to the pool, descending."""
    _check_k(k, len(pool))
    qv = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    norm = np.linalg.norm(qv)
    qu = qv / norm if norm > 1e-12 else np.zeros_like(qv)
    sims = pool.unit.data @ qu
    return sims[_topk_indices(sims, k)]


def _query_matrix(query) -> Tensor:
    if isinstance(query, DescriptorMap):
        return query.descriptors()
    return as_tensor(query)


def _scores_tensor(qdesc: Tensor, pools: Sequence[ClassPool], k: int) -> Tensor:
    """(n_classes,) summed top-k similarity scores, on the tape.

    The top-k selection is computed from forward values and treated as
    constant; gradients flow to the selected similarities only.
    """
    qn = normalize_rows(qdesc)
    cols = []
    for pool in pools:
        _check_k(k, len(pool))
        sims = matmul(qn, transpose(pool.unit, (1, 0)))  # (M, n_pool)
        top = take_along_last(sims, _topk_indices(sims.data, k))
        cols.append(reshape(tsum(top), (1,)))
    return concat(cols, axis=0)


def image_to_class_score(query, pool: ClassPool, k: int) -> float:
    """Sum over the query's descriptors of their top-k pool similarities."""
    return float(_scores_tensor(_query_matrix(query), [pool], k).data[0])


def classify(query, pools: Sequence[ClassPool], k: int) -> ClassScores:
    """Score every class and take the argmax (ties to lowest index)."""
    if len(pools) == 0:
        raise UsageError("classify requires at least one class pool")
    scores = _scores_tensor(_query_matrix(query), pools, k).data
    return ClassScores(scores=scores, label=int(np.argmax(scores)), k=k)


def episode_logits(query, pools: Sequence[ClassPool], k: int,
                   temperature: float | None = None) -> Tensor:
    """Scores scaled to logits for the episodic softmax loss.

    The default temperature is M, the query's descriptor count, which
    keeps logits of the same magnitude regardless of map size.
    """
    qdesc = _query_matrix(query)
    if temperature is None:
        temperature = float(qdesc.shape[0])
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    return _scores_tensor(qdesc, pools, k) * (1.0 / temperature)


def batch_logits(qdesc: Tensor, pools: Sequence[ClassPool], k: int,
                 temperature: float | None = None) -> Tensor:
    """Logits for a (B, M, D) stack of query descriptor matrices.

    Same scoring rule as ``episode_logits``, vectorised over the batch;
    returns (B, n_classes).
    """
    b, m, d = qdesc.shape
    if temperature is None:
        temperature = float(m)
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    flat = reshape(normalize_rows(qdesc), (b * m, d))
    cols = []
    for pool in pools:
        _check_k(k, len(pool))
        sims = matmul(flat, transpose(pool.unit, (1, 0)))  # (B*M, n_pool)
        top = take_along_last(sims, _topk_indices(sims.data, k))
        per_image = tsum(reshape(tsum(top, axis=1), (b, m)), axis=1)
        cols.append(reshape(per_image, (b, 1)))
    return concat(cols, axis=1) * (1.0 / temperature)
