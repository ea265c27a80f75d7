"""Row normalization and pairwise cosine distances.

All functions operate on torch tensors of shape ``(rows, dim)`` and are
differentiable. Cosine distance is ``1 - cos(u, v)`` and lies in ``[0, 2]``.
"""

import torch

from .errors import DimensionMismatchError, ShapeError, ZeroVectorError

__all__ = ["normalize", "cosine_distance_matrix", "squared_euclidean_matrix"]


def _as_matrix(x, name):
    x = torch.as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.to(torch.get_default_dtype())
    if x.dim() != 2:
        raise ShapeError(f"{name} must be 2-D (rows, dim), got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite entries")
    return x


def _row_norms(x, name):
    norms = x.norm(dim=1, keepdim=True)
    zero = (norms == 0).flatten()
    if zero.any():
        rows = zero.nonzero().flatten().tolist()
        raise ZeroVectorError(f"{name} has all-zero rows at {rows}")
    return norms


def normalize(features):
    """Scale every row of ``features`` to unit L2 norm.

    Raises ZeroVectorError when any row is identically zero; a dead embedding
    should not be hidden by an epsilon.
    """
    x = _as_matrix(features, "features")
    return x / _row_norms(x, "features")


def cosine_distance_matrix(a, b=None):
    """Pairwise ``1 - <a_i, b_j> / (|a_i| |b_j|)`` for all rows of a and b.

    With ``b`` omitted the distances of ``a`` to itself are returned, and the
    diagonal is pinned to exactly zero.
    """
    self_distance = b is None
    a = _as_matrix(a, "a")
    b = a if self_distance else _as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    an = a / _row_norms(a, "a")
    bn = an if self_distance else b / _row_norms(b, "b")
    dist = (1.0 - an @ bn.t()).clamp(0.0, 2.0)
    if self_distance:
        # rounding leaves ~1e-16 on the diagonal; the true value is 0
        eye = torch.eye(dist.shape[0], dtype=torch.bool, device=dist.device)
        dist = dist.masked_fill(eye, 0.0)
    return dist


def squared_euclidean_matrix(a, b):
    """Plain squared Euclidean distances. Only used to cross-check cosine."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
