"""Training objectives and the intra-class distance-spread diagnostic.

Everything here works on a PK batch laid out identity-major: row ``i * K + a``
is the a-th clip of the i-th identity. Selections break ties toward the lowest
flat row index, which is what ``torch.argmax``/``torch.argmin`` do on a masked
row.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F

from .distance import cosine_distance_matrix
from .errors import (ConfigError, DegenerateBatchError, LabelOutOfRangeError,
                     ShapeMismatchError)

__all__ = [
    "BatchFeatures", "TripletSelection", "LossBreakdown", "LossConfig", "LossTargets", "DVDP",
    "batch_hard_triplet_loss", "dvdp", "dvdp_terms", "aitl_loss", "itl_loss",
    "identity_softmax_loss", "attribute_bce_loss", "unified_loss", "select_attr_vector",
]


@dataclass
class BatchFeatures:
    """Re-ID embeddings and attribute probabilities for one PK batch."""

    reid: torch.Tensor
    attr_pred: Optional[torch.Tensor]
    P: int
    K: int
    person_index: Optional[torch.Tensor] = None

    def __post_init__(self):
        n = self.P * self.K
        if self.reid.dim() != 2 or self.reid.shape[0] != n:
            raise ShapeMismatchError(f"reid must have P*K={n} rows, got {tuple(self.reid.shape)}")
        if self.attr_pred is not None:
            if self.attr_pred.dim() != 2 or self.attr_pred.shape[0] != n:
                raise ShapeMismatchError(
                    f"attr_pred must have P*K={n} rows, got {tuple(self.attr_pred.shape)}")
            lo, hi = self.attr_pred.min().item(), self.attr_pred.max().item()
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"attribute probabilities must lie in [0, 1], got [{lo}, {hi}]")
        if self.person_index is None:
            self.person_index = torch.arange(self.P, device=self.reid.device).repeat_interleave(self.K)
        elif self.person_index.shape != (n,):
            raise ShapeMismatchError("person_index must have one entry per row")


class TripletSelection(NamedTuple):
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor


class DVDP(NamedTuple):
    total: float
    mean: float


@dataclass
class LossBreakdown:
    l_bce: torch.Tensor
    l_tri: torch.Tensor
    l_softmax: torch.Tensor
    l_aitl: torch.Tensor
    total: torch.Tensor
    # which intra-class term occupies the l_aitl slot: "aitl", "itl" or None
    intra_kind: Optional[str] = None

    def as_floats(self):
        return {name: float(getattr(self, name).detach())
                for name in ("l_bce", "l_tri", "l_softmax", "l_aitl", "total")}


def _same_identity_mask(person_index):
    same = person_index[:, None] == person_index[None, :]
    eye = torch.eye(len(person_index), dtype=torch.bool, device=person_index.device)
    return same & ~eye, ~same


def _masked_argmax(values, mask):
    return values.masked_fill(~mask, float("-inf")).argmax(dim=1)


def _masked_argmin(values, mask):
    return values.masked_fill(~mask, float("inf")).argmin(dim=1)


def _check_positives(pos_mask):
    if not pos_mask.any(dim=1).all():
        raise DegenerateBatchError("every anchor needs at least one other clip of its identity (K >= 2)")


def _reduce(terms, reduction):
    if reduction == "sum":
        return terms.sum()
    if reduction == "mean":
        return terms.mean()
    if reduction == "none":
        return terms
    raise ConfigError(f"unknown reduction {reduction!r}")


def batch_hard_triplet_loss(batch, margin=0.3):
    """Batch-hard triplet loss on cosine distances, averaged over anchors.

    Returns ``(loss, selection)`` where ``selection`` holds the hardest positive
    and hardest negative picked for every anchor.
    """
    if batch.P < 2 or len(torch.unique(batch.person_index)) < 2:
        raise DegenerateBatchError("batch-hard mining needs at least two identities")
    fd = cosine_distance_matrix(batch.reid)
    pos_mask, neg_mask = _same_identity_mask(batch.person_index)
    _check_positives(pos_mask)

    anchors = torch.arange(fd.shape[0], device=fd.device)
    hp = _masked_argmax(fd.detach(), pos_mask)
    hn = _masked_argmin(fd.detach(), neg_mask)
    d_ap = fd[anchors, hp]
    d_an = fd[anchors, hn]
    loss = F.relu(d_ap - d_an + margin).mean()
    return loss, TripletSelection(anchors, hp, hn)


def _intra_class_terms(fd, selector_dist, person_index, margin):
    pos_mask, _ = _same_identity_mask(person_index)
    _check_positives(pos_mask)
    anchors = torch.arange(fd.shape[0], device=fd.device)
    far = _masked_argmax(selector_dist, pos_mask)
    near = _masked_argmin(selector_dist, pos_mask)
    terms = F.relu(fd[anchors, far] - fd[anchors, near] + margin)
    return terms, TripletSelection(anchors, near, far)


def dvdp_terms(batch):
    """Per-anchor ``[FD(a, FN(a)) - FD(a, FP(a))]+`` on the Re-ID features."""
    with torch.no_grad():
        fd = cosine_distance_matrix(batch.reid)
        terms, _ = _intra_class_terms(fd, fd, batch.person_index, 0.0)
    return terms


def dvdp(batch):
    """Distance variance among different positives of one batch.

    ``total`` is the sum over anchors; ``mean`` divides by the anchor count
    and is the value worth logging, since it does not scale with batch size.
    """
    terms = dvdp_terms(batch)
    return DVDP(float(terms.sum()), float(terms.mean()))


def aitl_loss(batch, margin=0.0, reduction="sum"):
    """Attribute-aware identity-hard triplet loss.

    Within each identity the attribute-farthest clip plays the negative and the
    attribute-nearest clip the positive; the hinge is taken on Re-ID feature
    distances. Attribute distances only pick indices and carry no gradient.
    The returned selection has ``positive=AP`` and ``negative=AN``.
    """
    if batch.attr_pred is None:
        raise ValueError("aitl_loss needs attribute predictions")
    fd = cosine_distance_matrix(batch.reid)
    with torch.no_grad():
        ad = cosine_distance_matrix(batch.attr_pred.detach())
    terms, selection = _intra_class_terms(fd, ad, batch.person_index, margin)
    return _reduce(terms, reduction), selection


def itl_loss(batch, margin=0.0, reduction="sum"):
    """Identity-hard triplet loss: like :func:`aitl_loss` but the intra-class
    positive/negative are picked by Re-ID feature distance."""
    fd = cosine_distance_matrix(batch.reid)
    terms, selection = _intra_class_terms(fd, fd.detach(), batch.person_index, margin)
    return _reduce(terms, reduction), selection


def identity_softmax_loss(features, labels, weight, bias=None):
    """Mean cross-entropy of a linear identity classifier on ``features``."""
    labels = torch.as_tensor(labels, device=features.device).long()
    num_classes = weight.shape[0]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRangeError(
            f"labels must lie in [0, {num_classes}), got [{int(labels.min())}, {int(labels.max())}]")
    logits = F.linear(features, weight, bias)
    return F.cross_entropy(logits, labels)


def attribute_bce_loss(attr_logits, attr_targets):
    """Mean element-wise binary cross-entropy of ``sigmoid(attr_logits)``."""
    attr_targets = torch.as_tensor(attr_targets, dtype=attr_logits.dtype, device=attr_logits.device)
    if attr_logits.shape != attr_targets.shape:
        raise ShapeMismatchError(
            f"logits {tuple(attr_logits.shape)} vs targets {tuple(attr_targets.shape)}")
    if not ((attr_targets == 0) | (attr_targets == 1)).all():
        raise ValueError("attribute targets must be 0 or 1")
    return F.binary_cross_entropy_with_logits(attr_logits, attr_targets)


@dataclass
class LossConfig:
    use_bce: bool = True
    use_tri: bool = True
    use_softmax: bool = True
    use_aitl: bool = True
    use_itl: bool = False
    tri_margin: float = 0.3
    aitl_margin: float = 0.0
    aitl_reduction: str = "sum"
    # which attribute probabilities feed the attribute distance
    attr_source: str = "concat"

    def __post_init__(self):
        if self.use_aitl and self.use_itl:
            raise ConfigError("AITL and ITL are alternatives; enable at most one")
        if self.attr_source not in ("concat", "relevant", "irrelevant"):
            raise ConfigError(f"attr_source must be concat/relevant/irrelevant, got {self.attr_source!r}")
        if self.aitl_reduction not in ("sum", "mean"):
            raise ConfigError(f"aitl_reduction must be sum or mean, got {self.aitl_reduction!r}")


@dataclass
class LossTargets:
    labels: torch.Tensor          # training-class index per row, for the softmax head
    attr_rel: torch.Tensor        # binarized ID-relevant targets
    attr_irrel: torch.Tensor      # binarized ID-irrelevant targets
    P: int
    K: int
    person_index: Optional[torch.Tensor] = field(default=None)


def select_attr_vector(rel_probs, irrel_probs, source="concat"):
    if source == "relevant":
        return rel_probs
    if source == "irrelevant":
        return irrel_probs
    return torch.cat([rel_probs, irrel_probs], dim=1)


def unified_loss(outputs, targets, config, classifier):
    """Unweighted sum of the enabled loss components.

    ``outputs`` is a :class:`~aitl_reid.model.StreamOutputs` for the whole
    batch and ``classifier`` the linear identity head (``weight``/``bias``).
    Disabled components contribute an exact zero.
    """
    ref = outputs.reid_feature
    zero = ref.new_zeros(())
    l_bce = l_tri = l_softmax = l_intra = zero
    intra_kind = None

    if config.use_bce:
        logits = torch.cat([outputs.rel_logits, outputs.irrel_logits], dim=1)
        tgt = torch.cat([targets.attr_rel, targets.attr_irrel], dim=1)
        l_bce = attribute_bce_loss(logits, tgt)

    needs_batch = config.use_tri or config.use_aitl or config.use_itl
    if needs_batch:
        attr = None
        if config.use_aitl:
            attr = select_attr_vector(outputs.rel_probs, outputs.irrel_probs, config.attr_source)
        batch = BatchFeatures(ref, attr, targets.P, targets.K, targets.person_index)
        if config.use_tri:
            l_tri, _ = batch_hard_triplet_loss(batch, config.tri_margin)
        if config.use_aitl:
            l_intra, _ = aitl_loss(batch, config.aitl_margin, config.aitl_reduction)
            intra_kind = "aitl"
        elif config.use_itl:
            l_intra, _ = itl_loss(batch, config.aitl_margin, config.aitl_reduction)
            intra_kind = "itl"

    if config.use_softmax:
        l_softmax = identity_softmax_loss(ref, targets.labels, classifier.weight, classifier.bias)

    total = l_bce + l_tri + l_softmax + l_intra
    return LossBreakdown(l_bce, l_tri, l_softmax, l_intra, total, intra_kind)
