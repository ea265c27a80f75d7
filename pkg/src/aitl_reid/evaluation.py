"""Ranking metrics, DVDP traces and model-level evaluation."""

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from .distance import cosine_distance_matrix, normalize
from .errors import DimensionMismatchError, NoValidGalleryError
from .sampler import clip_indices

logger = logging.getLogger(__name__)

RANKS = (1, 5, 10, 20)


@dataclass
class RankingResult:
    rank_k: Dict[int, float]
    mAP: float
    num_queries: int = 0
    num_skipped: int = 0
    average_precision: Optional[np.ndarray] = field(default=None, repr=False)
    tag: str = ""

    def to_json(self):
        out = {f"R{k}": float(v) for k, v in sorted(self.rank_k.items())}
        out.update(mAP=float(self.mAP), num_queries=self.num_queries, num_skipped=self.num_skipped)
        if self.tag:
            out["tag"] = self.tag
        return out


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def cmc_map(query_features, query_ids, query_cams, gallery_features, gallery_ids, gallery_cams,
            ranks=RANKS):
    """CMC Rank-k and mAP for cosine-distance retrieval.

    Gallery entries sharing both identity and camera with the query are
    excluded. Distance ties are broken by gallery index. Queries left without
    any true match are skipped with a warning; if every query is skipped a
    :class:`NoValidGalleryError` is raised.
    """
    qf = torch.as_tensor(_np(query_features), dtype=torch.float64)
    gf = torch.as_tensor(_np(gallery_features), dtype=torch.float64)
    if qf.shape[1] != gf.shape[1]:
        raise DimensionMismatchError(f"query dim {qf.shape[1]} != gallery dim {gf.shape[1]}")
    dist = cosine_distance_matrix(qf, gf).numpy()
    q_ids, q_cams = _np(query_ids), _np(query_cams)
    g_ids, g_cams = _np(gallery_ids), _np(gallery_cams)

    hits = np.zeros(len(ranks))
    aps = []
    skipped = []
    for i in range(dist.shape[0]):
        order = np.argsort(dist[i], kind="stable")
        keep = ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        matches = (g_ids[order][keep] == q_ids[i])
        if not matches.any():
            skipped.append(i)
            continue
        first = int(np.argmax(matches))
        hits += np.array([first < k for k in ranks], dtype=float)
        positions = np.flatnonzero(matches)
        precision = np.arange(1, len(positions) + 1) / (positions + 1)
        aps.append(precision.mean())

    if skipped:
        warnings.warn(f"{len(skipped)} query(ies) have no valid gallery match and were skipped")
        logger.warning("skipped %d queries without valid gallery matches", len(skipped))
    if not aps:
        raise NoValidGalleryError(skipped[0] if skipped else -1, "no query has a valid gallery match")
    n = len(aps)
    aps = np.asarray(aps)
    return RankingResult({k: float(h / n) for k, h in zip(ranks, hits)}, float(aps.mean()),
                         num_queries=n, num_skipped=len(skipped), average_precision=aps)


@dataclass
class DVDPTrace:
    epochs: List[int] = field(default_factory=list)
    dvdp: List[float] = field(default_factory=list)
    mAP: List[float] = field(default_factory=list)

    def append(self, epoch, dvdp, mAP):
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValueError(f"epochs must increase: {epoch} after {self.epochs[-1]}")
        self.epochs.append(int(epoch))
        self.dvdp.append(float(dvdp))
        self.mAP.append(float("nan") if mAP is None else float(mAP))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "dvdp", "mAP"])
            for row in zip(self.epochs, self.dvdp, self.mAP):
                w.writerow([row[0], repr(row[1]), repr(row[2])])

    @classmethod
    def from_csv(cls, path):
        trace = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                trace.append(int(row["epoch"]), float(row["dvdp"]), float(row["mAP"]))
        return trace


class DVDPTracker:
    """Trainer hook: collects per-batch mean DVDP and closes each epoch."""

    def __init__(self):
        self.trace = DVDPTrace()
        self._batch_values = []

    def on_batch(self, dvdp_mean):
        self._batch_values.append(float(dvdp_mean))

    def on_epoch_end(self, epoch, mAP=None):
        value = float(np.mean(self._batch_values)) if self._batch_values else float("nan")
        self._batch_values = []
        self.trace.append(epoch, value, mAP)
        return value


def track_dvdp():
    return DVDPTracker()


def _tracklet_clips(tracklet, T, n_clips):
    """Deterministic evaluation clips: the ``k``-th frame of every chunk."""
    n = len(tracklet)
    chunk = max(1, n // T)
    offsets = range(min(n_clips, chunk))
    return [clip_indices(n, T, offset=o) for o in offsets]


@torch.no_grad()
def extract_features(model, tracklets, T=4, clips_per_tracklet=4, batch_size=32):
    """L2-normalized fused Re-ID features, one row per tracklet.

    Each tracklet contributes up to ``clips_per_tracklet`` deterministic clips
    whose fused features are averaged before normalization.
    """
    was_training = model.training
    model.eval()
    owners, clips = [], []
    for i, t in enumerate(tracklets):
        for idx in _tracklet_clips(t, T, clips_per_tracklet):
            owners.append(i)
            clips.append(t.get_frames(idx))
    dtype = next(model.parameters()).dtype
    feats = []
    with torch.no_grad():
        for s in range(0, len(clips), batch_size):
            arr = np.stack(clips[s:s + batch_size]).astype(np.float32) / 255.0
            x = torch.from_numpy(arr.transpose(0, 1, 4, 2, 3)).to(dtype)
            feats.append(model(x).reid_feature)
    feats = torch.cat(feats)
    owners = torch.as_tensor(owners)
    out = torch.zeros(len(tracklets), feats.shape[1], dtype=feats.dtype)
    out.index_add_(0, owners, feats)
    out /= torch.bincount(owners, minlength=len(tracklets)).unsqueeze(1).to(out.dtype)
    model.train(was_training)
    return normalize(out)


def evaluate_model(model, query, gallery, T=4, clips_per_tracklet=4):
    qf = extract_features(model, query, T, clips_per_tracklet)
    gf = extract_features(model, gallery, T, clips_per_tracklet)
    return cmc_map(qf, [t.person_id for t in query], [t.camera_id for t in query],
                   gf, [t.person_id for t in gallery], [t.camera_id for t in gallery])


def cross_dataset_eval(model, train_dataset_tag, test_splits, T=4, clips_per_tracklet=4):
    """Evaluate a model trained on one dataset on another's query/gallery split.

    No adaptation of any kind is performed.
    """
    result = evaluate_model(model, test_splits.query, test_splits.gallery, T, clips_per_tracklet)
    result.tag = f"{train_dataset_tag}->{test_splits.tag}"
    return result
