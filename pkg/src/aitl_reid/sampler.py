"""PK mini-batch construction from tracklet datasets.

A batch holds P identities with K clips each, identity-major. Clips are cut
with restricted random sampling: the tracklet is split into T equal chunks
and one frame is drawn from each.
"""

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Union

import numpy as np

from .errors import InsufficientIdentitiesError, ShapeError

__all__ = ["Tracklet", "Clip", "MiniBatch", "clip_indices", "sample_clip", "sample_batch",
           "epoch_iterator", "group_by_identity"]

_warned_small_k = False


@dataclass(eq=False)
class Tracklet:
    """One tracked pedestrian sequence from a single camera.

    ``frames`` is either a uint8 array ``(N, H, W, 3)`` held in memory or a
    list of image paths read on demand.
    """

    tracklet_id: str
    person_id: int
    camera_id: int
    frames: Union[np.ndarray, List[str]]
    attributes: Dict[str, int] = field(default_factory=dict)
    # generator ground truth (e.g. occlusion masks); not persisted
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ShapeError(f"tracklet {self.tracklet_id} has no frames")

    def __len__(self):
        return len(self.frames)

    def get_frames(self, indices=None):
        if indices is None:
            indices = range(len(self.frames))
        if isinstance(self.frames, np.ndarray):
            return self.frames[np.asarray(indices, dtype=np.int64)]
        from PIL import Image

        out = []
        for i in indices:
            with Image.open(self.frames[i]) as img:
                out.append(np.asarray(img.convert("RGB")))
        return np.stack(out)


@dataclass(eq=False)
class Clip:
    tracklet_id: str
    person_id: int
    frame_indices: np.ndarray
    frames: np.ndarray          # (T, H, W, 3) uint8
    attributes: Dict[str, int]
    camera_id: int = 0

    @property
    def T(self):
        return len(self.frame_indices)


@dataclass(eq=False)
class MiniBatch:
    clips: List[Clip]
    P: int
    K: int

    def __post_init__(self):
        if len(self.clips) != self.P * self.K:
            raise ShapeError(f"expected {self.P * self.K} clips, got {len(self.clips)}")

    @property
    def person_ids(self):
        return [c.person_id for c in self.clips]

    def images(self):
        """Frames as float32 ``(P*K, T, 3, H, W)`` scaled to [0, 1]."""
        arr = np.stack([c.frames for c in self.clips]).astype(np.float32) / 255.0
        return arr.transpose(0, 1, 4, 2, 3)


def clip_indices(num_frames, T, rng=None, offset=None):
    """Frame indices for a T-frame clip out of ``num_frames``.

    With ``rng`` one index is drawn uniformly inside each chunk; with
    ``offset`` the chunk's ``offset``-th frame (clamped) is taken instead, which
    gives deterministic evaluation clips. Short tracklets repeat cyclically.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if num_frames < T:
        return np.arange(T, dtype=np.int64) % num_frames
    chunks = np.array_split(np.arange(num_frames), T)
    if rng is not None:
        return np.array([c[rng.integers(len(c))] for c in chunks], dtype=np.int64)
    offset = 0 if offset is None else offset
    return np.array([c[min(offset, len(c) - 1)] for c in chunks], dtype=np.int64)


def sample_clip(tracklet, T, rng):
    idx = clip_indices(len(tracklet), T, rng=rng)
    return Clip(tracklet.tracklet_id, tracklet.person_id, idx, tracklet.get_frames(idx),
                tracklet.attributes, tracklet.camera_id)


def group_by_identity(dataset: Sequence[Tracklet]):
    groups = {}
    for t in dataset:
        groups.setdefault(t.person_id, []).append(t)
    return groups


def _warn_small_k(K):
    global _warned_small_k
    if K < 3 and not _warned_small_k:
        _warned_small_k = True
        warnings.warn(f"K={K} < 3: with only one other positive per anchor the intra-class "
                      "triplet terms vanish", stacklevel=3)


def _check_pk(K):
    if K < 2:
        raise ValueError("K must be >= 2 for triplet mining")
    _warn_small_k(K)


def _batch_for(pids, groups, K, T, rng):
    clips = []
    for pid in pids:
        pool = groups[pid]
        replace = len(pool) < K
        chosen = rng.choice(len(pool), size=K, replace=replace)
        clips.extend(sample_clip(pool[j], T, rng) for j in chosen)
    return MiniBatch(clips, len(pids), K)


def sample_batch(dataset, P, K, T, rng):
    """Draw P identities without replacement, then K tracklets of each.

    Tracklets are drawn without replacement when the identity has at least K
    of them, otherwise with replacement (each draw still cuts a fresh clip).
    """
    _check_pk(K)
    groups = group_by_identity(dataset)
    if len(groups) < P:
        raise InsufficientIdentitiesError(f"need {P} identities, dataset has {len(groups)}")
    pids = sorted(groups)
    chosen = rng.choice(len(pids), size=P, replace=False)
    return _batch_for([pids[i] for i in chosen], groups, K, T, rng)


def epoch_iterator(dataset, P, K, T, rng):
    """Yield ``len(identities) // P`` batches; each identity anchors at most one."""
    _check_pk(K)
    groups = group_by_identity(dataset)
    if len(groups) < P:
        raise InsufficientIdentitiesError(f"need {P} identities, dataset has {len(groups)}")
    pids = sorted(groups)
    order = rng.permutation(len(pids))
    for b in range(len(pids) // P):
        batch_pids = [pids[i] for i in order[b * P:(b + 1) * P]]
        yield _batch_for(batch_pids, groups, K, T, rng)
