"""Synthetic attribute-driven tracklets and the MARS-style on-disk layout.

Layout written by :func:`export_dataset` and read by :func:`load_mars_layout`::

    root/
      schema.json                 # attribute list with arity and group
      attributes.csv              # tracklet_id,<attr1>,<attr2>,...
      0007/
        0007C3T0002F000.png       # person 7, camera 3, tracklet 2, frame 0
        ...

Frame files follow ``<pid:4>C<cam>T<tracklet:4>F<frame:3>.<png|jpg>``.
"""

import csv
import json
import logging
import os
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import ConfigError, LayoutError, MissingAnnotationError
from .sampler import Tracklet

logger = logging.getLogger(__name__)

ID_RELEVANT = "id_relevant"
ID_IRRELEVANT = "id_irrelevant"

FRAME_RE = re.compile(r"^(\d{4})C(\d+)T(\d{4})F(\d{3,})\.(png|jpg|jpeg)$", re.IGNORECASE)


@dataclass(frozen=True)
class Attribute:
    name: str
    arity: int
    group: str


@dataclass(frozen=True)
class AttributeSchema:
    attributes: Tuple[Attribute, ...]

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ConfigError(f"attribute names must be unique: {names}")
        for a in self.attributes:
            if a.arity < 2:
                raise ConfigError(f"attribute {a.name} needs arity >= 2")
            if a.group not in (ID_RELEVANT, ID_IRRELEVANT):
                raise ConfigError(f"attribute {a.name} has unknown group {a.group!r}")
        if not self.group(ID_RELEVANT) or not self.group(ID_IRRELEVANT):
            raise ConfigError("schema needs at least one attribute in each group")

    @property
    def names(self):
        return [a.name for a in self.attributes]

    def group(self, group):
        return [a for a in self.attributes if a.group == group]

    def binary_width(self, group):
        return sum(_width(a) for a in self.group(group))

    def binarize(self, attributes, group):
        """One-vs-all encoding; a binary attribute takes a single column."""
        out = []
        for a in self.group(group):
            v = int(attributes[a.name])
            if not 0 <= v < a.arity:
                raise ValueError(f"{a.name}={v} outside arity {a.arity}")
            if a.arity == 2:
                out.append(float(v))
            else:
                out.extend(1.0 if k == v else 0.0 for k in range(a.arity))
        return np.asarray(out, dtype=np.float32)

    def to_json(self):
        return {"attributes": [asdict(a) for a in self.attributes]}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(Attribute(d["name"], int(d["arity"]), d["group"]) for d in obj["attributes"]))


def _width(a):
    return 1 if a.arity == 2 else a.arity


def default_schema():
    return AttributeSchema((
        Attribute("top_color", 6, ID_RELEVANT),
        Attribute("bottom_color", 6, ID_RELEVANT),
        Attribute("gender", 2, ID_RELEVANT),
        Attribute("bag", 2, ID_RELEVANT),
        Attribute("pose", 3, ID_IRRELEVANT),
        Attribute("motion", 3, ID_IRRELEVANT),
        Attribute("occlusion", 2, ID_IRRELEVANT),
    ))


@dataclass
class SyntheticConfig:
    identities: int = 100
    tracklets_per_identity: int = 6
    frames_per_tracklet: Tuple[int, int] = (8, 16)
    width: int = 64
    height: int = 128
    noise: float = 10.0
    occlusion_prob: float = 0.35
    num_cameras: int = 6
    # per-identity colour perturbation around the attribute palette, 0-255 scale
    shade_jitter: float = 28.0
    seed: int = 0

    def __post_init__(self):
        self.frames_per_tracklet = tuple(self.frames_per_tracklet)
        if self.identities < 2:
            raise ConfigError("need at least 2 identities")
        if self.tracklets_per_identity < 2:
            raise ConfigError("need at least 2 tracklets per identity")
        lo, hi = self.frames_per_tracklet
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad frames_per_tracklet range {self.frames_per_tracklet}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError("occlusion_prob must lie in [0, 1]")
        if self.width < 16 or self.height < 32:
            raise ConfigError("images must be at least 16x32")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


PALETTE = np.array([
    [200, 40, 40],    # red
    [40, 60, 200],    # blue
    [40, 160, 60],    # green
    [230, 210, 60],   # yellow
    [235, 235, 235],  # white
    [35, 35, 35],     # black
], dtype=np.float32)

SKIN = np.array([220, 180, 150], dtype=np.float32)
HAIR = np.array([60, 40, 25], dtype=np.float32)


def _identity_traits(schema, rng, cfg):
    attrs = {}
    for a in schema.group(ID_RELEVANT):
        attrs[a.name] = int(rng.integers(a.arity))
    traits = {
        "top_rgb": _shade(attrs.get("top_color", 0), rng, cfg.shade_jitter),
        "bottom_rgb": _shade(attrs.get("bottom_color", 1), rng, cfg.shade_jitter),
        "body_w": rng.uniform(0.28, 0.40),
        "torso_end": rng.uniform(0.50, 0.58),
        "stripe": int(rng.integers(0, 3)),
    }
    return attrs, traits


def _shade(index, rng, jitter):
    base = PALETTE[index % len(PALETTE)]
    return np.clip(base + rng.uniform(-jitter, jitter, size=3), 0, 255)


def _background(rng, h, w):
    # near-gray scene so clothing, not the backdrop, dominates frame colour
    base = rng.uniform(95, 145) + rng.uniform(-8, 8, size=3)
    coarse = rng.normal(0, 18, size=(h // 8 + 1, w // 8 + 1, 1))
    tex = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)[:h, :w]
    return np.clip(base + tex, 0, 255).astype(np.float32)


def _rect(img, y0, y1, x0, x1, color):
    h, w = img.shape[:2]
    y0, y1 = max(0, int(round(y0))), min(h, int(round(y1)))
    x0, x1 = max(0, int(round(x0))), min(w, int(round(x1)))
    if y1 > y0 and x1 > x0:
        img[y0:y1, x0:x1] = color


def _render_frame(cfg, bg, attrs, traits, pose, t, brightness, rng):
    h, w = cfg.height, cfg.width
    img = bg.copy()
    shift = (pose - 1) * 0.12 * w
    bob = 2.0 * np.sin(t * 1.3)
    cx = w / 2 + shift
    body_w = traits["body_w"] * w * (1.0 if pose == 1 else 0.75)
    head_r = 0.09 * h / 2 * 1.6
    head_top = 0.05 * h + bob
    torso_top = head_top + 2 * head_r
    torso_end = traits["torso_end"] * h + bob
    feet = 0.95 * h

    if attrs.get("gender", 0) == 1:
        _rect(img, head_top, torso_top + 0.08 * h, cx - head_r * 1.2, cx + head_r * 1.2, HAIR)
    _rect(img, head_top, torso_top, cx - head_r, cx + head_r, SKIN)
    top = traits["top_rgb"]
    _rect(img, torso_top, torso_end, cx - body_w / 2, cx + body_w / 2, top)
    if traits["stripe"]:
        y = torso_top + (torso_end - torso_top) * (0.3 + 0.2 * traits["stripe"])
        _rect(img, y, y + 0.03 * h, cx - body_w / 2, cx + body_w / 2, 255 - top)
    # legs swing in opposite phase
    swing = 0.05 * w * np.sin(t * 1.3)
    leg_w = body_w * 0.42
    bottom = traits["bottom_rgb"]
    _rect(img, torso_end, feet, cx - body_w / 2 + swing, cx - body_w / 2 + swing + leg_w, bottom)
    _rect(img, torso_end, feet, cx + body_w / 2 - swing - leg_w, cx + body_w / 2 - swing, bottom)
    if attrs.get("bag", 0) == 1:
        side = -1 if pose == 2 else 1
        bx = cx + side * (body_w / 2 + 0.06 * w)
        _rect(img, torso_top + 0.1 * h, torso_end - 0.02 * h, bx - 0.06 * w, bx + 0.06 * w,
              np.array([110, 70, 30], dtype=np.float32))
    img *= brightness
    return img


def _blur(img, motion):
    if motion == 0:
        return img
    axis = 1 if motion == 1 else 0
    acc = np.zeros_like(img)
    for s in (-2, -1, 0, 1, 2):
        acc += np.roll(img, s, axis=axis)
    return acc / 5.0


def generate_synthetic_dataset(schema, cfg):
    """Render ``identities * tracklets_per_identity`` tracklets.

    ID-relevant attributes (clothing colours, gender, bag) are fixed per
    identity. Pose, motion blur and occlusion are drawn per tracklet and
    rendered into the frames; an occluded tracklet has a contiguous run of
    frames whose lower body is overwritten with background texture. The
    per-frame occlusion ground truth is kept in ``tracklet.meta``.
    """
    if not isinstance(cfg, SyntheticConfig):
        raise ConfigError("cfg must be a SyntheticConfig")
    rng = np.random.default_rng(cfg.seed)
    names = {a.name for a in schema.group(ID_IRRELEVANT)}
    arity = {a.name: a.arity for a in schema.attributes}
    out = []
    for pid in range(1, cfg.identities + 1):
        id_attrs, traits = _identity_traits(schema, rng, cfg)
        for j in range(cfg.tracklets_per_identity):
            attrs = dict(id_attrs)
            pose = int(rng.integers(arity.get("pose", 3))) if "pose" in names else 1
            motion = int(rng.integers(arity.get("motion", 3))) if "motion" in names else 0
            occluded = bool(rng.random() < cfg.occlusion_prob)
            for a in schema.group(ID_IRRELEVANT):
                attrs[a.name] = int(rng.integers(a.arity))
            if "pose" in names:
                attrs["pose"] = pose
            if "motion" in names:
                attrs["motion"] = motion
            if "occlusion" in names:
                attrs["occlusion"] = int(occluded)

            n = int(rng.integers(cfg.frames_per_tracklet[0], cfg.frames_per_tracklet[1] + 1))
            bg = _background(rng, cfg.height, cfg.width)
            brightness = rng.uniform(0.75, 1.2)
            phase = rng.uniform(0, 2 * np.pi)
            occ = np.zeros(n, dtype=bool)
            if occluded:
                length = max(1, int(round(n * rng.uniform(0.4, 0.8))))
                start = int(rng.integers(0, n - length + 1))
                occ[start:start + length] = True
            occ_top = int(cfg.height * rng.uniform(0.55, 0.7))

            frames = np.empty((n, cfg.height, cfg.width, 3), dtype=np.uint8)
            for f in range(n):
                img = _render_frame(cfg, bg, attrs, traits, pose, phase + f, brightness, rng)
                img = _blur(img, motion)
                if occ[f]:
                    img[occ_top:] = bg[occ_top:]
                img += rng.normal(0, cfg.noise, size=img.shape) if cfg.noise else 0
                frames[f] = np.clip(img, 0, 255).astype(np.uint8)
            cam = (pid + j) % cfg.num_cameras + 1
            out.append(Tracklet(f"{pid:04d}C{cam}T{j + 1:04d}", pid, cam, frames, attrs,
                                meta={"occluded_frames": occ, "occlusion_top": occ_top}))
    return out


def split_identities(tracklets, train_fraction=0.5):
    """Disjoint identity split: the first ``train_fraction`` of sorted ids train."""
    pids = sorted({t.person_id for t in tracklets})
    n_train = int(round(len(pids) * train_fraction))
    train_ids = set(pids[:n_train])
    train = [t for t in tracklets if t.person_id in train_ids]
    test = [t for t in tracklets if t.person_id not in train_ids]
    return train, test


def query_gallery_split(tracklets, query_fraction=0.2, seed=0):
    """Per identity, ``query_fraction`` of its tracklets (at least one) become
    queries; the rest form the gallery."""
    rng = np.random.default_rng(seed)
    by_pid = defaultdict(list)
    for t in tracklets:
        by_pid[t.person_id].append(t)
    query, gallery = [], []
    for pid in sorted(by_pid):
        ts = by_pid[pid]
        nq = max(1, int(round(len(ts) * query_fraction)))
        if len(ts) < 2:
            gallery.extend(ts)
            continue
        chosen = set(rng.choice(len(ts), size=min(nq, len(ts) - 1), replace=False).tolist())
        for i, t in enumerate(ts):
            (query if i in chosen else gallery).append(t)
    return query, gallery


def export_dataset(tracklets, root_path, schema):
    """Write tracklets in the layout :func:`load_mars_layout` reads."""
    from PIL import Image

    os.makedirs(root_path, exist_ok=True)
    with open(os.path.join(root_path, "schema.json"), "w") as fh:
        json.dump(schema.to_json(), fh, indent=2)
    with open(os.path.join(root_path, "attributes.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tracklet_id"] + schema.names)
        for t in tracklets:
            writer.writerow([t.tracklet_id] + [int(t.attributes[n]) for n in schema.names])
    for t in tracklets:
        m = re.match(r"^(\d{4})C(\d+)T(\d{4})$", t.tracklet_id)
        if not m or int(m.group(1)) != t.person_id or int(m.group(2)) != t.camera_id:
            raise LayoutError(f"tracklet id {t.tracklet_id!r} does not encode person/camera")
        pdir = os.path.join(root_path, f"{t.person_id:04d}")
        os.makedirs(pdir, exist_ok=True)
        frames = t.get_frames()
        for f, frame in enumerate(frames):
            Image.fromarray(frame).save(os.path.join(pdir, f"{t.tracklet_id}F{f:03d}.png"))


def _read_attribute_csv(path, schema):
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "tracklet_id":
            raise LayoutError(f"{path}: header must start with 'tracklet_id'")
        missing = set(schema.names) - set(header[1:])
        if missing:
            raise LayoutError(f"{path}: columns missing for attributes {sorted(missing)}")
        for line in reader:
            if not line:
                continue
            rows[line[0]] = {name: int(v) for name, v in zip(header[1:], line[1:]) if name in schema.names}
    return rows


def load_mars_layout(root_path, attribute_csv=None, schema_path=None, lazy=True):
    """Read tracklets from a MARS-style directory tree.

    Tracklets absent from the attribute CSV are dropped and the count logged.
    With ``lazy`` the frames stay as file paths and are decoded on access.
    """
    attribute_csv = attribute_csv or os.path.join(root_path, "attributes.csv")
    if not os.path.isfile(attribute_csv):
        raise MissingAnnotationError(f"attribute CSV not found: {attribute_csv}")
    schema_path = schema_path or os.path.join(os.path.dirname(attribute_csv), "schema.json")
    if not os.path.isfile(schema_path):
        raise MissingAnnotationError(f"attribute schema not found: {schema_path}")
    with open(schema_path) as fh:
        schema = AttributeSchema.from_json(json.load(fh))
    annotations = _read_attribute_csv(attribute_csv, schema)

    frames_by_tid = defaultdict(list)
    for d in sorted(os.listdir(root_path)):
        pdir = os.path.join(root_path, d)
        if not os.path.isdir(pdir):
            continue
        if not d.isdigit():
            raise LayoutError(f"identity folder name must be numeric: {pdir}")
        for name in sorted(os.listdir(pdir)):
            m = FRAME_RE.match(name)
            if not m:
                raise LayoutError(f"malformed frame filename: {os.path.join(pdir, name)}")
            if int(m.group(1)) != int(d):
                raise LayoutError(f"frame {name} is filed under identity folder {d}")
            tid = f"{m.group(1)}C{m.group(2)}T{m.group(3)}"
            frames_by_tid[tid].append((int(m.group(4)), os.path.join(pdir, name)))

    tracklets: List[Tracklet] = []
    dropped = 0
    for tid in sorted(frames_by_tid, key=_tracklet_sort_key):
        if tid not in annotations:
            dropped += 1
            continue
        paths = [p for _, p in sorted(frames_by_tid[tid])]
        pid, _, cam = _tracklet_sort_key(tid)
        t = Tracklet(tid, pid, cam, paths, annotations[tid])
        if not lazy:
            t.frames = t.get_frames()
        tracklets.append(t)
    if dropped:
        logger.warning("dropped %d tracklet(s) without attribute annotations", dropped)
    return tracklets, schema


def _tracklet_sort_key(tid):
    m = re.match(r"^(\d{4})C(\d+)T(\d{4})$", tid)
    return int(m.group(1)), int(m.group(3)), int(m.group(2))


def relabel(tracklets):
    """Map person ids to contiguous class indices in sorted order."""
    return {pid: i for i, pid in enumerate(sorted({t.person_id for t in tracklets}))}


@dataclass
class DatasetSplits:
    schema: AttributeSchema
    train: List[Tracklet]
    query: List[Tracklet]
    gallery: List[Tracklet]
    tag: str = "synthetic"
    extra: dict = field(default_factory=dict)
