"""Experiment configuration and the training / ablation / DVDP-curve drivers."""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Optional

import numpy as np
import torch

from .data import (DatasetSplits, ID_IRRELEVANT, ID_RELEVANT, SyntheticConfig, default_schema,
                   generate_synthetic_dataset, load_mars_layout, query_gallery_split, relabel,
                   split_identities)
from .errors import ConfigError
from .evaluation import DVDPTracker, evaluate_model
from .losses import BatchFeatures, LossConfig, LossTargets, dvdp, unified_loss
from .model import ModelConfig, build_model, save_checkpoint
from .sampler import epoch_iterator

logger = logging.getLogger(__name__)

LOSS_KEYS = ("bce", "tri", "softmax", "aitl", "itl")

# the five rows of the ablation table: (name, loss toggles, attention fusion)
ABLATIONS = (
    ("Baseline", {"tri", "softmax"}, False),
    ("Baseline + ASTA", {"tri", "softmax", "bce"}, True),
    ("Baseline + ITL", {"tri", "softmax", "bce", "itl"}, False),
    ("Baseline + AITL", {"tri", "softmax", "bce", "aitl"}, False),
    ("Baseline + ASTA + AITL", {"tri", "softmax", "bce", "aitl"}, True),
)


@dataclass
class ExperimentConfig:
    # data: either a synthetic benchmark or a MARS-style directory
    data_root: Optional[str] = None
    synthetic: dict = field(default_factory=dict)
    query_fraction: float = 0.2
    train_fraction: float = 0.5
    # model
    scale: str = "toy"
    attention: bool = True
    temporal_conv: str = "dilated"
    reid_conv: bool = False
    # sampling
    P: int = 4
    K: int = 4
    T: int = 4
    # losses
    losses: tuple = ("bce", "tri", "softmax", "aitl")
    tri_margin: float = 0.3
    aitl_margin: float = 0.0
    aitl_reduction: str = "sum"
    attr_source: str = "concat"
    # optimisation
    optimizer: str = "adam"
    lr: float = 3e-4
    weight_decay: float = 0.0
    epochs: int = 30
    seed: int = 0
    double: bool = False
    # evaluation
    eval_every: int = 0               # 0: only after the last epoch
    eval_clips: int = 4
    out_dir: Optional[str] = None

    def __post_init__(self):
        self.losses = tuple(sorted(set(self.losses)))
        unknown = set(self.losses) - set(LOSS_KEYS)
        if unknown:
            raise ConfigError(f"unknown loss toggles {sorted(unknown)}")
        if "aitl" in self.losses and "itl" in self.losses:
            raise ConfigError("aitl and itl cannot be enabled together")
        if not set(self.losses) & {"tri", "softmax", "aitl", "itl"}:
            raise ConfigError("at least one Re-ID loss must be enabled")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.P < 2 or self.K < 2:
            raise ConfigError("need P >= 2 and K >= 2")
        if self.scale not in ("toy", "full"):
            raise ConfigError(f"scale must be toy or full, got {self.scale!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 1 and lr > 0")
        self.loss_config()
        self.synthetic_config()

    def loss_config(self):
        on = set(self.losses)
        return LossConfig(use_bce="bce" in on, use_tri="tri" in on, use_softmax="softmax" in on,
                          use_aitl="aitl" in on, use_itl="itl" in on, tri_margin=self.tri_margin,
                          aitl_margin=self.aitl_margin, aitl_reduction=self.aitl_reduction,
                          attr_source=self.attr_source)

    def synthetic_config(self):
        return SyntheticConfig(**self.synthetic)

    def to_json(self):
        d = asdict(self)
        d["losses"] = list(self.losses)
        return d

    @classmethod
    def from_json(cls, obj):
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**obj)

    def replace(self, **kw):
        d = self.to_json()
        d.update(kw)
        return ExperimentConfig.from_json(d)


@lru_cache(maxsize=4)
def _synthetic_splits(syn_json, train_fraction, query_fraction):
    cfg = SyntheticConfig(**json.loads(syn_json))
    schema = default_schema()
    tracklets = generate_synthetic_dataset(schema, cfg)
    train, test = split_identities(tracklets, train_fraction)
    query, gallery = query_gallery_split(test, query_fraction, seed=cfg.seed)
    return DatasetSplits(schema, train, query, gallery, tag=f"synthetic-{cfg.seed}")


def load_splits(cfg: ExperimentConfig):
    if cfg.data_root is None:
        syn = json.dumps(asdict(cfg.synthetic_config()), sort_keys=True)
        return _synthetic_splits(syn, cfg.train_fraction, cfg.query_fraction)
    tracklets, schema = load_mars_layout(cfg.data_root)
    train, test = split_identities(tracklets, cfg.train_fraction)
    query, gallery = query_gallery_split(test, cfg.query_fraction, seed=cfg.seed)
    return DatasetSplits(schema, train, query, gallery, tag=os.path.basename(os.path.normpath(cfg.data_root)))


def model_config_for(cfg, schema, num_classes):
    common = dict(rel_attr_dim=schema.binary_width(ID_RELEVANT),
                  irrel_attr_dim=schema.binary_width(ID_IRRELEVANT),
                  num_classes=num_classes, use_attention=cfg.attention,
                  temporal_conv=cfg.temporal_conv, reid_conv=cfg.reid_conv)
    if cfg.scale == "full":
        return ModelConfig.full(**common)
    return ModelConfig.toy(**common)


@dataclass
class TrainResult:
    model: torch.nn.Module
    trace: object
    final: object
    records: list
    config: ExperimentConfig
    seconds: float = 0.0


def _targets(batch, schema, label_map, dtype):
    labels = torch.tensor([label_map[c.person_id] for c in batch.clips], dtype=torch.long)
    rel = np.stack([schema.binarize(c.attributes, ID_RELEVANT) for c in batch.clips])
    irrel = np.stack([schema.binarize(c.attributes, ID_IRRELEVANT) for c in batch.clips])
    return LossTargets(labels, torch.from_numpy(rel).to(dtype), torch.from_numpy(irrel).to(dtype),
                       batch.P, batch.K)


class _JsonlWriter:
    def __init__(self, path):
        self.fh = open(path, "w") if path else None

    def write(self, record):
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def train(cfg: ExperimentConfig, splits=None, out_dir=None, on_epoch=None):
    """Train one model and return it with its DVDP trace and final metrics.

    Every batch logs the loss breakdown and its per-anchor mean DVDP; every
    evaluated epoch logs the ranking metrics. Given the same config the run is
    deterministic.
    """
    start = time.time()
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    splits = splits or load_splits(cfg)
    dtype = torch.float64 if cfg.double else torch.float32
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    label_map = relabel(splits.train)
    mcfg = model_config_for(cfg, splits.schema, len(label_map))
    model = build_model(mcfg, seed=cfg.seed).to(dtype)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)
    loss_cfg = cfg.loss_config()

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump({"config": cfg.to_json(), "model": mcfg.to_json(),
                       "dataset": splits.tag}, fh, indent=2, sort_keys=True)
    writer = _JsonlWriter(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    tracker = DVDPTracker()
    records = []
    final = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            for b, batch in enumerate(epoch_iterator(splits.train, cfg.P, cfg.K, cfg.T, rng)):
                x = torch.from_numpy(batch.images()).to(dtype)
                out = model(x)
                targets = _targets(batch, splits.schema, label_map, dtype)
                parts = unified_loss(out, targets, loss_cfg, model.id_classifier)
                opt.zero_grad()
                parts.total.backward()
                opt.step()
                d = dvdp(BatchFeatures(out.reid_feature.detach(), None, batch.P, batch.K))
                tracker.on_batch(d.mean)
                rec = {"kind": "batch", "epoch": epoch, "batch": b, "dvdp": d.mean, **parts.as_floats()}
                records.append(rec)
                writer.write(rec)

            evaluate_now = epoch == cfg.epochs or (cfg.eval_every and epoch % cfg.eval_every == 0)
            result = None
            if evaluate_now:
                result = evaluate_model(model, splits.query, splits.gallery, cfg.T, cfg.eval_clips)
                final = result
            epoch_dvdp = tracker.on_epoch_end(epoch, result.mAP if result else None)
            rec = {"kind": "epoch", "epoch": epoch, "dvdp": epoch_dvdp}
            if result:
                rec.update(result.to_json())
            records.append(rec)
            writer.write(rec)
            logger.info("epoch %d dvdp %.4f %s", epoch, epoch_dvdp, result.to_json() if result else "")
            if on_epoch:
                on_epoch(epoch, rec)
    finally:
        writer.close()

    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "checkpoint.pt"),
                        extra={"label_map": {str(k): v for k, v in label_map.items()},
                               "schema": splits.schema.to_json()})
        tracker.trace.to_csv(os.path.join(out_dir, "dvdp.csv"))
        with open(os.path.join(out_dir, "final.json"), "w") as fh:
            json.dump(final.to_json(), fh, indent=2)
    return TrainResult(model, tracker.trace, final, records, cfg, time.time() - start)


def ablation_configs(base: ExperimentConfig):
    return [(name, base.replace(losses=sorted(losses), attention=attn)) for name, losses, attn in ABLATIONS]


def run_ablation(base: ExperimentConfig, seeds=(0,), out_dir=None):
    """Train the five ablation variants for each seed.

    Returns ``{name: [RankingResult per seed]}``; when ``out_dir`` is given an
    ``ablation.csv`` and ``ablation.md`` summarise mean metrics per variant.
    """
    results = {}
    for name, cfg in ablation_configs(base):
        for seed in seeds:
            run_dir = None
            if out_dir:
                run_dir = os.path.join(out_dir, _slug(name), f"seed{seed}")
            res = train(cfg.replace(seed=seed), out_dir=run_dir)
            logger.info("%s seed %d: %s", name, seed, res.final.to_json())
            results.setdefault(name, []).append(res.final)
    if out_dir:
        write_ablation_table(results, out_dir)
    return results


def summarize(results):
    rows = []
    for name, runs in results.items():
        row = {"model": name}
        for k in (1, 5, 10):
            row[f"R{k}"] = 100 * float(np.mean([r.rank_k[k] for r in runs]))
        row["mAP"] = 100 * float(np.mean([r.mAP for r in runs]))
        row["seeds"] = len(runs)
        rows.append(row)
    return rows


def write_ablation_table(results, out_dir):
    rows = summarize(results)
    os.makedirs(out_dir, exist_ok=True)
    cols = ["model", "R1", "R5", "R10", "mAP", "seeds"]
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) if c in ("model", "seeds") else f"{r[c]:.2f}" for c in cols) + "\n")
    with open(os.path.join(out_dir, "ablation.md"), "w") as fh:
        fh.write("| Model | R1 | R5 | R10 | mAP |\n|---|---|---|---|---|\n")
        for r in rows:
            fh.write(f"| {r['model']} | {r['R1']:.1f} | {r['R5']:.1f} | {r['R10']:.1f} | {r['mAP']:.1f} |\n")
    return rows


def run_dvdp_curve(base: ExperimentConfig, out_dir=None):
    """Train the same configuration with and without AITL; return both traces."""
    with_losses = (set(base.losses) - {"itl"}) | {"aitl"}
    without_losses = set(base.losses) - {"aitl", "itl"}
    eval_every = base.eval_every or 1
    runs = {}
    for tag, losses in (("with_aitl", with_losses), ("without_aitl", without_losses)):
        cfg = base.replace(losses=sorted(losses), eval_every=eval_every)
        run_dir = os.path.join(out_dir, tag) if out_dir else None
        runs[tag] = train(cfg, out_dir=run_dir)
    if out_dir:
        with open(os.path.join(out_dir, "dvdp.csv"), "w") as fh:
            fh.write("epoch,dvdp_with_aitl,mAP_with_aitl,dvdp_without_aitl,mAP_without_aitl\n")
            a, b = runs["with_aitl"].trace, runs["without_aitl"].trace
            for i, ep in enumerate(a.epochs):
                fh.write(f"{ep},{a.dvdp[i]!r},{a.mAP[i]!r},{b.dvdp[i]!r},{b.mAP[i]!r}\n")
    return runs


def _slug(name):
    return name.lower().replace(" + ", "_").replace(" ", "_")


def load_config_file(path):
    with open(path) as fh:
        return ExperimentConfig.from_json(json.load(fh))


