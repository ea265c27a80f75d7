"""Three-stream multi-task network with attribute-driven spatio-temporal attention.

Data flow for a batch of clips ``(B, T, 3, H, W)``::

    backbone ──► frame features (B, T, C, 16, 8)
      ├─ ID-relevant stream:   conv ─► ST-attention ─► ×attn ─► pool ─► attribute head
      ├─ ID-irrelevant stream: conv ─► ST-attention ─► ×attn ─► pool ─► attribute head
      └─ Re-ID: [pool(F), pool(F × attn_rel), pool(F × attn_irrel)] ─► (B, 3C)

Two scales are provided: ``ModelConfig.toy()`` (small CNN, 64x128 input) and
``ModelConfig.full()`` (ResNet-50 with last stride 1, 128x256 input, 2048
channels, 6144-d fused feature).
"""

import json
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

__all__ = ["ModelConfig", "StreamOutputs", "ToyBackbone", "ResNetBackbone", "STAttention",
           "AttributeStream", "ThreeStreamNet", "build_model", "save_checkpoint", "load_checkpoint"]

# input pixels are scaled to [0, 1]; centre them before the first conv
_PIXEL_MEAN = 0.45
_PIXEL_STD = 0.25


@dataclass
class ModelConfig:
    backbone: str = "toy"             # "toy" or "resnet50"
    in_height: int = 128
    in_width: int = 64
    channels: int = 64
    grid_h: int = 16
    grid_w: int = 8
    rel_attr_dim: int = 14
    irrel_attr_dim: int = 7
    num_classes: int = 50
    # "dilated": k=3, pad=2, dilation=2; "pad1": k=3, pad=1
    temporal_conv: str = "dilated"
    use_attention: bool = True
    reid_conv: bool = False
    spatial_kernel: int = 3

    def __post_init__(self):
        if self.backbone not in ("toy", "resnet50"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.temporal_conv not in ("dilated", "pad1"):
            raise ConfigError(f"unknown temporal_conv {self.temporal_conv!r}")
        if self.backbone == "resnet50" and self.channels != 2048:
            raise ConfigError("the resnet50 backbone has 2048 channels")
        if self.spatial_kernel % 2 != 1:
            raise ConfigError("spatial_kernel must be odd")

    @classmethod
    def toy(cls, **kw):
        return cls(**kw)

    @classmethod
    def full(cls, **kw):
        kw.setdefault("backbone", "resnet50")
        kw.setdefault("in_height", 256)
        kw.setdefault("in_width", 128)
        kw.setdefault("channels", 2048)
        return cls(**kw)

    @property
    def stream_dim(self):
        return self.channels

    @property
    def fused_dim(self):
        return 3 * self.channels

    def to_json(self):
        return asdict(self)


@dataclass
class StreamOutputs:
    reid_feature: torch.Tensor        # (B, 3C) fused, not normalized
    id_logits: torch.Tensor
    rel_logits: torch.Tensor
    irrel_logits: torch.Tensor
    attn_rel: torch.Tensor            # (B, T, H, W) in (0, 1)
    attn_irrel: torch.Tensor
    rel_feature: torch.Tensor         # (B, C) attribute stream features
    irrel_feature: torch.Tensor

    @property
    def rel_probs(self):
        return torch.sigmoid(self.rel_logits)

    @property
    def irrel_probs(self):
        return torch.sigmoid(self.irrel_logits)

    @property
    def reid_embedding(self):
        return F.normalize(self.reid_feature, dim=1)


def _conv_bn(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class _FrameBackbone(nn.Module):
    """Shared input checks and (B, T) folding for per-frame CNNs."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg

    def features(self, x):
        raise NotImplementedError

    def forward(self, clips):
        single = clips.dim() == 4
        if single:
            clips = clips.unsqueeze(0)
        if clips.dim() != 5 or clips.shape[2] != 3:
            raise ShapeError(f"expected (B, T, 3, H, W) or (T, 3, H, W), got {tuple(clips.shape)}")
        b, t, _, h, w = clips.shape
        if (h, w) != (self.cfg.in_height, self.cfg.in_width):
            raise ShapeError(f"frames must be {self.cfg.in_height}x{self.cfg.in_width} (HxW), got {h}x{w}")
        x = (clips.reshape(b * t, 3, h, w) - _PIXEL_MEAN) / _PIXEL_STD
        f = self.features(x)
        f = f.reshape(b, t, *f.shape[1:])
        return f[0] if single else f


class ToyBackbone(_FrameBackbone):
    """Four 3x3 conv layers with total stride 8: 128x64 -> 16x8."""

    def __init__(self, cfg):
        super().__init__(cfg)
        c = cfg.channels
        self.body = nn.Sequential(
            _conv_bn(3, max(c // 4, 8), 2),
            _conv_bn(max(c // 4, 8), max(c // 2, 8), 2),
            _conv_bn(max(c // 2, 8), c, 2),
            _conv_bn(c, c, 1),
        )

    def features(self, x):
        return self.body(x)


class ResNetBackbone(_FrameBackbone):
    """ResNet-50 trunk with the last stage's stride set to 1 (256x128 -> 16x8).

    Weights are randomly initialised; load pretrained ones separately if needed.
    """

    def __init__(self, cfg):
        super().__init__(cfg)
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.layer4[0].conv2.stride = (1, 1)
        net.layer4[0].downsample[0].stride = (1, 1)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)

    def features(self, x):
        return self.body(x)


class STAttention(nn.Module):
    """Spatial conv to one channel, then a temporal 1-D conv over the cells.

    The spatial map ``(T, H, W)`` is read as ``H*W`` channels of length T; the
    temporal conv keeps both channel count and length, then a sigmoid gives
    per-frame, per-cell weights.
    """

    def __init__(self, channels, grid_h=16, grid_w=8, temporal_conv="dilated", spatial_kernel=3):
        super().__init__()
        self.grid = (grid_h, grid_w)
        cells = grid_h * grid_w
        self.spatial = nn.Conv2d(channels, 1, spatial_kernel, padding=spatial_kernel // 2)
        if temporal_conv == "dilated":
            self.temporal = nn.Conv1d(cells, cells, kernel_size=3, stride=1, padding=2, dilation=2)
        else:
            self.temporal = nn.Conv1d(cells, cells, kernel_size=3, stride=1, padding=1)

    def logits(self, x):
        b, t, c, h, w = x.shape
        if h * w != self.temporal.in_channels:
            raise ShapeError(f"attention expects {self.temporal.in_channels} spatial cells, got {h}x{w}")
        s = self.spatial(x.reshape(b * t, c, h, w)).reshape(b, t, h * w)
        s = self.temporal(s.transpose(1, 2)).transpose(1, 2)
        return s.reshape(b, t, h, w)

    def forward(self, x):
        single = x.dim() == 4
        if single:
            x = x.unsqueeze(0)
        a = torch.sigmoid(self.logits(x))
        return a[0] if single else a


def st_pool(x, attn=None):
    """Average over time and space, optionally after weighting by ``attn``.

    ``x`` is ``(B, T, C, H, W)``; ``attn`` ``(B, T, H, W)`` is broadcast over C.
    """
    if attn is not None:
        if attn.shape != x.shape[:2] + x.shape[3:]:
            raise ShapeError(f"attention {tuple(attn.shape)} does not match features {tuple(x.shape)}")
        x = x * attn.unsqueeze(2)
    return x.mean(dim=(1, 3, 4))


class AttributeStream(nn.Module):
    def __init__(self, channels, num_attrs, grid_h=16, grid_w=8, temporal_conv="dilated",
                 spatial_kernel=3):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )
        self.attention = STAttention(channels, grid_h, grid_w, temporal_conv, spatial_kernel)
        self.classifier = nn.Linear(channels, num_attrs)

    def forward(self, frame_features, identity_attention=False):
        """Returns ``(attr_logits, attention, stream_feature)``.

        ``identity_attention`` replaces the learned map by ones, which reduces
        the stream feature to plain average pooling of the conv output.
        """
        b, t, c, h, w = frame_features.shape
        x = self.conv(frame_features.reshape(b * t, c, h, w)).reshape(b, t, c, h, w)
        attn = self.attention(x)
        if identity_attention:
            attn = torch.ones_like(attn)
        feat = st_pool(x, attn)
        return self.classifier(feat), attn, feat


class ThreeStreamNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ToyBackbone(cfg) if cfg.backbone == "toy" else ResNetBackbone(cfg)
        args = (cfg.grid_h, cfg.grid_w, cfg.temporal_conv, cfg.spatial_kernel)
        self.rel_stream = AttributeStream(cfg.channels, cfg.rel_attr_dim, *args)
        self.irrel_stream = AttributeStream(cfg.channels, cfg.irrel_attr_dim, *args)
        self.reid_conv = None
        if cfg.reid_conv:
            self.reid_conv = nn.Sequential(
                nn.Conv2d(cfg.channels, cfg.channels, 3, padding=1, bias=False),
                nn.BatchNorm2d(cfg.channels),
                nn.ReLU(inplace=True),
            )
        self.id_classifier = nn.Linear(cfg.fused_dim, cfg.num_classes)

    def fuse_reid_feature(self, frame_features, attn_rel, attn_irrel):
        """Concatenate the pooled original, ×attn_rel and ×attn_irrel branches."""
        return torch.cat([st_pool(frame_features), st_pool(frame_features, attn_rel),
                          st_pool(frame_features, attn_irrel)], dim=1)

    def forward(self, clips, identity_attention=False):
        if clips.dim() == 4:
            clips = clips.unsqueeze(0)
        feats = self.backbone(clips)
        if feats.shape[-2:] != (self.cfg.grid_h, self.cfg.grid_w):
            raise ShapeError(f"backbone grid {tuple(feats.shape[-2:])} != "
                             f"{(self.cfg.grid_h, self.cfg.grid_w)}")
        rel_logits, attn_rel, rel_feat = self.rel_stream(feats, identity_attention)
        irrel_logits, attn_irrel, irrel_feat = self.irrel_stream(feats, identity_attention)

        reid = feats
        if self.reid_conv is not None:
            b, t, c, h, w = feats.shape
            reid = self.reid_conv(feats.reshape(b * t, c, h, w)).reshape(b, t, c, h, w)
        if self.cfg.use_attention and not identity_attention:
            fused = self.fuse_reid_feature(reid, attn_rel, attn_irrel)
        else:
            ones = torch.ones_like(attn_rel)
            fused = self.fuse_reid_feature(reid, ones, ones)
        return StreamOutputs(fused, self.id_classifier(fused), rel_logits, irrel_logits,
                             attn_rel, attn_irrel, rel_feat, irrel_feat)


def build_model(cfg: ModelConfig, seed: Optional[int] = None):
    """Construct the network; with ``seed`` the initial weights are reproducible."""
    if seed is None:
        return ThreeStreamNet(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ThreeStreamNet(cfg)


def save_checkpoint(model, path, extra=None):
    """Write weights keyed by module path plus a JSON manifest of the config."""
    manifest = {"model": model.cfg.to_json()}
    if extra:
        manifest.update(extra)
    torch.save({"manifest": json.dumps(manifest, sort_keys=True),
                "state_dict": model.state_dict()}, path)


def load_checkpoint(path, map_location="cpu"):
    blob = torch.load(path, map_location=map_location, weights_only=True)
    manifest = json.loads(blob["manifest"])
    model = ThreeStreamNet(ModelConfig(**manifest["model"]))
    # keep the precision the weights were saved in
    dtypes = {v.dtype for v in blob["state_dict"].values() if v.is_floating_point()}
    if len(dtypes) == 1:
        model.to(dtypes.pop())
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, manifest
