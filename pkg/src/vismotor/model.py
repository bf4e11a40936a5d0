"""Shared visuomotor network: backbone, feature pyramid and three heads.

The image passes through a small residual backbone and a five-level feature
pyramid.  Classification and box heads are shared across pyramid levels.
The visuomotor head pools four "visual node" channels from every level,
concatenates them with four dense "semantic nodes" built from the goal
sentence encoding and regresses six normalized joint values.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .blockworld import MAX_SENTENCE_TOKENS, NUM_CLASSES, PAD, UNK, VOCABULARY
from .boxes import generate_anchors

TASKS = ("cls", "box", "vis")


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    backbone_widths: tuple[int, ...] = (32, 64, 128)
    backbone_blocks: tuple[int, ...] = (1, 1, 1)
    stem_width: int = 24
    fpn_channels: int = 256
    head_channels: int | None = None  # defaults to fpn_channels
    head_convs: int = 4
    pyramid_levels: int = 5
    num_anchors: int = 9
    num_classes: int = NUM_CLASSES
    anchor_size_factor: float = 4.0
    nodes: int = 4
    semantic_node_units: int = 200
    visuomotor_hidden: int = 900
    joint_outputs: int = 6
    visual_pool: tuple[int, int] = (1, 1)
    vocab_size: int = len(VOCABULARY)
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_width: int = 64
    max_tokens: int = MAX_SENTENCE_TOKENS
    prior_prob: float = 0.01

    def __post_init__(self):
        self.backbone_widths = tuple(self.backbone_widths)
        self.backbone_blocks = tuple(self.backbone_blocks)
        self.visual_pool = tuple(self.visual_pool)
        fixed = {"pyramid_levels": 5, "num_anchors": 9, "num_classes": NUM_CLASSES,
                 "visuomotor_hidden": 900, "joint_outputs": 6}
        for name, value in fixed.items():
            if getattr(self, name) != value:
                raise ConfigError(f"{name} is fixed at {value}")
        if len(self.backbone_widths) != 3 or len(self.backbone_blocks) != 3:
            raise ConfigError("backbone needs exactly three stages")
        if self.encoder_width % self.encoder_heads:
            raise ConfigError("encoder_width must be divisible by encoder_heads")

    @property
    def head_width(self) -> int:
        return self.head_channels or self.fpn_channels

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, c), c)


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        y = F.relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class Backbone(nn.Module):
    """Stem to stride 4, then three residual stages at strides 8, 16, 32."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        s = cfg.stem_width
        self.stem = nn.Sequential(
            nn.Conv2d(3, s // 2, 3, 2, 1, bias=False), _norm(s // 2), nn.ReLU(inplace=True),
            nn.Conv2d(s // 2, s, 3, 2, 1, bias=False), _norm(s), nn.ReLU(inplace=True),
        )
        stages, cin = [], s
        for width, blocks in zip(cfg.backbone_widths, cfg.backbone_blocks):
            layers = [ResidualBlock(cin, width, 2)] + [ResidualBlock(width, width) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            cin = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


class FeaturePyramid(nn.Module):
    def __init__(self, in_channels, channels):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(channels, channels, 3, 1, 1) for _ in in_channels)
        self.p6 = nn.Conv2d(in_channels[-1], channels, 3, 2, 1)
        self.p7 = nn.Conv2d(channels, channels, 3, 2, 1)

    def forward(self, feats):
        c3, c4, c5 = feats
        p5 = self.lateral[2](c5)
        p4 = self.lateral[1](c4) + F.interpolate(p5, size=c4.shape[-2:], mode="nearest")
        p3 = self.lateral[0](c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest")
        p3, p4, p5 = (s(p) for s, p in zip(self.smooth, (p3, p4, p5)))
        p6 = self.p6(c5)
        p7 = self.p7(F.relu(p6))
        return [p3, p4, p5, p6, p7]


class ConvHead(nn.Module):
    """Stack of 3x3 conv + ReLU layers shared by every pyramid level."""

    def __init__(self, cin, width, cout, n_convs=4, bias_init=0.0):
        super().__init__()
        layers = []
        for i in range(n_convs):
            layers += [nn.Conv2d(cin if i == 0 else width, width, 3, 1, 1), nn.ReLU(inplace=True)]
        self.tower = nn.Sequential(*layers)
        self.out = nn.Conv2d(width, cout, 3, 1, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.out.bias, bias_init)

    def forward(self, x):
        return self.out(self.tower(x))


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: d // 2])
    return pe.float()


class LanguageEncoder(nn.Module):
    """Transformer encoder with masked mean pooling over real tokens."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.encoder_width, padding_idx=VOCABULARY[PAD])
        self.register_buffer("positions", sinusoidal_positions(cfg.max_tokens, cfg.encoder_width),
                             persistent=False)
        layer = nn.TransformerEncoderLayer(cfg.encoder_width, cfg.encoder_heads, 4 * cfg.encoder_width,
                                           dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.encoder_layers, enable_nested_tensor=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens[None]
        if tokens.shape[1] > self.cfg.max_tokens:
            raise ValueError(f"goal has {tokens.shape[1]} tokens, limit is {self.cfg.max_tokens}")
        pad = tokens == VOCABULARY[PAD]
        tokens = torch.where((tokens < 0) | (tokens >= self.cfg.vocab_size),
                             torch.full_like(tokens, VOCABULARY[UNK]), tokens)
        x = self.embed(tokens) * math.sqrt(self.cfg.encoder_width)
        x = x + self.positions[: tokens.shape[1]].to(x.dtype)
        h = self.encoder(x, src_key_padding_mask=pad)
        keep = (~pad).to(h.dtype)[..., None]
        return (h * keep).sum(1) / keep.sum(1).clamp(min=1.0)


class VisuomotorHead(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.pool = cfg.visual_pool
        self.visual_nodes = ConvHead(cfg.fpn_channels, cfg.head_width, cfg.nodes, cfg.head_convs)
        self.semantic_nodes = nn.ModuleList(
            nn.Linear(cfg.encoder_width, cfg.semantic_node_units) for _ in range(cfg.nodes))
        n_visual = cfg.nodes * cfg.pyramid_levels * self.pool[0] * self.pool[1]
        n_in = n_visual + cfg.nodes * cfg.semantic_node_units
        self.fc1 = nn.Linear(n_in, cfg.visuomotor_hidden)
        self.fc2 = nn.Linear(cfg.visuomotor_hidden, cfg.visuomotor_hidden)
        self.out = nn.Linear(cfg.visuomotor_hidden, cfg.joint_outputs)

    def forward(self, pyramid, goal):
        visual = [F.adaptive_avg_pool2d(self.visual_nodes(p), self.pool).flatten(1) for p in pyramid]
        semantic = [F.relu(node(goal)) for node in self.semantic_nodes]
        x = torch.cat(visual + semantic, dim=1)
        x = torch.sigmoid(self.fc1(x))
        x = torch.sigmoid(self.fc2(x))
        return torch.sigmoid(self.out(x))


class SharedVisuomotorNet(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        self.backbone = Backbone(cfg)
        self.fpn = FeaturePyramid(cfg.backbone_widths, cfg.fpn_channels)
        prior = -math.log((1 - cfg.prior_prob) / cfg.prior_prob)
        self.cls_head = ConvHead(cfg.fpn_channels, cfg.head_width, cfg.num_anchors * cfg.num_classes,
                                 cfg.head_convs, bias_init=prior)
        self.box_head = ConvHead(cfg.fpn_channels, cfg.head_width, cfg.num_anchors * 4, cfg.head_convs)
        self.encoder = LanguageEncoder(cfg)
        self.visuomotor = VisuomotorHead(cfg)

    def task_parameters(self, task: str):
        """Parameters owned exclusively by one task's head."""
        if task == "cls":
            return list(self.cls_head.parameters())
        if task == "box":
            return list(self.box_head.parameters())
        if task == "vis":
            return list(self.visuomotor.parameters()) + list(self.encoder.parameters())
        raise ValueError(f"unknown task {task!r}")

    def pyramid(self, images: torch.Tensor):
        return self.fpn(self.backbone(images))

    def classification(self, pyramid):
        """Per-level score maps with ``K*A`` channels, values in (0, 1)."""
        return [torch.sigmoid(self.cls_head(p)) for p in pyramid]

    def box_deltas(self, pyramid):
        return [self.box_head(p) for p in pyramid]

    def flatten_levels(self, maps, per_anchor: int) -> torch.Tensor:
        """(B, A*C, H, W) maps to (B, sum H*W*A, C), matching anchor order."""
        return torch.cat([m.permute(0, 2, 3, 1).reshape(m.shape[0], -1, per_anchor) for m in maps], dim=1)

    def forward(self, images: torch.Tensor, tokens: torch.Tensor | None = None, tasks=TASKS):
        pyr = self.pyramid(images)
        out = {}
        if "cls" in tasks:
            out["cls"] = self.flatten_levels(self.classification(pyr), self.cfg.num_classes)
        if "box" in tasks:
            out["box"] = self.flatten_levels(self.box_deltas(pyr), 4)
        if "vis" in tasks:
            if tokens is None:
                raise ValueError("the visuomotor head needs goal tokens")
            out["joints"] = self.visuomotor(pyr, self.encoder(tokens))
        return out

    def anchors(self, input_size):
        """Anchors matching this network's output for an input of (width, height)."""
        return generate_anchors(input_size, self.cfg.pyramid_levels,
                                size_factor=self.cfg.anchor_size_factor)[0]


def input_size(image_size, multiple: int = 32) -> tuple[int, int]:
    w, h = image_size
    return (math.ceil(w / multiple) * multiple, math.ceil(h / multiple) * multiple)


def image_tensor(image: np.ndarray, multiple: int = 32) -> torch.Tensor:
    """(H, W, 3) float image to a zero-padded (1, 3, H', W') tensor."""
    h, w, _ = image.shape
    pw, ph = input_size((w, h), multiple)
    t = torch.zeros(1, 3, ph, pw)
    t[0, :, :h, :w] = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
    return t


def token_tensor(tokens, length: int | None = None) -> torch.Tensor:
    ids = list(tokens)
    if length is not None:
        ids = ids + [VOCABULARY[PAD]] * (length - len(ids))
    return torch.tensor([ids], dtype=torch.long)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"VMCK" | u32 version | u64 header length | JSON header | tensor data
# header = {"config": {...}, "extra": {...},
#           "params": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
# tensor data is little-endian, C order, offsets relative to the data start

MAGIC = b"VMCK"
CKPT_VERSION = 1


def save_checkpoint(model: SharedVisuomotorNet, path, extra: dict | None = None) -> None:
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.cfg.to_dict(), "extra": extra or {}, "params": index}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[SharedVisuomotorNet, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    start = 16 + hlen
    model = SharedVisuomotorNet(NetworkConfig.from_dict(header["config"]))
    state = {}
    for p in header["params"]:
        arr = np.frombuffer(data, dtype=np.dtype(p["dtype"]), count=int(np.prod(p["shape"], dtype=int)),
                            offset=start + p["offset"]).reshape(p["shape"])
        state[p["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, header["extra"]
