"""U-shaped universal segmentation network with per-domain adapters."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

DOMAIN_IDS = {"source": 0, "target": 1}
DECODER_LAST_CHANNELS = 64
BACKBONES = ("conv_unet", "hierarchical_attention")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_stages: int = 4
    stage_channels: list = field(default_factory=lambda: [32, 64, 128, 256])
    backbone: str = "conv_unet"
    num_domains: int = 2
    input_size: tuple = (256, 256)
    adapter_reduction: int = 4
    attention_window: int = 8
    attention_heads: int = 4

    def validate(self):
        L = self.num_stages
        if L < 2:
            raise ConfigError(f"num_stages must be >= 2 (decoder needs an H/4 level), got {L}")
        if len(self.stage_channels) != L:
            raise ConfigError(f"len(stage_channels)={len(self.stage_channels)} must equal num_stages={L}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage_channels must be positive")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        h, w = self.input_size
        if h % 2 ** L or w % 2 ** L:
            raise ConfigError(f"input_size {tuple(self.input_size)} must be divisible by 2**num_stages={2 ** L}")
        if self.num_domains < 1:
            raise ConfigError("num_domains must be >= 1")
        if self.backbone == "hierarchical_attention":
            for c in self.stage_channels:
                if c % self.attention_heads:
                    raise ConfigError(f"stage channel {c} not divisible by attention_heads={self.attention_heads}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def domain_index(domain) -> int:
    if isinstance(domain, str):
        if domain not in DOMAIN_IDS:
            raise ValueError(f"unknown domain {domain!r}")
        return DOMAIN_IDS[domain]
    return int(domain)


def _group_count(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class DomainNorm(nn.Module):
    """GroupNorm with a separate affine transform per domain."""

    def __init__(self, channels, num_domains):
        super().__init__()
        self.norm = nn.GroupNorm(_group_count(channels), channels, affine=False)
        self.weight = nn.ParameterList(nn.Parameter(torch.ones(channels)) for _ in range(num_domains))
        self.bias = nn.ParameterList(nn.Parameter(torch.zeros(channels)) for _ in range(num_domains))

    def forward(self, x, d: int):
        x = self.norm(x)
        return x * self.weight[d].view(1, -1, 1, 1) + self.bias[d].view(1, -1, 1, 1)


class DomainAdapter(nn.Module):
    """Per-stage adapter: domain-indexed norm followed by a bottleneck residual."""

    def __init__(self, channels, num_domains, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.norm = DomainNorm(channels, num_domains)
        self.down = nn.ModuleList(nn.Conv2d(channels, hidden, 1) for _ in range(num_domains))
        self.up = nn.ModuleList(nn.Conv2d(hidden, channels, 1) for _ in range(num_domains))

    def forward(self, x, d: int):
        x = self.norm(x, d)
        return x + self.up[d](F.relu(self.down[d](x)))


class ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(_group_count(cout), cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(_group_count(cout), cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class ConvStage(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.pool = nn.MaxPool2d(2)
        self.block = ConvBlock(cin, cout)

    def forward(self, x):
        return self.block(self.pool(x))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping square windows."""

    def __init__(self, dim, heads, window):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        b, c, h, w = x.shape
        win = min(self.window, h, w)
        while h % win or w % win:
            win -= 1
        t = x.view(b, c, h // win, win, w // win, win).permute(0, 2, 4, 3, 5, 1)
        t = t.reshape(-1, win * win, c)
        y = self.norm1(t)
        t = t + self.attn(y, y, y, need_weights=False)[0]
        t = t + self.mlp(self.norm2(t))
        t = t.view(b, h // win, w // win, win, win, c).permute(0, 5, 1, 3, 2, 4)
        return t.reshape(b, c, h, w)


class PatchMergeStage(nn.Module):
    """2x2 patch merging followed by a windowed transformer block."""

    def __init__(self, cin, cout, heads, window):
        super().__init__()
        self.merge = nn.Conv2d(cin, cout, kernel_size=2, stride=2)
        self.block = WindowAttention(cout, heads, window)

    def forward(self, x):
        return self.block(self.merge(x))


class UpBlock(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.block = ConvBlock(cout + cskip, cout)

    def forward(self, x, skip):
        return self.block(torch.cat([self.up(x), skip], dim=1))


@dataclass
class UniversalOutput:
    prediction: torch.Tensor
    encoder_features: list
    decoder_last: torch.Tensor
    logits: torch.Tensor | None = None


class UniversalNet(nn.Module):
    """Encoder-decoder whose stage ``l`` (1-based) runs at ``H / 2**l``.

    ``decoder_last`` is the decoder state at ``H/4`` after a 1x1 projection to
    64 channels; the projection sits on the main path, so the segmentation
    losses train it.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        chans = list(config.stage_channels)
        c0 = chans[0]
        self.stem = ConvBlock(config.in_channels, c0)

        stages = []
        cin = c0
        for c in chans:
            if config.backbone == "conv_unet":
                stages.append(ConvStage(cin, c))
            else:
                stages.append(PatchMergeStage(cin, c, config.attention_heads, config.attention_window))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.adapters = nn.ModuleList(
            DomainAdapter(c, config.num_domains, config.adapter_reduction) for c in chans
        )

        # ups[k] lifts the decoder from level L-k to level L-k-1 (level l runs at H / 2**l).
        # Whatever enters level 1 comes out of the H/4 projection.
        ups = []
        for level in range(len(chans) - 1, 0, -1):
            cin_up = DECODER_LAST_CHANNELS if level + 1 == 2 else chans[level]
            ups.append(UpBlock(cin_up, chans[level - 1], chans[level - 1]))
        self.ups = nn.ModuleList(ups)
        self.dec_proj = nn.Conv2d(chans[1], DECODER_LAST_CHANNELS, 1)
        self.final_up = UpBlock(chans[0], c0, c0)
        self.head = nn.Conv2d(c0, 1, 1)

    def _check_input(self, x):
        h, w = self.config.input_size
        if x.dim() != 4 or x.shape[1] != self.config.in_channels or tuple(x.shape[-2:]) != (h, w):
            raise ValueError(
                f"expected input (B, {self.config.in_channels}, {h}, {w}), got {tuple(x.shape)}"
            )

    def forward(self, images: torch.Tensor, domain) -> UniversalOutput:
        self._check_input(images)
        d = domain_index(domain)
        if not 0 <= d < self.config.num_domains:
            raise ValueError(f"domain id {d} outside [0, {self.config.num_domains})")

        x0 = self.stem(images)
        feats = []
        x = x0
        for stage, adapter in zip(self.stages, self.adapters):
            x = adapter(stage(x), d)
            feats.append(x)

        L = len(feats)
        y = feats[-1]
        if L == 2:
            y = decoder_last = self.dec_proj(y)
        for k, up in enumerate(self.ups):
            level = L - k - 1
            y = up(y, feats[level - 1])
            if level == 2:
                y = decoder_last = self.dec_proj(y)
        y = self.final_up(y, x0)
        logits = self.head(y)
        return UniversalOutput(prediction=torch.sigmoid(logits), encoder_features=feats,
                               decoder_last=decoder_last, logits=logits)

    def adapter_parameters(self, domain) -> list:
        d = domain_index(domain)
        params = []
        for a in self.adapters:
            params += [a.norm.weight[d], a.norm.bias[d], *a.down[d].parameters(), *a.up[d].parameters()]
        return params


def build_universal(config: ModelConfig, seed: int | None = None) -> UniversalNet:
    if seed is not None:
        torch.manual_seed(seed)
    return UniversalNet(config)
