"""Segmentation network: U-Net encoder/decoder plus metadata heads.

The encoder downsamples by 2 per stage; the decoder mirrors it with skip
connections and ends in a 1x1 classifier followed by a softmax, so the output
is a per-pixel probability map. Two optional heads read a feature tap (encoder
bottleneck or final decoder features) through a max-pool and a small MLP: the
location head regresses the sinusoidal coordinate encoding, the time head the
circle-encoded timestamp.

Everything runs on CPU tensors; gradients come from torch autograd and are
checked against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

CHECKPOINT_FORMAT = "geouda-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SegNetConfig:
    """Backbone sizes. `num_classes` includes the ignored "other" channel."""

    in_bands: int = 5
    num_classes: int = 13
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    input_size: int = 64

    def __post_init__(self):
        if self.in_bands <= 0 or self.num_classes <= 1:
            raise ValueError("in_bands must be positive and num_classes >= 2")
        if not self.encoder_channels or any(c <= 0 for c in self.encoder_channels):
            raise ValueError(f"encoder widths must be positive, got {self.encoder_channels}")
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        if self.input_size % (2 ** len(self.encoder_channels)) != 0:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by "
                f"2**{len(self.encoder_channels)} stages"
            )

    @property
    def stages(self) -> int:
        return len(self.encoder_channels)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // (2 ** self.stages)


@dataclass(frozen=True)
class GeoHeadConfig:
    """Location head: max-pool to `pool_output`, then 5 linear layers.

    The first four linears carry batch norm and ReLU, the last is linear only
    and emits `out_dim` values matching the coordinate encoding length.
    `feature_source` selects the tap: the encoder bottleneck or the final
    decoder feature map.
    """

    pool_output: int = 4
    hidden_widths: tuple[int, int, int, int] = (512, 512, 384, 320)
    out_dim: int = 256
    feature_source: str = "encoder"

    def __post_init__(self):
        if self.pool_output <= 0 or self.out_dim <= 0:
            raise ValueError("pool_output and out_dim must be positive")
        if len(self.hidden_widths) != 4 or any(w <= 0 for w in self.hidden_widths):
            raise ValueError(
                f"expected 4 positive hidden widths (5 linear layers total), "
                f"got {self.hidden_widths}"
            )
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))
        if self.feature_source not in ("encoder", "decoder"):
            raise ValueError(
                f"feature_source must be 'encoder' or 'decoder', got {self.feature_source!r}"
            )


@dataclass(frozen=True)
class TimeHeadConfig:
    """Time head: max-pool plus two linear layers, sized to the used fields."""

    pool_output: int = 4
    hidden_width: int = 64
    use_month: bool = True
    use_hour: bool = True
    noise: bool = True

    def __post_init__(self):
        if self.pool_output <= 0 or self.hidden_width <= 0:
            raise ValueError("pool_output and hidden_width must be positive")
        if not (self.use_month or self.use_hour):
            raise ValueError("time head needs at least one of month/hour")

    @property
    def out_dim(self) -> int:
        return 2 * (int(self.use_month) + int(self.use_hour))


def _norm_groups(channels: int) -> int:
    """Largest power-of-two group count <= 8 dividing the channel width."""
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """Two 3x3 conv + group norm + ReLU units.

    Group norm keeps single-image inference statistics identical to training
    statistics, which matters here: batches mix domains with different
    radiometric offsets, so batch-averaged running stats fit none of them.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.GroupNorm(_norm_groups(out_ch), out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.GroupNorm(_norm_groups(out_ch), out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Encoder(nn.Module):
    """Conv blocks with 2x max-pool after each; returns bottleneck + skips."""

    def __init__(self, in_bands: int, channels: Sequence[int]):
        super().__init__()
        blocks = []
        prev = in_bands
        for ch in channels:
            blocks.append(ConvBlock(prev, ch))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        return x, skips


class Decoder(nn.Module):
    """Transposed-conv upsampling with skip concatenation, mirroring Encoder."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        ups = []
        blocks = []
        rev = list(channels)[::-1]  # e.g. [128, 64, 32, 16]
        for i, ch in enumerate(rev):
            ups.append(nn.ConvTranspose2d(ch, ch, 2, stride=2))
            out_ch = rev[i + 1] if i + 1 < len(rev) else rev[-1]
            blocks.append(ConvBlock(2 * ch, out_ch))
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = rev[-1]

    def forward(self, z: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        x = z
        for up, block, skip in zip(self.ups, self.blocks, skips[::-1]):
            x = up(x)
            if x.shape[2:] != skip.shape[2:]:
                raise ValueError(
                    f"decoder/skip size mismatch: {tuple(x.shape)} vs {tuple(skip.shape)}"
                )
            x = block(torch.cat([skip, x], dim=1))
        return x


class PooledMlpHead(nn.Module):
    """Max-pool a feature map to a fixed grid, flatten, run a linear stack.

    All linear layers except the last are followed by batch norm and ReLU.
    """

    def __init__(self, in_channels: int, pool_output: int, widths: Sequence[int], out_dim: int):
        super().__init__()
        self.pool_output = pool_output
        self.pool = nn.AdaptiveMaxPool2d(pool_output)
        layers: list[nn.Module] = [nn.Flatten()]
        prev = in_channels * pool_output * pool_output
        for w in widths:
            layers.extend([nn.Linear(prev, w), nn.BatchNorm1d(w), nn.ReLU(inplace=True)])
            prev = w
        layers.append(nn.Linear(prev, out_dim))
        self.mlp = nn.Sequential(*layers)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[2] < self.pool_output or feats.shape[3] < self.pool_output:
            raise ValueError(
                f"feature map {tuple(feats.shape)} smaller than pool output "
                f"{self.pool_output}"
            )
        return self.mlp(self.pool(feats))


class SegModel(nn.Module):
    """U-Net with softmax output and optional location/time heads."""

    def __init__(
        self,
        cfg: SegNetConfig,
        geo_cfg: GeoHeadConfig | None = None,
        time_cfg: TimeHeadConfig | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.geo_cfg = geo_cfg
        self.time_cfg = time_cfg
        self.encoder = Encoder(cfg.in_bands, cfg.encoder_channels)
        self.decoder = Decoder(cfg.encoder_channels)
        self.classifier = nn.Conv2d(self.decoder.out_channels, cfg.num_classes, 1)

        tap_channels = {
            "encoder": cfg.encoder_channels[-1],
            "decoder": self.decoder.out_channels,
        }
        self.geo_head = None
        if geo_cfg is not None:
            self.geo_head = PooledMlpHead(
                tap_channels[geo_cfg.feature_source],
                geo_cfg.pool_output,
                geo_cfg.hidden_widths,
                geo_cfg.out_dim,
            )
        self.time_head = None
        if time_cfg is not None:
            source = geo_cfg.feature_source if geo_cfg is not None else "encoder"
            self.time_head = PooledMlpHead(
                tap_channels[source],
                time_cfg.pool_output,
                (time_cfg.hidden_width,),
                time_cfg.out_dim,
            )
        self.apply(init_weights)

    @property
    def feature_source(self) -> str:
        return self.geo_cfg.feature_source if self.geo_cfg is not None else "encoder"

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Run the encoder; returns the bottleneck map and per-stage skips."""
        if x.dim() != 4 or x.shape[1] != self.cfg.in_bands:
            raise ValueError(
                f"expected input (B, {self.cfg.in_bands}, H, W), got {tuple(x.shape)}"
            )
        div = 2 ** self.cfg.stages
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} not divisible by {div}"
            )
        return self.encoder(x)

    def decode_features(self, z: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        return self.decoder(z, skips)

    def classify(self, dec_feats: torch.Tensor) -> torch.Tensor:
        """Softmax class probabilities from decoder features."""
        return torch.softmax(self.classifier(dec_feats), dim=1)

    def decode(self, z: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        """Per-pixel class probabilities (B, num_classes, H, W), rows sum to 1."""
        return self.classify(self.decode_features(z, skips))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z, skips = self.encode(x)
        return self.decode(z, skips)

    def head_input(
        self, z: torch.Tensor, dec_feats: torch.Tensor | None
    ) -> torch.Tensor:
        """Select the head tap; the segmentation path is unaffected by it."""
        if self.feature_source == "encoder":
            return z
        if dec_feats is None:
            raise ValueError("decoder tap requested but decoder features not provided")
        return dec_feats

    def geo_head_forward(
        self, z: torch.Tensor, dec_feats: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Predicted coordinate encoding, shape (B, out_dim)."""
        if self.geo_head is None:
            raise RuntimeError("model was built without a location head")
        return self.geo_head(self.head_input(z, dec_feats))

    def time_head_forward(
        self, z: torch.Tensor, dec_feats: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Predicted time encoding, shape (B, 2 * used fields)."""
        if self.time_head is None:
            raise RuntimeError("model was built without a time head")
        return self.time_head(self.head_input(z, dec_feats))


def init_weights(module: nn.Module):
    """Kaiming fan-in weights, zero biases, identity batch norms."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.kaiming_uniform_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d, nn.GroupNorm)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(
        p.numel() for p in module.parameters() if p.requires_grad or not trainable_only
    )


def backward_and_check(loss: torch.Tensor, model: nn.Module):
    """Backpropagate and fail loudly on non-finite gradients."""
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise RuntimeError(f"non-finite gradient in parameter {name!r}")


def save_checkpoint(
    path: str | Path,
    model: SegModel,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
):
    """Write configs, parameters, and optimizer state to one versioned file."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "configs": {
            "network": model.cfg,
            "geo_head": model.geo_cfg,
            "time_head": model.time_cfg,
        },
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint payload, validating its header."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognized checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('version')} in {path}"
        )
    return payload


def model_from_checkpoint(payload: dict) -> SegModel:
    """Rebuild a model from a loaded checkpoint payload."""
    cfgs = payload["configs"]
    model = SegModel(cfgs["network"], cfgs["geo_head"], cfgs["time_head"])
    model.load_state_dict(payload["model_state"])
    return model
