"""Dual-task 3D network: multi-branch fusion encoder + attention-gated
decoder with segmentation and survival heads.

The encoder runs up to three residual branches (PET-only, CT-only, and a
joint branch on the concatenated pair). Under the data-driven fusion mode
a gate at every level blends the modality-specific combination with the
joint stream through per-voxel softmax weights; early/late/intermediate
modes reduce the same skeleton to the classic fixed strategies. The
decoder filters each skip connection with an additive attention gate and
feeds global-average-pooled features from all of its blocks into the
survival head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericFault, ShapeMismatchError, TransferError
from .survmath import IntervalScheme, PredictedSurvival
from .volio import VolumeGrid

FUSION_MODES = ("data_driven", "early", "late", "intermediate")
SURV_HEAD_PREFIX = "surv_head."
# config fields that may change between Stage-I and Stage-II
_HEAD_ONLY_FIELDS = ("aux_feature_dim", "survival_hidden", "dropout_rate", "l2_weight")


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 5
    convs_per_block: int = 2
    base_width: int = 16
    channel_widths: tuple[int, ...] | None = None
    fusion_mode: str = "data_driven"
    n_intervals: int = 10
    aux_feature_dim: int = 0
    seg_channels: int = 1
    dropout_rate: float = 0.3
    l2_weight: float = 1e-4
    survival_hidden: int = 64

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.convs_per_block < 1:
            raise ConfigError(f"convs_per_block must be >= 1, got {self.convs_per_block}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.n_intervals < 2:
            raise ConfigError(f"n_intervals must be >= 2, got {self.n_intervals}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.aux_feature_dim < 0:
            raise ConfigError(f"aux_feature_dim must be >= 0, got {self.aux_feature_dim}")
        if self.seg_channels < 1:
            raise ConfigError(f"seg_channels must be >= 1, got {self.seg_channels}")
        widths = self.widths
        if len(widths) != self.levels:
            raise ConfigError(f"channel_widths needs {self.levels} entries, got {len(widths)}")
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"channel_widths must be strictly increasing, got {widths}")

    @property
    def widths(self) -> tuple[int, ...]:
        if self.channel_widths is not None:
            return tuple(int(w) for w in self.channel_widths)
        return tuple(self.base_width * 2 ** i for i in range(self.levels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths) if self.channel_widths else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("channel_widths"):
            d["channel_widths"] = tuple(d["channel_widths"])
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]

    def backbone_fingerprint(self) -> str:
        d = self.to_dict()
        for key in _HEAD_ONLY_FIELDS:
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class ResidualBlock(nn.Module):
    """n stacked 3x3x3 convolutions (each Conv-BN-ReLU) with a residual
    connection; 1x1x1 projection when the channel count changes."""

    def __init__(self, in_ch: int, out_ch: int, n_convs: int):
        super().__init__()
        layers = []
        ch = in_ch
        for _ in range(n_convs):
            layers += [
                nn.Conv3d(ch, out_ch, 3, padding=1, bias=False),
                nn.BatchNorm3d(out_ch),
                nn.ReLU(inplace=True),
            ]
            ch = out_ch
        self.body = nn.Sequential(*layers)
        if in_ch != out_ch:
            self.proj = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, bias=False), nn.BatchNorm3d(out_ch)
            )
        else:
            self.proj = nn.Identity()

    def forward(self, x):
        return self.body(x) + self.proj(x)


class FusionGate(nn.Module):
    """Blend the PET/CT combination with the joint stream by per-voxel
    softmax weights (guaranteed convex: w_pc + w_fuse = 1 everywhere)."""

    def __init__(self, width: int):
        super().__init__()
        self.pc_conv = nn.Conv3d(2 * width, width, 3, padding=1)
        self.logit_pc = nn.Conv3d(2 * width, 1, 1)
        self.logit_fuse = nn.Conv3d(2 * width, 1, 1)

    def forward(self, f_pet, f_ct, f_fuse, override: float | None = None):
        if f_pet.shape != f_ct.shape or f_pet.shape != f_fuse.shape:
            raise ShapeMismatchError(
                f"fusion gate inputs disagree: {tuple(f_pet.shape)} / "
                f"{tuple(f_ct.shape)} / {tuple(f_fuse.shape)}"
            )
        f_pc = self.pc_conv(torch.cat([f_pet, f_ct], dim=1))
        z = torch.cat([f_pc, f_fuse], dim=1)
        logits = torch.cat([self.logit_pc(z), self.logit_fuse(z)], dim=1)
        w = torch.softmax(logits, dim=1)
        w_pc, w_fuse = w[:, :1], w[:, 1:]
        if override is not None:
            w_fuse = torch.full_like(w_fuse, float(override))
            w_pc = 1.0 - w_fuse
        fused = w_pc * f_pc + w_fuse * f_fuse
        return fused, w_pc, w_fuse


class AttentionGate(nn.Module):
    """Additive attention on a skip connection: project skip and (upsampled)
    gating signal, collapse to one channel, sigmoid -> per-voxel alpha."""

    def __init__(self, skip_ch: int, gate_ch: int):
        super().__init__()
        inter = max(skip_ch // 2, 1)
        self.w_skip = nn.Conv3d(skip_ch, inter, 1)
        self.w_gate = nn.Conv3d(gate_ch, inter, 1)
        self.psi = nn.Conv3d(inter, 1, 1)

    def forward(self, skip, gating):
        g = F.interpolate(gating, size=skip.shape[2:], mode="trilinear", align_corners=False)
        alpha = torch.sigmoid(self.psi(F.relu(self.w_skip(skip) + self.w_gate(g))))
        return skip * alpha, alpha


class UpStep(nn.Module):
    """Trilinear 2x upsampling followed by a 3x3x3 convolution."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        return self.conv(x)


def _branch(in_ch: int, widths, n_convs: int) -> nn.ModuleList:
    blocks = []
    ch = in_ch
    for w in widths:
        blocks.append(ResidualBlock(ch, w, n_convs))
        ch = w
    return nn.ModuleList(blocks)


class DMSSNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        L = config.levels
        n = config.convs_per_block
        mode = config.fusion_mode

        if mode in ("data_driven", "late", "intermediate"):
            self.b_pet = _branch(1, widths, n)
            self.b_ct = _branch(1, widths, n)
        if mode in ("data_driven", "early", "intermediate"):
            self.b_fuse = _branch(2, widths, n)
        if mode == "data_driven":
            self.fusion_gates = nn.ModuleList(FusionGate(w) for w in widths)
        if mode == "intermediate":
            self.pc_convs = nn.ModuleList(nn.Conv3d(2 * w, w, 3, padding=1) for w in widths)
        self.pool = nn.MaxPool3d(2)

        skip_scale = 2 if mode == "late" else 1
        skip_widths = [skip_scale * w for w in widths]

        self.dec_blocks = nn.ModuleList([ResidualBlock(skip_widths[-1], widths[-1], n)])
        self.up_steps = nn.ModuleList()
        self.att_gates = nn.ModuleList()
        for j in range(1, L):
            target = widths[L - 1 - j]
            self.up_steps.append(UpStep(widths[L - j], target))
            self.att_gates.append(AttentionGate(skip_widths[L - 1 - j], widths[L - j]))
            self.dec_blocks.append(ResidualBlock(skip_widths[L - 1 - j] + target, target, n))

        self.seg_head = nn.Conv3d(widths[0], config.seg_channels, 1)

        gap_dim = sum(widths)
        self.surv_head = nn.Sequential(
            nn.Linear(gap_dim + config.aux_feature_dim, config.survival_hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(config.dropout_rate),
            nn.Linear(config.survival_hidden, config.n_intervals),
        )

        # forces every gate to a fixed w_fuse; testing/diagnostics only
        self.gate_override: float | None = None
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv3d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        # layers feeding a sigmoid/softmax start small so gates open near
        # 0.5 and probabilities stay away from float32 saturation
        small = [self.seg_head]
        for m in self.modules():
            if isinstance(m, FusionGate):
                small += [m.logit_pc, m.logit_fuse]
            elif isinstance(m, AttentionGate):
                small.append(m.psi)
        for layer in small:
            nn.init.uniform_(layer.weight, -1e-3, 1e-3)
            nn.init.zeros_(layer.bias)

    def _check_input(self, pet, ct):
        if pet.shape != ct.shape:
            raise ShapeMismatchError(f"pet {tuple(pet.shape)} vs ct {tuple(ct.shape)}")
        if pet.dim() != 5 or pet.shape[1] != 1:
            raise ShapeMismatchError(
                f"expected (B, 1, D, H, W) volumes, got {tuple(pet.shape)}"
            )
        divisor = 2 ** (self.config.levels - 1)
        for d in pet.shape[2:]:
            if d % divisor != 0:
                raise ShapeMismatchError(
                    f"spatial dims must be divisible by {divisor} "
                    f"for {self.config.levels} levels, got {tuple(pet.shape[2:])}"
                )

    def encode(self, pet, ct):
        """Run the encoder; returns the per-level skip features and the
        gate weight maps (data-driven mode only)."""
        mode = self.config.fusion_mode
        L = self.config.levels
        skips = []
        gate_weights = []
        f_pet, f_ct = pet, ct
        f_fuse = torch.cat([pet, ct], dim=1) if mode != "late" else None
        for i in range(L):
            if mode != "early":
                f_pet = self.b_pet[i](f_pet)
                f_ct = self.b_ct[i](f_ct)
            if mode != "late":
                f_fuse = self.b_fuse[i](f_fuse)

            if mode == "data_driven":
                fused, _, w_fuse = self.fusion_gates[i](
                    f_pet, f_ct, f_fuse, override=self.gate_override
                )
                gate_weights.append(w_fuse)
                skip = fused
                f_fuse = fused
            elif mode == "intermediate":
                f_pc = self.pc_convs[i](torch.cat([f_pet, f_ct], dim=1))
                skip = f_pc + f_fuse
                f_fuse = skip
            elif mode == "early":
                skip = f_fuse
            else:  # late
                skip = torch.cat([f_pet, f_ct], dim=1)
            skips.append(skip)

            if i < L - 1:
                if mode != "early":
                    f_pet = self.pool(f_pet)
                    f_ct = self.pool(f_ct)
                if mode != "late":
                    f_fuse = self.pool(f_fuse)
        return skips, gate_weights

    def decode(self, skips):
        d = self.dec_blocks[0](skips[-1])
        feats = [d]
        alphas = []
        L = self.config.levels
        for j in range(1, L):
            up = self.up_steps[j - 1](d)
            filtered, alpha = self.att_gates[j - 1](skips[L - 1 - j], d)
            d = self.dec_blocks[j](torch.cat([filtered, up], dim=1))
            feats.append(d)
            alphas.append(alpha)
        return feats, alphas

    def forward(self, pet, ct, aux=None):
        """Returns dict with seg probabilities, survival probabilities,
        attention maps, and gate weight maps."""
        self._check_input(pet, ct)
        skips, gate_weights = self.encode(pet, ct)
        feats, alphas = self.decode(skips)
        seg = torch.sigmoid(self.seg_head(feats[-1]))

        gap = torch.cat([f.mean(dim=(2, 3, 4)) for f in feats], dim=1)
        if self.config.aux_feature_dim > 0:
            if aux is None or aux.shape != (pet.shape[0], self.config.aux_feature_dim):
                got = None if aux is None else tuple(aux.shape)
                raise ShapeMismatchError(
                    f"aux features must have shape "
                    f"({pet.shape[0]}, {self.config.aux_feature_dim}), got {got}"
                )
            gap = torch.cat([gap, aux], dim=1)
        elif aux is not None and aux.numel() > 0:
            raise ShapeMismatchError("model built with aux_feature_dim=0 but aux given")
        surv = torch.sigmoid(self.surv_head(gap))
        return {"seg": seg, "surv": surv, "alphas": alphas, "gate_weights": gate_weights}

    def surv_head_l2(self) -> torch.Tensor:
        total = sum((p ** 2).sum() for p in self.surv_head.parameters())
        return self.config.l2_weight * total


def build_model(config: ModelConfig, seed: int = 0) -> DMSSNet:
    """Construct the network with deterministic initialization."""
    torch.manual_seed(seed)
    return DMSSNet(config)


# ---------------------------------------------------------------------------
# inference over VolumeGrids

def _to_tensor(grid: VolumeGrid) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(grid.data, dtype=np.float32))[None, None]


def forward_segmentation(model: DMSSNet, pet: VolumeGrid, ct: VolumeGrid) -> np.ndarray:
    """Segmentation probabilities of shape (seg_channels, D, H, W)."""
    model.eval()
    with torch.inference_mode():
        out = model(_to_tensor(pet), _to_tensor(ct))["seg"][0]
    arr = out.numpy()
    if not np.all(np.isfinite(arr)):
        raise NumericFault("segmentation forward produced non-finite values")
    return arr


def forward_survival(
    model: DMSSNet,
    pet: VolumeGrid,
    ct: VolumeGrid,
    aux: np.ndarray | None = None,
    scheme: IntervalScheme | None = None,
):
    """Per-interval conditional survival probabilities; wrapped into a
    PredictedSurvival when an interval scheme is supplied."""
    model.eval()
    aux_t = None
    if aux is not None and len(np.atleast_1d(aux)):
        aux_t = torch.from_numpy(np.atleast_1d(np.asarray(aux, dtype=np.float32)))[None]
    with torch.inference_mode():
        out = model(_to_tensor(pet), _to_tensor(ct), aux=aux_t)["surv"][0]
    probs = out.numpy().astype(np.float64)
    if not np.all(np.isfinite(probs)):
        raise NumericFault("survival forward produced non-finite values")
    if scheme is not None:
        return PredictedSurvival(probs, scheme)
    return probs


def export_gate_statistics(model: DMSSNet, volume_pairs) -> list[dict]:
    """Mean fusion-gate weights per level over every voxel of every given
    (pet, ct) pair; only meaningful for the data-driven mode."""
    if model.config.fusion_mode != "data_driven":
        raise ConfigError(
            f"gate statistics require fusion_mode=data_driven, "
            f"model uses {model.config.fusion_mode!r}"
        )
    model.eval()
    sums = np.zeros(model.config.levels)
    counts = np.zeros(model.config.levels)
    n_pairs = 0
    with torch.inference_mode():
        for pet, ct in volume_pairs:
            n_pairs += 1
            _, gate_weights = model.encode(_to_tensor(pet), _to_tensor(ct))
            for i, w in enumerate(gate_weights):
                sums[i] += float(w.sum())
                counts[i] += w.numel()
    if n_pairs == 0:
        raise ConfigError("gate statistics need at least one volume pair")
    return [
        {"level": i + 1, "mean_w_fuse": sums[i] / counts[i], "mean_w_pc": 1.0 - sums[i] / counts[i]}
        for i in range(model.config.levels)
    ]


def export_attention_maps(model: DMSSNet, pet: VolumeGrid, ct: VolumeGrid) -> list[VolumeGrid]:
    """One attention map per gate, trilinearly upsampled onto the input grid."""
    model.eval()
    with torch.inference_mode():
        out = model(_to_tensor(pet), _to_tensor(ct))
        maps = []
        for alpha in out["alphas"]:
            up = F.interpolate(
                alpha, size=tuple(pet.shape), mode="trilinear", align_corners=False
            )
            maps.append(VolumeGrid(up[0, 0].numpy(), pet.spacing, pet.origin))
    return maps


# ---------------------------------------------------------------------------
# checkpointing & weight transfer

@dataclass
class Checkpoint:
    config: ModelConfig
    state_dict: dict
    stage: str  # "seg" | "surv"
    interval_scheme: IntervalScheme | None = None
    feature_stats: dict | None = None
    meta: dict | None = None

    def build_model(self) -> DMSSNet:
        model = DMSSNet(self.config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.stage not in ("seg", "surv"):
        raise ConfigError(f"stage must be 'seg' or 'surv', got {ckpt.stage!r}")
    payload = {
        "format": 1,
        "config": ckpt.config.to_dict(),
        "fingerprint": ckpt.config.fingerprint(),
        "backbone_fingerprint": ckpt.config.backbone_fingerprint(),
        "stage": ckpt.stage,
        "state_dict": {k: v.cpu() for k, v in ckpt.state_dict.items()},
        "interval_scheme": list(ckpt.interval_scheme.boundaries) if ckpt.interval_scheme else None,
        "feature_stats": ckpt.feature_stats,
        "meta": ckpt.meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise TransferError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig.from_dict(payload["config"])
    if config.fingerprint() != payload["fingerprint"]:
        raise TransferError(
            f"{path}: config fingerprint mismatch "
            f"({config.fingerprint()} vs stored {payload['fingerprint']})"
        )
    scheme = None
    if payload.get("interval_scheme"):
        scheme = IntervalScheme(tuple(payload["interval_scheme"]))
    return Checkpoint(
        config=config,
        state_dict=payload["state_dict"],
        stage=payload["stage"],
        interval_scheme=scheme,
        feature_stats=payload.get("feature_stats"),
        meta=payload.get("meta", {}),
    )


def transfer_weights(stage1: Checkpoint, config: ModelConfig, seed: int = 0) -> DMSSNet:
    """Initialize a Stage-II model from a Stage-I checkpoint: every tensor
    outside the survival-head namespace is copied bit-for-bit; the survival
    head (whose input width may change with aux features) is freshly
    initialized."""
    if stage1.config.backbone_fingerprint() != config.backbone_fingerprint():
        raise TransferError(
            "checkpoint backbone is incompatible with the target config "
            f"({stage1.config.backbone_fingerprint()} vs {config.backbone_fingerprint()})"
        )
    model = build_model(config, seed=seed)
    new_sd = model.state_dict()
    old_backbone = {k for k in stage1.state_dict if not k.startswith(SURV_HEAD_PREFIX)}
    new_backbone = {k for k in new_sd if not k.startswith(SURV_HEAD_PREFIX)}
    if old_backbone != new_backbone:
        raise TransferError(
            f"backbone parameter names diverge: only in checkpoint "
            f"{sorted(old_backbone - new_backbone)[:5]}, only in target "
            f"{sorted(new_backbone - old_backbone)[:5]}"
        )
    for k in old_backbone:
        new_sd[k] = stage1.state_dict[k].clone()
    model.load_state_dict(new_sd)
    return model
