"""Noise-prediction U-Net with weight-standardized convolutions and attention.

The network predicts the noise added to an image at a given timestep. Three
departures from a plain U-Net: every 3x3 convolution inside residual blocks
is weight-standardized, full self-attention and linear (kernelized) attention
run at configurable resolutions, and each attention layer is fed through a
GroupNorm placed immediately in front of it. Timestep conditioning enters
each residual block as a learned scale-shift of the first convolution's
normalized output.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

_CHECKPOINT_MAGIC = b"SVPGCKP1"


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or corrupt checkpoint files."""


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters; parameter shapes are a pure function of these."""

    image_size: int = 64
    in_channels: int = 3
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    self_attention_resolutions: tuple[int, ...] = (8,)
    linear_attention_resolutions: tuple[int, ...] = (32, 16)
    groups: int = 8
    time_embed_dim: int = 256
    heads: int = 1

    def __post_init__(self):
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must be non-empty")
        if self.base_channels % self.groups:
            raise ValueError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}"
            )
        depth = len(self.channel_multipliers) - 1
        if self.image_size % (2**depth):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{depth}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def attention_resolutions(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.self_attention_resolutions) | set(self.linear_attention_resolutions), reverse=True))

    def level_resolutions(self) -> list[int]:
        return [self.image_size // 2**i for i in range(len(self.channel_multipliers))]


def default_config() -> DenoiserConfig:
    return DenoiserConfig()


def tiny_config() -> DenoiserConfig:
    """Desk-scale preset for oracle and gradient tests (16x16 input)."""
    return DenoiserConfig(
        image_size=16,
        base_channels=8,
        channel_multipliers=(1, 2),
        self_attention_resolutions=(8,),
        linear_attention_resolutions=(16,),
        groups=4,
        time_embed_dim=32,
    )


CONFIG_PRESETS = {"default": default_config, "tiny": tiny_config}


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """concat(sin(t * w_i), cos(t * w_i)) with w_i = 10000^(-2i/dim), i < dim/2."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.pow(
        torch.tensor(10000.0, dtype=torch.float64),
        -2.0 * torch.arange(half, dtype=torch.float64) / dim,
    )
    args = t.double().reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.to(t.device, torch.get_default_dtype() if not t.is_floating_point() else t.dtype)


class WeightStandardizedConv2d(nn.Conv2d):
    """3x3 convolution whose kernel is standardized per output channel.

    W_hat = (W - mean(W)) / sqrt(var(W) + 1e-5), statistics taken over
    (in-channels x kH x kW) for each output channel.
    """

    EPS = 1e-5

    def __init__(self, in_channels, out_channels, kernel_size=3, **kwargs):
        super().__init__(in_channels, out_channels, kernel_size, **kwargs)
        fan_in = self.weight[0].numel()
        if fan_in <= 1:
            raise ValueError("weight standardization needs kernel fan-in > 1")

    def standardized_weight(self) -> torch.Tensor:
        flat = self.weight.flatten(1)
        mean = flat.mean(dim=1).view(-1, 1, 1, 1)
        var = flat.var(dim=1, unbiased=False).view(-1, 1, 1, 1)
        return (self.weight - mean) / torch.sqrt(var + self.EPS)

    def forward(self, x):
        return F.conv2d(
            x, self.standardized_weight(), self.bias, self.stride, self.padding, self.dilation, self.groups
        )


class Block(nn.Module):
    """ws-conv -> group norm -> optional time scale-shift -> SiLU."""

    def __init__(self, dim, dim_out, groups):
        super().__init__()
        self.proj = WeightStandardizedConv2d(dim, dim_out, 3, padding=1)
        self.norm = nn.GroupNorm(groups, dim_out)
        self.act = nn.SiLU()

    def forward(self, x, scale_shift=None):
        x = self.norm(self.proj(x))
        if scale_shift is not None:
            scale, shift = scale_shift
            x = x * (scale + 1) + shift
        return self.act(x)


class ResnetBlock(nn.Module):
    """Two weight-standardized conv blocks with timestep injection and a residual."""

    def __init__(self, dim, dim_out, time_embed_dim, groups):
        super().__init__()
        self.mlp = nn.Sequential(nn.SiLU(), nn.Linear(time_embed_dim, dim_out * 2))
        self.block1 = Block(dim, dim_out, groups)
        self.block2 = Block(dim_out, dim_out, groups)
        self.res_conv = nn.Conv2d(dim, dim_out, 1) if dim != dim_out else nn.Identity()

    def forward(self, x, time_emb):
        scale_shift = self.mlp(time_emb)[:, :, None, None].chunk(2, dim=1)
        h = self.block1(x, scale_shift=scale_shift)
        h = self.block2(h)
        return h + self.res_conv(x)


class SelfAttention(nn.Module):
    """Softmax attention over all H*W spatial positions, 1x1 projections."""

    def __init__(self, dim, heads=1):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Conv2d(dim, dim * 3, 1, bias=False)
        self.to_out = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.to_qkv(x).reshape(b, 3, self.heads, c // self.heads, h * w)
        q, k, v = qkv.unbind(dim=1)
        attn = torch.softmax(torch.einsum("bhdi,bhdj->bhij", q, k) * self.scale, dim=-1)
        out = torch.einsum("bhij,bhdj->bhdi", attn, v).reshape(b, c, h, w)
        return self.to_out(out)


class LinearAttention(nn.Module):
    """Kernelized attention: softmax over positions on K, over features on Q.

    out = phi_q(Q) (phi_k(K)^T V) / (phi_q(Q) (phi_k(K)^T 1)); the global
    d x d context makes the cost linear in the number of spatial positions.
    """

    def __init__(self, dim, heads=1):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.to_qkv = nn.Conv2d(dim, dim * 3, 1, bias=False)
        self.to_out = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.to_qkv(x).reshape(b, 3, self.heads, c // self.heads, h * w)
        q, k, v = qkv.unbind(dim=1)
        q = q.softmax(dim=-2)  # over features, per position
        k = k.softmax(dim=-1)  # over positions, per feature
        context = torch.einsum("bhdn,bhen->bhde", k, v)
        out = torch.einsum("bhde,bhdn->bhen", context, q)
        denom = torch.einsum("bhd,bhdn->bhn", k.sum(dim=-1), q)
        out = out / denom.unsqueeze(-2)
        return self.to_out(out.reshape(b, c, h, w))


class AttentionGate(nn.Module):
    """Residual attention site; GroupNorm is applied immediately before attention."""

    def __init__(self, dim, attention: nn.Module, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, dim)
        self.attention = attention

    def forward(self, x):
        return x + self.attention(self.norm(x))


def _downsample(dim, dim_out):
    return nn.Conv2d(dim, dim_out, 4, stride=2, padding=1)


class Upsample(nn.Module):
    """Nearest-neighbor x2 followed by a 3x3 conv (avoids checkerboard artifacts)."""

    def __init__(self, dim, dim_out):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim_out, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DenoiserUNet(nn.Module):
    """U-Net noise predictor; output shape always equals input shape."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        dims = [config.base_channels * m for m in config.channel_multipliers]
        resolutions = config.level_resolutions()
        ted = config.time_embed_dim

        self.time_mlp = nn.Sequential(nn.Linear(ted, ted), nn.SiLU(), nn.Linear(ted, ted))
        self.init_conv = nn.Conv2d(config.in_channels, dims[0], 3, padding=1)

        def make_gate(dim, res):
            if res in config.self_attention_resolutions:
                return AttentionGate(dim, SelfAttention(dim, config.heads), config.groups)
            if res in config.linear_attention_resolutions:
                return AttentionGate(dim, LinearAttention(dim, config.heads), config.groups)
            return nn.Identity()

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, (dim, res) in enumerate(zip(dims, resolutions)):
            self.down_blocks.append(
                nn.ModuleList(
                    [
                        ResnetBlock(dim, dim, ted, config.groups),
                        ResnetBlock(dim, dim, ted, config.groups),
                        make_gate(dim, res),
                    ]
                )
            )
            self.downsamples.append(
                _downsample(dim, dims[i + 1]) if i < len(dims) - 1 else nn.Identity()
            )

        mid_dim = dims[-1]
        self.mid_block1 = ResnetBlock(mid_dim, mid_dim, ted, config.groups)
        self.mid_attn = AttentionGate(mid_dim, SelfAttention(mid_dim, config.heads), config.groups)
        self.mid_block2 = ResnetBlock(mid_dim, mid_dim, ted, config.groups)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(dims))):
            dim, res = dims[i], resolutions[i]
            self.up_blocks.append(
                nn.ModuleList(
                    [
                        ResnetBlock(dim * 2, dim, ted, config.groups),
                        ResnetBlock(dim, dim, ted, config.groups),
                        make_gate(dim, res),
                    ]
                )
            )
            self.upsamples.append(Upsample(dim, dims[i - 1]) if i > 0 else nn.Identity())

        self.out_norm = nn.GroupNorm(config.groups, dims[0])
        self.out_conv = nn.Conv2d(dims[0], config.in_channels, 3, padding=1)

    def attention_sites(self) -> list[AttentionGate]:
        """All residual attention sites, for structural inspection."""
        return [m for m in self.modules() if isinstance(m, AttentionGate)]

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.image_size or x.shape[-2] != self.config.image_size:
            raise ValueError(
                f"expected {self.config.image_size}x{self.config.image_size} input, got {tuple(x.shape)}"
            )
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        if t.shape[0] != x.shape[0]:
            raise ValueError(f"timestep batch {t.shape} does not match image batch {x.shape[0]}")
        temb = self.time_mlp(sinusoidal_time_embedding(t, self.config.time_embed_dim).to(x.dtype))

        h = self.init_conv(x)
        skips = []
        for (block1, block2, gate), down in zip(self.down_blocks, self.downsamples):
            h = block1(h, temb)
            h = block2(h, temb)
            h = gate(h)
            skips.append(h)
            h = down(h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, temb)

        for (block1, block2, gate), up in zip(self.up_blocks, self.upsamples):
            h = torch.cat([h, skips.pop()], dim=1)
            h = block1(h, temb)
            h = block2(h, temb)
            h = gate(h)
            h = up(h)

        return self.out_conv(F.silu(self.out_norm(h)))


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> DenoiserUNet:
    """Construct a denoiser with deterministically seeded initial weights."""
    torch.manual_seed(seed)
    return DenoiserUNet(config)


def denoiser_backward(
    net: DenoiserUNet, x: torch.Tensor, t: torch.Tensor, upstream: torch.Tensor
) -> dict[str, torch.Tensor]:
    """Parameter gradients of sum(denoiser(x, t) * upstream), by name."""
    out = net(x, t)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {tuple(upstream.shape)} != output shape {tuple(out.shape)}")
    params = dict(net.named_parameters())
    grads = torch.autograd.grad((out * upstream).sum(), list(params.values()), allow_unused=False)
    return {name: g.detach() for name, g in zip(params, grads)}


# ---------------------------------------------------------------------------
# Checkpoint archive
# ---------------------------------------------------------------------------
# Byte layout (documented in docs/checkpoint_format.md):
#   bytes 0..7    magic "SVPGCKP1"
#   bytes 8..15   little-endian uint64: JSON header length in bytes
#   header        UTF-8 JSON (config, schedule params, training step, dtype,
#                 parameter names+shapes, payload CRC-32)
#   payload       raw little-endian float32 tensors, concatenated in header order


def _header_dict(net: DenoiserUNet, step: int, schedule_params: dict, tensors: dict) -> dict:
    return {
        "format": "svpgen-checkpoint",
        "version": 1,
        "config": asdict(net.config),
        "schedule": schedule_params,
        "training_step": int(step),
        "dtype": "float32",
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }


def save_checkpoint(
    path,
    net: DenoiserUNet,
    step: int,
    schedule_params: dict,
    ema_state: dict[str, torch.Tensor] | None = None,
    extra: dict | None = None,
) -> None:
    """Write net parameters (and optionally an EMA shadow set) to one archive."""
    tensors = {k: v.detach() for k, v in net.state_dict().items()}
    if ema_state is not None:
        tensors.update({f"ema/{k}": v.detach() for k, v in ema_state.items()})
    payload = b"".join(
        np.ascontiguousarray(v.cpu().numpy(), dtype="<f4").tobytes() for v in tensors.values()
    )
    header = _header_dict(net, step, schedule_params, tensors)
    if extra:
        header.update(extra)
    header["payload_crc32"] = zlib.crc32(payload)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and validate a checkpoint archive; returns (header, name -> array)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint archive")
    header_len = int.from_bytes(blob[8:16], "little")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    payload = blob[16 + header_len :]
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CheckpointError(f"{path}: payload checksum mismatch; file is corrupt")
    arrays = {}
    offset = 0
    for entry in header["parameters"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 4 * n
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload[offset:end], dtype="<f4").reshape(entry["shape"]).copy()
        offset = end
    return header, arrays


def load_checkpoint(path) -> tuple[DenoiserUNet, dict, dict[str, torch.Tensor]]:
    """Rebuild a denoiser from an archive; returns (net, header, ema state)."""
    header, arrays = read_checkpoint(path)
    cfg_dict = dict(header["config"])
    for key in ("channel_multipliers", "self_attention_resolutions", "linear_attention_resolutions"):
        cfg_dict[key] = tuple(cfg_dict[key])
    net = DenoiserUNet(DenoiserConfig(**cfg_dict))
    raw = {k: torch.from_numpy(v) for k, v in arrays.items() if not k.startswith("ema/")}
    ema = {k[len("ema/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("ema/")}
    net.load_state_dict(raw)
    return net, header, ema
