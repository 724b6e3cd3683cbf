"""Restoration network: task intra-patch blocks, task sequence generator, FFC skips, adaptive mixup.

All feature maps are ``(N, C, H, W)`` float tensors (PyTorch layout).
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from wxrestore.config import NetworkConfig
from wxrestore.errors import ConfigError, NumericError, ShapeError

_attention_log: list[torch.Tensor] | None = None


@contextlib.contextmanager
def record_attention() -> Iterator[list[torch.Tensor]]:
    """Collect every softmax weight matrix produced by :func:`scaled_dot_attention`."""
    global _attention_log
    prev, _attention_log = _attention_log, []
    try:
        yield _attention_log
    finally:
        _attention_log = prev


def scaled_dot_attention(queries: torch.Tensor, keys: torch.Tensor,
                         values: torch.Tensor) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` over the last two dims; leading dims broadcast."""
    if queries.dim() < 2 or keys.dim() < 2 or values.dim() < 2:
        raise ShapeError("queries, keys and values must have rank >= 2")
    d = queries.shape[-1]
    if d == 0:
        raise ConfigError("key dimension d must be >= 1")
    if keys.shape[-1] != d:
        raise ShapeError(f"keys width {keys.shape[-1]} does not match queries width {d}")
    if values.shape[-2] != keys.shape[-2]:
        raise ShapeError(f"values rows {values.shape[-2]} do not match keys rows "
                         f"{keys.shape[-2]}")
    scores = (queries / math.sqrt(d)) @ keys.transpose(-2, -1)
    weights = scores.softmax(dim=-1)
    if _attention_log is not None:
        _attention_log.append(weights.detach())
    return weights @ values


def adaptive_mixup(f_down: torch.Tensor, f_up: torch.Tensor,
                   theta: torch.Tensor | float) -> torch.Tensor:
    """Gate encoder features against decoder features with weight ``sigmoid(theta)``."""
    if f_down.shape != f_up.shape:
        raise ShapeError(f"mixup operands differ: f_down {tuple(f_down.shape)} vs "
                         f"f_up {tuple(f_up.shape)}")
    theta = torch.as_tensor(theta, dtype=f_down.dtype, device=f_down.device)
    s = torch.sigmoid(theta)
    out = s * f_down + (1 - s) * f_up
    # rounding can step one ulp outside the hull; pin it back
    return torch.clamp(out, torch.minimum(f_down, f_up), torch.maximum(f_down, f_up))


# ---------------------------------------------------------------- padding


def _reflect_index(n: int, total: int) -> torch.Tensor:
    idx = torch.arange(total)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * n - 2
    idx = idx % period
    return torch.where(idx >= n, period - idx, idx)


def reflect_pad_to_multiple(image: torch.Tensor, multiple: int,
                            minimum: int = 0) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflection-pad bottom/right up to the next multiple (and at least ``minimum``).

    Pads of any length are supported by folding the reflection repeatedly. The
    returned record is the original ``(H, W)`` for :func:`crop_to_record`.
    """
    if multiple < 1:
        raise ConfigError(f"multiple must be >= 1, got {multiple}")
    h, w = image.shape[-2:]
    th = max(-(-h // multiple) * multiple, -(-minimum // multiple) * multiple)
    tw = max(-(-w // multiple) * multiple, -(-minimum // multiple) * multiple)
    out = image
    if th != h:
        out = out.index_select(-2, _reflect_index(h, th).to(image.device))
    if tw != w:
        out = out.index_select(-1, _reflect_index(w, tw).to(image.device))
    return out, (h, w)


def crop_to_record(image: torch.Tensor, record: tuple[int, int]) -> torch.Tensor:
    h, w = record
    return image[..., :h, :w]


# ---------------------------------------------------------------- building blocks


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dim of an NCHW map."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class FeedForward(nn.Module):
    """Two-layer token MLP."""

    def __init__(self, dim: int, expansion: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * expansion)
        self.fc2 = nn.Linear(dim * expansion, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class ChannelAttention(nn.Module):
    # transposed (channel x channel) attention keeps the cost linear in pixels
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.qkv_dw = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.proj = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q = F.normalize(q.reshape(n, self.heads, c // self.heads, h * w), dim=-1)
        k = F.normalize(k.reshape(n, self.heads, c // self.heads, h * w), dim=-1)
        v = v.reshape(n, self.heads, c // self.heads, h * w)
        attn = (q @ k.transpose(-2, -1) * self.temperature).softmax(dim=-1)
        return self.proj((attn @ v).reshape(n, c, h, w))


class ConvFeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Conv2d(dim, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.dw(self.fc1(x))))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, expansion: int):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.attn = ChannelAttention(dim, heads)
        self.norm2 = LayerNorm2d(dim)
        self.ffn = ConvFeedForward(dim, expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class EncoderStage(nn.Module):
    """Strided 3x3 conv (2x down, channels doubled) then a transformer block."""

    def __init__(self, in_channels: int, heads: int, expansion: int):
        super().__init__()
        out_channels = in_channels * 2
        self.down = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.block = TransformerBlock(out_channels, heads, expansion)

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ShapeError(f"encoder stage needs even spatial dims, got {tuple(x.shape[-2:])}")
        return self.block(self.down(x))


def _split_heads(t: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = t.shape
    return t.reshape(b, n, heads, c // heads).transpose(1, 2)


def _merge_heads(t: torch.Tensor) -> torch.Tensor:
    b, h, n, d = t.shape
    return t.transpose(1, 2).reshape(b, n, h * d)


class TaskIntraPatchBlock(nn.Module):
    """Attention over half-size patches whose queries are a trained sequence.

    Each of the 2x2 patches becomes a token set. The learnable queries read
    the patch through ``softmax(Q K^T / sqrt(d)) V``, giving ``query_len``
    task tokens; every patch token then reads those task tokens back so the
    result lands on the patch grid for the residual and feed-forward.
    """

    def __init__(self, dim: int, heads: int, query_len: int, expansion: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Parameter(torch.zeros(heads, query_len, dim // heads))
        self.norm1 = nn.LayerNorm(dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_q = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, expansion)

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"TIPB needs even spatial dims (pad first), got {(h, w)}")
        ph, pw = h // 2, w // 2
        tokens = (x.reshape(n, c, 2, ph, 2, pw).permute(0, 2, 4, 3, 5, 1)
                  .reshape(n * 4, ph * pw, c))

        y = self.norm1(tokens)
        k = _split_heads(self.to_k(y), self.heads)
        v = _split_heads(self.to_v(y), self.heads)
        q = self.query.unsqueeze(0).expand(tokens.shape[0], -1, -1, -1)
        task = scaled_dot_attention(q, k, v)
        back = scaled_dot_attention(_split_heads(self.to_q(y), self.heads), task, task)
        tokens = tokens + self.proj(_merge_heads(back))
        tokens = tokens + self.ffn(self.norm2(tokens))

        return (tokens.reshape(n, 2, 2, ph, pw, c).permute(0, 5, 1, 3, 2, 4)
                .reshape(n, c, h, w))


class TaskQueryFuse(nn.Module):
    """7x7 / 5x5 / 3x3 convs on T_1..T_3, resampled to T_3's grid, summed, outer 3x3."""

    def __init__(self, in_channels: tuple[int, int, int], task_channels: int):
        super().__init__()
        c1, c2, c3 = in_channels
        self.conv7 = nn.Conv2d(c1, task_channels, 7, padding=3)
        self.conv5 = nn.Conv2d(c2, task_channels, 5, padding=2)
        self.conv3 = nn.Conv2d(c3, task_channels, 3, padding=1)
        self.out = nn.Conv2d(task_channels, task_channels, 3, padding=1)

    def forward(self, stage_outputs):
        if len(stage_outputs) < 3:
            raise ConfigError(f"task query fuse needs >= 3 stage outputs, "
                              f"got {len(stage_outputs)}")
        t1, t2, t3 = stage_outputs[:3]
        size = t3.shape[-2:]
        acc = self.conv3(t3)
        acc = acc + _resize(self.conv7(t1), size)
        acc = acc + _resize(self.conv5(t2), size)
        return self.out(acc)


def _resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def _window_size(n: int, limit: int) -> int:
    for s in range(min(limit, n), 0, -1):
        if n % s == 0:
            return s
    return 1


def _to_windows(x: torch.Tensor, wh: int, ww: int) -> torch.Tensor:
    n, c, h, w = x.shape
    x = x.reshape(n, c, h // wh, wh, w // ww, ww).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(-1, wh * ww, c)


def _from_windows(t: torch.Tensor, shape, wh: int, ww: int) -> torch.Tensor:
    n, c, h, w = shape
    t = t.reshape(n, h // wh, w // ww, wh, ww, c).permute(0, 5, 1, 3, 2, 4)
    return t.reshape(n, c, h, w)


class TaskSequenceGenerator(nn.Module):
    """Cross-attention of decoder features against the task query map.

    Q comes from the (resampled) task query map and K, V from the decoder
    features; attention is computed inside non-overlapping windows so the
    cost stays linear in pixels.
    """

    def __init__(self, dim: int, task_channels: int, heads: int, window: int,
                 expansion: int):
        super().__init__()
        self.heads = heads
        self.window = window
        self.task_channels = task_channels
        self.norm_q = nn.LayerNorm(task_channels)
        self.to_q = nn.Linear(task_channels, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, expansion)

    def forward(self, x, q_task):
        if q_task.shape[1] != self.task_channels:
            raise ShapeError(f"q_task has {q_task.shape[1]} channels, expected "
                             f"{self.task_channels}")
        n, c, h, w = x.shape
        q_task = _resize(q_task, (h, w))
        wh, ww = _window_size(h, self.window), _window_size(w, self.window)
        tokens = _to_windows(x, wh, ww)
        qt = _to_windows(q_task, wh, ww)

        y = self.norm1(tokens)
        q = _split_heads(self.to_q(self.norm_q(qt)), self.heads)
        k = _split_heads(self.to_k(y), self.heads)
        v = _split_heads(self.to_v(y), self.heads)
        tokens = tokens + self.proj(_merge_heads(scaled_dot_attention(q, k, v)))
        tokens = tokens + self.ffn(self.norm2(tokens))
        return _from_windows(tokens, x.shape, wh, ww)


class SpectralTransform(nn.Module):
    """rfft2 -> [real, imag] -> 1x1 conv -> BN -> ReLU -> complex -> irfft2."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels * 2, channels * 2, 1)
        self.bn = nn.BatchNorm2d(channels * 2, momentum=0.1)
        # test hook: identity activation and frozen running stats
        self.identity_hook = False

    def forward(self, x):
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values entering spectral transform")
        h, w = x.shape[-2:]
        if h < 2 or w < 2:
            raise ShapeError(f"spectral transform needs H, W >= 2, got {(h, w)}")
        freq = torch.fft.rfft2(x, norm="ortho")
        z = self.conv(torch.cat([freq.real, freq.imag], dim=1))
        if self.identity_hook:
            z = F.batch_norm(z, self.bn.running_mean, self.bn.running_var,
                             self.bn.weight, self.bn.bias, False, 0.0, self.bn.eps)
        else:
            z = F.relu(self.bn(z))
        re, im = z.chunk(2, dim=1)
        return torch.fft.irfft2(torch.complex(re, im), s=(h, w), norm="ortho")

    @torch.no_grad()
    def set_identity(self, scale: float = 1.0) -> None:
        """Configure conv/BN as ``scale`` times identity and enable the hook."""
        c2 = self.conv.in_channels
        self.conv.weight.zero_()
        self.conv.weight[:, :, 0, 0] = torch.eye(c2) * scale
        self.conv.bias.zero_()
        self.bn.reset_running_stats()
        self.bn.weight.fill_(1.0)
        self.bn.bias.zero_()
        self.identity_hook = True


class FFC(nn.Module):
    """Fast Fourier convolution: local 3x3 branch, spectral global branch, 1x1 cross terms."""

    def __init__(self, channels: int, global_ratio: float):
        super().__init__()
        cg = round(channels * global_ratio)
        if 0.0 < global_ratio < 1.0 and (cg == 0 or cg == channels):
            raise ConfigError(f"ffc_global_ratio={global_ratio} leaves an empty branch "
                              f"for {channels} channels")
        cl = channels - cg
        self.local_channels, self.global_channels = cl, cg
        self.l2l = nn.Conv2d(cl, cl, 3, padding=1) if cl else None
        self.g2g = SpectralTransform(cg) if cg else None
        self.l2g = nn.Conv2d(cl, cg, 1, bias=False) if cl and cg else None
        self.g2l = nn.Conv2d(cg, cl, 1, bias=False) if cl and cg else None

    def forward(self, x):
        if self.g2g is None:
            return self.l2l(x)
        if self.l2l is None:
            return self.g2g(x)
        xl, xg = x.split([self.local_channels, self.global_channels], dim=1)
        out_l = self.l2l(xl) + self.g2l(xg)
        out_g = self.g2g(xg) + self.l2g(xl)
        return torch.cat([out_l, out_g], dim=1)


class FFCSkip(nn.Module):
    def __init__(self, channels: int, global_ratio: float):
        super().__init__()
        self.ffc = FFC(channels, global_ratio)

    def forward(self, x):
        return x + self.ffc(x)


class AdaptiveMixup(nn.Module):
    def __init__(self):
        super().__init__()
        self.theta = nn.Parameter(torch.zeros(()))

    def forward(self, f_down, f_up):
        return adaptive_mixup(f_down, f_up, self.theta)


class Upsample(nn.Module):
    """Bilinear 2x then 3x3 conv halving the channels."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels // 2, 3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x)


# ---------------------------------------------------------------- network


class RestorationNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        c0, heads, ex = config.base_channels, config.head_count, config.ffn_expansion
        widths = [config.stage_channels(i) for i in range(config.stages)]

        self.stem = nn.Conv2d(config.input_channels, c0, 3, padding=1)
        self.encoders = nn.ModuleList(
            EncoderStage(c // 2, heads, ex) for c in widths)
        self.tipbs = nn.ModuleList(
            TaskIntraPatchBlock(c, heads, config.query_len, ex) for c in widths)
        self.merges = nn.ModuleList(nn.Conv2d(2 * c, c, 1) for c in widths)
        self.task_fuse = TaskQueryFuse(tuple(widths[:3]), config.task_channels)

        skip_widths = [c0] + widths[:-1]
        if config.ffc_bottleneck_only:
            self.ffcs = nn.ModuleList([FFCSkip(widths[-1], config.ffc_global_ratio)])
        else:
            self.ffcs = nn.ModuleList(FFCSkip(c, config.ffc_global_ratio)
                                      for c in skip_widths)

        dec_widths = skip_widths[::-1]
        self.ups = nn.ModuleList(Upsample(2 * c) for c in dec_widths)
        self.tsgs = nn.ModuleList(
            TaskSequenceGenerator(c, config.task_channels, heads, config.tsg_window, ex)
            for c in dec_widths)
        self.mixups = nn.ModuleList(AdaptiveMixup() for _ in dec_widths)
        self.head = nn.Conv2d(c0, config.input_channels, 3, padding=1)

    def check_input(self, image: torch.Tensor) -> None:
        if image.dim() != 4 or image.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected (N, {self.config.input_channels}, H, W) image, "
                             f"got {tuple(image.shape)}")
        m = self.size_multiple
        h, w = image.shape[-2:]
        if h % m or w % m:
            raise ShapeError(f"H, W must be multiples of {m}, got {(h, w)}; "
                             f"pad with reflect_pad_to_multiple first")

    @property
    def size_multiple(self) -> int:
        # the deepest TIPB splits a 2^-stages map into 2x2 patches
        return 2 ** (self.config.stages + 1)

    def encoder_stage(self, x: torch.Tensor, stage_index: int) -> torch.Tensor:
        if not 0 <= stage_index < len(self.encoders):
            raise ConfigError(f"stage_index {stage_index} out of range "
                              f"[0, {len(self.encoders)})")
        return self.encoders[stage_index](x)

    def encode(self, image):
        """Return (bottleneck, skips, T_list)."""
        x = self.stem(image)
        skips, t_list = [x], []
        for enc, tipb, merge in zip(self.encoders, self.tipbs, self.merges):
            x = enc(x)
            t = tipb(x)
            x = x + merge(torch.cat([x, t], dim=1))
            t_list.append(t)
            skips.append(x)
        return skips.pop(), skips, t_list

    def forward(self, image):
        self.check_input(image)
        x, skips, t_list = self.encode(image)
        q_task = self.task_fuse(t_list)
        if self.config.ffc_bottleneck_only:
            x = self.ffcs[0](x)
        else:
            skips = [ffc(s) for ffc, s in zip(self.ffcs, skips)]
        for up, tsg, mix, skip in zip(self.ups, self.tsgs, self.mixups, reversed(skips)):
            x = tsg(up(x), q_task)
            x = mix(skip, x)
        out = image + self.head(x)
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out

    def gate_values(self) -> torch.Tensor:
        return torch.sigmoid(torch.stack([m.theta.detach() for m in self.mixups]))


# ---------------------------------------------------------------- parameters


@dataclass
class ParameterStore:
    """Named tensors of a network (parameters and BN buffers) plus trainable flags."""

    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    trainable: frozenset = frozenset()

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        tensors = OrderedDict((k, v.detach().clone()) for k, v in module.state_dict().items())
        trainable = frozenset(name for name, _ in module.named_parameters())
        return cls(tensors, trainable)

    def load_into(self, module: nn.Module) -> nn.Module:
        own = module.state_dict()
        missing = set(own) - set(self.tensors)
        extra = set(self.tensors) - set(own)
        if missing or extra:
            raise ShapeError(f"parameter store mismatch: missing={sorted(missing)[:5]} "
                             f"unexpected={sorted(extra)[:5]}")
        for name, t in self.tensors.items():
            if tuple(t.shape) != tuple(own[name].shape):
                raise ShapeError(f"{name}: stored shape {tuple(t.shape)} != "
                                 f"{tuple(own[name].shape)}")
        module.load_state_dict(
            {k: v.to(own[k].dtype) for k, v in self.tensors.items()})
        return module

    def __len__(self):
        return len(self.tensors)

    def equal(self, other: "ParameterStore") -> bool:
        return (list(self.tensors) == list(other.tensors)
                and self.trainable == other.trainable
                and all(torch.equal(a, other.tensors[k]) for k, a in self.tensors.items()))


def _init_module_weights(net: nn.Module) -> None:
    for name, module in net.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, (nn.LayerNorm, nn.BatchNorm2d)):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
        if isinstance(module, TaskIntraPatchBlock):
            nn.init.normal_(module.query, std=0.02)
        elif isinstance(module, AdaptiveMixup):
            nn.init.zeros_(module.theta)


def build_network(config: NetworkConfig, seed: int = 0) -> RestorationNet:
    """Construct a network with deterministic seeded initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = RestorationNet(config)
        _init_module_weights(net)
    return net


def init_parameters(config: NetworkConfig, seed: int) -> ParameterStore:
    return ParameterStore.from_module(build_network(config, seed))


def network_forward(image: torch.Tensor, params: ParameterStore,
                    config: NetworkConfig) -> torch.Tensor:
    """Inference-mode forward pass from a parameter store."""
    net = params.load_into(RestorationNet(config)).eval()
    with torch.no_grad():
        return net(image)


def restore(net: RestorationNet, image: torch.Tensor) -> torch.Tensor:
    """Pad to a valid size, run ``net`` in eval mode, crop back."""
    padded, record = reflect_pad_to_multiple(image, net.size_multiple)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out = net(padded)
    finally:
        net.train(was_training)
    return crop_to_record(out, record)
