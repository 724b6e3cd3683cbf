"""Deterministic, resumable training loop and evaluation."""

from __future__ import annotations

import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from wxrestore import checkpoint as ckpt_io
from wxrestore.config import NetworkConfig, TrainConfig
from wxrestore.degrade import PairedSample
from wxrestore.errors import CheckpointError, NumericError, ShapeError
from wxrestore.metrics import charbonnier_loss, psnr, ssim, ssim_map
from wxrestore.model import ParameterStore, RestorationNet, build_network, restore

log = logging.getLogger(__name__)


def configure_threads() -> None:
    """Honour ``TOOL_THREADS`` (``1`` gives the deterministic single-thread mode)."""
    threads = os.environ.get("TOOL_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class PairedTensors:
    degraded: torch.Tensor  # (N, 3, H, W) float32
    clean: torch.Tensor

    def __post_init__(self):
        if self.degraded.shape != self.clean.shape:
            raise ShapeError(f"degraded {tuple(self.degraded.shape)} vs clean "
                             f"{tuple(self.clean.shape)}")

    def __len__(self):
        return self.degraded.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[PairedSample]) -> "PairedTensors":
        def stack(arrs):
            return torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
        return cls(stack([s.degraded for s in samples]), stack([s.clean for s in samples]))


def as_tensors(dataset) -> PairedTensors:
    if isinstance(dataset, PairedTensors):
        return dataset
    return PairedTensors.from_samples(list(dataset))


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    per_sample: list[tuple[float, float]] = field(default_factory=list)

    def line(self) -> str:
        return f"psnr={self.psnr_db:.4f} ssim={self.ssim:.4f} n={len(self.per_sample)}"


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based ``step``."""
    lo = cfg.lr * cfg.min_lr_ratio
    frac = (step - 1) / max(cfg.steps - 1, 1)
    return lo + (cfg.lr - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))


def batch_for_step(data: PairedTensors, step: int, cfg: TrainConfig):
    """Batch for ``step``; a pure function of ``(cfg.seed, step)``."""
    rng = np.random.default_rng([cfg.seed, step])
    n = len(data)
    if cfg.batch_size <= n:
        idx = rng.permutation(n)[:cfg.batch_size]
    else:
        idx = rng.integers(0, n, cfg.batch_size)
    idx_t = torch.as_tensor(idx)
    x, y = data.degraded[idx_t], data.clean[idx_t]
    if cfg.augment:
        k = int(rng.integers(0, 4))
        flip = bool(rng.integers(0, 2))
        if flip:
            x, y = x.flip(-1), y.flip(-1)
        if k:
            x, y = torch.rot90(x, k, (-2, -1)), torch.rot90(y, k, (-2, -1))
    return x.contiguous(), y.contiguous()


def training_loss(pred, target, cfg: TrainConfig):
    loss = charbonnier_loss(pred, target, cfg.charbonnier_eps)
    if cfg.loss == "charbonnier+ssim":
        loss = loss + cfg.ssim_weight * (1.0 - ssim_map(pred, target).mean())
    return loss


def _optimizer_tensors(net: RestorationNet, opt: torch.optim.Adam):
    out = OrderedDict()
    for name, p in net.named_parameters():
        state = opt.state.get(p)
        if not state:
            continue
        out[f"optim/{name}/step"] = state["step"].reshape(1)
        out[f"optim/{name}/exp_avg"] = state["exp_avg"]
        out[f"optim/{name}/exp_avg_sq"] = state["exp_avg_sq"]
    return out


def _restore_optimizer(net: RestorationNet, opt: torch.optim.Adam, tensors) -> None:
    for name, p in net.named_parameters():
        key = f"optim/{name}/exp_avg"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": tensors[f"optim/{name}/step"].reshape(()).clone(),
            "exp_avg": tensors[key].clone().to(p.dtype),
            "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].clone().to(p.dtype),
        }


def save_training_checkpoint(path, net: RestorationNet, opt, step: int, seed: int) -> None:
    tensors = OrderedDict((f"model/{k}", v) for k, v in net.state_dict().items())
    if opt is not None:
        tensors.update(_optimizer_tensors(net, opt))
    ckpt_io.save(path, tensors, net.config, step, seed)


def load_network(path) -> tuple[RestorationNet, ckpt_io.Checkpoint]:
    ck = ckpt_io.load(path)
    net = RestorationNet(ck.network_config())
    store = ParameterStore(ck.group("model"), frozenset(n for n, _ in net.named_parameters()))
    store.load_into(net)
    return net, ck


def train(model_config: NetworkConfig, train_config: TrainConfig, dataset,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          eval_set=None, log_path: str | Path | None = None,
          stop_after: int | None = None,
          on_step: Callable[[int, float], None] | None = None):
    """Train and return ``(ParameterStore, log_lines)``.

    Log lines look like ``step=<k> loss=<v> [psnr=<p> ssim=<s>]`` and are also
    appended to ``log_path`` when given. ``stop_after`` ends the run early at
    that step (after writing a checkpoint), which is how interrupted runs are
    reproduced in tests.
    """
    model_config.validate()
    train_config.validate()
    data = as_tensors(dataset)
    if len(data) == 0:
        raise ShapeError("dataset is empty")
    eval_data = as_tensors(eval_set) if eval_set is not None else None
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    net = build_network(model_config, train_config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=train_config.lr)
    start = 1
    if resume is not None:
        ck = ckpt_io.load(resume)
        if ck.config_hash != model_config.config_hash():
            raise CheckpointError(f"{resume}: config hash mismatch "
                                  f"({ck.config_hash} != {model_config.config_hash()})")
        ParameterStore(ck.group("model"),
                       frozenset(n for n, _ in net.named_parameters())).load_into(net)
        _restore_optimizer(net, opt, ck.tensors)
        start = ck.step + 1

    lines: list[str] = []
    log_fh = open(log_path, "a") if log_path is not None else None
    last = min(train_config.steps, stop_after) if stop_after else train_config.steps
    try:
        net.train()
        for step in range(start, last + 1):
            for group in opt.param_groups:
                group["lr"] = cosine_lr(step, train_config)
            x, y = batch_for_step(data, step, train_config)
            loss = training_loss(net(x), y, train_config)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if train_config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(net.parameters(), train_config.grad_clip)
            opt.step()

            line = f"step={step} loss={value:.9g}"
            if eval_data is not None and train_config.eval_every and (
                    step % train_config.eval_every == 0 or step == train_config.steps):
                rep = evaluate(net, eval_data)
                line += f" psnr={rep.psnr_db:.4f} ssim={rep.ssim:.4f}"
            lines.append(line)
            if log_fh is not None:
                log_fh.write(line + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(step, value)
            if out_dir is not None and train_config.checkpoint_every and \
                    step % train_config.checkpoint_every == 0:
                save_training_checkpoint(out_dir / f"step_{step:06d}.ckpt", net, opt, step,
                                         train_config.seed)
        if out_dir is not None:
            name = "final.ckpt" if last == train_config.steps else f"step_{last:06d}.ckpt"
            save_training_checkpoint(out_dir / name, net, opt, last, train_config.seed)
    finally:
        if log_fh is not None:
            log_fh.close()
    return ParameterStore.from_module(net), lines


def evaluate(model, dataset, config: NetworkConfig | None = None) -> MetricReport:
    """Restore each degraded image (pad, forward, crop) and score it against the clean one."""
    if isinstance(model, ParameterStore):
        if config is None:
            raise ValueError("config is required when evaluating a ParameterStore")
        model = model.load_into(RestorationNet(config))
    data = as_tensors(dataset)
    per = []
    for i in range(len(data)):
        out = restore(model, data.degraded[i:i + 1])
        clean = data.clean[i:i + 1]
        per.append((psnr(out, clean), ssim(out, clean)))
    if not per:
        return MetricReport(float("nan"), float("nan"), [])
    return MetricReport(float(np.mean([p for p, _ in per])),
                        float(np.mean([s for _, s in per])), per)


def identity_report(dataset) -> MetricReport:
    """Scores of the degraded inputs themselves (the do-nothing baseline)."""
    data = as_tensors(dataset)
    per = [(psnr(data.degraded[i], data.clean[i]),
            ssim(data.degraded[i:i + 1], data.clean[i:i + 1])) for i in range(len(data))]
    return MetricReport(float(np.mean([p for p, _ in per])),
                        float(np.mean([s for _, s in per])), per)
