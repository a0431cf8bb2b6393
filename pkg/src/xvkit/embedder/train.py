"""Training loop, semi-orthogonal constraint, gradient checking, model persistence."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..archive import load_tensors, save_tensors
from ..errors import ConfigError, DataError, NumericalError
from ..netspec import NetSpec, parse_netspec, scale_width
from .losses import LossConfig, multitask_loss
from .layers import record_relu_signs
from .model import EmbedderNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.97  # geometric, applied every `decay_every` steps
    decay_every: int = 20
    steps: int = 300
    batch_size: int = 32
    chunk_frames: int = 200
    semiorth_every: int = 4
    heldout_size: int = 32
    grad_clip: float = 5.0


@dataclass
class Utterance:
    feats: np.ndarray  # (T, D)
    speaker: int
    frame_labels: np.ndarray | None = None
    utt_id: str = ""


@dataclass
class TrainResult:
    model: EmbedderNet
    losses: list[float] = field(default_factory=list)
    heldout_before: float = float("nan")
    heldout_after: float = float("nan")


# -- semi-orthogonal constraint ---------------------------------------------------


def semiorth_deviation(m: np.ndarray) -> float:
    """||M M^T / beta - I||_F with beta = tr(P P) / tr(P)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[0] > m.shape[1]:
        m = m.T
    p = m @ m.T
    beta = np.trace(p @ p) / np.trace(p)
    return float(np.linalg.norm(p / beta - np.eye(len(p))))


def semiorth_update(m: torch.Tensor, alpha: float = 0.125) -> torch.Tensor:
    """One step M <- M - (4 alpha / beta)(M M^T - beta I) M toward a scaled semi-orthogonal matrix.

    beta = tr(P P)/tr(P) tracks the current scale. The step size is halved
    twice when M is far from semi-orthogonal to stay in the convergent range.
    """
    transpose = m.shape[0] > m.shape[1]
    w = m.T if transpose else m
    p = w @ w.T
    tr_p = torch.trace(p)
    if tr_p <= 0 or alpha == 0:
        return m.clone()
    tr_pp = torch.trace(p @ p)
    beta = tr_pp / tr_p
    ratio = tr_pp * p.shape[0] / tr_p**2
    step = alpha
    if ratio > 1.02:
        step *= 0.5
    if ratio > 1.1:
        step *= 0.5
    eye = torch.eye(p.shape[0], dtype=m.dtype)
    new = w - (4 * step / beta) * (p - beta * eye) @ w
    return new.T if transpose else new


def semiorth_step(model: EmbedderNet, alpha: float = 0.125) -> EmbedderNet:
    """Apply one constraint step to every factorized layer's first factor, in place."""
    with torch.no_grad():
        for lin in model.ftdnn_factors():
            lin.weight.copy_(semiorth_update(lin.weight, alpha))
    return model


# -- batching ------------------------------------------------------------------------


def _chunk_batch(data: Sequence[Utterance], rng: np.random.Generator, batch_size: int, chunk: int, dtype):
    pick = rng.integers(len(data), size=batch_size)
    feats, spk, labels = [], [], []
    for i in pick:
        u = data[i]
        start = int(rng.integers(len(u.feats) - chunk + 1))
        feats.append(u.feats[start : start + chunk])
        spk.append(u.speaker)
        if u.frame_labels is not None:
            labels.append(u.frame_labels[start : start + chunk])
    x = torch.as_tensor(np.stack(feats), dtype=dtype)
    y = torch.as_tensor(np.asarray(spk), dtype=torch.long)
    fl = torch.as_tensor(np.stack(labels), dtype=torch.long) if labels else None
    return x, y, fl


def _batch_loss(model, batch, cfg: LossConfig, step: int):
    x, y, fl = batch
    out = model(x)
    total, _ = multitask_loss(out, model, y, fl, cfg, step)
    return total


def build_model(spec: NetSpec, feat_dim: int, num_speakers: int, width: float = 1.0,
                num_senones: int | None = None, dtype=torch.float32, seed: int = 0) -> EmbedderNet:
    if width != 1.0:
        spec = scale_width(spec, width)
    spec = spec.with_classes(spec.tap[0], num_speakers)
    if num_senones is not None:
        for b in spec.branch_names:
            if b != spec.tap[0] and spec.num_classes(b) is not None:
                spec = spec.with_classes(b, num_senones)
    return EmbedderNet(spec, feat_dim, dtype=dtype, seed=seed)


def train(model: EmbedderNet, data: Sequence[Utterance], loss_cfg: LossConfig = LossConfig(),
          cfg: TrainConfig = TrainConfig(), seed: int = 0) -> TrainResult:
    """SGD with momentum on random fixed-length chunks. Deterministic given `seed`."""
    speakers = {u.speaker for u in data}
    if len(speakers) < 2:
        raise DataError("training needs at least two speakers")
    n_cls = model.spec.num_classes(model.spec.tap[0])
    if max(speakers) >= n_cls or min(speakers) < 0:
        raise DataError(f"speaker labels must lie in [0, {n_cls})")
    needs_frames = any(b in model.out_weight for b in model.spec.branch_names if b != model.spec.tap[0])
    if needs_frames and any(u.frame_labels is None or len(u.frame_labels) != len(u.feats) for u in data):
        raise DataError("multitask training needs one frame label per frame")
    chunk = min(cfg.chunk_frames, min(len(u.feats) for u in data))
    if chunk < 1:
        raise DataError("empty utterance in training data")

    rng = np.random.default_rng(seed)
    heldout = _chunk_batch(data, np.random.default_rng(seed + 7919), cfg.heldout_size, chunk, model.dtype)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.decay_every, gamma=cfg.lr_decay)
    result = TrainResult(model)
    with torch.no_grad():
        result.heldout_before = float(_batch_loss(model, heldout, loss_cfg, 0))
    if cfg.learning_rate == 0:
        result.heldout_after = result.heldout_before
        return result
    model.train()
    for step in range(cfg.steps):
        batch = _chunk_batch(data, rng, cfg.batch_size, chunk, model.dtype)
        loss = _batch_loss(model, batch, loss_cfg, step)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step} (last finite losses: {result.losses[-5:]})")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        if cfg.semiorth_every and (step + 1) % cfg.semiorth_every == 0:
            semiorth_step(model)
        result.losses.append(float(loss.detach()))
        if step % 50 == 0:
            log.debug("step %d loss %.4f", step, result.losses[-1])
    model.eval()
    with torch.no_grad():
        result.heldout_after = float(_batch_loss(model, heldout, loss_cfg, cfg.steps))
    return result


# -- gradient check ---------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst: str
    skipped: int = 0
    bottleneck_grad_norm: float | None = None

    def __str__(self):
        s = (f"checked {self.checked} parameters ({self.skipped} kink-crossing samples redrawn), "
             f"max relative error {self.max_rel_error:.3e} ({self.worst})")
        if self.bottleneck_grad_norm is not None:
            s += f", bottleneck grad norm {self.bottleneck_grad_norm:.3e}"
        return s


def grad_check(spec: NetSpec, loss_cfg: LossConfig, seed: int = 0, width: float = 1 / 64,
               feat_dim: int = 6, frames: int = 10, batch: int = 2, num_speakers: int = 3,
               num_senones: int = 4, samples_per_tensor: int = 2, h: float = 1e-4,
               floor: float = 1e-5, max_attempts: int = 10) -> GradCheckReport:
    """Compare autograd gradients with finite differences on a reduced-width float64 network.

    Uses the fourth-order central stencil. A sample whose stencil moves any
    ReLU input across zero is discarded and another entry of the same tensor
    is drawn. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    model = build_model(spec, feat_dim, num_speakers, width=width, num_senones=num_senones,
                        dtype=torch.float64, seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        # zero biases put dead units exactly on the ReLU kink
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    x = torch.randn(batch, frames, feat_dim, generator=gen, dtype=torch.float64)
    y = torch.arange(batch) % num_speakers
    fl = torch.randint(num_senones, (batch, frames), generator=gen)
    lam = loss_cfg.lambda_min

    def loss_fn():
        out = model(x)
        total, _ = multitask_loss(out, model, y, fl, loss_cfg, lam=lam)
        return total

    def signed_loss():
        with record_relu_signs() as signs:
            value = float(loss_fn())
        return value, signs

    model.zero_grad()
    loss_fn().backward()
    with torch.no_grad():
        _, base_signs = signed_loss()
    rng = np.random.default_rng(seed)
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    bottleneck = None
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        if name.startswith("layers.bottleneck"):
            bottleneck = (bottleneck or 0.0) + float(p.grad.norm()) ** 2
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        wanted = min(samples_per_tensor, flat.numel())
        order = rng.permutation(flat.numel())[: wanted * max_attempts]
        done = 0
        for idx in order:
            if done == wanted:
                break
            orig = float(flat[idx])
            values, kink = [], False
            with torch.no_grad():
                for step in (2 * h, h, -h, -2 * h):
                    flat[idx] = orig + step
                    value, signs = signed_loss()
                    kink = kink or any(not torch.equal(a, b) for a, b in zip(signs, base_signs))
                    values.append(value)
                flat[idx] = orig
            if kink:
                skipped += 1
                continue
            f2, f1, m1, m2 = values
            num = (-f2 + 8 * f1 - 8 * m1 + m2) / (12 * h)
            ana = float(grad[idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            done += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}[{idx}]"
    return GradCheckReport(worst, checked, worst_name, skipped,
                           None if bottleneck is None else bottleneck**0.5)


# -- persistence -----------------------------------------------------------------------


def save_model(path, model: EmbedderNet, loss_cfg: LossConfig | None = None) -> None:
    header = model.header()
    header["loss"] = asdict(loss_cfg) if loss_cfg else None
    tensors = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    save_tensors(path, tensors, header)


def load_model(path, dtype=torch.float32) -> tuple[EmbedderNet, LossConfig | None]:
    header, tensors = load_tensors(path)
    if "netspec" not in header:
        raise ConfigError(f"{path}: not an embedder model file")
    spec = parse_netspec(header["netspec"])
    model = EmbedderNet(spec, header["feat_dim"], dtype=dtype)
    state = {k: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items()}
    model.load_state_dict(state)
    model.eval()
    loss = LossConfig(**header["loss"]) if header.get("loss") else None
    return model, loss
