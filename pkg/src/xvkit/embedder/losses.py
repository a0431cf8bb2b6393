"""Speaker classification losses: softmax, additive-margin softmax, angular softmax, multitask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, NumericalError, ShapeError

LOSS_KINDS = ("softmax", "am_softmax", "a_softmax")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "am_softmax"
    margin: float = 0.15  # am_softmax additive margin; a_softmax uses angular_margin
    scale: float = 30.0
    angular_margin: int = 4
    multitask_weight: float = 1.0
    lambda_base: float = 1000.0
    lambda_gamma: float = 1e-4
    lambda_power: float = 1.0
    lambda_min: float = 5.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.scale <= 0:
            raise ConfigError("scale must be > 0")
        if self.multitask_weight < 0:
            raise ConfigError("multitask weight must be >= 0")
        if self.angular_margin not in (1, 2, 3, 4):
            raise ConfigError("angular margin must be in {1, 2, 3, 4}")

    def annealing_lambda(self, step: int) -> float:
        return max(self.lambda_min, self.lambda_base * (1.0 + self.lambda_gamma * step) ** (-self.lambda_power))


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericalError("non-finite input to loss")


def cosines(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1) @ F.normalize(weight, dim=-1).T


def softmax_loss(x, labels, weight, bias=None):
    _check_finite(x, weight)
    logits = x @ weight.T
    if bias is not None:
        logits = logits + bias
    return F.cross_entropy(logits, labels)


def am_softmax_loss(x, labels, weight, m: float = 0.15, s: float = 30.0):
    """-log(e^{s(cos_y - m)} / (e^{s(cos_y - m)} + sum_{j!=y} e^{s cos_j})), averaged."""
    _check_finite(x, weight)
    if m < 0 or s <= 0:
        raise ConfigError("need m >= 0 and s > 0")
    cos = cosines(x, weight)
    onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
    return F.cross_entropy(s * (cos - m * onehot), labels)


def chebyshev_cos(cos: torch.Tensor, m: int) -> torch.Tensor:
    """cos(m*theta) written as a polynomial in cos(theta)."""
    if m == 1:
        return cos
    if m == 2:
        return 2 * cos**2 - 1
    if m == 3:
        return 4 * cos**3 - 3 * cos
    if m == 4:
        return 8 * cos**4 - 8 * cos**2 + 1
    raise ConfigError(f"angular margin m must be in 1..4, got {m}")


def psi(theta, m: int):
    """Monotone angular-margin target function (-1)^k cos(m*theta) - 2k, k = floor(m*theta/pi)."""
    theta = np.asarray(theta, dtype=np.float64)
    k = np.floor(m * theta / math.pi)
    k = np.minimum(k, m - 1)
    return (-1.0) ** k * np.cos(m * theta) - 2 * k


def a_softmax_loss(x, labels, weight, m: int = 4, lam: float = 0.0):
    """Angular softmax with annealing: target logit = |x| (lam*cos + psi) / (1 + lam).

    ``lam = inf`` is plain softmax on ``|x| cos`` (normalized class weights, no bias).
    """
    _check_finite(x, weight)
    if m not in (1, 2, 3, 4):
        raise ConfigError(f"angular margin m must be in 1..4, got {m}")
    xnorm = x.norm(dim=1, keepdim=True)
    cos = cosines(x, weight).clamp(-1.0, 1.0)
    logits = xnorm * cos
    if math.isinf(lam):
        return F.cross_entropy(logits, labels)
    cos_y = cos.gather(1, labels[:, None])
    with torch.no_grad():
        k = torch.floor(m * torch.acos(cos_y) / math.pi).clamp(max=m - 1)
    sign = 1.0 - 2.0 * torch.remainder(k, 2)
    psi_y = sign * chebyshev_cos(cos_y, m) - 2.0 * k
    target = xnorm * (lam * cos_y + psi_y) / (1.0 + lam)
    logits = logits.scatter(1, labels[:, None], target)
    return F.cross_entropy(logits, labels)


def speaker_loss(hidden, labels, weight, bias, cfg: LossConfig, step: int = 0, lam: float | None = None):
    if cfg.kind == "softmax":
        return softmax_loss(hidden, labels, weight, bias)
    if cfg.kind == "am_softmax":
        return am_softmax_loss(hidden, labels, weight, cfg.margin, cfg.scale)
    lam = cfg.annealing_lambda(step) if lam is None else lam
    return a_softmax_loss(hidden, labels, weight, cfg.angular_margin, lam)


def frame_ce(hidden, frame_labels, weight, bias):
    """Mean per-frame cross-entropy. hidden (B, T, D), frame_labels (B, T)."""
    logits = hidden @ weight.T + bias
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), frame_labels.reshape(-1))


def multitask_loss(out, model, spk_labels, frame_labels, cfg: LossConfig, step: int = 0, lam=None):
    """Speaker segment loss + weight * mean per-frame phonetic cross-entropy.

    Returns (total, {"speaker": ..., "phonetic": ...}).
    """
    tb = model.spec.tap[0]
    spk = speaker_loss(out.hidden[tb], spk_labels, model.out_weight[tb], model.out_bias[tb], cfg, step, lam)
    parts = {"speaker": spk}
    total = spk
    for branch in model.spec.branch_names:
        if branch == tb or branch not in model.out_weight:
            continue
        if frame_labels is None:
            raise ShapeError(f"branch {branch!r} needs frame labels")
        hidden = out.hidden[branch]
        if frame_labels.shape != hidden.shape[:2]:
            raise ShapeError(f"frame labels {tuple(frame_labels.shape)} do not match frames {tuple(hidden.shape[:2])}")
        ph = frame_ce(hidden, frame_labels, model.out_weight[branch], model.out_bias[branch])
        parts["phonetic"] = ph
        if cfg.multitask_weight > 0:
            total = total + cfg.multitask_weight * ph
    return total, parts


def loss_and_grads(fn, x, labels, weight, **kwargs):
    """Evaluate a loss on numpy inputs; returns (loss, {"x": dL/dx, "weight": dL/dW})."""
    xt = torch.tensor(np.atleast_2d(x), dtype=torch.float64, requires_grad=True)
    wt = torch.tensor(np.asarray(weight), dtype=torch.float64, requires_grad=True)
    lt = torch.as_tensor(np.atleast_1d(labels), dtype=torch.long)
    loss = fn(xt, lt, wt, **kwargs)
    loss.backward()
    return float(loss.detach()), {"x": xt.grad.numpy().reshape(np.shape(x)), "weight": wt.grad.numpy()}
