"""Training objectives for the universal and auxiliary networks.

All losses take foreground probabilities (not logits) of shape (H, W) or
(B, ..., H, W) and are differentiable with respect to them. Batched inputs are
scored per sample and averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch

EPS = 1e-7
DICE_SMOOTH = 1.0
DOMAINS = ("source", "target")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    lam: float = 0.9

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam"):
            v = getattr(self, name)
            if not (v >= 0 and v == v and v != float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.lam >= 1:
            raise ValueError(f"lam must lie in [0, 1), got {self.lam}")


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    # 2D fields are a single sample; otherwise the leading axis is the batch.
    return x.reshape(1, -1) if x.dim() == 2 else x.reshape(x.shape[0], -1)


def clamp_probs(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def soft_dice(a: torch.Tensor, b: torch.Tensor, smooth: float = DICE_SMOOTH,
              squared: bool = False) -> torch.Tensor:
    """``1 - (2 sum(ab) + s) / (sum(a) + sum(b) + s)``, averaged over samples.

    ``squared`` uses ``sum(a^2) + sum(b^2)`` in the denominator, which makes the
    loss exactly ``0`` at ``a == b`` for soft maps too.
    """
    _check_shapes(a, b)
    a, b = _per_sample(a), _per_sample(b)
    inter = (a * b).sum(dim=1)
    if squared:
        denom = (a * a).sum(dim=1) + (b * b).sum(dim=1)
    else:
        denom = a.sum(dim=1) + b.sum(dim=1)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def dice_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return soft_dice(pred, gt.to(pred.dtype))


def _bce_map(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_shapes(pred, gt)
    p = clamp_probs(pred)
    y = gt.to(pred.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))


def bce_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return _bce_map(pred, gt).mean()


def seg_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return dice_loss(pred, gt) + bce_loss(pred, gt)


def weighted_bce(pred, gt, bmap, gamma: float, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy with per-pixel weight ``1 + gamma * bmap``."""
    bmap = torch.as_tensor(bmap, dtype=pred.dtype, device=pred.device)
    _check_shapes(pred, bmap)
    weighted = (1.0 + gamma * bmap) * _bce_map(pred, gt)
    if reduction == "mean":
        return weighted.mean()
    if reduction == "sum":
        return weighted.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def boundary_loss(pred_s, gt_s, map_s, pred_t, gt_t, map_t, gamma: float = 1.0,
                  reduction: str = "mean") -> torch.Tensor:
    return (weighted_bce(pred_s, gt_s, map_s, gamma, reduction)
            + weighted_bce(pred_t, gt_t, map_t, gamma, reduction))


@dataclass
class EmaState:
    """Per-domain running means of universal-network predictions."""

    lam: float = 0.9
    m_source: torch.Tensor | None = None
    m_target: torch.Tensor | None = None
    initialized: dict = field(default_factory=lambda: {"source": False, "target": False})

    def shadow(self, domain: str) -> torch.Tensor | None:
        return self.m_source if domain == "source" else self.m_target

    @property
    def ready(self) -> bool:
        return all(self.initialized.values())

    def state_dict(self) -> dict:
        return {"lam": self.lam, "m_source": self.m_source, "m_target": self.m_target,
                "initialized": dict(self.initialized)}

    @classmethod
    def from_state_dict(cls, d: dict) -> "EmaState":
        return cls(lam=d["lam"], m_source=d["m_source"], m_target=d["m_target"],
                   initialized=dict(d["initialized"]))


def _check_domain(domain: str):
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")


def ema_blend(state: EmaState, batch_mean: torch.Tensor, domain: str) -> torch.Tensor:
    """Shadow value after absorbing ``batch_mean``, keeping its gradient.

    The previous shadow is detached, so backprop reaches only the current batch.
    """
    _check_domain(domain)
    prev = state.shadow(domain)
    if not state.initialized[domain] or prev is None:
        return batch_mean
    _check_shapes(prev, batch_mean)
    return state.lam * prev.detach() + (1.0 - state.lam) * batch_mean


def ema_update(state: EmaState, batch_mean: torch.Tensor, domain: str) -> EmaState:
    """Return a new state with ``domain``'s shadow updated; inputs are not mutated.

    The first update for a domain copies the batch mean instead of blending.
    """
    new = ema_blend(state, batch_mean, domain).detach().clone()
    flags = dict(state.initialized, **{domain: True})
    key = "m_source" if domain == "source" else "m_target"
    return replace(state, initialized=flags, **{key: new})


def consistency_loss(state_or_ms, m_t: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared difference between source and target shadows.

    Accepts either an :class:`EmaState` (0 until both shadows exist) or the two
    maps directly, which is how the trainer feeds the differentiable blends.
    """
    if isinstance(state_or_ms, EmaState):
        if not state_or_ms.ready:
            return torch.zeros(())
        m_s, m_t = state_or_ms.m_source, state_or_ms.m_target
    else:
        m_s = state_or_ms
    _check_shapes(m_s, m_t)
    return ((m_s - m_t) ** 2).mean()


def distill_loss(aux_pred: torch.Tensor, uni_pred: torch.Tensor) -> torch.Tensor:
    """Symmetric soft Dice between auxiliary and universal maps.

    Squared denominators so that identical soft maps score exactly zero. The
    auxiliary map is detached: this term only trains the universal network.
    """
    return soft_dice(aux_pred.detach(), uni_pred, squared=True)


def universal_objective(seg, distill, boundary, consistency, weights: LossWeights) -> torch.Tensor:
    """Weighted total for the universal network.

    ``seg`` and ``distill`` are already summed over both domains.
    """
    return weights.alpha * seg + weights.beta * distill + boundary + consistency


def auxiliary_objective(aux_pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return seg_loss(aux_pred, gt)
