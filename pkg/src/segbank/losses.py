"""The four training loss terms and their building blocks.

All functions are pure over their tensor inputs. Predictions enter as
per-pixel class distributions (post-softmax); logs and norms are guarded at
EPS. The contrastive loss is decomposed so that attention scoring, weight
normalization and the pairwise distance term are independently testable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .data import DEFAULT_IGNORE_INDEX

EPS = 1e-8


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN/inf; carries the term name and iteration."""

    def __init__(self, term: str, value: float, iteration: Optional[int] = None):
        self.term, self.value, self.iteration = term, value, iteration
        at = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite loss term {term}={value!r}{at}")


@dataclass
class LossWeights:
    lam_sup: float = 1.0
    lam_pseudo: float = 1.0
    lam_ent: float = 0.01
    lam_contr: float = 0.1

    def __post_init__(self):
        for name in ("lam_sup", "lam_pseudo", "lam_ent", "lam_contr"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _flatten_pred(pred: torch.Tensor):
    # (B, C, *spatial) -> (M, C); (N, C) passes through
    if pred.dim() == 2:
        return pred
    if pred.dim() >= 3:
        c = pred.shape[1]
        return pred.movedim(1, -1).reshape(-1, c)
    raise ValueError(f"prediction must be (N, C) or (B, C, ...), got {tuple(pred.shape)}")


def weighted_cross_entropy(pred: torch.Tensor, target: torch.Tensor,
                           alpha: Optional[torch.Tensor] = None,
                           beta: Optional[torch.Tensor] = None,
                           ignore_index: int = DEFAULT_IGNORE_INDEX,
                           flags: Optional[dict] = None) -> torch.Tensor:
    """-(1/N) sum_n sum_c t log(p) * alpha_c * beta_n over non-ignored pixels.

    Args:
        pred: class distributions, (B, C, *spatial) or (N, C)
        target: index map (matching spatial shape) or one-hot (same shape as
            pred); one-hot rows summing to 0 count as ignored
        alpha: per-class weights (C,), default all ones
        beta: per-pixel weights broadcastable to the target's pixel shape
        flags: optional dict; receives {'no_valid_pixels': bool}

    Returns 0 when every pixel is ignored.
    """
    p = _flatten_pred(pred)
    n_total, c = p.shape
    one_hot = target.shape == pred.shape and target.dtype.is_floating_point
    if one_hot:
        t = _flatten_pred(target)
        valid = t.sum(dim=1) > 0
    else:
        t = target.reshape(-1)
        if t.shape[0] != n_total:
            raise ValueError(f"target has {t.shape[0]} pixels, prediction {n_total}")
        valid = t != ignore_index
    if flags is not None:
        flags["no_valid_pixels"] = not bool(valid.any())
    if not valid.any():
        return p.sum() * 0.0
    if alpha is None:
        alpha = torch.ones(c, dtype=p.dtype, device=p.device)
    else:
        alpha = torch.as_tensor(alpha, dtype=p.dtype, device=p.device)
    if beta is None:
        b = torch.ones(int(valid.sum()), dtype=p.dtype, device=p.device)
    else:
        b = torch.as_tensor(beta, dtype=p.dtype, device=p.device)
        b = b.expand(target.shape if not one_hot else valid.shape).reshape(-1)[valid]
    logp = torch.log(p.clamp_min(EPS))
    if one_hot:
        per_pixel = -(t[valid] * logp[valid] * alpha[None, :]).sum(dim=1)
    else:
        idx = t[valid].long()
        per_pixel = -logp[valid].gather(1, idx[:, None]).squeeze(1) * alpha[idx]
    return (per_pixel * b).sum() / valid.sum()


def supervised_loss(pred, target, alpha=None,
                    ignore_index: int = DEFAULT_IGNORE_INDEX) -> torch.Tensor:
    """Weighted cross-entropy with unit per-pixel weights (beta = 1)."""
    return weighted_cross_entropy(pred, target, alpha=alpha, beta=None,
                                  ignore_index=ignore_index)


def pseudo_loss(preds, pseudo_labels, confidences, alpha=None, s: float = 6.0,
                ignore_index: int = DEFAULT_IGNORE_INDEX) -> torch.Tensor:
    """Mean over A augmented views of confidence-sharpened cross-entropy.

    Args:
        preds: list of A student distributions, each (B, C, h, w)
        pseudo_labels: list of A replayed teacher argmax maps, (B, h, w)
        confidences: list of A replayed teacher max-probability maps
        s: sharpening exponent; per-pixel weight beta = confidence**s
    """
    if not len(preds) == len(pseudo_labels) == len(confidences):
        raise ValueError("preds, pseudo_labels and confidences must align")
    terms = []
    for p, y, conf in zip(preds, pseudo_labels, confidences):
        beta = torch.as_tensor(conf, dtype=p.dtype, device=p.device) ** s
        terms.append(weighted_cross_entropy(p, y, alpha=alpha, beta=beta,
                                            ignore_index=ignore_index))
    return sum(terms) / len(terms)


def entropy_loss(preds) -> torch.Tensor:
    """-(1/A)(1/N) sum over views, pixels and classes of p log p.

    No ignore masking: entropy is defined on the prediction alone.
    """
    terms = []
    for pred in preds:
        p = _flatten_pred(pred)
        terms.append(-(p * torch.log(p.clamp_min(EPS))).sum(dim=1).mean())
    return sum(terms) / len(terms)


def normalize_weights(scores: torch.Tensor) -> torch.Tensor:
    """w_i = n * s_i / sum_j s_j, so the weights always average to 1."""
    if scores.dim() != 1 or scores.numel() == 0:
        raise ValueError("scores must be a non-empty 1-D tensor")
    return scores * scores.numel() / scores.sum().clamp_min(EPS)


def cosine_similarity(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """<p, z> / (|p| |z|), norms clamped at EPS (zero vectors score 0)."""
    p_n = p / p.norm(dim=-1, keepdim=True).clamp_min(EPS)
    z_n = z / z.norm(dim=-1, keepdim=True).clamp_min(EPS)
    return (p_n * z_n).sum(dim=-1)


def weighted_distance(p, z, w_p, w_z) -> torch.Tensor:
    return w_p * w_z * (1.0 - cosine_similarity(p, z))


def contrastive_pair_terms(preds: torch.Tensor, targets: torch.Tensor,
                           w_p: torch.Tensor, w_z: torch.Tensor) -> torch.Tensor:
    """All-pairs weighted distances, shape (n_preds, n_targets).

    Exposed separately so weights can be held fixed while vectors are
    rescaled (cosine scale-invariance) and so oracles can enumerate pairs.
    """
    p_n = preds / preds.norm(dim=1, keepdim=True).clamp_min(EPS)
    z_n = targets / targets.norm(dim=1, keepdim=True).clamp_min(EPS)
    cos = p_n @ z_n.t()
    return w_p[:, None] * w_z[None, :] * (1.0 - cos)


def contrastive_loss(preds_by_class: dict, targets_by_class: dict,
                     attention, flags: Optional[dict] = None) -> torch.Tensor:
    """Positive-only contrastive loss over class-matched pred/target pairs.

    For each class with predictions and a non-empty bank snapshot, prediction
    vectors are weighted by the prediction-role attention module and target
    vectors by the projection-role module (both student-side, normalized to
    mean 1); the class term is the mean weighted cosine distance over all
    pairs. The loss is the mean over contributing classes; classes missing
    either side are skipped rather than counted as zero.

    Args:
        preds_by_class: class id -> (n_c, D) student prediction-head outputs
        targets_by_class: class id -> (m_c, D) bank vectors (constants)
        attention: AttentionModuleSet scoring both roles, or None for unit
            weights (attention ablation)
        flags: optional dict; receives {'no_contributing_class': bool}
    """
    terms = []
    device = None
    for c, preds in sorted(preds_by_class.items()):
        if preds is None or len(preds) == 0:
            continue
        device = preds.device
        targets = targets_by_class.get(c)
        if targets is None or len(targets) == 0:
            continue
        z = torch.as_tensor(np.asarray(targets), dtype=preds.dtype,
                            device=preds.device)
        if attention is None:
            w_p = torch.ones(len(preds), dtype=preds.dtype, device=preds.device)
            w_z = torch.ones(len(z), dtype=preds.dtype, device=preds.device)
        else:
            w_p = normalize_weights(attention.score(c, "prediction", preds))
            w_z = normalize_weights(attention.score(c, "projection", z))
        terms.append(contrastive_pair_terms(preds, z, w_p, w_z).mean())
    if flags is not None:
        flags["no_contributing_class"] = not terms
    if not terms:
        return torch.zeros((), device=device)
    return sum(terms) / len(terms)


def total_loss(l_sup, l_pseudo, l_ent, l_contr, weights: LossWeights,
               iteration: Optional[int] = None) -> torch.Tensor:
    """Weighted sum of the four terms; aborts on any non-finite part."""
    parts = {"l_sup": l_sup, "l_pseudo": l_pseudo, "l_ent": l_ent,
             "l_contr": l_contr}
    for name, value in parts.items():
        v = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v, iteration)
    return (weights.lam_sup * l_sup + weights.lam_pseudo * l_pseudo
            + weights.lam_ent * l_ent + weights.lam_contr * l_contr)
