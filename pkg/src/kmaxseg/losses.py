"""Supervised segmentation losses and the dual contrastive consistency terms.

The consistency side is an InfoNCE over cosine similarities with the positive
kept inside the denominator, so every per-anchor term is >= 0. It is applied
at two levels: flattened segmentation probabilities and flattened query
distribution logits, each between the strong and weak view of one sample with
all other batch samples (both views) as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NumericError


def cosine_sim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors; zero-norm inputs are an error."""
    nx, ny = torch.linalg.vector_norm(x), torch.linalg.vector_norm(y)
    if nx.item() == 0.0 or ny.item() == 0.0:
        raise NumericError("cosine similarity undefined for zero-norm input")
    return (x @ y) / (nx * ny)


def _as_matrix(embeddings) -> torch.Tensor:
    if isinstance(embeddings, torch.Tensor):
        mat = embeddings
    else:
        mat = torch.stack(list(embeddings))
    if mat.dim() != 2:
        raise ValueError(f"embeddings must be a list of vectors, got shape {tuple(mat.shape)}")
    return mat


def _normalize_rows(mat: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(mat, dim=1, keepdim=True)
    if (norms == 0).any():
        raise NumericError("cosine similarity undefined for zero-norm embedding")
    return mat / norms


def info_nce_terms(embeddings, positive_pairs, tau: float) -> torch.Tensor:
    """Per-anchor InfoNCE terms -log[exp(s_ij/tau) / sum_{k!=i} exp(s_ik/tau)].

    The positive stays in the denominator, so each term is >= 0.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    mat = _as_matrix(embeddings)
    m = mat.shape[0]
    if m < 2:
        raise ValueError("need at least 2 embeddings")
    pairs = list(positive_pairs)
    anchors = [i for i, _ in pairs]
    if len(set(anchors)) != len(anchors):
        raise ValueError("each anchor may appear in exactly one positive pair")
    normed = _normalize_rows(mat)
    sims = (normed @ normed.T) / tau
    # exclude self-similarity from every denominator
    sims = sims.masked_fill(torch.eye(m, dtype=torch.bool, device=mat.device),
                            float("-inf"))
    idx_i = torch.tensor([i for i, _ in pairs], device=mat.device)
    idx_j = torch.tensor([j for _, j in pairs], device=mat.device)
    denom = torch.logsumexp(sims[idx_i], dim=1)
    return denom - sims[idx_i, idx_j]


def info_nce(embeddings, positive_pairs, tau: float) -> torch.Tensor:
    """Mean InfoNCE over the given anchors."""
    return info_nce_terms(embeddings, positive_pairs, tau).mean()


def paired_consistency_terms(strong: torch.Tensor, weak: torch.Tensor,
                             tau: float) -> torch.Tensor:
    """Per-sample InfoNCE consistency between paired views.

    strong/weak: (B, D) embeddings of the two views of each sample. Every
    view of every other sample acts as a negative; both views anchor, and the
    two directed terms are averaged per sample. Returns (B,) terms.
    """
    if strong.shape != weak.shape:
        raise ValueError(f"view shapes differ: {tuple(strong.shape)} vs {tuple(weak.shape)}")
    if strong.dim() != 2 or strong.shape[0] < 1:
        raise ValueError("need a (B, D) batch of embeddings with B >= 1")
    b = strong.shape[0]
    if b == 1:
        # single pair: the denominator holds only the positive, terms vanish,
        # but keep the graph connected for a uniform autograd path
        z = (strong.sum() + weak.sum()) * 0.0
        return z.expand(1)
    emb = torch.cat([strong, weak], dim=0)
    pairs = [(i, b + i) for i in range(b)] + [(b + i, i) for i in range(b)]
    terms = info_nce_terms(emb, pairs, tau)
    return 0.5 * (terms[:b] + terms[b:])


def seg_consistency_per_sample(strong_probs: torch.Tensor, weak_probs: torch.Tensor,
                               tau: float, scale_by_voxels: bool = True) -> torch.Tensor:
    """Per-sample segmentation-level consistency.

    Views are (B, M, K) probability maps; each sample's flattened map is its
    embedding. Scaled by 1/M (voxel count) unless disabled.
    """
    if strong_probs.dim() != 3:
        raise ValueError(f"expected (B, M, K) probabilities, got {tuple(strong_probs.shape)}")
    b, m, k = strong_probs.shape
    terms = paired_consistency_terms(strong_probs.reshape(b, m * k),
                                     weak_probs.reshape(b, m * k), tau)
    return terms / m if scale_by_voxels else terms


def seg_consistency(strong_probs, weak_probs, tau: float,
                    scale_by_voxels: bool = True) -> torch.Tensor:
    return seg_consistency_per_sample(strong_probs, weak_probs, tau,
                                      scale_by_voxels).mean()


def query_consistency_per_sample(strong_logits: torch.Tensor, weak_logits: torch.Tensor,
                                 tau: float, num_voxels: int,
                                 scale_by_voxels: bool = True) -> torch.Tensor:
    """Per-sample query-distribution consistency over (B, N, K) logits.

    Shares the voxel-count prefactor with the segmentation level.
    """
    if strong_logits.dim() != 3:
        raise ValueError(f"expected (B, N, K) logits, got {tuple(strong_logits.shape)}")
    b = strong_logits.shape[0]
    terms = paired_consistency_terms(strong_logits.reshape(b, -1),
                                     weak_logits.reshape(b, -1), tau)
    return terms / num_voxels if scale_by_voxels else terms


def query_consistency(strong_logits, weak_logits, tau: float, num_voxels: int,
                      scale_by_voxels: bool = True) -> torch.Tensor:
    return query_consistency_per_sample(strong_logits, weak_logits, tau,
                                        num_voxels, scale_by_voxels).mean()


def _check_labels(probs: torch.Tensor, labels: torch.Tensor) -> None:
    if probs.shape[:-1] != labels.shape:
        raise ValueError(
            f"probabilities {tuple(probs.shape)} do not align with labels "
            f"{tuple(labels.shape)}"
        )
    k = probs.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label values must lie in [0, {k})")


def dice_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft dice loss over all classes: 1 - mean_c (2 sum p*y + eps)/(sum p + sum y + eps).

    probs: (M, K) per-voxel probabilities; labels: (M,) integers in [0, K).
    """
    _check_labels(probs, labels)
    k = probs.shape[-1]
    onehot = F.one_hot(labels.long(), num_classes=k).to(probs.dtype)
    p = probs.reshape(-1, k)
    y = onehot.reshape(-1, k)
    num = 2.0 * (p * y).sum(dim=0) + eps
    den = p.sum(dim=0) + y.sum(dim=0) + eps
    return 1.0 - (num / den).mean()


def ce_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-voxel negative log-likelihood from probabilities."""
    _check_labels(probs, labels)
    k = probs.shape[-1]
    p = probs.reshape(-1, k)
    y = labels.reshape(-1).long()
    picked = p[torch.arange(p.shape[0]), y]
    return -torch.log(picked.clamp_min(1e-12)).mean()


@dataclass
class LossParts:
    """Loss components attributed to one batch group (labeled or unlabeled).

    Consistency components are means over the group's samples, computed with
    negatives drawn from the whole batch.
    """

    n: int
    l_ce: torch.Tensor | float = 0.0
    l_dice: torch.Tensor | float = 0.0
    l_segc: torch.Tensor | float = 0.0
    l_qdc: torch.Tensor | float = 0.0


@dataclass
class LossBundle:
    """Scalar loss components of one training step."""

    l_ce: float
    l_dice: float
    l_segc: float
    l_qdc: float
    l_total: float
    lambda_used: float

    def as_dict(self) -> dict:
        return {
            "l_ce": self.l_ce, "l_dice": self.l_dice, "l_segc": self.l_segc,
            "l_qdc": self.l_qdc, "lambda": self.lambda_used, "l_total": self.l_total,
        }


def total_loss(labeled: LossParts, unlabeled: LossParts | None,
               lam: float) -> tuple[torch.Tensor, LossBundle]:
    """Combine supervised and consistency components.

    Labeled samples carry supervised + lambda * consistency, unlabeled ones
    lambda * consistency only; the consistency components are combined as the
    sample-weighted batch mean, so the total is affine in lambda with slope
    equal to that mean.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    n_u = unlabeled.n if unlabeled is not None else 0
    n_total = labeled.n + n_u
    if n_total <= 0:
        raise ValueError("need at least one sample")

    def wmean(a, b):
        if n_u == 0:
            return a
        return (labeled.n * a + n_u * b) / n_total

    l_segc = wmean(labeled.l_segc, unlabeled.l_segc if unlabeled else 0.0)
    l_qdc = wmean(labeled.l_qdc, unlabeled.l_qdc if unlabeled else 0.0)
    total = labeled.l_ce + labeled.l_dice + lam * (l_segc + l_qdc)

    def val(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    bundle = LossBundle(
        l_ce=val(labeled.l_ce), l_dice=val(labeled.l_dice),
        l_segc=val(l_segc), l_qdc=val(l_qdc),
        l_total=val(total), lambda_used=float(lam),
    )
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(total)
    return total, bundle


def lambda_schedule(step: int, total_steps: int, lam_max: float,
                    ramp_frac: float) -> float:
    """Linear warm-up of the consistency weight: 0 at step 0, lam_max after
    the first ramp_frac of training, non-decreasing throughout."""
    if step <= 0:
        return 0.0
    ramp_steps = int(round(ramp_frac * total_steps))
    if step >= max(ramp_steps, 1):
        return float(lam_max)
    return float(lam_max) * step / ramp_steps
