"""Pre-training objectives on batches of projected embeddings.

All losses take [N, D] batches, L2-normalize rows internally, and return
scalar tensors differentiable through the autodiff tape. The contrastive
loss scores each row of one view against all rows of the other view with
the matched index as the positive; the positive term is excluded from the
denominator. The spread regularizer pushes apart nearest neighbors within
a single view. Momentum-branch inputs are targets and must arrive with
gradient tracking already severed.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossConfig:
    """Weights and constants of the combined objective.

    temperature scales cosine similarities in the contrastive term;
    koleo_weight is the coefficient on the spread regularizer;
    halve_terms averages the two view-symmetric contributions of each term
    (disabling it sums them instead, exactly 2x the loss).
    """

    temperature: float = 0.04
    koleo_weight: float = 0.1
    koleo_eps: float = 1e-8
    halve_terms: bool = True

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.koleo_weight < 0:
            raise ValueError(f"koleo_weight must be >= 0, got {self.koleo_weight}")
        if self.koleo_eps <= 0:
            raise ValueError(f"koleo_eps must be > 0, got {self.koleo_eps}")


def _check_batch(op: str, h: Tensor) -> None:
    if h.ndim != 2:
        raise ValueError(f"{op} expects [N, D] batches, got shape {h.shape}")
    if h.shape[0] < 2:
        raise ValueError(f"{op} needs at least 2 rows, got {h.shape[0]}")


def infonce(h_a: Tensor, h_b: Tensor, temperature: float = 0.04) -> Tensor:
    """Temperature-scaled cross-view identification loss.

    Row i of h_a must match row i of h_b against the other N-1 rows:
      -(1/N) sum_i log[ exp(cos_ii/t) / sum_{j != i} exp(cos_ij/t) ]
    computed with a max-shifted log-sum-exp.
    """
    _check_batch("infonce", h_a)
    if h_a.shape != h_b.shape:
        raise ValueError(f"infonce: view shapes differ, {h_a.shape} vs {h_b.shape}")
    if temperature <= 0:
        raise ValueError(f"infonce: temperature must be > 0, got {temperature}")
    logits = ad.scale(ad.matmul_nt(ad.l2_normalize_rows(h_a), ad.l2_normalize_rows(h_b)),
                      1.0 / temperature)
    return ad.mean_all(ad.sub(ad.logsumexp_offdiag(logits), ad.diag_part(logits)))


def koleo(h: Tensor, eps: float = 1e-8) -> Tensor:
    """Nearest-neighbor spread penalty on one view.

      -(1/N) sum_i log( min_{j != i} ||u_i - u_j||^2 + eps )
    on row-normalized u. Minimizing it pushes each row away from its
    nearest neighbor; coincident rows give the finite value -log(eps).
    """
    _check_batch("koleo", h)
    if eps <= 0:
        raise ValueError(f"koleo: eps must be > 0, got {eps}")
    u = ad.l2_normalize_rows(h)
    nearest = ad.min_offdiag(ad.pairwise_sq_dists(u))
    return ad.scale(ad.mean_all(ad.log(ad.add_scalar(nearest, eps))), -1.0)


def combined_loss(h1: Tensor, h2: Tensor, h1_m: Tensor, h2_m: Tensor,
                  config: LossConfig) -> Tensor:
    """Symmetric contrastive terms against momentum targets plus spread.

    With halve_terms:  1/2 [ c(h1, h2_m) + c(h2, h1_m) ]
                     + w/2 [ k(h1) + k(h2) ]
    and without, both halving factors are dropped. The momentum inputs are
    pure targets: passing tensors still attached to the tape is an error.
    """
    config.validate()
    for name, t in (("h1_m", h1_m), ("h2_m", h2_m)):
        if t.tracks_grad:
            raise ValueError(f"combined_loss: momentum input {name} must not track gradients "
                             "(detach it or produce it under no_grad)")
    contrast = ad.add(infonce(h1, h2_m, config.temperature),
                      infonce(h2, h1_m, config.temperature))
    if config.koleo_weight > 0:
        spread = ad.add(koleo(h1, config.koleo_eps), koleo(h2, config.koleo_eps))
        if config.halve_terms:
            return ad.add(ad.scale(contrast, 0.5), ad.scale(spread, 0.5 * config.koleo_weight))
        return ad.add(contrast, ad.scale(spread, config.koleo_weight))
    return ad.scale(contrast, 0.5) if config.halve_terms else contrast


def byol_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean rowwise 2 - 2*cos(pred_i, target_i); bounded in [0, 4].

    The target branch carries no gradient by contract.
    """
    _check_batch("byol_loss", pred)
    if pred.shape != target.shape:
        raise ValueError(f"byol_loss: shapes differ, {pred.shape} vs {target.shape}")
    if target.tracks_grad:
        raise ValueError("byol_loss: target must not track gradients")
    dots = ad.row_sum(ad.mul(ad.l2_normalize_rows(pred), ad.l2_normalize_rows(target)))
    return ad.add_scalar(ad.scale(ad.mean_all(dots), -2.0), 2.0)
