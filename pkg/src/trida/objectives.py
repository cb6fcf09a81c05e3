"""Three-domain losses and their composition.

The intermediate domain mixes pre-training and target pixels with one
Beta-distributed weight per batch; the semantic loss supervises both
heads on the mixed images with their own domains' labels, and the
feature loss penalizes the L1 gap between interpolated endpoint features
and the features of the mixed input.  Composite objectives add these to
a wrapped baseline, weighted by ``beta``.

Every loss takes an optional ``backward_scale``: when set, parameter
gradients of ``scale * loss`` are accumulated into the bundle during the
call, so composites backpropagate by invoking each enabled component
with its weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trida.data import Batch
from trida.errors import ValidationError
from trida.model import ModelBundle

# ---------------------------------------------------------------------------
# softmax / cross-entropy helpers (shared with the baseline objectives)
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray,
                  smoothing: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits.

    With smoothing eps the soft target is ``(1 - eps)`` on the true class
    plus ``eps / K`` on every class.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValidationError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError("labels outside the logit class space")
    lp = log_softmax(logits)
    q = np.full((n, k), smoothing / k)
    q[np.arange(n), labels] += 1.0 - smoothing
    value = float(-(q * lp).sum() / n)
    dlogits = (np.exp(lp) - q) / n
    return value, dlogits


# ---------------------------------------------------------------------------
# intermediate domain
# ---------------------------------------------------------------------------


@dataclass
class TriDAConfig:
    beta: float = 0.1   # weight of the two intermediate-domain losses
    alpha: float = 2.0  # Beta(alpha, alpha) parameter for the mixing weight
    use_pretrain_loss: bool = True
    use_sem_loss: bool = True
    use_feat_loss: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.alpha <= 0:
            raise ValidationError("alpha must be > 0")

    @property
    def any_mixing(self) -> bool:
        return self.use_sem_loss or self.use_feat_loss


@dataclass
class MixedBatch:
    x_p: np.ndarray
    y_p: np.ndarray
    x_t: np.ndarray
    y_hat_t: np.ndarray
    lam: float
    x_mixed: np.ndarray


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ValidationError("alpha must be > 0")
    return float(rng.beta(alpha, alpha))


def mix_batch(x_p: np.ndarray, y_p: np.ndarray, x_t: np.ndarray,
              y_hat_t: np.ndarray, lam: float) -> MixedBatch:
    """Convex pixel mix ``lam * x_p + (1 - lam) * x_t``; inputs untouched."""
    if x_p.shape != x_t.shape:
        raise ValidationError(f"shape mismatch: {x_p.shape} vs {x_t.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lam must lie in [0, 1], got {lam}")
    x_mixed = lam * x_p + (1.0 - lam) * x_t
    return MixedBatch(x_p, np.asarray(y_p), x_t, np.asarray(y_hat_t),
                      float(lam), x_mixed)


# ---------------------------------------------------------------------------
# component losses
# ---------------------------------------------------------------------------


def loss_pretrain(bundle: ModelBundle, x_p: np.ndarray, y_p: np.ndarray,
                  train: bool = False,
                  backward_scale: float | None = None) -> float:
    """Cross-entropy of the pre-training head on raw pre-training images."""
    fp = bundle.forward(x_p, train, with_pretrain=True)
    value, dlogits = cross_entropy(fp.logits_pretrain, y_p)
    if backward_scale is not None:
        bundle.backward(fp, d_logits_pretrain=dlogits * backward_scale)
    return value


def loss_sem(bundle: ModelBundle, mixed: MixedBatch, train: bool = False,
             backward_scale: float | None = None) -> float:
    """Dual-head cross-entropy on mixed inputs, weighted by the mix weight.

    Both heads read one shared extractor pass over ``x_mixed``; the
    pre-training head is supervised with the pre-training labels (weight
    ``lam``) and the target head with the pseudo-labels (weight ``1-lam``).
    """
    lam = mixed.lam
    fp = bundle.forward(mixed.x_mixed, train, with_target=True, with_pretrain=True)
    v_p, d_p = cross_entropy(fp.logits_pretrain, mixed.y_p)
    v_t, d_t = cross_entropy(fp.logits_target, mixed.y_hat_t)
    if backward_scale is not None:
        bundle.backward(fp,
                        d_logits_target=d_t * ((1.0 - lam) * backward_scale),
                        d_logits_pretrain=d_p * (lam * backward_scale))
    return lam * v_p + (1.0 - lam) * v_t


def loss_feat(bundle: ModelBundle, mixed: MixedBatch, train: bool = False,
              backward_scale: float | None = None) -> float:
    """Mean L1 norm of ``lam*f(x_p) + (1-lam)*f(x_t) - f(x_mixed)``.

    All three passes run in the same mode; gradients flow through all of
    them.
    """
    lam = mixed.lam
    fp_p = bundle.forward(mixed.x_p, train)
    fp_t = bundle.forward(mixed.x_t, train)
    fp_m = bundle.forward(mixed.x_mixed, train)
    resid = lam * fp_p.features + (1.0 - lam) * fp_t.features - fp_m.features
    n = resid.shape[0]
    value = float(np.abs(resid).sum() / n)
    if backward_scale is not None:
        s = np.sign(resid) * (backward_scale / n)
        bundle.backward(fp_p, d_features=lam * s)
        bundle.backward(fp_t, d_features=(1.0 - lam) * s)
        bundle.backward(fp_m, d_features=-s)
    return value


# ---------------------------------------------------------------------------
# composite objectives
# ---------------------------------------------------------------------------


def _mixing_terms(bundle, mixed, cfg, train, backward_scale):
    breakdown = {"loss_sem": 0.0, "loss_feat": 0.0}
    if cfg.any_mixing and mixed is None:
        raise ValidationError("mixing losses enabled but no mixed batch given")
    beta_scale = None if backward_scale is None else cfg.beta * backward_scale
    if cfg.use_sem_loss:
        breakdown["loss_sem"] = loss_sem(bundle, mixed, train, beta_scale)
    if cfg.use_feat_loss:
        breakdown["loss_feat"] = loss_feat(bundle, mixed, train, beta_scale)
    return breakdown


def objective_sfuda_step1(bundle: ModelBundle, source_batch: Batch,
                          pretrain_batch: Batch | None, cfg: TriDAConfig,
                          source_loss, train: bool = False,
                          backward_scale: float | None = None):
    """Source fine-tuning: source loss plus pre-training-head cross-entropy."""
    breakdown = {"loss_source": source_loss(bundle, source_batch, train=train,
                                            backward_scale=backward_scale),
                 "loss_pretrain": 0.0}
    if cfg.use_pretrain_loss and pretrain_batch is not None:
        breakdown["loss_pretrain"] = loss_pretrain(
            bundle, pretrain_batch.images, pretrain_batch.labels, train,
            backward_scale)
    breakdown["total"] = breakdown["loss_source"] + breakdown["loss_pretrain"]
    return breakdown["total"], breakdown


def objective_sfuda_step2(bundle: ModelBundle, target_batch: Batch,
                          pretrain_batch: Batch | None,
                          mixed: MixedBatch | None, baseline_loss,
                          cfg: TriDAConfig, train: bool = False,
                          backward_scale: float | None = None):
    """Source-free adaptation step: baseline + L_p + beta (L_sem + L_feat)."""
    breakdown = {"loss_baseline": baseline_loss(bundle, target_batch, train=train,
                                                backward_scale=backward_scale),
                 "loss_pretrain": 0.0}
    if cfg.use_pretrain_loss and pretrain_batch is not None:
        breakdown["loss_pretrain"] = loss_pretrain(
            bundle, pretrain_batch.images, pretrain_batch.labels, train,
            backward_scale)
    breakdown.update(_mixing_terms(bundle, mixed, cfg, train, backward_scale))
    breakdown["total"] = (breakdown["loss_baseline"] + breakdown["loss_pretrain"]
                          + cfg.beta * (breakdown["loss_sem"]
                                        + breakdown["loss_feat"]))
    return breakdown["total"], breakdown


def objective_uda(bundle: ModelBundle, source_batch: Batch, target_batch: Batch,
                  pretrain_batch: Batch | None, mixed: MixedBatch | None,
                  uda_loss, source_loss, cfg: TriDAConfig, train: bool = False,
                  backward_scale: float | None = None):
    """Joint adaptation: L_UDA + L_s + L_p + beta (L_sem + L_feat)."""
    breakdown = {"loss_uda": uda_loss(bundle, source_batch, target_batch,
                                      train=train, backward_scale=backward_scale),
                 "loss_source": source_loss(bundle, source_batch, train=train,
                                            backward_scale=backward_scale),
                 "loss_pretrain": 0.0}
    if cfg.use_pretrain_loss and pretrain_batch is not None:
        breakdown["loss_pretrain"] = loss_pretrain(
            bundle, pretrain_batch.images, pretrain_batch.labels, train,
            backward_scale)
    breakdown.update(_mixing_terms(bundle, mixed, cfg, train, backward_scale))
    breakdown["total"] = (breakdown["loss_uda"] + breakdown["loss_source"]
                          + breakdown["loss_pretrain"]
                          + cfg.beta * (breakdown["loss_sem"]
                                        + breakdown["loss_feat"]))
    return breakdown["total"], breakdown
