"""Reference adaptation objectives the three-domain losses plug into.

Three kinds behind one interface: plain source fine-tuning with label
smoothing, a SHOT-style source-free objective (information maximization
plus clustering pseudo-labels refreshed once per epoch), and a minimal
domain-adversarial objective with a gradient-reversed discriminator.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from trida import nn
from trida.data import LabeledDataset, Batch
from trida.errors import ValidationError
from trida.model import ModelBundle
from trida.objectives import cross_entropy, log_softmax

logger = logging.getLogger(__name__)

OBJECTIVE_KINDS = ("source_only", "sfuda_shot_like", "uda_adversarial")


# ---------------------------------------------------------------------------
# source fine-tuning
# ---------------------------------------------------------------------------


def loss_source(bundle: ModelBundle, x_s: np.ndarray, y_s: np.ndarray,
                smoothing: float = 0.1, train: bool = False,
                backward_scale: float | None = None) -> float:
    """Label-smoothed cross-entropy of the target head on source images."""
    fp = bundle.forward(x_s, train, with_target=True)
    value, dlogits = cross_entropy(fp.logits_target, y_s, smoothing)
    if backward_scale is not None:
        bundle.backward(fp, d_logits_target=dlogits * backward_scale)
    return value


class SourceLoss:
    kind = "source_only"

    def __init__(self, smoothing: float = 0.1):
        self.hyperparameters = {"smoothing": smoothing}

    def __call__(self, bundle, batch: Batch, train: bool = False,
                 backward_scale: float | None = None) -> float:
        return loss_source(bundle, batch.images, batch.labels,
                           self.hyperparameters["smoothing"], train,
                           backward_scale)


# ---------------------------------------------------------------------------
# clustering pseudo-labels
# ---------------------------------------------------------------------------


@dataclass
class PseudoLabelState:
    centroids: np.ndarray      # per target class, feature space
    labels: np.ndarray         # hard pseudo-label per dataset sample
    similarities: np.ndarray   # similarity to the assigned centroid
    refresh_epoch: int = 0


def _eval_features_logits(bundle: ModelBundle, images: np.ndarray,
                          chunk: int = 256):
    feats, logits = [], []
    for i in range(0, images.shape[0], chunk):
        fp = bundle.forward(images[i:i + chunk], train=False, with_target=True)
        feats.append(fp.features)
        logits.append(fp.logits_target)
    return np.concatenate(feats), np.concatenate(logits)


def _assign(features: np.ndarray, centroids: np.ndarray, metric: str):
    if metric == "cosine":
        fn = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
        cn = centroids / np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
        sims = fn @ cn.T
        labels = sims.argmax(axis=1)
        return labels, sims[np.arange(len(labels)), labels]
    if metric == "euclidean":
        d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        return labels, -np.sqrt(d2[np.arange(len(labels)), labels])
    raise ValidationError(f"unknown metric {metric!r}")


def cluster_pseudo_labels(bundle: ModelBundle, target_dataset: LabeledDataset,
                          metric: str = "cosine",
                          refresh_epoch: int = 0) -> PseudoLabelState:
    """Centroid pseudo-labels: soft-probability-weighted class centroids,
    nearest-centroid assignment, one hard refinement round.

    A class that receives no hard members in the refinement keeps its
    round-0 centroid (logged).  Deterministic and order-invariant up to
    floating-point roundoff; assignment ties break toward the lowest
    class index.
    """
    features, logits = _eval_features_logits(bundle, target_dataset.images)
    probs = np.exp(log_softmax(logits))
    mass = probs.sum(axis=0)
    # soft mass only vanishes when the softmax underflows to exactly zero
    dead = mass <= 0.0
    if dead.any():
        logger.warning("pseudo-label classes %s got zero soft mass; "
                       "falling back to the global feature mean",
                       np.flatnonzero(dead).tolist())
    centroids = (probs.T @ features) / np.where(dead, 1.0, mass)[:, None]
    centroids[dead] = features.mean(axis=0)
    labels, _ = _assign(features, centroids, metric)
    refined = centroids.copy()
    for k in range(centroids.shape[0]):
        members = features[labels == k]
        if len(members):
            refined[k] = members.mean(axis=0)
        else:
            logger.warning("pseudo-label class %d got no members; centroid kept", k)
    labels, sims = _assign(features, refined, metric)
    return PseudoLabelState(refined, labels, sims, refresh_epoch)


def export_pseudo_labels_csv(state: PseudoLabelState, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "pseudo_label", "centroid_similarity"])
        for i, (lab, sim) in enumerate(zip(state.labels, state.similarities)):
            writer.writerow([i, int(lab), f"{sim:.6f}"])


# ---------------------------------------------------------------------------
# SHOT-style source-free objective
# ---------------------------------------------------------------------------


def _information_maximization(logits: np.ndarray):
    """Mean per-sample entropy minus entropy of the mean prediction,
    with its gradient w.r.t. the logits."""
    n = logits.shape[0]
    lp = log_softmax(logits)
    p = np.exp(lp)
    ent_per = -(p * lp).sum(axis=1)
    pbar = p.mean(axis=0)
    log_pbar = np.where(pbar > 0, np.log(np.maximum(pbar, 1e-300)), 0.0)
    div = -(pbar * log_pbar).sum()
    value = float(ent_per.mean() - div)
    # d/dz of mean entropy: -p * (lp + H_i) / n
    d_ent = -p * (lp + ent_per[:, None]) / n
    # d/dz of -H(pbar): +p * (log_pbar - sum_k p_ik log_pbar_k) / n
    d_div = p * (log_pbar[None, :] - (p * log_pbar[None, :]).sum(axis=1, keepdims=True)) / n
    return value, d_ent + d_div


def loss_sfuda_shot_like(bundle: ModelBundle, x_t: np.ndarray,
                         pseudo_labels: np.ndarray, w_pl: float = 0.3,
                         train: bool = False,
                         backward_scale: float | None = None) -> float:
    """Information maximization plus weighted pseudo-label cross-entropy."""
    fp = bundle.forward(x_t, train, with_target=True)
    im_value, d_im = _information_maximization(fp.logits_target)
    ce_value, d_ce = cross_entropy(fp.logits_target, pseudo_labels)
    if backward_scale is not None:
        bundle.backward(fp, d_logits_target=(d_im + w_pl * d_ce) * backward_scale)
    return im_value + w_pl * ce_value


class ShotLikeLoss:
    """Per-epoch pseudo-label state plus the SHOT-style loss on batches."""

    kind = "sfuda_shot_like"

    def __init__(self, w_pl: float = 0.3, metric: str = "cosine"):
        self.hyperparameters = {"w_pl": w_pl, "metric": metric}
        self.pseudo: PseudoLabelState | None = None

    def refresh(self, bundle: ModelBundle, target_dataset: LabeledDataset,
                epoch: int) -> PseudoLabelState:
        self.pseudo = cluster_pseudo_labels(bundle, target_dataset,
                                            self.hyperparameters["metric"], epoch)
        return self.pseudo

    def batch_pseudo_labels(self, batch: Batch) -> np.ndarray:
        if self.pseudo is None:
            raise ValidationError("pseudo labels not refreshed yet")
        return self.pseudo.labels[batch.indices]

    def __call__(self, bundle, batch: Batch, train: bool = False,
                 backward_scale: float | None = None) -> float:
        return loss_sfuda_shot_like(bundle, batch.images,
                                    self.batch_pseudo_labels(batch),
                                    self.hyperparameters["w_pl"], train,
                                    backward_scale)


# ---------------------------------------------------------------------------
# adversarial vanilla-UDA objective
# ---------------------------------------------------------------------------


class Discriminator:
    """Two-layer domain classifier over extractor features."""

    def __init__(self, feature_dim: int, hidden: int = 32,
                 activation: str = "relu", seed: int = 0):
        rng = np.random.default_rng(seed)
        act = nn.ReLU() if activation == "relu" else nn.Tanh()
        self.net = nn.Sequential([nn.Linear(feature_dim, hidden, rng), act,
                                  nn.Linear(hidden, 1, rng)])

    def forward(self, features: np.ndarray, train: bool):
        out, caches = self.net.forward(features, train)
        return out[:, 0], caches

    def backward(self, dz: np.ndarray, caches) -> np.ndarray:
        return self.net.backward(dz[:, None], caches)

    def zero_grad(self) -> None:
        self.net.zero_grad()

    def named_params(self):
        yield from self.net.named_params(prefix="disc.")


def loss_uda_adversarial(bundle: ModelBundle, disc: Discriminator,
                         x_s: np.ndarray, x_t: np.ndarray,
                         rev_coeff: float = 1.0, train: bool = False,
                         backward_scale: float | None = None) -> float:
    """Binary domain loss on features; the extractor receives the reversed
    gradient (scaled by ``-rev_coeff``), the discriminator the plain one."""
    fp_s = bundle.forward(x_s, train)
    fp_t = bundle.forward(x_t, train)
    feats = np.concatenate([fp_s.features, fp_t.features])
    y = np.concatenate([np.ones(len(fp_s.features)), np.zeros(len(fp_t.features))])
    z, caches = disc.forward(feats, train)
    # stable binary cross-entropy with logits
    value = float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    if backward_scale is not None:
        sigma = 1.0 / (1.0 + np.exp(-z))
        dz = (sigma - y) / len(y) * backward_scale
        dfeats = disc.backward(dz, caches)
        n_s = len(fp_s.features)
        bundle.backward(fp_s, d_features=-rev_coeff * dfeats[:n_s])
        bundle.backward(fp_t, d_features=-rev_coeff * dfeats[n_s:])
    return value


class AdversarialUDALoss:
    kind = "uda_adversarial"

    def __init__(self, feature_dim: int, hidden: int = 32,
                 rev_coeff: float = 1.0, seed: int = 0):
        self.hyperparameters = {"hidden": hidden, "rev_coeff": rev_coeff}
        self.disc = Discriminator(feature_dim, hidden, seed=seed)

    def __call__(self, bundle, source_batch: Batch, target_batch: Batch,
                 train: bool = False, backward_scale: float | None = None) -> float:
        return loss_uda_adversarial(bundle, self.disc, source_batch.images,
                                    target_batch.images,
                                    self.hyperparameters["rev_coeff"], train,
                                    backward_scale)

    def zero_grad(self) -> None:
        self.disc.zero_grad()

    def named_params(self):
        yield from self.disc.named_params()


def evaluate_accuracy(bundle: ModelBundle, dataset: LabeledDataset,
                      chunk: int = 256) -> float:
    """Eval-mode target-head accuracy against the dataset's labels."""
    if dataset.labels is None:
        raise ValidationError("dataset has no labels to score against")
    correct = 0
    for i in range(0, len(dataset), chunk):
        logits = bundle.classify_target(dataset.images[i:i + chunk])
        correct += int((logits.argmax(axis=1) == dataset.labels[i:i + chunk]).sum())
    return correct / len(dataset)
