"""Distribution-shift measurement: domain distances, cluster quality,
epoch-wise tracking, and the noisy-label degeneration probe.

Domain discrepancy is estimated with a sliced Wasserstein-1 distance
(mean of exact 1D distances over seeded random projections); pre-trained
knowledge is summarized as the silhouette score of pre-training features
grouped by their labels.  The probe corrupts a fraction of labels,
fine-tunes a copy of the model, and records both metrics per epoch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from trida import nn
from trida.baselines import evaluate_accuracy, loss_source
from trida.data import LabeledDataset, paired_batches, rng_for
from trida.errors import ValidationError
from trida.model import ModelBundle
from trida.objectives import loss_pretrain


# ---------------------------------------------------------------------------
# Wasserstein distances
# ---------------------------------------------------------------------------


def wasserstein_1d_exact(samples_a, samples_b) -> float:
    """Exact 1D Wasserstein-1 distance (test oracle).

    Equal-size sets reduce to the mean absolute difference of the sorted
    samples; otherwise the quantile functions are integrated over the
    merged quantile grid.
    """
    a = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValidationError("empty sample set")
    if a.size == b.size:
        return float(np.abs(a - b).mean())
    n, m = a.size, b.size
    grid = np.union1d(np.arange(1, n) / n, np.arange(1, m) / m)
    grid = np.concatenate([[0.0], grid, [1.0]])
    mids = (grid[:-1] + grid[1:]) / 2.0
    qa = a[np.minimum((mids * n).astype(np.int64), n - 1)]
    qb = b[np.minimum((mids * m).astype(np.int64), m - 1)]
    return float(np.sum(np.diff(grid) * np.abs(qa - qb)))


def _w1_cdf(u: np.ndarray, v: np.ndarray) -> float:
    """1D Wasserstein-1 via the CDF-difference integral (estimator route)."""
    su, sv = np.sort(u), np.sort(v)
    support = np.sort(np.concatenate([su, sv]))
    deltas = np.diff(support)
    cdf_u = np.searchsorted(su, support[:-1], side="right") / su.size
    cdf_v = np.searchsorted(sv, support[:-1], side="right") / sv.size
    return float(np.sum(np.abs(cdf_u - cdf_v) * deltas))


def sliced_wasserstein(features_a, features_b, n_projections: int = 128,
                       seed: int = 0) -> float:
    """Mean exact 1D Wasserstein-1 distance over seeded random projections.

    The projection set depends only on the seed and dimension, so the
    estimate is symmetric in its arguments and zero for identical sets.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValidationError("feature sets must be 2D (n_samples, dim)")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValidationError("empty feature set")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(
            f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((a.shape[1], n_projections))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=0, keepdims=True), 1e-12)
    proj_a, proj_b = a @ dirs, b @ dirs
    return float(np.mean([_w1_cdf(proj_a[:, j], proj_b[:, j])
                          for j in range(n_projections)]))


# ---------------------------------------------------------------------------
# silhouette
# ---------------------------------------------------------------------------


def silhouette_score(features, labels) -> float:
    """Mean silhouette ``(b - a) / max(a, b)`` under Euclidean distance.

    ``a`` is the mean distance to the sample's own cluster (excluding
    itself), ``b`` the smallest mean distance to another cluster;
    singleton clusters and 0/0 cases contribute 0.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ValidationError("features must be (n, d) with one label each")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValidationError("silhouette needs at least two clusters")
    # chunked exact pairwise distances (no Gram-matrix cancellation)
    n = x.shape[0]
    dist = np.empty((n, n))
    step = max(1, (1 << 22) // max(n * x.shape[1], 1))
    for i in range(0, n, step):
        diff = x[i:i + step, None, :] - x[None, :, :]
        dist[i:i + step] = np.sqrt((diff * diff).sum(axis=2))
    masks = [labels == u for u in uniq]
    sizes = np.array([m.sum() for m in masks])
    # mean distance from every sample to every cluster
    mean_to = np.stack([dist[:, m].sum(axis=1) / m.sum() for m in masks], axis=1)
    scores = np.zeros(x.shape[0])
    for ci, m in enumerate(masks):
        if sizes[ci] == 1:
            continue  # singleton: contributes 0
        a = (dist[m][:, m].sum(axis=1)) / (sizes[ci] - 1)
        others = mean_to[m][:, [c for c in range(uniq.size) if c != ci]]
        b = others.min(axis=1)
        denom = np.maximum(a, b)
        s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        scores[m] = s
    return float(scores.mean())


# ---------------------------------------------------------------------------
# epoch tracking
# ---------------------------------------------------------------------------


@dataclass
class DiagnosticsConfig:
    n_eval: int = 512          # eval-subset cap per domain
    n_projections: int = 128
    projection_seed: int = 0
    eval_seed: int = 0


@dataclass
class DiagnosticsRecord:
    epoch: int
    w_st: float
    w_sp: float
    w_tp: float
    silhouette_pretrain: float
    acc_source: float
    acc_target: float


def _eval_subset(ds: LabeledDataset, cfg: DiagnosticsConfig,
                 role: str) -> LabeledDataset:
    if len(ds) <= cfg.n_eval:
        return ds
    order = rng_for(cfg.eval_seed, "diag", role).permutation(len(ds))
    return ds.subset(order[:cfg.n_eval])


def _features(bundle: ModelBundle, images: np.ndarray, chunk: int = 256):
    return np.concatenate([bundle.features(images[i:i + chunk])
                           for i in range(0, images.shape[0], chunk)])


def track_epoch(bundle: ModelBundle, datasets: dict[str, LabeledDataset],
                cfg: DiagnosticsConfig | None = None,
                epoch: int = 0) -> DiagnosticsRecord:
    """Pairwise domain distances, pre-training silhouette, and accuracies.

    Pure: runs in eval mode on fixed seeded subsets and never touches the
    bundle's parameters or statistics.
    """
    cfg = cfg or DiagnosticsConfig()
    subsets = {role: _eval_subset(datasets[role], cfg, role)
               for role in ("source", "target", "pretrain")}
    feats = {role: _features(bundle, subsets[role].images)
             for role in subsets}
    kw = dict(n_projections=cfg.n_projections, seed=cfg.projection_seed)
    return DiagnosticsRecord(
        epoch=epoch,
        w_st=sliced_wasserstein(feats["source"], feats["target"], **kw),
        w_sp=sliced_wasserstein(feats["source"], feats["pretrain"], **kw),
        w_tp=sliced_wasserstein(feats["target"], feats["pretrain"], **kw),
        silhouette_pretrain=silhouette_score(feats["pretrain"],
                                             subsets["pretrain"].labels),
        acc_source=evaluate_accuracy(bundle, datasets["source"]),
        acc_target=evaluate_accuracy(bundle, datasets["target"]),
    )


# ---------------------------------------------------------------------------
# noisy-label degeneration probe
# ---------------------------------------------------------------------------


def corrupt_labels(labels: np.ndarray, noise_fraction: float, n_classes: int,
                   seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Replace a seeded random fraction of labels with different random
    classes; returns (corrupted labels, corrupted index set)."""
    if not 0.0 <= noise_fraction <= 1.0:
        raise ValidationError("noise_fraction must lie in [0, 1]")
    labels = np.asarray(labels)
    rng = rng_for(seed, "probe", "noise")
    k = int(round(noise_fraction * labels.size))
    idx = np.sort(rng.choice(labels.size, size=k, replace=False))
    corrupted = labels.copy()
    if k:
        draws = rng.integers(0, n_classes - 1, size=k)
        corrupted[idx] = np.where(draws < labels[idx], draws, draws + 1)
    return corrupted, idx


def noisy_label_probe(bundle: ModelBundle, dataset: LabeledDataset,
                      noise_fraction: float, epochs: int, seed: int, *,
                      track_datasets: dict[str, LabeledDataset],
                      pretrain_dataset: LabeledDataset | None = None,
                      use_pretrain_loss: bool = False,
                      batch_size: int = 16, lr: float = 1e-2,
                      momentum: float = 0.9, weight_decay: float = 1e-3,
                      diag_cfg: DiagnosticsConfig | None = None
                      ) -> list[DiagnosticsRecord]:
    """Fine-tune a copy of the bundle on partly corrupted labels.

    Plain cross-entropy on the corrupted dataset, optionally joined by the
    pre-training-head cross-entropy on paired pre-training batches (the
    knowledge-preservation intervention).  Returns one record per epoch,
    preceded by an epoch-0 record of the untouched model; the caller's
    bundle is never modified.
    """
    if use_pretrain_loss and pretrain_dataset is None:
        raise ValidationError("pretrain loss requested without pretrain data")
    corrupted, _ = corrupt_labels(dataset.labels, noise_fraction,
                                  dataset.n_classes, seed)
    noisy = LabeledDataset(dataset.images, corrupted, dataset.class_set,
                           dataset.domain_role)
    work = bundle.copy()
    groups = work.parameter_groups()
    opt = nn.SGD({name: [(p, g) for _, p, g in params]
                  for name, params in groups.items()},
                 {name: lr for name in groups}, momentum, weight_decay)
    records = [track_epoch(work, track_datasets, diag_cfg, epoch=0)]
    for epoch in range(1, epochs + 1):
        epoch_seed = int(rng_for(seed, "probe", "epoch", str(epoch)).integers(2 ** 31))
        if use_pretrain_loss:
            stream = paired_batches(noisy, pretrain_dataset, batch_size, epoch_seed)
        else:
            order = rng_for(epoch_seed, "pair", "big").permutation(len(noisy))
            steps = math.ceil(len(noisy) / batch_size)
            stream = ((noisy.batch(order[s * batch_size:(s + 1) * batch_size]), None)
                      for s in range(steps))
        for noisy_batch, pre_batch in stream:
            work.zero_grad()
            loss_source(work, noisy_batch.images, noisy_batch.labels,
                        smoothing=0.0, train=True, backward_scale=1.0)
            if pre_batch is not None:
                loss_pretrain(work, pre_batch.images, pre_batch.labels,
                              train=True, backward_scale=1.0)
            opt.step()
        records.append(track_epoch(work, track_datasets, diag_cfg, epoch=epoch))
    return records


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

_RECORD_FIELDS = [f.name for f in fields(DiagnosticsRecord)]


def write_diagnostics_csv(records: list[DiagnosticsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RECORD_FIELDS)
        for r in records:
            writer.writerow([getattr(r, name) if name == "epoch"
                             else f"{getattr(r, name):.10g}"
                             for name in _RECORD_FIELDS])


def read_diagnostics_csv(path) -> list[DiagnosticsRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(DiagnosticsRecord(
                epoch=int(row["epoch"]),
                **{k: float(row[k]) for k in _RECORD_FIELDS if k != "epoch"}))
    return records


def render_metric_charts(records: list[DiagnosticsRecord], outdir,
                         run_id: str) -> list[str]:
    """One line-chart PNG per tracked metric; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r.epoch for r in records]
    written = []
    for name in _RECORD_FIELDS:
        if name == "epoch":
            continue
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(epochs, [getattr(r, name) for r in records], marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel(name)
        ax.set_title(f"{name} ({run_id})")
        fig.tight_layout()
        path = str(outdir / f"{name}_{run_id}.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
