"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

import numpy as np

from trida.model import BundleConfig, ModelBundle


def tiny_bundle(seed: int = 0, n_target: int = 3, n_pretrain: int = 4,
                weight_norm: bool = False, activation: str = "tanh") -> ModelBundle:
    """Smooth sub-1k-parameter conv bundle for finite-difference work."""
    cfg = BundleConfig(n_target_classes=n_target, n_pretrain_classes=n_pretrain,
                       backbone="smallconv", in_channels=1, image_side=8,
                       conv_channels=(2,), feature_dim=6, activation=activation,
                       weight_norm_head=weight_norm, seed=seed)
    return ModelBundle(cfg, target_classes=[f"t{i}" for i in range(n_target)],
                       pretrain_classes=[f"p{i}" for i in range(n_pretrain)])


def identity_bundle(side: int = 4, channels: int = 1, n_target: int = 3,
                    n_pretrain: int = 4, seed: int = 0) -> ModelBundle:
    """Identity backbone, no bottleneck: features == flattened inputs."""
    cfg = BundleConfig(n_target_classes=n_target, n_pretrain_classes=n_pretrain,
                       backbone="identity", in_channels=channels,
                       image_side=side, use_bottleneck=False, seed=seed)
    return ModelBundle(cfg)


def directional_grad_check(params, loss_fn, n_dirs: int = 20, h: float = 1e-6,
                           seed: int = 123) -> float:
    """Worst relative error between accumulated analytic gradients and
    central finite differences along random parameter directions.

    ``params`` is a list of (param, grad) array pairs whose grads were
    already accumulated for the loss at the current point; ``loss_fn()``
    re-evaluates the loss without touching gradients.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(p.shape) for p, _ in params]
        analytic = sum(float((g * d).sum()) for (_, g), d in zip(params, dirs))
        for (p, _), d in zip(params, dirs):
            p += h * d
        plus = loss_fn()
        for (p, _), d in zip(params, dirs):
            p -= 2 * h * d
        minus = loss_fn()
        for (p, _), d in zip(params, dirs):
            p += h * d
        fd = (plus - minus) / (2 * h)
        worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-12))
    return worst


def bundle_param_pairs(bundle: ModelBundle):
    return [(p, g) for _, p, g in bundle.named_params()]


def brute_force_silhouette(x: np.ndarray, labels: np.ndarray) -> float:
    """Literal definition, one sample at a time (test oracle)."""
    n = len(x)
    dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    uniq = sorted(set(labels.tolist()))
    scores = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = float(np.mean([dist[i, j] for j in own]))
        b = min(float(np.mean([dist[i, j] for j in range(n) if labels[j] == o]))
                for o in uniq if o != labels[i])
        m = max(a, b)
        scores.append(0.0 if m == 0 else (b - a) / m)
    return float(np.mean(scores))


def bfs_distances(edges: list[tuple[str, str]], start: str) -> dict[str, int]:
    """Plain BFS over an undirected edge list (taxonomy test oracle)."""
    adj: dict[str, list[str]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    dist = {start: 0}
    frontier = [start]
    while frontier:
        nxt = []
        for node in frontier:
            for nb in adj.get(node, []):
                if nb not in dist:
                    dist[nb] = dist[node] + 1
                    nxt.append(nb)
        frontier = nxt
    return dist
