"""Proxy pre-training images from a frozen model by input optimization.

Pixels are optimized against the pre-training head's cross-entropy plus
image priors: total variation, L2 norm, and a feature regularizer that
matches per-layer batch statistics to the stored normalization statistics.
A CLIP-style variant replaces the head probability with a softmax over
cosine similarities to injected text embeddings at a fixed temperature.

The model stays frozen throughout: forwards run in eval mode, statistics
are only read, and the descent loop backtracks (halving the step size on
any loss increase) so the recorded loss sequence is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from trida.data import rng_for
from trida.errors import LookupFailure, ValidationError
from trida.model import ModelBundle
from trida.objectives import cross_entropy, log_softmax


@dataclass
class SynthesisConfig:
    steps: int = 500
    step_size: float = 0.05
    w_tv: float = 1e-4
    w_l2: float = 1e-5
    w_feat: float = 1e-2
    images_per_class: int = 10
    init: str = "uniform_noise"  # uniform_noise | gaussian_noise
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        for name in ("w_tv", "w_l2", "w_feat"):
            if not np.isfinite(getattr(self, name)) or getattr(self, name) < 0:
                raise ValidationError(f"{name} must be finite and >= 0")
        if self.init not in ("uniform_noise", "gaussian_noise"):
            raise ValidationError(f"unknown init {self.init!r}")


class TextEmbeddingProvider:
    """Unit-norm text embedding per class plus a softmax temperature."""

    def __init__(self, embeddings: dict[str, np.ndarray], temperature: float):
        if temperature <= 0:
            raise ValidationError("temperature must be > 0")
        self.temperature = float(temperature)
        self._embeddings = {}
        for cls, vec in embeddings.items():
            vec = np.asarray(vec, dtype=np.float64)
            norm = np.linalg.norm(vec)
            if abs(norm - 1.0) > 1e-5:
                raise ValidationError(
                    f"embedding for {cls!r} not unit-norm (|v| = {norm:.6f})")
            self._embeddings[cls] = vec
        dims = {v.size for v in self._embeddings.values()}
        if len(dims) > 1:
            raise ValidationError("embeddings must share one dimension")

    def embed(self, class_id: str) -> np.ndarray:
        if class_id not in self._embeddings:
            raise LookupFailure(f"no embedding for class {class_id!r}")
        return self._embeddings[class_id]

    @classmethod
    def random(cls, classes: list[str], dim: int, seed: int = 0,
               temperature: float = 0.07) -> "TextEmbeddingProvider":
        """Seeded random unit embeddings (toy stand-in for a text encoder)."""
        rng = rng_for(seed, "text-embed")
        emb = {}
        for c in classes:
            v = rng.standard_normal(dim)
            emb[c] = v / np.linalg.norm(v)
        return cls(emb, temperature)


def clip_style_probabilities(features: np.ndarray,
                             provider: TextEmbeddingProvider,
                             target_classes: list[str]) -> np.ndarray:
    """Row-wise softmax over cosine similarities / temperature; (n, K)."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    emb = np.stack([provider.embed(c) for c in target_classes])  # K x D
    if f.shape[1] != emb.shape[1]:
        raise ValidationError(
            f"feature dim {f.shape[1]} != embedding dim {emb.shape[1]}")
    fn = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    sims = fn @ emb.T
    return np.exp(log_softmax(sims / provider.temperature))


def clip_style_probability(features: np.ndarray, class_id: str,
                           provider: TextEmbeddingProvider,
                           target_classes: list[str]):
    """Probability of ``class_id`` for each feature row (float for 1D input)."""
    if class_id not in target_classes:
        raise LookupFailure(f"class {class_id!r} not in target classes")
    probs = clip_style_probabilities(features, provider, target_classes)
    col = probs[:, target_classes.index(class_id)]
    return float(col[0]) if np.asarray(features).ndim == 1 else col


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------


def _tv_value_grad(x: np.ndarray):
    n = x.shape[0]
    dh = x[:, :, 1:, :] - x[:, :, :-1, :]
    dw = x[:, :, :, 1:] - x[:, :, :, :-1]
    m_h = dh[0].size or 1
    m_w = dw[0].size or 1
    value = float((dh * dh).sum() / (n * m_h) + (dw * dw).sum() / (n * m_w))
    grad = np.zeros_like(x)
    grad[:, :, 1:, :] += 2.0 * dh / (n * m_h)
    grad[:, :, :-1, :] -= 2.0 * dh / (n * m_h)
    grad[:, :, :, 1:] += 2.0 * dw / (n * m_w)
    grad[:, :, :, :-1] -= 2.0 * dw / (n * m_w)
    return value, grad


def _feature_reg_terms(bundle: ModelBundle, fp):
    """Per-normalization-layer squared gaps between batch and stored stats.

    Returns the value and per-site tap gradients keyed by (section, index).
    """
    value = 0.0
    taps: dict[tuple[str, int], np.ndarray] = {}
    for section, idx, layer in bundle.bn_sites():
        caches = fp.backbone_caches if section == "backbone" else fp.bottleneck_caches
        xin = caches[idx][0]  # the layer cache starts with its input
        mu_b, var_b = layer.batch_stats(xin)
        mu_r = layer.buffers["running_mean"]
        var_r = layer.buffers["running_var"]
        value += float(((mu_b - mu_r) ** 2).sum() + ((var_b - var_r) ** 2).sum())
        m = xin.size / mu_b.size
        dmu = 2.0 * (mu_b - mu_r) / m
        dvar = 2.0 * (var_b - var_r)
        if xin.ndim == 4:
            centered = xin - mu_b[None, :, None, None]
            tap = dmu[None, :, None, None] + dvar[None, :, None, None] * 2.0 * centered / m
        else:
            centered = xin - mu_b[None, :]
            tap = dmu[None, :] + dvar[None, :] * 2.0 * centered / m
        taps[(section, idx)] = tap
    return value, taps


def regularizer_eval(image: np.ndarray, bundle: ModelBundle,
                     weights: dict[str, float]) -> float:
    """Weighted sum of TV, L2, and feature-statistics regularizers.

    Accepts a single ``(C, H, W)`` image or a batch; the TV and feature
    terms are batch means, the L2 term is the per-image sum of squares
    averaged over the batch.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    tv, _ = _tv_value_grad(x)
    l2 = float((x * x).sum() / x.shape[0])
    fp = bundle.forward(x, train=False)
    feat, _ = _feature_reg_terms(bundle, fp)
    return (weights.get("w_tv", 0.0) * tv + weights.get("w_l2", 0.0) * l2
            + weights.get("w_feat", 0.0) * feat)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def _resolve_class(bundle: ModelBundle, class_id) -> int:
    n = bundle.head_pretrain.params["weight"].shape[1] if bundle.head_pretrain else 0
    if bundle.head_pretrain is None:
        raise ValidationError("pretrain head removed")
    if isinstance(class_id, str):
        if not bundle.pretrain_classes or class_id not in bundle.pretrain_classes:
            raise LookupFailure(f"class {class_id!r} not in the pretrain head space")
        return bundle.pretrain_classes.index(class_id)
    idx = int(class_id)
    if not 0 <= idx < n:
        raise ValidationError(f"class index {idx} outside pretrain head space (0..{n - 1})")
    return idx


def _init_images(bundle: ModelBundle, cfg: SynthesisConfig, tag: str) -> np.ndarray:
    rng = rng_for(cfg.seed, "synth", tag)
    shape = (cfg.images_per_class, bundle.config.in_channels,
             bundle.config.image_side, bundle.config.image_side)
    if cfg.init == "uniform_noise":
        return rng.random(shape)
    return np.clip(0.5 + 0.15 * rng.standard_normal(shape), 0.0, 1.0)


def _loss_and_grad(bundle, x, class_idx, cfg, provider, target_classes):
    if provider is None:
        fp = bundle.forward(x, train=False, with_pretrain=True)
        labels = np.full(x.shape[0], class_idx, dtype=np.int64)
        ce, dlogits = cross_entropy(fp.logits_pretrain, labels)
        d_feats = None
    else:
        fp = bundle.forward(x, train=False)
        probs = clip_style_probabilities(fp.features, provider, target_classes)
        ce = float(-np.log(np.maximum(probs[:, class_idx], 1e-300)).mean())
        # gradient of -log p[class] through cosine similarities
        n = x.shape[0]
        emb = np.stack([provider.embed(c) for c in target_classes])
        norms = np.maximum(np.linalg.norm(fp.features, axis=1, keepdims=True), 1e-12)
        fn = fp.features / norms
        sims = fn @ emb.T
        dsims = probs.copy()
        dsims[:, class_idx] -= 1.0
        dsims /= provider.temperature * n
        d_feats = (dsims @ emb - (dsims * sims).sum(axis=1, keepdims=True) * fn) / norms
        dlogits = None
    feat_val, raw_taps = _feature_reg_terms(bundle, fp)
    bb_taps = {i: cfg.w_feat * t for (sec, i), t in raw_taps.items() if sec == "backbone"}
    bn_taps = {i: cfg.w_feat * t for (sec, i), t in raw_taps.items() if sec == "bottleneck"}
    dx = bundle.backward(fp, d_logits_pretrain=dlogits, d_features=d_feats,
                         backbone_taps=bb_taps or None,
                         bottleneck_taps=bn_taps or None)
    tv_val, tv_grad = _tv_value_grad(x)
    l2_val = float((x * x).sum() / x.shape[0])
    dx = dx + cfg.w_tv * tv_grad + cfg.w_l2 * 2.0 * x / x.shape[0]
    value = ce + cfg.w_tv * tv_val + cfg.w_l2 * l2_val + cfg.w_feat * feat_val
    return value, dx


def synthesize_class_images(bundle: ModelBundle, class_id, cfg: SynthesisConfig,
                            provider: TextEmbeddingProvider | None = None,
                            target_classes: list[str] | None = None,
                            return_history: bool = False):
    """Optimize ``images_per_class`` pixel tensors toward one class.

    Plain projected gradient descent on the synthesis objective, clamping
    pixels to [0, 1] after every accepted move and halving the step size
    whenever a candidate move would increase the loss (so the recorded
    loss history never increases).  The bundle is read-only throughout.
    """
    if provider is not None:
        if target_classes is None:
            raise ValidationError("provider mode needs the target class list")
        if class_id not in target_classes:
            raise LookupFailure(f"class {class_id!r} not in target classes")
        class_idx = target_classes.index(class_id)
        tag = f"clip:{class_id}"
    else:
        class_idx = _resolve_class(bundle, class_id)
        tag = f"head:{class_idx}"
    x = _init_images(bundle, cfg, tag)
    history = []
    if cfg.steps > 0:
        step = cfg.step_size
        value, grad = _loss_and_grad(bundle, x, class_idx, cfg, provider,
                                     target_classes)
        history.append(value)
        for _ in range(cfg.steps):
            candidate = np.clip(x - step * grad, 0.0, 1.0)
            cand_value, cand_grad = _loss_and_grad(bundle, candidate, class_idx,
                                                   cfg, provider, target_classes)
            if cand_value <= value:
                x, value, grad = candidate, cand_value, cand_grad
            else:
                step *= 0.5
            history.append(value)
    bundle.zero_grad()
    return (x, history) if return_history else x


def class_confidences(bundle: ModelBundle, images: np.ndarray,
                      class_idx: int) -> np.ndarray:
    """Pretrain-head softmax confidence of each image for one class."""
    logits = bundle.classify_pretrain(images)
    return np.exp(log_softmax(logits))[:, class_idx]


def write_synthesized_dataset(bundle: ModelBundle, class_ids, cfg: SynthesisConfig,
                              outdir, provider: TextEmbeddingProvider | None = None,
                              target_classes: list[str] | None = None) -> Path:
    """Synthesize every class into an image-folder tree plus a manifest.

    Images land in ``<outdir>/<class>/img_<k>.png`` (8-bit PNG, loadable
    with the image-folder reader); the manifest records the config and the
    per-image final confidence.
    """
    from PIL import Image

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"format = trida-synthesis-v1"]
    for key, val in asdict(cfg).items():
        lines.append(f"config.{key} = {val}")
    for class_id in class_ids:
        images = synthesize_class_images(bundle, class_id, cfg, provider,
                                         target_classes)
        if provider is None:
            conf = class_confidences(bundle, images, _resolve_class(bundle, class_id))
        else:
            feats = bundle.features(images)
            conf = clip_style_probability(feats, class_id, provider, target_classes)
        cdir = out / str(class_id)
        cdir.mkdir(exist_ok=True)
        for k, img in enumerate(images):
            arr = (np.clip(img, 0, 1) * 255.0).round().astype(np.uint8)
            Image.fromarray(arr.transpose(1, 2, 0)).save(cdir / f"img_{k:03d}.png")
            lines.append(f"confidence.{class_id}.img_{k:03d} = {conf[k]:.6f}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
