"""Network triple: shared feature extractor, target head, pre-training head.

The extractor ``f`` is a backbone (small conv stack, or flatten/linear
stubs for tests) followed by an optional fully-connected bottleneck with
batch normalization.  Two linear heads consume the same features: ``h``
for the target label space and a removable ``h_p`` for the pre-training
label space.  Stripping ``h_p`` leaves the target path bit-identical.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from trida import nn
from trida.errors import ValidationError

CHECKPOINT_FORMAT = "trida-checkpoint-v1"


@dataclass
class BundleConfig:
    n_target_classes: int
    n_pretrain_classes: int | None = None
    backbone: str = "smallconv"  # smallconv | linear | identity
    in_channels: int = 3
    image_side: int = 32
    conv_channels: tuple[int, ...] = (16, 32, 64)
    backbone_dim: int = 64  # linear-backbone output width
    feature_dim: int = 256  # bottleneck width
    use_bottleneck: bool = True
    activation: str = "relu"  # relu | tanh
    weight_norm_head: bool = False
    pretrained_backbone: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_target_classes < 2:
            raise ValidationError("need at least 2 target classes")
        if self.backbone not in ("smallconv", "linear", "identity"):
            raise ValidationError(f"unknown backbone {self.backbone!r}")
        if self.activation not in ("relu", "tanh"):
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.backbone == "smallconv":
            down = 2 ** len(self.conv_channels)
            if self.image_side % down:
                raise ValidationError(
                    f"image side {self.image_side} not divisible by {down}")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ForwardPass:
    """Caches from one extractor pass plus any head activations."""

    features: np.ndarray
    logits_target: np.ndarray | None
    logits_pretrain: np.ndarray | None
    backbone_caches: list
    bottleneck_caches: list | None
    head_cache: object = None
    head_pretrain_cache: object = None


def _activation(kind: str) -> nn.Layer:
    return nn.ReLU() if kind == "relu" else nn.Tanh()


class ModelBundle:
    """Feature extractor plus target and (optional) pre-training heads."""

    def __init__(self, config: BundleConfig,
                 target_classes: list[str] | None = None,
                 pretrain_classes: list[str] | None = None):
        self.config = config
        self.target_classes = list(target_classes) if target_classes else None
        self.pretrain_classes = list(pretrain_classes) if pretrain_classes else None
        rng = np.random.default_rng(config.seed)

        side, c = config.image_side, config.in_channels
        layers: list[nn.Layer] = []
        if config.backbone == "smallconv":
            for c_out in config.conv_channels:
                layers += [nn.Conv2d(c, c_out, 3, 1, rng), nn.BatchNorm2d(c_out),
                           _activation(config.activation), nn.AvgPool2d()]
                c, side = c_out, side // 2
            layers.append(nn.Flatten())
            backbone_dim = c * side * side
        elif config.backbone == "linear":
            layers += [nn.Flatten(),
                       nn.Linear(c * side * side, config.backbone_dim, rng)]
            backbone_dim = config.backbone_dim
        else:  # identity: features are the flattened input
            layers.append(nn.Flatten())
            backbone_dim = c * side * side
        self.backbone = nn.Sequential(layers)

        if config.use_bottleneck:
            self.bottleneck = nn.Sequential([
                nn.Linear(backbone_dim, config.feature_dim, rng),
                nn.BatchNorm1d(config.feature_dim)])
            self.feature_dim = config.feature_dim
        else:
            self.bottleneck = None
            self.feature_dim = backbone_dim

        head_cls = nn.WeightNormLinear if config.weight_norm_head else nn.Linear
        self.head = head_cls(self.feature_dim, config.n_target_classes, rng)
        if config.n_pretrain_classes:
            self.head_pretrain: nn.Layer | None = nn.Linear(
                self.feature_dim, config.n_pretrain_classes, rng)
        else:
            self.head_pretrain = None

    # -- forward / backward -------------------------------------------------

    def _check_images(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c, s = self.config.in_channels, self.config.image_side
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ValidationError(
                f"expected images shaped (N, {c}, {s}, {s}), got {x.shape}")
        return x

    def forward(self, x: np.ndarray, train: bool = False,
                with_target: bool = False, with_pretrain: bool = False) -> ForwardPass:
        x = self._check_images(x)
        feats, bb_caches = self.backbone.forward(x, train)
        if self.bottleneck is not None:
            feats, bn_caches = self.bottleneck.forward(feats, train)
        else:
            bn_caches = None
        fp = ForwardPass(feats, None, None, bb_caches, bn_caches)
        if with_target:
            fp.logits_target, fp.head_cache = self.head.forward(feats, train)
        if with_pretrain:
            if self.head_pretrain is None:
                raise ValidationError("pretrain head removed")
            fp.logits_pretrain, fp.head_pretrain_cache = \
                self.head_pretrain.forward(feats, train)
        return fp

    def backward(self, fp: ForwardPass,
                 d_logits_target: np.ndarray | None = None,
                 d_logits_pretrain: np.ndarray | None = None,
                 d_features: np.ndarray | None = None,
                 backbone_taps: dict[int, np.ndarray] | None = None,
                 bottleneck_taps: dict[int, np.ndarray] | None = None) -> np.ndarray:
        """Accumulate parameter gradients; returns the input-image gradient."""
        df = np.zeros_like(fp.features)
        if d_features is not None:
            df += d_features
        if d_logits_target is not None:
            if fp.head_cache is None:
                raise ValidationError("target head was not run in this pass")
            df += self.head.backward(d_logits_target, fp.head_cache)
        if d_logits_pretrain is not None:
            if fp.head_pretrain_cache is None:
                raise ValidationError("pretrain head was not run in this pass")
            df += self.head_pretrain.backward(d_logits_pretrain, fp.head_pretrain_cache)
        if self.bottleneck is not None:
            df = self.bottleneck.backward(df, fp.bottleneck_caches, bottleneck_taps)
        return self.backbone.backward(df, fp.backbone_caches, backbone_taps)

    # -- convenience wrappers ----------------------------------------------

    def features(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train).features

    def classify_target(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train, with_target=True).logits_target

    def classify_pretrain(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train, with_pretrain=True).logits_pretrain

    def classify_joint(self, x: np.ndarray, train: bool = False):
        """Both heads from one extractor pass: (target logits, pretrain logits)."""
        fp = self.forward(x, train, with_target=True, with_pretrain=True)
        return fp.logits_target, fp.logits_pretrain

    # -- parameters ----------------------------------------------------------

    def _sections(self):
        yield "backbone", self.backbone
        if self.bottleneck is not None:
            yield "bottleneck", self.bottleneck
        yield "head", nn.Sequential([self.head])
        if self.head_pretrain is not None:
            yield "head_pretrain", nn.Sequential([self.head_pretrain])

    def named_params(self):
        for section, seq in self._sections():
            yield from seq.named_params(prefix=f"{section}.")

    def zero_grad(self) -> None:
        self.backbone.zero_grad()
        if self.bottleneck is not None:
            self.bottleneck.zero_grad()
        self.head.zero_grad()
        if self.head_pretrain is not None:
            self.head_pretrain.zero_grad()

    def parameter_groups(self) -> dict[str, list[tuple[str, np.ndarray, np.ndarray]]]:
        """Disjoint, exhaustive split of trainable parameters by learning-rate
        group.  Backbone weights go to ``backbone`` only when the config marks
        them as externally pre-trained; everything else is ``new``.
        """
        groups: dict[str, list] = {"backbone": [], "new": []}
        for name, p, g in self.named_params():
            pretrained = (self.config.pretrained_backbone
                          and name.startswith("backbone."))
            groups["backbone" if pretrained else "new"].append((name, p, g))
        return {k: v for k, v in groups.items() if v}

    def n_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_params())

    # -- state ----------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p for name, p, _ in self.named_params()}
        for section, seq in self._sections():
            for name, b in seq.named_buffers(prefix=f"{section}."):
                state[name] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise ValidationError(f"checkpoint missing arrays: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValidationError(
                    f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def param_hash(self) -> str:
        state = self.state_dict()
        return nn.state_hash([state[k] for k in sorted(state)])

    def normalization_stats(self) -> list[dict]:
        """Read-only running mean/variance of every normalization layer in f."""
        out = []
        for section in ("backbone", "bottleneck"):
            seq = getattr(self, section)
            if seq is None:
                continue
            for i, layer in enumerate(seq.layers):
                if isinstance(layer, nn._BatchNorm):
                    out.append({"section": section, "index": i,
                                "mean": layer.buffers["running_mean"].copy(),
                                "var": layer.buffers["running_var"].copy()})
        return out

    def bn_sites(self) -> list[tuple[str, int, nn._BatchNorm]]:
        """(section, layer index, layer) for each normalization layer in f."""
        sites = []
        for section in ("backbone", "bottleneck"):
            seq = getattr(self, section)
            if seq is None:
                continue
            for i, layer in enumerate(seq.layers):
                if isinstance(layer, nn._BatchNorm):
                    sites.append((section, i, layer))
        return sites

    # -- head removal / persistence -------------------------------------------

    def strip_pretrain_head(self) -> "ModelBundle":
        """Deep copy without the pre-training head; target path is unchanged."""
        stripped = copy.deepcopy(self)
        stripped.head_pretrain = None
        return stripped

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def save_checkpoint(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "config_hash": self.config.config_hash(),
            "target_classes": self.target_classes,
            "pretrain_classes": self.pretrain_classes,
            "has_pretrain_head": self.head_pretrain is not None,
        }
        if extra_meta:
            meta.update(extra_meta)
        arrays = {f"state/{k}": v for k, v in self.state_dict().items()}
        np.savez(path, meta=json.dumps(meta, default=list), **arrays)

    @classmethod
    def load_checkpoint(cls, path) -> "ModelBundle":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValidationError(f"not a bundle checkpoint: {path}")
            cfg_dict = meta["config"]
            cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
            if not meta["has_pretrain_head"]:
                cfg_dict["n_pretrain_classes"] = None
            config = BundleConfig(**cfg_dict)
            bundle = cls(config, meta.get("target_classes"),
                         meta.get("pretrain_classes"))
            state = {k[len("state/"):]: data[k] for k in data.files
                     if k.startswith("state/")}
        bundle.load_state_dict(state)
        return bundle
