"""Experiment orchestration: configs, seeding, recipes, reports.

Recipes
-------
``sfuda_step1``   source fine-tuning (plus pre-training-head CE) from scratch,
                  checkpointing the source model.
``sfuda_step2``   source-free adaptation from a step-1 checkpoint: SHOT-style
                  baseline with per-epoch pseudo-label refresh, plus the
                  three-domain terms.
``uda``           joint adversarial adaptation over source/target/pretrain.
``noisy_probe``   pre-train on the pre-training domain, then fine-tune with
                  partly corrupted labels while tracking diagnostics.
``synthesize``    batch model-inversion synthesis from a frozen checkpoint.

Every stochastic component draws from its own seeded stream, so toggling
one loss never perturbs the others' randomness; with all three-domain
terms disabled the step-2/uda loops are bit-identical to the bare
baselines.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from trida import nn
from trida.baselines import (AdversarialUDALoss, ShotLikeLoss, SourceLoss,
                             evaluate_accuracy)
from trida.data import (LabeledDataset, ToyBenchmarkSpec, generate_toy_benchmark,
                        load_image_folder, rng_for)
from trida.diagnostics import (DiagnosticsConfig, DiagnosticsRecord,
                               noisy_label_probe, render_metric_charts,
                               track_epoch, write_diagnostics_csv)
from trida.errors import TridaError, ValidationError
from trida.model import BundleConfig, ModelBundle
from trida.objectives import (TriDAConfig, loss_pretrain, mix_batch,
                              objective_sfuda_step1, objective_sfuda_step2,
                              objective_uda, sample_lambda)
from trida.synthesis import SynthesisConfig, write_synthesized_dataset
from trida.taxonomy import (build_pretrain_subset, export_selection_csv,
                            load_taxonomy, select_pretrain_classes)

RECIPES = ("uda", "sfuda_step1", "sfuda_step2", "noisy_probe", "synthesize")


class RuntimeFailure(TridaError):
    """Unrecoverable failure during a run (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    lr_backbone: float = 1e-3
    lr_new: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    schedule: str = "poly"  # poly | constant

    def __post_init__(self):
        if self.lr_backbone <= 0 or self.lr_new <= 0:
            raise ValidationError("learning rates must be > 0")
        if self.schedule not in ("poly", "constant"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")


def visda_optimizer() -> OptimizerConfig:
    """Preset with every rate at 1e-3 (large-benchmark override)."""
    return OptimizerConfig(lr_backbone=1e-3, lr_new=1e-3)


def learning_rate_schedule(base_lr: float, step: int, total_steps: int,
                           kind: str = "poly", gamma: float = 10.0,
                           power: float = 0.75) -> float:
    """``base_lr * (1 + gamma p)^(-power)`` with ``p = step/total_steps``."""
    if kind == "constant":
        return base_lr
    p = step / max(total_steps, 1)
    return base_lr * (1.0 + gamma * p) ** (-power)


@dataclass
class ModelConfig:
    """RunConfig's slice of the bundle architecture."""

    backbone: str = "smallconv"
    conv_channels: tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 256
    activation: str = "relu"
    weight_norm_head: bool = False
    pretrained_backbone: bool = False


@dataclass
class RunConfig:
    recipe: str = "sfuda_step1"
    output_dir: str = "runs/out"
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    # data: either an image-folder root with source/ target/ pretrain/, or toy
    data_dir: str | None = None
    # image-folder override for the pretrain domain only (e.g. synthesized)
    pretrain_dir: str | None = None
    toy: ToyBenchmarkSpec = field(default_factory=ToyBenchmarkSpec)
    # pre-training class selection (None tau = use the full pretrain set)
    selection_tau: float | None = None
    per_class_cap: int | None = None
    taxonomy: str = "builtin:toy"
    # losses
    trida: TriDAConfig = field(default_factory=TriDAConfig)
    smoothing: float = 0.1
    w_pl: float = 0.3
    # source-free step 2 adapts the extractor only (SHOT lineage)
    freeze_target_head_step2: bool = True
    rev_coeff: float = 1.0
    disc_hidden: int = 32
    # optimization
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    # step-2 / synthesis input
    checkpoint: str | None = None
    # pre-training phase before sfuda_step1/uda (toy stand-in for loading an
    # externally pre-trained backbone; 0 skips it)
    init_pretrain_epochs: int = 0
    # probe
    noise_fraction: float = 0.5
    probe_use_pretrain_loss: bool = False
    probe_pretrain_epochs: int = 8
    # synthesis
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    repeats: int = 1

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ValidationError(f"unknown recipe {self.recipe!r}; "
                                  f"choose from {RECIPES}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValidationError("epochs must be >= 0 and batch_size > 0")
        if self.recipe in ("sfuda_step2", "synthesize") and not self.checkpoint:
            raise ValidationError(f"recipe {self.recipe!r} needs --checkpoint")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


# -- key-value config files and environment overrides -----------------------

ENV_PREFIX = "TRIDA_"


def _set_dotted(cfg, dotted: str, raw: str) -> None:
    obj = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ValidationError(f"unknown config section {part!r} in {dotted!r}")
        obj = getattr(obj, part)
    name = parts[-1]
    if not dataclasses.is_dataclass(obj) or name not in {
            f.name for f in dataclasses.fields(obj)}:
        raise ValidationError(f"unknown config key {dotted!r}")
    current = getattr(obj, name)
    raw = raw.strip()
    if raw.lower() in ("none", "null"):
        value = None
    elif isinstance(current, bool):
        value = raw.lower() in ("1", "true", "yes", "on")
    elif isinstance(current, int) and not isinstance(current, bool):
        value = int(raw)
    elif isinstance(current, float):
        value = float(raw)
    elif isinstance(current, tuple):
        value = tuple(int(tok) for tok in raw.replace(",", " ").split())
    elif current is None:
        # untyped optional: guess float for numerics, else string
        try:
            value = float(raw) if "." in raw or "e" in raw.lower() else int(raw)
        except ValueError:
            value = raw
    else:
        value = raw
    setattr(obj, name, value)


def parse_kv_file(path) -> dict[str, str]:
    kv = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    return kv


def config_from_kv(kv: dict[str, str], environ: dict[str, str] | None = None) -> RunConfig:
    """Build a RunConfig from dotted key-value pairs, then apply environment
    overrides (``TRIDA_SECTION__KEY`` maps to ``section.key``)."""
    cfg = RunConfig.__new__(RunConfig)
    for f in dataclasses.fields(RunConfig):
        if f.default is not dataclasses.MISSING:
            setattr(cfg, f.name, f.default)
        else:
            setattr(cfg, f.name, f.default_factory())
    for key, value in kv.items():
        _set_dotted(cfg, key, value)
    if environ:
        for key, value in environ.items():
            if key.startswith(ENV_PREFIX):
                dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
                _set_dotted(cfg, dotted, value)
    cfg.__post_init__()
    return cfg


def config_snapshot(config: RunConfig) -> str:
    """Flat ``key = value`` dump of the resolved config."""
    lines = []

    def walk(prefix, obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if dataclasses.is_dataclass(val) and not isinstance(val, type):
                walk(f"{prefix}{f.name}.", val)
            elif isinstance(val, dict):
                lines.append(f"{prefix}{f.name} = {json.dumps(val, default=str)}")
            else:
                lines.append(f"{prefix}{f.name} = {val}")

    walk("", config)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    recipe: str
    seed: int
    config_hash: str
    run_id: str
    records: list[DiagnosticsRecord]
    loss_series: list[dict]
    final_accuracy: dict[str, float]
    checkpoint_path: str | None = None
    stripped_checkpoint_path: str | None = None
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def content_hash(self) -> str:
        payload = {
            "recipe": self.recipe, "seed": self.seed,
            "config_hash": self.config_hash,
            "records": [asdict(r) for r in self.records],
            "loss_series": self.loss_series,
            "final_accuracy": self.final_accuracy,
            "extra": {k: v for k, v in self.extra.items() if k != "paths"},
        }
        blob = json.dumps(payload, sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_json(self) -> str:
        payload = asdict(self)
        payload["records"] = [asdict(r) for r in self.records]
        return json.dumps(payload, indent=1, default=str)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        payload = json.loads(text)
        payload["records"] = [DiagnosticsRecord(**r) for r in payload["records"]]
        return cls(**payload)


def export_report(report: RunReport, output_dir, config: RunConfig | None = None
                  ) -> list[str]:
    """Write CSVs, per-metric charts, and a config snapshot; returns paths."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rid = report.run_id
    written = []
    diag_path = out / f"diag_{rid}.csv"
    write_diagnostics_csv(report.records, diag_path)
    written.append(str(diag_path))
    if report.loss_series:
        loss_path = out / f"losses_{rid}.csv"
        keys = list(report.loss_series[0])
        with open(loss_path, "w", newline="") as fh:
            fh.write(",".join(keys) + "\n")
            for row in report.loss_series:
                fh.write(",".join(f"{row[k]:.10g}" if isinstance(row[k], float)
                                  else str(row[k]) for k in keys) + "\n")
        written.append(str(loss_path))
    if config is not None:
        snap = out / f"config_{rid}.txt"
        snap.write_text(config_snapshot(config))
        written.append(str(snap))
    if report.records:
        written += render_metric_charts(report.records, out, rid)
    report_path = out / f"report_{rid}.json"
    report_path.write_text(report.to_json())
    written.append(str(report_path))
    return written


# ---------------------------------------------------------------------------
# shared training plumbing
# ---------------------------------------------------------------------------


def _load_datasets(config: RunConfig) -> dict[str, LabeledDataset]:
    if config.data_dir:
        root = Path(config.data_dir)
        datasets = {role: load_image_folder(root / role, role,
                                            image_side=config.toy.image_side)
                    for role in ("source", "target", "pretrain")}
    else:
        source, target, pretrain = generate_toy_benchmark(config.toy)
        datasets = {"source": source, "target": target, "pretrain": pretrain}
    if config.pretrain_dir:
        datasets["pretrain"] = load_image_folder(
            config.pretrain_dir, "pretrain", image_side=config.toy.image_side)
    return datasets


def _apply_selection(config: RunConfig, datasets: dict) -> tuple[LabeledDataset, dict]:
    pretrain = datasets["pretrain"]
    info = {"selection_tau": config.selection_tau,
            "n_pretrain_classes_total": pretrain.n_classes}
    if config.selection_tau is None:
        if config.per_class_cap is not None:
            keep = []
            for ci in range(pretrain.n_classes):
                keep.extend(np.flatnonzero(pretrain.labels == ci)[:config.per_class_cap])
            pretrain = pretrain.subset(np.sort(np.asarray(keep)))
        info["n_pretrain_classes_selected"] = pretrain.n_classes
        return pretrain, info
    tax = load_taxonomy(config.taxonomy)
    selection = select_pretrain_classes(tax, pretrain.class_set,
                                        datasets["target"].class_set,
                                        config.selection_tau)
    subset = build_pretrain_subset(pretrain, selection, config.per_class_cap)
    info["n_pretrain_classes_selected"] = len(selection.selected)
    info["selected_classes"] = list(selection.selected)
    info["_selection"] = selection
    return subset, info


def _build_bundle(config: RunConfig, datasets, pretrain_used,
                  init_pretrained: bool = False) -> ModelBundle:
    m = config.model
    bc = BundleConfig(
        n_target_classes=datasets["source"].n_classes,
        n_pretrain_classes=pretrain_used.n_classes,
        backbone=m.backbone, in_channels=3, image_side=config.toy.image_side,
        conv_channels=tuple(m.conv_channels), feature_dim=m.feature_dim,
        activation=m.activation, weight_norm_head=m.weight_norm_head,
        pretrained_backbone=m.pretrained_backbone or init_pretrained,
        seed=config.seed)
    return ModelBundle(bc, target_classes=datasets["source"].class_set,
                       pretrain_classes=pretrain_used.class_set)


def _init_pretrain_phase(config: RunConfig, bundle: ModelBundle,
                         pretrain_used) -> None:
    """Fit f and the pre-training head on the pre-training domain first, so
    the adaptation recipes start from a genuinely pre-trained model."""
    if config.init_pretrain_epochs <= 0:
        return
    phase_seed = int(rng_for(config.seed, "init-pretrain").integers(2 ** 31))
    pretrain_bundle(bundle, pretrain_used, config.init_pretrain_epochs,
                    config.batch_size, phase_seed,
                    lr=config.optimizer.lr_new,
                    momentum=config.optimizer.momentum,
                    weight_decay=config.optimizer.weight_decay)


def _make_optimizer(bundle: ModelBundle, config: RunConfig,
                    extra_new_params=None, freeze_prefixes=()) -> nn.SGD:
    groups = bundle.parameter_groups()
    pairs = {name: [(p, g) for pname, p, g in params
                    if not pname.startswith(tuple(freeze_prefixes))]
             for name, params in groups.items()}
    pairs = {name: lst for name, lst in pairs.items() if lst}
    if extra_new_params:
        pairs.setdefault("new", []).extend((p, g) for _, p, g in extra_new_params)
    lrs = {name: (config.optimizer.lr_backbone if name == "backbone"
                  else config.optimizer.lr_new) for name in pairs}
    return nn.SGD(pairs, lrs, config.optimizer.momentum,
                  config.optimizer.weight_decay)


def _driven_stream(driver: LabeledDataset, followers: dict[str, LabeledDataset],
                   batch_size: int, seed: int):
    """Epoch over the driver dataset; each follower is reshuffled and cycled
    independently so enabling a follower never changes the others' order."""
    order = rng_for(seed, "pair", "big").permutation(len(driver))
    steps = math.ceil(len(driver) / batch_size)
    cycles = {}
    for name, ds in followers.items():
        def gen(n=len(ds), r=rng_for(seed, "follow", name)):
            while True:
                yield from r.permutation(n)
        cycles[name] = gen()
    for s in range(steps):
        idx = order[s * batch_size:(s + 1) * batch_size]
        out = {"driver": driver.batch(idx)}
        for name, ds in followers.items():
            take = np.fromiter(cycles[name], dtype=np.int64, count=len(idx))
            out[name] = ds.batch(take)
        yield out


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(rng_for(seed, "epoch", str(epoch)).integers(2 ** 31))


class _Trainer:
    """Step bookkeeping shared by the three training recipes."""

    def __init__(self, config: RunConfig, bundle: ModelBundle, optimizer: nn.SGD,
                 total_steps: int, out: Path | None = None):
        self.config = config
        self.bundle = bundle
        self.optimizer = optimizer
        self.total_steps = total_steps
        self.global_step = 0
        self.loss_series: list[dict] = []
        self.out = out
        self.last_good: str | None = None

    def checkpoint_epoch(self) -> None:
        if self.out is not None:
            path = self.out / "checkpoint_last_good.npz"
            self.bundle.save_checkpoint(path)
            self.last_good = str(path)

    def step(self, epoch: int, breakdown: dict) -> None:
        if not np.isfinite(breakdown["total"]):
            raise RuntimeFailure(
                f"non-finite loss at step {self.global_step}; "
                f"last good checkpoint: {self.last_good or 'none saved yet'}")
        decay = learning_rate_schedule(1.0, self.global_step, self.total_steps,
                                       self.config.optimizer.schedule)
        self.optimizer.step(decay)
        row = {"step": self.global_step, "epoch": epoch}
        row.update({k: float(v) for k, v in breakdown.items()})
        self.loss_series.append(row)
        self.global_step += 1


def pretrain_bundle(bundle: ModelBundle, pretrain: LabeledDataset, epochs: int,
                    batch_size: int, seed: int, lr: float = 1e-2,
                    momentum: float = 0.9, weight_decay: float = 1e-3) -> None:
    """Fit the extractor and pre-training head on the pre-training domain
    (builds the toy stand-in for an externally pre-trained model)."""
    groups = bundle.parameter_groups()
    opt = nn.SGD({n: [(p, g) for _, p, g in ps] for n, ps in groups.items()},
                 {n: lr for n in groups}, momentum, weight_decay)
    steps_per = math.ceil(len(pretrain) / batch_size)
    total = epochs * steps_per
    step = 0
    for epoch in range(epochs):
        order = rng_for(_epoch_seed(seed, epoch), "pair", "big").permutation(len(pretrain))
        for s in range(steps_per):
            batch = pretrain.batch(order[s * batch_size:(s + 1) * batch_size])
            bundle.zero_grad()
            loss_pretrain(bundle, batch.images, batch.labels, train=True,
                          backward_scale=1.0)
            opt.step(learning_rate_schedule(1.0, step, total))
            step += 1


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


def _run_sfuda_step1(config: RunConfig, out: Path) -> RunReport:
    datasets = _load_datasets(config)
    pretrain_used, sel_info = _apply_selection(config, datasets)
    bundle = _build_bundle(config, datasets, pretrain_used,
                           init_pretrained=config.init_pretrain_epochs > 0)
    _init_pretrain_phase(config, bundle, pretrain_used)
    optimizer = _make_optimizer(bundle, config)
    steps_per = math.ceil(len(datasets["source"]) / config.batch_size)
    trainer = _Trainer(config, bundle, optimizer, config.epochs * steps_per, out)
    source_loss = SourceLoss(config.smoothing)
    track = {"source": datasets["source"], "target": datasets["target"],
             "pretrain": pretrain_used}
    records = [track_epoch(bundle, track, config.diagnostics, epoch=0)]
    followers = ({"pretrain": pretrain_used}
                 if config.trida.use_pretrain_loss else {})
    for epoch in range(1, config.epochs + 1):
        for batches in _driven_stream(datasets["source"], followers,
                                      config.batch_size,
                                      _epoch_seed(config.seed, epoch)):
            bundle.zero_grad()
            _, breakdown = objective_sfuda_step1(
                bundle, batches["driver"], batches.get("pretrain"),
                config.trida, source_loss, train=True, backward_scale=1.0)
            trainer.step(epoch, breakdown)
        records.append(track_epoch(bundle, track, config.diagnostics, epoch=epoch))
        trainer.checkpoint_epoch()
    ckpt = out / "checkpoint_step1.npz"
    bundle.save_checkpoint(ckpt, {"recipe": "sfuda_step1"})
    stripped = out / "checkpoint_step1_stripped.npz"
    bundle.strip_pretrain_head().save_checkpoint(stripped,
                                                 {"recipe": "sfuda_step1"})
    return RunReport(
        recipe="sfuda_step1", seed=config.seed, config_hash=config.config_hash(),
        run_id=f"sfuda1_{config.config_hash()}", records=records,
        loss_series=trainer.loss_series,
        final_accuracy={"source": records[-1].acc_source,
                        "target": records[-1].acc_target},
        checkpoint_path=str(ckpt), stripped_checkpoint_path=str(stripped),
        extra={k: v for k, v in sel_info.items() if not k.startswith("_")})


def _run_sfuda_step2(config: RunConfig, out: Path) -> RunReport:
    ckpt_in = Path(config.checkpoint)
    if not ckpt_in.is_file():
        raise ValidationError(f"step-2 checkpoint not found: {ckpt_in}")
    datasets = _load_datasets(config)
    pretrain_used, sel_info = _apply_selection(config, datasets)
    bundle = ModelBundle.load_checkpoint(ckpt_in)
    uses_pretrain_data = config.trida.use_pretrain_loss or config.trida.any_mixing
    if bundle.head_pretrain is None and uses_pretrain_data:
        raise ValidationError("checkpoint has no pretrain head but "
                              "three-domain losses are enabled")
    if uses_pretrain_data:
        head_dim = bundle.head_pretrain.params["weight"].shape[1]
        if head_dim != pretrain_used.n_classes:
            raise ValidationError(
                f"pretrain head covers {head_dim} classes but the selected "
                f"pretrain set has {pretrain_used.n_classes}; align the "
                "selection settings with step 1")
    freeze = ("head.",) if config.freeze_target_head_step2 else ()
    optimizer = _make_optimizer(bundle, config, freeze_prefixes=freeze)
    baseline = ShotLikeLoss(config.w_pl)
    steps_per = math.ceil(len(datasets["target"]) / config.batch_size)
    trainer = _Trainer(config, bundle, optimizer, config.epochs * steps_per, out)
    track = {"source": datasets["source"], "target": datasets["target"],
             "pretrain": pretrain_used}
    records = [track_epoch(bundle, track, config.diagnostics, epoch=0)]
    followers = {"pretrain": pretrain_used} if uses_pretrain_data else {}
    lam_rng = rng_for(config.seed, "lambda")
    for epoch in range(1, config.epochs + 1):
        baseline.refresh(bundle, datasets["target"], epoch)
        for batches in _driven_stream(datasets["target"], followers,
                                      config.batch_size,
                                      _epoch_seed(config.seed, epoch)):
            tgt, pre = batches["driver"], batches.get("pretrain")
            mixed = None
            if config.trida.any_mixing:
                lam = sample_lambda(config.trida.alpha, lam_rng)
                mixed = mix_batch(pre.images, pre.labels, tgt.images,
                                  baseline.batch_pseudo_labels(tgt), lam)
            bundle.zero_grad()
            _, breakdown = objective_sfuda_step2(
                bundle, tgt, pre if config.trida.use_pretrain_loss else None,
                mixed, baseline, config.trida, train=True, backward_scale=1.0)
            trainer.step(epoch, breakdown)
        records.append(track_epoch(bundle, track, config.diagnostics, epoch=epoch))
        trainer.checkpoint_epoch()
    ckpt = out / "checkpoint_step2.npz"
    bundle.save_checkpoint(ckpt, {"recipe": "sfuda_step2"})
    stripped = out / "checkpoint_step2_stripped.npz"
    bundle.strip_pretrain_head().save_checkpoint(stripped,
                                                 {"recipe": "sfuda_step2"})
    return RunReport(
        recipe="sfuda_step2", seed=config.seed, config_hash=config.config_hash(),
        run_id=f"sfuda2_{config.config_hash()}", records=records,
        loss_series=trainer.loss_series,
        final_accuracy={"source": records[-1].acc_source,
                        "target": records[-1].acc_target},
        checkpoint_path=str(ckpt), stripped_checkpoint_path=str(stripped),
        extra={k: v for k, v in sel_info.items() if not k.startswith("_")})


def _run_uda(config: RunConfig, out: Path) -> RunReport:
    datasets = _load_datasets(config)
    pretrain_used, sel_info = _apply_selection(config, datasets)
    bundle = _build_bundle(config, datasets, pretrain_used,
                           init_pretrained=config.init_pretrain_epochs > 0)
    _init_pretrain_phase(config, bundle, pretrain_used)
    adv = AdversarialUDALoss(bundle.feature_dim, config.disc_hidden,
                             config.rev_coeff,
                             seed=int(rng_for(config.seed, "disc").integers(2 ** 31)))
    optimizer = _make_optimizer(bundle, config, list(adv.named_params()))
    source_loss = SourceLoss(config.smoothing)
    baseline_pl = ShotLikeLoss(config.w_pl)  # pseudo-labels for the mixed batches
    steps_per = math.ceil(len(datasets["source"]) / config.batch_size)
    trainer = _Trainer(config, bundle, optimizer, config.epochs * steps_per, out)
    track = {"source": datasets["source"], "target": datasets["target"],
             "pretrain": pretrain_used}
    records = [track_epoch(bundle, track, config.diagnostics, epoch=0)]
    uses_pretrain = config.trida.use_pretrain_loss or config.trida.any_mixing
    followers = {"target": datasets["target"]}
    if uses_pretrain:
        followers["pretrain"] = pretrain_used
    lam_rng = rng_for(config.seed, "lambda")
    for epoch in range(1, config.epochs + 1):
        if config.trida.any_mixing:
            baseline_pl.refresh(bundle, datasets["target"], epoch)
        for batches in _driven_stream(datasets["source"], followers,
                                      config.batch_size,
                                      _epoch_seed(config.seed, epoch)):
            src, tgt = batches["driver"], batches["target"]
            pre = batches.get("pretrain")
            mixed = None
            if config.trida.any_mixing:
                lam = sample_lambda(config.trida.alpha, lam_rng)
                mixed = mix_batch(pre.images, pre.labels, tgt.images,
                                  baseline_pl.batch_pseudo_labels(tgt), lam)
            bundle.zero_grad()
            adv.zero_grad()
            _, breakdown = objective_uda(
                bundle, src, tgt, pre if config.trida.use_pretrain_loss else None,
                mixed, adv, source_loss, config.trida, train=True,
                backward_scale=1.0)
            trainer.step(epoch, breakdown)
        records.append(track_epoch(bundle, track, config.diagnostics, epoch=epoch))
        trainer.checkpoint_epoch()
    ckpt = out / "checkpoint_uda.npz"
    bundle.save_checkpoint(ckpt, {"recipe": "uda"})
    stripped = out / "checkpoint_uda_stripped.npz"
    bundle.strip_pretrain_head().save_checkpoint(stripped, {"recipe": "uda"})
    return RunReport(
        recipe="uda", seed=config.seed, config_hash=config.config_hash(),
        run_id=f"uda_{config.config_hash()}", records=records,
        loss_series=trainer.loss_series,
        final_accuracy={"source": records[-1].acc_source,
                        "target": records[-1].acc_target},
        checkpoint_path=str(ckpt), stripped_checkpoint_path=str(stripped),
        extra={k: v for k, v in sel_info.items() if not k.startswith("_")})


def _run_noisy_probe(config: RunConfig, out: Path) -> RunReport:
    datasets = _load_datasets(config)
    pretrain_used, sel_info = _apply_selection(config, datasets)
    bundle = _build_bundle(config, datasets, pretrain_used)
    pretrain_bundle(bundle, pretrain_used, config.probe_pretrain_epochs,
                    config.batch_size, config.seed,
                    lr=config.optimizer.lr_new,
                    momentum=config.optimizer.momentum,
                    weight_decay=config.optimizer.weight_decay)
    track = {"source": datasets["source"], "target": datasets["target"],
             "pretrain": pretrain_used}
    records = noisy_label_probe(
        bundle, datasets["source"], config.noise_fraction, config.epochs,
        config.seed, track_datasets=track,
        pretrain_dataset=pretrain_used if config.probe_use_pretrain_loss else None,
        use_pretrain_loss=config.probe_use_pretrain_loss,
        batch_size=config.batch_size, lr=config.optimizer.lr_new,
        momentum=config.optimizer.momentum,
        weight_decay=config.optimizer.weight_decay,
        diag_cfg=config.diagnostics)
    return RunReport(
        recipe="noisy_probe", seed=config.seed, config_hash=config.config_hash(),
        run_id=f"probe_{config.config_hash()}", records=records,
        loss_series=[],
        final_accuracy={"source": records[-1].acc_source,
                        "target": records[-1].acc_target},
        extra={**{k: v for k, v in sel_info.items() if not k.startswith("_")},
               "noise_fraction": config.noise_fraction,
               "use_pretrain_loss": config.probe_use_pretrain_loss})


def _run_synthesize(config: RunConfig, out: Path) -> RunReport:
    ckpt_in = Path(config.checkpoint)
    if not ckpt_in.is_file():
        raise ValidationError(f"synthesis checkpoint not found: {ckpt_in}")
    bundle = ModelBundle.load_checkpoint(ckpt_in)
    if bundle.head_pretrain is None:
        raise ValidationError("checkpoint has no pretrain head to invert")
    classes = bundle.pretrain_classes or list(range(
        bundle.head_pretrain.params["weight"].shape[1]))
    manifest = write_synthesized_dataset(bundle, classes, config.synthesis,
                                         out / "synthesized")
    return RunReport(
        recipe="synthesize", seed=config.seed, config_hash=config.config_hash(),
        run_id=f"synth_{config.config_hash()}", records=[], loss_series=[],
        final_accuracy={},
        extra={"manifest": str(manifest), "classes": [str(c) for c in classes]})


_RECIPE_RUNNERS = {
    "sfuda_step1": _run_sfuda_step1,
    "sfuda_step2": _run_sfuda_step2,
    "uda": _run_uda,
    "noisy_probe": _run_noisy_probe,
    "synthesize": _run_synthesize,
}


def run(config: RunConfig) -> RunReport:
    """Execute one recipe end to end and export its report files."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    report = _RECIPE_RUNNERS[config.recipe](config, out)
    report.wall_clock = time.perf_counter() - start
    export_report(report, out, config)
    return report


def run_repeated(config: RunConfig) -> list[RunReport]:
    """Run ``config.repeats`` seeds (seed, seed+1, ...) and write a summary."""
    reports = []
    for k in range(config.repeats):
        sub = dataclasses.replace(config, seed=config.seed + k,
                                  output_dir=str(Path(config.output_dir) / f"seed{config.seed + k}"))
        reports.append(run(sub))
    if config.repeats > 1 and reports[0].final_accuracy:
        accs = [r.final_accuracy.get("target", float("nan")) for r in reports]
        summary = {"seeds": [r.seed for r in reports],
                   "target_accuracy": accs,
                   "mean_target_accuracy": float(np.mean(accs)),
                   "std_target_accuracy": float(np.std(accs))}
        Path(config.output_dir, "summary.json").write_text(
            json.dumps(summary, indent=1))
    return reports
