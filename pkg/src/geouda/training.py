"""Domain-adaptation training loop.

Each step draws one labeled source batch and one unlabeled target batch of the
same size. The source batch drives the class-weighted segmentation loss; both
batches drive the location head, whose targets are freshly noised coordinate
encodings built from patch metadata. The three loss terms are summed without
extra multipliers and reported separately so their additivity is checkable.

Target label maps are never read here: the batch type has no field for them
and evaluation alone opens the held-out files.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import class_balance as cb
from . import metrics as metrics_mod
from .data import GeoDataset, Patch, augment as augment_patch, four_crop, load_eval_label, random_crop, reassemble_quadrants
from .encoding import EncodingConfig, TimeStamp, circle_encode_time, encode_supervision_batch
from .network import (
    GeoHeadConfig,
    SegModel,
    SegNetConfig,
    TimeHeadConfig,
    backward_and_check,
    count_parameters,
    save_checkpoint,
)


@dataclass(frozen=True)
class ComponentFlags:
    """Which auxiliary components participate in training."""

    geo_mt: bool = True
    dcs: bool = True
    time_mt: bool = False


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 120
    learning_rate: float = 1e-4
    patience: int = 30
    seed: int = 0
    val_fraction: float = 0.1
    crop_size: int | None = None  # None: train on full network input size
    augment: bool = False
    components: ComponentFlags = ComponentFlags()
    network: SegNetConfig = SegNetConfig()
    encoding: EncodingConfig = EncodingConfig()
    geo_head: GeoHeadConfig = GeoHeadConfig()
    time_head: TimeHeadConfig = TimeHeadConfig()
    dcs: cb.DcsConfig | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs it)")
        if self.max_epochs <= 0 or self.learning_rate < 0:
            raise ValueError("max_epochs must be positive and learning_rate >= 0")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        # the location head regresses the coordinate encoding, sizes must agree
        if self.geo_head.out_dim != self.encoding.dim:
            object.__setattr__(
                self, "geo_head", replace(self.geo_head, out_dim=self.encoding.dim)
            )
        if self.dcs is None:
            object.__setattr__(
                self,
                "dcs",
                cb.DcsConfig(num_classes=self.network.num_classes - 1),
            )
        if self.dcs.num_classes != self.network.num_classes - 1:
            raise ValueError(
                f"dcs.num_classes ({self.dcs.num_classes}) must equal "
                f"network.num_classes - 1 ({self.network.num_classes - 1})"
            )


@dataclass(frozen=True)
class LossReport:
    """One step's loss decomposition; `total` is the exact sum of the terms."""

    l_seg: float
    l_coord_source: float
    l_coord_target: float
    total: float

    @classmethod
    def of(cls, l_seg: float, l_coord_source: float, l_coord_target: float) -> "LossReport":
        return cls(l_seg, l_coord_source, l_coord_target, l_seg + l_coord_source + l_coord_target)


@dataclass
class UdaBatch:
    """Tensors for one step. Target entries carry images and encodings only."""

    source_images: torch.Tensor  # (B, bands, H, W)
    source_labels: torch.Tensor  # (B, H, W) long
    source_coord: torch.Tensor  # (B, D)
    target_images: torch.Tensor
    target_coord: torch.Tensor
    source_time: torch.Tensor | None = None  # (B, 2*fields)
    target_time: torch.Tensor | None = None


@dataclass
class FitResult:
    model: SegModel
    optimizer: torch.optim.Optimizer
    history: list[dict]
    epochs_run: int
    best_epoch: int
    best_val_miou: float
    param_count: int


def coord_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all samples and all encoding components."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def _check_finite(value: torch.Tensor, name: str):
    if not torch.isfinite(value).all():
        raise RuntimeError(f"non-finite loss term: {name} = {value.item()}")


def build_model(cfg: TrainConfig) -> SegModel:
    """Model with exactly the heads the enabled components need."""
    geo_cfg = cfg.geo_head if cfg.components.geo_mt else None
    time_cfg = cfg.time_head if cfg.components.time_mt else None
    return SegModel(cfg.network, geo_cfg, time_cfg)


def train_step(
    model: SegModel,
    optimizer: torch.optim.Optimizer,
    dcs_state: cb.DcsState,
    batch: UdaBatch,
    cfg: TrainConfig,
) -> tuple[cb.DcsState, LossReport]:
    """One optimization step over a source batch and a target batch.

    The class-weight state advances once per source image, in batch order,
    before the batch's weighted loss is computed with the advanced state.
    """
    model.train()
    flags = cfg.components
    use_geo = flags.geo_mt and model.geo_head is not None
    use_time = flags.time_mt and model.time_head is not None

    z_s, skips_s = model.encode(batch.source_images)
    dec_s = model.decode_features(z_s, skips_s)
    probs = model.classify(dec_s)

    if flags.dcs:
        for i in range(batch.source_labels.shape[0]):
            label_np = batch.source_labels[i].numpy()
            if (label_np == cfg.dcs.ignore_index).all():
                continue  # degenerate crop: no update
            freq = cb.label_frequency(label_np, cfg.dcs)
            dcs_state = cb.update(dcs_state, cb.instantaneous_weights(freq, cfg.dcs), cfg.dcs)

    l_seg = cb.weighted_seg_loss_batch(
        probs.permute(0, 2, 3, 1), batch.source_labels, dcs_state, cfg.dcs
    )
    _check_finite(l_seg, "l_seg")

    l_cs: torch.Tensor | float = 0.0
    l_ct: torch.Tensor | float = 0.0
    if use_geo or use_time:
        need_dec = model.feature_source == "decoder"
        z_t, skips_t = model.encode(batch.target_images)
        dec_t = model.decode_features(z_t, skips_t) if need_dec else None
        if use_geo:
            l_cs = coord_loss(model.geo_head_forward(z_s, dec_s), batch.source_coord)
            l_ct = coord_loss(model.geo_head_forward(z_t, dec_t), batch.target_coord)
        if use_time:
            if batch.source_time is None or batch.target_time is None:
                raise ValueError("time component enabled but batch has no time encodings")
            l_cs = l_cs + coord_loss(model.time_head_forward(z_s, dec_s), batch.source_time)
            l_ct = l_ct + coord_loss(model.time_head_forward(z_t, dec_t), batch.target_time)
        _check_finite(l_cs, "l_coord_source")
        _check_finite(l_ct, "l_coord_target")

    total = l_seg + l_cs + l_ct
    optimizer.zero_grad(set_to_none=True)
    backward_and_check(total, model)
    optimizer.step()

    report = LossReport.of(
        float(l_seg.item()),
        float(l_cs.item()) if isinstance(l_cs, torch.Tensor) else 0.0,
        float(l_ct.item()) if isinstance(l_ct, torch.Tensor) else 0.0,
    )
    return dcs_state, report


def _prepare_patch(patch: Patch, size: int, rng: np.random.Generator, do_augment: bool) -> Patch:
    h = patch.image.shape[0]
    if size < h:
        patch = random_crop(patch, size, rng)
    elif size > h:
        raise ValueError(f"crop size {size} exceeds patch size {h}")
    if do_augment:
        patch = augment_patch(patch, rng)
    return patch


def _time_encodings(
    patches: Sequence[Patch], cfg: TrainConfig, rng: np.random.Generator
) -> torch.Tensor:
    th = cfg.time_head
    rows = [
        circle_encode_time(
            TimeStamp(p.meta.month, p.meta.hour),
            use_month=th.use_month,
            use_hour=th.use_hour,
            noise=th.noise,
            rng=rng,
        )
        for p in patches
    ]
    return torch.as_tensor(np.stack(rows), dtype=torch.float32)


def make_batch(
    source: Sequence[Patch],
    target: Sequence[Patch],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> UdaBatch:
    """Crop, augment, and encode one step's worth of patches.

    Supervision encodings are rebuilt here on every call, so coordinate noise
    is freshly drawn each step.
    """
    size = cfg.crop_size or cfg.network.input_size
    src = [_prepare_patch(p, size, rng, cfg.augment) for p in source]
    tgt = [_prepare_patch(p, size, rng, cfg.augment) for p in target]
    for p in src:
        if p.label is None:
            raise ValueError(f"source patch {p.meta.patch_id} has no label")

    def images(patches: Sequence[Patch]) -> torch.Tensor:
        stack = np.stack([p.image for p in patches]).transpose(0, 3, 1, 2)
        return torch.as_tensor(stack, dtype=torch.float32)

    def coords(patches: Sequence[Patch]) -> torch.Tensor:
        raw = np.array([[p.meta.centroid_lon_m, p.meta.centroid_lat_m] for p in patches])
        enc = encode_supervision_batch(raw, cfg.encoding, rng)
        return torch.as_tensor(enc, dtype=torch.float32)

    labels = torch.as_tensor(
        np.stack([p.label for p in src]).astype(np.int64), dtype=torch.long
    )
    batch = UdaBatch(
        source_images=images(src),
        source_labels=labels,
        source_coord=coords(src),
        target_images=images(tgt),
        target_coord=coords(tgt),
    )
    if cfg.components.time_mt:
        batch.source_time = _time_encodings(src, cfg, rng)
        batch.target_time = _time_encodings(tgt, cfg, rng)
    return batch


def _predict_label(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Argmax class map for one (H, W, B) image, eval mode."""
    x = torch.as_tensor(image.transpose(2, 0, 1)[None], dtype=torch.float32)
    with torch.no_grad():
        probs = model(x)
    return probs[0].argmax(dim=0).numpy()


def validation_miou(model: SegModel, patches: Sequence[Patch], num_classes: int) -> float:
    """mIoU over the real classes on full labeled patches (no crop protocol)."""
    was_training = model.training
    model.eval()
    cm = metrics_mod.ConfusionMatrix(num_classes)
    ignore = num_classes - 1
    for patch in patches:
        pred = _predict_label(model, patch.image)
        cm = metrics_mod.accumulate(cm, pred, patch.label, ignore_index=ignore)
    if was_training:
        model.train()
    report = metrics_mod.iou(cm, num_scored=num_classes - 1)
    return report.miou


def evaluate(
    model: SegModel,
    dataset: GeoDataset,
    domains: Sequence[str] | None = None,
    labels_dir: str | Path | None = None,
) -> tuple[metrics_mod.IouReport, metrics_mod.ConfusionMatrix]:
    """Four-crop inference against held-out labels, scored per class.

    Each patch is split into its four quadrants, predictions are reassembled
    to full size, and the confusion counts run over the real classes with the
    "other" index ignored on the reference side. Unlabeled domains read their
    reference maps from the held-out label store (`labels_dir` overrides its
    location).
    """
    domains = list(domains) if domains is not None else dataset.target_domains
    if not domains:
        raise ValueError("no domains to evaluate")
    num_classes = model.cfg.num_classes
    ignore = num_classes - 1
    model.eval()
    cm = metrics_mod.ConfusionMatrix(num_classes)
    for domain, pid in dataset.patch_ids(domains):
        patch = dataset.load(domain, pid)
        if patch.label is not None:
            ref = patch.label
        else:
            ref = load_eval_label(dataset.root, domain, pid, labels_dir=labels_dir)
        preds = [_predict_label(model, q.image) for q in four_crop(patch)]
        pred = reassemble_quadrants(preds)
        cm = metrics_mod.accumulate(cm, pred, ref, ignore_index=ignore)
    return metrics_mod.iou(cm, num_scored=num_classes - 1), cm


def _batched(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [c for c in chunks if len(c) >= 2]  # batch norm needs >= 2 rows


def fit(
    cfg: TrainConfig,
    source_ds: GeoDataset,
    target_ds: GeoDataset | None = None,
    out_dir: str | Path | None = None,
) -> FitResult:
    """Train up to `max_epochs` with early stopping on held-out source mIoU.

    A `val_fraction` slice of the source patches is held out; training stops
    once the slice's mIoU has not improved for more than `patience` epochs.
    The returned model carries the best-epoch parameters, and the checkpoint
    written to `out_dir` includes the matching optimizer state.
    """
    if target_ds is None:
        target_ds = source_ds
    source_patches = [
        source_ds.load(d, p) for d, p in source_ds.patch_ids(source_ds.source_domains)
    ]
    target_patches = [
        target_ds.load(d, p) for d, p in target_ds.patch_ids(target_ds.target_domains)
    ]
    if not source_patches:
        raise ValueError("no labeled source patches found")
    if not target_patches:
        raise ValueError("no target patches found")

    split_rng = np.random.default_rng([cfg.seed, 17])
    perm = split_rng.permutation(len(source_patches))
    n_val = max(1, int(round(cfg.val_fraction * len(source_patches))))
    if n_val >= len(source_patches):
        raise ValueError("validation split leaves no training patches")
    val_patches = [source_patches[i] for i in perm[:n_val]]
    train_patches = [source_patches[i] for i in perm[n_val:]]

    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    dcs_state = cb.DcsState.initial(cfg.dcs)
    params = count_parameters(model)

    history: list[dict] = []
    best_val = -math.inf
    best_epoch = -1
    best_model_state = None
    best_opt_state = None
    since_improve = 0
    epochs_run = 0

    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, 1000 + epoch])
        order = rng.permutation(len(train_patches))
        tgt_order = np.concatenate(
            [
                rng.permutation(len(target_patches))
                for _ in range(math.ceil(len(order) / len(target_patches)) + 1)
            ]
        )
        reports: list[LossReport] = []
        cursor = 0
        for chunk in _batched(order, cfg.batch_size):
            src = [train_patches[i] for i in chunk]
            tgt = [target_patches[i] for i in tgt_order[cursor : cursor + len(chunk)]]
            cursor += len(chunk)
            batch = make_batch(src, tgt, cfg, rng)
            dcs_state, report = train_step(model, optimizer, dcs_state, batch, cfg)
            reports.append(report)
        if not reports:
            raise ValueError("no trainable batches; need at least 2 source patches")

        val = validation_miou(model, val_patches, cfg.network.num_classes)
        epochs_run = epoch + 1
        row = {
            "epoch": epoch,
            "l_seg": float(np.mean([r.l_seg for r in reports])),
            "l_coord_source": float(np.mean([r.l_coord_source for r in reports])),
            "l_coord_target": float(np.mean([r.l_coord_target for r in reports])),
            "total": float(np.mean([r.total for r in reports])),
            "val_miou": val,
        }
        for c, w in enumerate(dcs_state.weights):
            row[f"dcs_{c}"] = float(w)
        history.append(row)

        if math.isfinite(val) and val > best_val:
            best_val = val
            best_epoch = epoch
            best_model_state = copy.deepcopy(model.state_dict())
            best_opt_state = copy.deepcopy(optimizer.state_dict())
            since_improve = 0
        else:
            since_improve += 1
            if since_improve > cfg.patience:
                break

    if best_model_state is not None:
        model.load_state_dict(best_model_state)
        optimizer.load_state_dict(best_opt_state)

    result = FitResult(
        model=model,
        optimizer=optimizer,
        history=history,
        epochs_run=epochs_run,
        best_epoch=best_epoch,
        best_val_miou=best_val,
        param_count=params,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_history_csv(out_dir / "history.csv", history)
        save_checkpoint(
            out_dir / "checkpoint.bin",
            model,
            optimizer,
            extra={"best_epoch": best_epoch, "best_val_miou": best_val, "epochs_run": epochs_run},
        )
    return result


def write_history_csv(path: str | Path, history: list[dict]):
    if not history:
        raise ValueError("empty history")
    fields = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in history:
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in fields])
