"""Training harness: batched L1 regression of quality scores onto
normalized subjective scores with an adaptive-moment optimizer.

The trajectory is a pure function of (seed, configs, manifests): epoch
shuffles and crop offsets come from named substreams of the root seed,
so two runs with the same inputs produce identical loss curves, and a
checkpoint restored mid-run continues exactly as the uninterrupted run
would. With a frozen backbone the extractor's tap features of
fixed-size training images can be precomputed once (``cache_features``),
which removes the extractor from the step cost entirely.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, ops
from .backbone import (
    BackboneConfig,
    backbone_param_shapes,
    init_backbone_params,
    preprocess,
    vgg_features,
    _vgg_bwd,
    _vgg_fwd,
)
from .data import Manifest, load_image, sample_crop
from .errors import ConfigurationError, DataError, IntegrityError, NumericError
from .model import ModelConfig, _tpnet_train_bwd, _tpnet_train_fwd, init_params, param_shapes
from .params import ParamStore, load_archive, save_params
from .rng import derive_rng, derive_seed

__all__ = [
    "TrainConfig",
    "TrainState",
    "Batch",
    "FitResult",
    "loss",
    "adam_update",
    "train_step",
    "fit",
    "checkpoint_save",
    "checkpoint_load",
]

_CHECKPOINT_FORMAT = "tpnet-checkpoint-v1"


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    crop_size: int = 224
    freeze_backbone: bool = True
    cache_features: bool = False
    eval_every: int = 1
    stop_at_loss: float | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop_size < 128 or self.crop_size % 32:
            raise ConfigurationError(
                f"crop_size must be >= 128 and divisible by 32, got {self.crop_size}"
            )
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_val_plcc: float = -math.inf
    best_epoch: int = -1


@dataclass
class Batch:
    images: np.ndarray  # (n, 3, H, W) preprocessed float32
    targets: np.ndarray  # (n,) float32 normalized scores
    ids: list
    taps: list | None = None  # precomputed backbone features


@dataclass
class FitResult:
    history: list
    params: ParamStore
    best_params: ParamStore | None
    best_val_plcc: float
    best_epoch: int
    steps: int
    final_train_loss: float
    stopped_early: bool
    best_checkpoint: Path | None = None


def loss(predicted, target) -> float:
    """Mean absolute error between prediction and target batches."""
    return ops.l1_loss(np.asarray(predicted), np.asarray(target))[0]


def adam_update(params: ParamStore, grads: dict, state: TrainState, cfg: TrainConfig) -> None:
    """One adaptive-moment update, in place, for every tensor in ``grads``."""
    state.step += 1
    t = state.step
    b1c = 1.0 - cfg.beta1**t
    b2c = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        mhat = m / b1c
        vhat = v / b2c
        params[name] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)


def train_step(
    state: TrainState,
    params: ParamStore,
    batch: Batch,
    model_cfg: ModelConfig,
    backbone_cfg: BackboneConfig,
    train_cfg: TrainConfig,
):
    """One optimization step; mutates ``params``/``state`` and returns
    (state, params, loss value). Backbone tensors stay untouched while
    frozen."""
    finetune = not train_cfg.freeze_backbone
    vgg_cache = None
    taps = batch.taps
    if taps is None:
        taps, vgg_cache = _vgg_fwd(batch.images, params, backbone_cfg, keep_cols=finetune)
    scores, cache = _tpnet_train_fwd(batch.images, taps, params, model_cfg)
    if not np.isfinite(scores).all():
        bad = [i for i, s in zip(batch.ids, scores) if not np.isfinite(s)]
        raise NumericError(f"non-finite predictions for samples: {bad}")
    value, dscores = ops.l1_loss(scores, batch.targets.astype(scores.dtype))
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss on batch {batch.ids}")
    grads, dtaps = _tpnet_train_bwd(
        dscores, cache, taps, params, model_cfg, need_perceptual_grads=finetune
    )
    if finetune:
        if vgg_cache is None:
            raise ConfigurationError(
                "backbone fine-tuning requires taps computed inside train_step"
            )
        grads.update(_vgg_bwd(dtaps, vgg_cache, params, backbone_cfg))
    adam_update(params, grads, state, train_cfg)
    return state, params, value


# ---------------------------------------------------------------------------
# fit


def _records_of(manifest_or_records):
    if isinstance(manifest_or_records, Manifest):
        return list(manifest_or_records.records), manifest_or_records
    return list(manifest_or_records), None


def _resolve(rec, manifest):
    return str(manifest.resolve_path(rec)) if manifest else rec.image_path


def _score_one(image_u8, params, model_cfg, backbone_cfg, taps=None):
    x = preprocess(image_u8, backbone_cfg)
    if taps is None:
        taps = vgg_features(x, params, backbone_cfg)
    scores, _ = _tpnet_train_fwd(x, taps, params, model_cfg, keep_cols=False)
    return float(scores[0])


def fit(
    train_manifest,
    val_manifest,
    model_cfg: ModelConfig,
    backbone_cfg: BackboneConfig,
    train_cfg: TrainConfig,
    params: ParamStore | None = None,
    out_dir=None,
    checkpoint_meta: dict | None = None,
) -> FitResult:
    """Optimize on the training records, track validation PLCC/SRCC and
    retain the best-validation parameters.

    ``stop_at_loss`` / ``max_steps`` bound the run early (recorded in the
    result); otherwise the loop runs ``epochs`` epochs. Pass Manifests or
    plain record lists.
    """
    train_records, train_m = _records_of(train_manifest)
    val_records, val_m = _records_of(val_manifest)
    if not train_records or not val_records:
        raise DataError("training and validation splits must be non-empty")

    image_cache = {}
    for rec, m in [(r, train_m) for r in train_records] + [(r, val_m) for r in val_records]:
        path = _resolve(rec, m)
        if path not in image_cache:
            image_cache[path] = load_image(path)

    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
        params.update(init_backbone_params(backbone_cfg, train_cfg.seed))

    feature_cache = None
    if train_cfg.cache_features:
        if not train_cfg.freeze_backbone:
            raise ConfigurationError("cache_features requires a frozen backbone")
        size = (train_cfg.crop_size, train_cfg.crop_size)
        for rec in train_records:
            shape = image_cache[_resolve(rec, train_m)].shape[:2]
            if shape != size:
                raise ConfigurationError(
                    f"cache_features needs training images exactly {size}, "
                    f"got {shape} for {rec.image_path}"
                )
        feature_cache = {}
        for path, img in image_cache.items():
            x = preprocess(img, backbone_cfg)
            feature_cache[path] = vgg_features(x, params, backbone_cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    state = TrainState()
    history = []
    best_params = None
    best_path = None
    stopped = False
    last_loss = math.nan
    n = len(train_records)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size

    def make_batch(indices, epoch):
        imgs, taps_parts, targets, ids = [], [], [], []
        for idx in indices:
            rec = train_records[idx]
            path = _resolve(rec, train_m)
            crop = sample_crop(
                image_cache[path],
                size=train_cfg.crop_size,
                seed=derive_seed(train_cfg.seed, "crop", epoch, int(idx)),
            )
            imgs.append(preprocess(crop, backbone_cfg))
            targets.append(rec.mos_normalized)
            ids.append(rec.image_path)
            if feature_cache is not None:
                taps_parts.append(feature_cache[path])
        taps = None
        if feature_cache is not None:
            taps = [
                np.concatenate([t[k] for t in taps_parts], axis=0)
                for k in range(len(taps_parts[0]))
            ]
        return Batch(
            images=np.concatenate(imgs, axis=0),
            targets=np.asarray(targets, dtype=np.float32),
            ids=ids,
            taps=taps,
        )

    def validate():
        preds, targets = [], []
        for rec in val_records:
            path = _resolve(rec, val_m)
            taps = feature_cache.get(path) if feature_cache is not None else None
            preds.append(
                _score_one(image_cache[path], params, model_cfg, backbone_cfg, taps=taps)
            )
            targets.append(rec.mos_normalized)
        try:
            return metrics.plcc(preds, targets), metrics.srcc(preds, targets)
        except (NumericError, DataError):
            return math.nan, math.nan

    for epoch in range(1, train_cfg.epochs + 1):
        order = derive_rng(train_cfg.seed, "shuffle", epoch).permutation(n)
        epoch_losses = []
        for s in range(steps_per_epoch):
            chunk = order[s * train_cfg.batch_size : (s + 1) * train_cfg.batch_size]
            batch = make_batch(chunk, epoch)
            _, _, value = train_step(state, params, batch, model_cfg, backbone_cfg, train_cfg)
            epoch_losses.append(value)
            last_loss = value
            if train_cfg.stop_at_loss is not None and value <= train_cfg.stop_at_loss:
                stopped = True
            if train_cfg.max_steps is not None and state.step >= train_cfg.max_steps:
                stopped = True
            if stopped:
                break
        state.epoch = epoch
        train_loss = float(np.mean(epoch_losses))
        if epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs or stopped:
            val_plcc, val_srcc = validate()
        else:
            val_plcc = val_srcc = math.nan
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_plcc": val_plcc, "val_srcc": val_srcc}
        )
        if not math.isnan(val_plcc) and val_plcc > state.best_val_plcc:
            state.best_val_plcc = val_plcc
            state.best_epoch = epoch
            best_params = ParamStore((k, v.copy()) for k, v in params.items())
            if out_dir is not None:
                best_path = out_dir / "best.ckpt"
                checkpoint_save(
                    best_path, params, state, model_cfg, backbone_cfg, train_cfg,
                    extra=checkpoint_meta,
                )
        if stopped:
            break

    if out_dir is not None:
        with open(out_dir / "history.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_plcc", "val_srcc"])
            for row in history:
                writer.writerow(
                    [row["epoch"], repr(row["train_loss"]), repr(row["val_plcc"]),
                     repr(row["val_srcc"])]
                )

    return FitResult(
        history=history,
        params=params,
        best_params=best_params,
        best_val_plcc=state.best_val_plcc,
        best_epoch=state.best_epoch,
        steps=state.step,
        final_train_loss=last_loss,
        stopped_early=stopped,
        best_checkpoint=best_path,
    )


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(
    path,
    params: ParamStore,
    state: TrainState,
    model_cfg: ModelConfig,
    backbone_cfg: BackboneConfig,
    train_cfg: TrainConfig | None = None,
    extra: dict | None = None,
) -> None:
    """Named-tensor archive holding parameters plus optimizer moments,
    with a JSON header carrying configs and counters."""
    tensors = ParamStore(params)
    for name, arr in state.m.items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in state.v.items():
        tensors[f"opt.v.{name}"] = arr
    meta = {
        "format": _CHECKPOINT_FORMAT,
        "epoch": state.epoch,
        "step": state.step,
        "best_val_plcc": None if math.isinf(state.best_val_plcc) else state.best_val_plcc,
        "best_epoch": state.best_epoch,
        "moments": sorted(state.m),
        "model": asdict(model_cfg),
        "backbone": asdict(backbone_cfg),
        "train": asdict(train_cfg) if train_cfg is not None else None,
    }
    if extra:
        meta.update(extra)
    save_params(tensors, path, meta)


def checkpoint_load(
    path,
    model_cfg: ModelConfig | None = None,
    backbone_cfg: BackboneConfig | None = None,
):
    """Load a checkpoint; returns (params, state, model_cfg, backbone_cfg, meta).

    Configs default to the ones stored in the header; passing configs
    validates the stored tensors against them (names and shapes).
    """
    store, meta = load_archive(path)
    if meta.get("format") != _CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a tpnet checkpoint (format={meta.get('format')!r})")
    model_cfg = model_cfg or ModelConfig(**meta["model"])
    backbone_cfg = backbone_cfg or BackboneConfig(**meta["backbone"])
    params = ParamStore()
    state = TrainState(
        epoch=meta["epoch"],
        step=meta["step"],
        best_val_plcc=-math.inf if meta["best_val_plcc"] is None else meta["best_val_plcc"],
        best_epoch=meta["best_epoch"],
    )
    for name, arr in store.items():
        if name.startswith("opt.m."):
            state.m[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            state.v[name[len("opt.v."):]] = arr
        else:
            params[name] = arr
    expected = dict(param_shapes(model_cfg))
    expected.update(backbone_param_shapes(backbone_cfg))
    params.validate_names(expected, context=f"{path} parameters")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise IntegrityError(
                f"{path}: tensor {name} has shape {params[name].shape}, expected {shape}"
            )
    return params, state, model_cfg, backbone_cfg, meta
