"""VGG-19 perceptual feature extractor.

The extractor is the convolutional trunk of VGG-19 up to the 31st entry
of the canonical feature-layer enumeration (conv and pooling layers
interleaved with ReLUs, ``conv1_1`` at index 0). Five taps expose the
raw convolution outputs at indices 2, 7, 12, 21 and 30, i.e.
conv1_2/conv2_2/conv3_2/conv4_2/conv5_2, giving channel counts
64/128/256/512/512 at full, 1/2, 1/4, 1/8 and 1/16 resolution.

Weights come either from :func:`import_pretrained` (an archive keyed by
the canonical layer names or by ``features.<index>`` names) or from the
seeded random fallback :func:`init_backbone_params`, which lets every
desk-scale test run without the pretrained archive.
"""

from __future__ import annotations

import logging
import zipfile
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, IntegrityError, ShapeError
from .params import ParamStore, load_archive
from .rng import derive_rng

__all__ = [
    "BackboneConfig",
    "VGG19_SEQUENCE",
    "CONV_SEQUENCE_INDEX",
    "preprocess",
    "vgg_features",
    "backbone_param_shapes",
    "init_backbone_params",
    "import_pretrained",
    "name_mapping_table",
]

logger = logging.getLogger(__name__)

# Canonical feature-layer enumeration: ("conv", name, cin, cout) | ("relu",) | ("pool",)
_CFG = (
    (64, 64),
    (128, 128),
    (256, 256, 256, 256),
    (512, 512, 512, 512),
    (512, 512, 512, 512),
)


def _build_sequence():
    seq = []
    cin = 3
    for block, widths in enumerate(_CFG, start=1):
        for sub, cout in enumerate(widths, start=1):
            seq.append(("conv", f"conv{block}_{sub}", cin, cout))
            seq.append(("relu",))
            cin = cout
        seq.append(("pool",))
    return tuple(seq)


VGG19_SEQUENCE = _build_sequence()
CONV_SEQUENCE_INDEX = OrderedDict(
    (layer[1], i) for i, layer in enumerate(VGG19_SEQUENCE) if layer[0] == "conv"
)


@dataclass(frozen=True)
class BackboneConfig:
    tap_layers: tuple = (2, 7, 12, 21, 30)
    channels_per_tap: tuple = (64, 128, 256, 512, 512)
    frozen: bool = True
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        object.__setattr__(self, "channels_per_tap", tuple(self.channels_per_tap))
        object.__setattr__(self, "mean", tuple(self.mean))
        object.__setattr__(self, "std", tuple(self.std))
        if len(self.tap_layers) != 5 or list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ConfigurationError("tap_layers must be 5 strictly increasing indices")
        if len(self.channels_per_tap) != len(self.tap_layers):
            raise ConfigurationError("channels_per_tap must match tap_layers")
        for tap, channels in zip(self.tap_layers, self.channels_per_tap):
            if tap >= len(VGG19_SEQUENCE) or VGG19_SEQUENCE[tap][0] != "conv":
                raise ConfigurationError(f"tap index {tap} is not a convolution output")
            if VGG19_SEQUENCE[tap][3] != channels:
                raise ConfigurationError(
                    f"tap {tap} produces {VGG19_SEQUENCE[tap][3]} channels, "
                    f"config says {channels}"
                )

    @property
    def last_tap(self) -> int:
        return self.tap_layers[-1]


def backbone_param_shapes(cfg: BackboneConfig | None = None) -> OrderedDict:
    """Name -> shape for the trunk tensors up to the last tap."""
    cfg = cfg or BackboneConfig()
    shapes = OrderedDict()
    for i, layer in enumerate(VGG19_SEQUENCE[: cfg.last_tap + 1]):
        if layer[0] == "conv":
            _, name, cin, cout = layer
            shapes[f"backbone.{name}.weight"] = (cout, cin, 3, 3)
            shapes[f"backbone.{name}.bias"] = (cout,)
    return shapes


def init_backbone_params(cfg: BackboneConfig, seed: int) -> ParamStore:
    """Seeded random trunk (fan-in scaled); stands in for the pretrained archive."""
    store = ParamStore()
    for name, shape in backbone_param_shapes(cfg).items():
        if name.endswith(".bias"):
            store[name] = np.zeros(shape, dtype=np.float32)
        else:
            rng = derive_rng(seed, "init", name)
            std = np.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
            store[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return store


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(image: np.ndarray, cfg: BackboneConfig | None = None, min_side: int = 128):
    """8-bit HxWx3 RGB raster -> (1, 3, H, W) float32 network input.

    Scales to [0, 1] and standardizes with the channel statistics the
    extractor was trained under.
    """
    cfg = cfg or BackboneConfig()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 RGB raster, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ShapeError(f"expected 8-bit pixels, got dtype {image.dtype}")
    h, w = image.shape[:2]
    if h < min_side or w < min_side:
        raise ShapeError(f"image {(h, w)} is smaller than the {min_side}-pixel minimum side")
    if h % 32 or w % 32:
        raise ShapeError(f"image sides must be divisible by 32, got {(h, w)}")
    x = image.astype(np.float32) / np.float32(255.0)
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1))[None]


# ---------------------------------------------------------------------------
# feature extraction


def _check_trunk_params(params: ParamStore, cfg: BackboneConfig):
    missing = [n for n in backbone_param_shapes(cfg) if n not in params]
    if missing:
        raise IntegrityError(
            "backbone weights incomplete; missing: " + ", ".join(sorted(missing))
        )


def _vgg_fwd(x, params, cfg, keep_cols=False):
    taps = []
    caches = []
    tap_set = set(cfg.tap_layers)
    h = x
    for i, layer in enumerate(VGG19_SEQUENCE[: cfg.last_tap + 1]):
        if layer[0] == "conv":
            name = f"backbone.{layer[1]}"
            xin = h
            h, cols = ops.conv2d(
                h, params[name + ".weight"], params[name + ".bias"],
                padding=1, return_cols=True,
            )
            caches.append(("conv", name, xin, cols if keep_cols else None))
        elif layer[0] == "relu":
            caches.append(("relu", h))
            h = ops.relu(h)
        else:
            shape = h.shape
            h, idx = ops.maxpool2(h)
            caches.append(("pool", idx, shape))
        if i in tap_set:
            taps.append(h)
    return taps, caches


def _vgg_bwd(dtaps, caches, params, cfg):
    """Parameter gradients of the trunk given gradients at the taps."""
    grads: dict = {}
    tap_at = {tap: k for k, tap in enumerate(cfg.tap_layers)}
    d = None
    for i in range(len(caches) - 1, -1, -1):
        if i in tap_at and dtaps[tap_at[i]] is not None:
            d = dtaps[tap_at[i]] if d is None else d + dtaps[tap_at[i]]
        if d is None:
            continue
        entry = caches[i]
        if entry[0] == "conv":
            _, name, xin, cols = entry
            need_dx = i > 0
            dx, dw, db = ops.conv2d_backward(
                d, xin, params[name + ".weight"], padding=1, need_dx=need_dx, cols=cols
            )
            grads[name + ".weight"] = dw
            grads[name + ".bias"] = db
            d = dx
        elif entry[0] == "relu":
            d = ops.relu_backward(d, entry[1])
        else:
            d = ops.maxpool2_backward(d, entry[1], entry[2])
    return grads


def vgg_features(x, params: ParamStore, cfg: BackboneConfig | None = None):
    """Five tap features for a (n, 3, H, W) input with sides divisible by 32.

    Shapes: channels (64, 128, 256, 512, 512) at resolutions
    (1, 1/2, 1/4, 1/8, 1/16) of the input.
    """
    cfg = cfg or BackboneConfig()
    ops._check_4d(x, "backbone input")
    if x.shape[1] != 3:
        raise ShapeError(f"backbone input must have 3 channels, got {x.shape[1]}")
    h, w = x.shape[2], x.shape[3]
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ShapeError(f"backbone input sides must be multiples of 32 (>= 32), got {(h, w)}")
    _check_trunk_params(params, cfg)
    taps, _ = _vgg_fwd(x, params, cfg)
    return taps


# ---------------------------------------------------------------------------
# pretrained import


def name_mapping_table(cfg: BackboneConfig | None = None):
    """Rows of (canonical layer name, sequence index, parameter name)."""
    cfg = cfg or BackboneConfig()
    return [
        (name, idx, f"backbone.{name}")
        for name, idx in CONV_SEQUENCE_INDEX.items()
        if idx <= cfg.last_tap
    ]


def _read_source_tensors(path) -> dict:
    if zipfile.is_zipfile(path):
        with np.load(path) as z:
            return {k: np.asarray(z[k]) for k in z.files}
    store, _ = load_archive(path)
    return dict(store)


def import_pretrained(path, cfg: BackboneConfig | None = None) -> ParamStore:
    """Import trunk weights from an archive into ``backbone.*`` names.

    Accepts ``.npz`` or the native tensor archive, with tensors keyed
    either ``conv<block>_<sub>.{weight,bias}`` or
    ``features.<index>.{weight,bias}``. Only layers up to the last tap
    are imported; extras beyond it are ignored. Shape mismatches and
    missing layers raise :class:`IntegrityError` naming the layer.
    """
    cfg = cfg or BackboneConfig()
    src = _read_source_tensors(path)
    index_to_name = {str(idx): name for name, idx in CONV_SEQUENCE_INDEX.items()}

    canonical = {}
    for key, arr in src.items():
        parts = key.split(".")
        if parts[-1] not in ("weight", "bias"):
            continue
        if len(parts) == 2 and parts[0] in CONV_SEQUENCE_INDEX:
            canonical[f"{parts[0]}.{parts[-1]}"] = arr
        elif len(parts) == 3 and parts[0] == "features" and parts[1] in index_to_name:
            canonical[f"{index_to_name[parts[1]]}.{parts[-1]}"] = arr

    store = ParamStore()
    for name, shape in backbone_param_shapes(cfg).items():
        layer, role = name.split(".")[1:]
        key = f"{layer}.{role}"
        if key not in canonical:
            raise IntegrityError(f"pretrained archive is missing layer {layer!r} ({role})")
        arr = np.ascontiguousarray(canonical[key], dtype=np.float32)
        if arr.shape != shape:
            raise IntegrityError(
                f"pretrained layer {layer!r} {role} has shape {arr.shape}, expected {shape}"
            )
        store[name] = arr
    logger.info(
        "imported %d backbone tensors from %s (sha256 %s)",
        len(store), path, store.checksum(),
    )
    return store
