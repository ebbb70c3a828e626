"""TPNet network core.

The network scores a super-resolved image by fusing two streams: a frozen
deep feature extractor (see ``tpnet.backbone``) and a learned textural
branch of six residual blocks. Each residual block is conv-ReLU-conv
followed by a grouped-convolution spatial attention gate and a
depth-wise feature-normalization layer, all inside a residual skip. A
small convolutional regressor turns the final feature map into one
scalar per batch item.

Everything is a pure function of (arrays, ParamStore, config); the
training entry points return caches that the matching ``*_bwd`` helpers
consume to produce per-tensor gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from collections import OrderedDict

import numpy as np

from . import ops
from .errors import ConfigurationError, ShapeError, UnsupportedOperationError
from .params import ParamStore
from .rng import derive_rng

__all__ = [
    "ModelConfig",
    "AttentionMaps",
    "param_shapes",
    "init_params",
    "init_from_shapes",
    "sa_forward",
    "fnorm_forward",
    "rsrb_forward",
    "textural_forward",
    "regressor_forward",
    "tpnet_forward",
    "extract_attention",
]

_REGRESSOR_KERNELS = (3, 2, 1)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of the scoring network."""

    num_stages: int = 6
    base_channels: int = 64
    sa_group_divisor: int = 4
    use_sa: bool = True
    use_fnorm: bool = True
    regressor_pool_size: int = 4
    regressor_channels: tuple = (256, 64, 1)
    perceptual_channels: tuple = (64, 128, 256, 512, 512)

    def __post_init__(self):
        object.__setattr__(self, "regressor_channels", tuple(self.regressor_channels))
        object.__setattr__(self, "perceptual_channels", tuple(self.perceptual_channels))
        if self.base_channels < 1 or self.base_channels % self.sa_group_divisor:
            raise ConfigurationError(
                f"base_channels={self.base_channels} must be a positive multiple of "
                f"sa_group_divisor={self.sa_group_divisor}"
            )
        if self.num_stages != len(self.perceptual_channels) + 1:
            raise ConfigurationError(
                f"num_stages={self.num_stages} must equal len(perceptual_channels)+1"
            )
        if not self.regressor_channels or self.regressor_channels[-1] != 1:
            raise ConfigurationError("regressor_channels must end in 1")
        if len(self.regressor_channels) != len(_REGRESSOR_KERNELS):
            raise ConfigurationError("regressor has exactly three convolution stages")
        if self.regressor_pool_size != 4:
            raise ConfigurationError(
                "the 3/2/1 regressor kernel ladder requires regressor_pool_size=4"
            )

    def stage_in_channels(self, stage: int, image_channels: int = 3) -> int:
        """Input channel count of residual block ``stage`` (1-based)."""
        if stage == 1:
            return image_channels
        return self.perceptual_channels[stage - 2] + self.base_channels


@dataclass
class AttentionMaps:
    """Per-stage channel-averaged attention, min-max rescaled into [0, 1].

    ``norm_records[stage]`` holds the per-item (min, max) of the averaged
    map before rescaling; a constant map exports as all zeros.
    """

    maps: dict = field(default_factory=dict)
    norm_records: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# parameter bookkeeping


def _k(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def sa_param_shapes(channels: int, divisor: int = 4, prefix: str = "sa") -> OrderedDict:
    if channels % divisor:
        raise ConfigurationError(
            f"attention input channels {channels} not divisible by {divisor}"
        )
    g = channels // divisor
    return OrderedDict(
        [
            (_k(prefix, "conv1.weight"), (g, divisor, 3, 3)),
            (_k(prefix, "conv1.bias"), (g,)),
            (_k(prefix, "conv2.weight"), (channels, 1, 3, 3)),
            (_k(prefix, "conv2.bias"), (channels,)),
        ]
    )


def fnorm_param_shapes(channels: int, prefix: str = "fnorm") -> OrderedDict:
    return OrderedDict(
        [
            (_k(prefix, "conv.weight"), (channels, 1, 3, 3)),
            (_k(prefix, "conv.bias"), (channels,)),
        ]
    )


def rsrb_param_shapes(in_channels: int, cfg: ModelConfig, prefix: str = "rsrb") -> OrderedDict:
    f = cfg.base_channels
    shapes = OrderedDict(
        [
            (_k(prefix, "conv1.weight"), (f, in_channels, 3, 3)),
            (_k(prefix, "conv1.bias"), (f,)),
            (_k(prefix, "conv2.weight"), (f, f, 3, 3)),
            (_k(prefix, "conv2.bias"), (f,)),
        ]
    )
    if cfg.use_sa:
        shapes.update(sa_param_shapes(f, cfg.sa_group_divisor, _k(prefix, "sa")))
    if cfg.use_fnorm:
        shapes.update(fnorm_param_shapes(f, _k(prefix, "fnorm")))
    if in_channels != f:
        shapes[_k(prefix, "skip.weight")] = (f, in_channels, 1, 1)
        shapes[_k(prefix, "skip.bias")] = (f,)
    return shapes


def regressor_param_shapes(cfg: ModelConfig, prefix: str = "regressor") -> OrderedDict:
    chans = (2 * cfg.base_channels,) + cfg.regressor_channels
    shapes = OrderedDict()
    for i, k in enumerate(_REGRESSOR_KERNELS):
        shapes[_k(prefix, f"conv{i + 1}.weight")] = (chans[i + 1], chans[i], k, k)
        shapes[_k(prefix, f"conv{i + 1}.bias")] = (chans[i + 1],)
    return shapes


def param_shapes(cfg: ModelConfig, image_channels: int = 3) -> OrderedDict:
    """Name -> shape for every trainable tensor of the scoring network."""
    shapes = OrderedDict()
    for stage in range(1, cfg.num_stages + 1):
        shapes.update(
            rsrb_param_shapes(
                cfg.stage_in_channels(stage, image_channels), cfg, f"textural.stage{stage}"
            )
        )
    shapes.update(regressor_param_shapes(cfg))
    return shapes


def init_from_shapes(shapes: OrderedDict, seed: int) -> ParamStore:
    """Fan-in scaled normal init for weights, zeros for biases.

    Each tensor draws from its own named substream, so the result does
    not depend on enumeration order.
    """
    store = ParamStore()
    for name, shape in shapes.items():
        if ParamStore.role(name) == "bias":
            store[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            rng = derive_rng(seed, "init", name)
            std = np.sqrt(2.0 / fan_in)
            store[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return store


def init_params(cfg: ModelConfig, seed: int, image_channels: int = 3) -> ParamStore:
    """Seeded parameters for the textural branch and regressor."""
    return init_from_shapes(param_shapes(cfg, image_channels), seed)


# ---------------------------------------------------------------------------
# block forwards / backwards (cached internal versions + public wrappers)


def _acc(grads: dict, name: str, val: np.ndarray) -> None:
    if name in grads:
        grads[name] += val
    else:
        grads[name] = val


def _conv_f(x, params, name, *, padding, groups=1, keep_cols=False):
    y, cols = ops.conv2d(
        x,
        params[name + ".weight"],
        params[name + ".bias"],
        padding=padding,
        groups=groups,
        return_cols=True,
    )
    return y, (x, cols if keep_cols else None)


def _conv_b(dy, cache, params, name, grads, *, padding, groups=1, need_dx=True, dx_channels=None):
    x, cols = cache
    dx, dw, db = ops.conv2d_backward(
        dy,
        x,
        params[name + ".weight"],
        padding=padding,
        groups=groups,
        need_dx=need_dx,
        dx_channels=dx_channels,
        cols=cols,
    )
    _acc(grads, name + ".weight", dw)
    _acc(grads, name + ".bias", db)
    return dx


def _sa_fwd(x, params, prefix, divisor, keep_cols=False):
    c = x.shape[1]
    if c % divisor:
        raise ConfigurationError(f"attention input channels {c} not divisible by {divisor}")
    g = c // divisor
    z1, c1 = _conv_f(x, params, _k(prefix, "conv1"), padding=1, groups=g, keep_cols=keep_cols)
    r1 = ops.relu(z1)
    z2, c2 = _conv_f(r1, params, _k(prefix, "conv2"), padding=1, groups=g, keep_cols=keep_cols)
    a = ops.sigmoid(z2)
    return x * a, a, (x, z1, a, g, c1, c2)


def _sa_bwd(dy, cache, params, prefix, grads, need_dx=True):
    x, z1, a, g, c1, c2 = cache
    dz2 = ops.sigmoid_backward(dy * x, a)
    dr1 = _conv_b(dz2, c2, params, _k(prefix, "conv2"), grads, padding=1, groups=g)
    dz1 = ops.relu_backward(dr1, z1)
    dx1 = _conv_b(dz1, c1, params, _k(prefix, "conv1"), grads, padding=1, groups=g, need_dx=need_dx)
    if not need_dx:
        return None
    return dy * a + dx1


def _fnorm_fwd(x, params, prefix, keep_cols=False):
    c = x.shape[1]
    w = params[_k(prefix, "conv.weight")]
    if w.shape[0] != c or w.shape[1] != 1:
        raise ConfigurationError(
            f"feature-normalization kernel {w.shape} does not match {c} channels"
        )
    z, cc = _conv_f(x, params, _k(prefix, "conv"), padding=1, groups=c, keep_cols=keep_cols)
    return x + z, (cc, c)


def _fnorm_bwd(dy, cache, params, prefix, grads, need_dx=True):
    cc, c = cache
    dx1 = _conv_b(dy, cc, params, _k(prefix, "conv"), grads, padding=1, groups=c, need_dx=need_dx)
    if not need_dx:
        return None
    return dy + dx1


def _rsrb_fwd(x, params, cfg, prefix, keep_cols=False):
    f = cfg.base_channels
    z1, c1 = _conv_f(x, params, _k(prefix, "conv1"), padding=1, keep_cols=keep_cols)
    r1 = ops.relu(z1)
    z2, c2 = _conv_f(r1, params, _k(prefix, "conv2"), padding=1, keep_cols=keep_cols)
    h = z2
    attention = None
    sa_cache = fn_cache = None
    if cfg.use_sa:
        h, attention, sa_cache = _sa_fwd(
            h, params, _k(prefix, "sa"), cfg.sa_group_divisor, keep_cols
        )
    if cfg.use_fnorm:
        h, fn_cache = _fnorm_fwd(h, params, _k(prefix, "fnorm"), keep_cols)
    project = x.shape[1] != f
    if project:
        skip, cs = _conv_f(x, params, _k(prefix, "skip"), padding=0, keep_cols=keep_cols)
    else:
        skip, cs = x, None
    y = h + skip
    return y, attention, (x, z1, c1, c2, sa_cache, fn_cache, cs, project)


def _rsrb_bwd(dy, cache, params, cfg, prefix, grads, need_dx=True, dx_channels=None):
    x, z1, c1, c2, sa_cache, fn_cache, cs, project = cache
    dh = dy
    if cfg.use_fnorm:
        dh = _fnorm_bwd(dh, fn_cache, params, _k(prefix, "fnorm"), grads)
    if cfg.use_sa:
        dh = _sa_bwd(dh, sa_cache, params, _k(prefix, "sa"), grads)
    dr1 = _conv_b(dh, c2, params, _k(prefix, "conv2"), grads, padding=1)
    dz1 = ops.relu_backward(dr1, z1)
    dx_body = _conv_b(
        dz1, c1, params, _k(prefix, "conv1"), grads,
        padding=1, need_dx=need_dx, dx_channels=dx_channels,
    )
    if project:
        dx_skip = _conv_b(
            dy, cs, params, _k(prefix, "skip"), grads,
            padding=0, need_dx=need_dx, dx_channels=dx_channels,
        )
    else:
        dx_skip = dy
    if not need_dx:
        return None
    return dx_body + dx_skip


def _check_feature(x, what="feature map", channels=None):
    ops._check_4d(x, what)
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"{what} must have {channels} channels, got {x.shape[1]}")
    ops.assert_finite(x, what)


def sa_forward(x, params, prefix: str = "sa", group_divisor: int = 4):
    """Spatial attention gate: x * Sigmoid(GConv(ReLU(GConv(x)))).

    Shape-preserving; the gate values lie strictly inside (0, 1).
    """
    _check_feature(x, "attention input")
    y, _, _ = _sa_fwd(x, params, prefix, group_divisor)
    return y


def fnorm_forward(x, params, prefix: str = "fnorm"):
    """Feature normalization: x + depth-wise 3x3 convolution of x."""
    _check_feature(x, "feature-normalization input")
    y, _ = _fnorm_fwd(x, params, prefix)
    return y


def rsrb_forward(x, params, cfg: ModelConfig, prefix: str = "rsrb"):
    """Residual block: FNorm(SA(conv(relu(conv(x))))) + skip(x).

    The skip is the identity when the input already has ``base_channels``
    channels and a 1x1 projection otherwise. Attention / normalization
    drop to the identity when disabled in ``cfg``.
    """
    _check_feature(x, "residual block input")
    y, _, _ = _rsrb_fwd(x, params, cfg, prefix)
    return y


# ---------------------------------------------------------------------------
# textural branch


def _validate_textural_inputs(image, perceptual, cfg):
    _check_feature(image, "image tensor", channels=3)
    h, w = image.shape[2], image.shape[3]
    if h < 32 or w < 32:
        raise ShapeError(f"image sides must be at least 32, got {(h, w)}")
    if h % 32 or w % 32:
        raise ShapeError(f"image sides must be divisible by 32, got {(h, w)}")
    n_taps = cfg.num_stages - 1
    if len(perceptual) != n_taps:
        raise ShapeError(f"expected {n_taps} perceptual features, got {len(perceptual)}")
    for i, p in enumerate(perceptual):
        expect = (image.shape[0], cfg.perceptual_channels[i], h >> i, w >> i)
        if tuple(p.shape) != expect:
            raise ShapeError(
                f"perceptual feature {i + 1} has shape {tuple(p.shape)}, expected {expect}"
            )


def _textural_fwd(image, perceptual, params, cfg, keep_cols=False):
    f, attention, cache = _rsrb_fwd(image, params, cfg, "textural.stage1", keep_cols)
    stages = [f]
    attentions = [attention]
    caches = [(cache, None, None)]
    for stage in range(2, cfg.num_stages + 1):
        p = perceptual[stage - 2]
        if p.shape[2:] != f.shape[2:]:
            raise ShapeError(
                f"stage {stage}: perceptual resolution {p.shape[2:]} does not match "
                f"textural resolution {f.shape[2:]}"
            )
        cat = np.concatenate([p, f], axis=1)
        r, attention, cache = _rsrb_fwd(cat, params, cfg, f"textural.stage{stage}", keep_cols)
        f, idx = ops.maxpool2(r)
        stages.append(f)
        attentions.append(attention)
        caches.append((cache, idx, r.shape))
    return f, stages, attentions, caches


def _textural_bwd(df, caches, perceptual, params, cfg, grads, need_perceptual_grads=False):
    d = df
    dtaps = [None] * (cfg.num_stages - 1)
    for stage in range(cfg.num_stages, 1, -1):
        cache, idx, pre_pool_shape = caches[stage - 1]
        d = ops.maxpool2_backward(d, idx, pre_pool_shape)
        c_p = perceptual[stage - 2].shape[1]
        c_in = c_p + cfg.base_channels
        prefix = f"textural.stage{stage}"
        if need_perceptual_grads:
            dcat = _rsrb_bwd(d, cache, params, cfg, prefix, grads)
            dtaps[stage - 2] = dcat[:, :c_p]
        else:
            dcat = _rsrb_bwd(d, cache, params, cfg, prefix, grads, dx_channels=(c_p, c_in))
        d = dcat[:, c_p:]
    _rsrb_bwd(d, caches[0][0], params, cfg, "textural.stage1", grads, need_dx=False)
    return dtaps if need_perceptual_grads else None


def textural_forward(image, perceptual, params, cfg: ModelConfig, return_stages: bool = False):
    """Run the six-stage textural branch.

    Stage 1 consumes the raw image at full resolution; each later stage
    concatenates the matching perceptual feature onto the running
    textural feature, applies its residual block and halves the
    resolution with 2x2 max pooling. Returns the final feature map
    (``base_channels`` x H/32 x W/32), or all per-stage outputs when
    ``return_stages`` is set.
    """
    _validate_textural_inputs(image, perceptual, cfg)
    f, stages, _, _ = _textural_fwd(image, perceptual, params, cfg)
    return stages if return_stages else f


# ---------------------------------------------------------------------------
# regressor


def _regressor_fwd(f, params, cfg, keep_cols=False):
    size = cfg.regressor_pool_size
    if f.shape[2] < size or f.shape[3] < size:
        raise ShapeError(
            f"regressor needs spatial size >= {size}x{size}, got {f.shape[2:]}; "
            f"score larger inputs"
        )
    mx, midx = ops.adaptive_max_pool(f, size)
    av = ops.adaptive_avg_pool(f, size)
    z = np.concatenate([mx, av], axis=1)
    z1, c1 = _conv_f(z, params, "regressor.conv1", padding=0, keep_cols=keep_cols)
    r1 = ops.relu(z1)
    z2, c2 = _conv_f(r1, params, "regressor.conv2", padding=0, keep_cols=keep_cols)
    r2 = ops.relu(z2)
    z3, c3 = _conv_f(r2, params, "regressor.conv3", padding=0, keep_cols=keep_cols)
    scores = z3[:, 0, 0, 0]
    return scores, (f.shape, midx, z1, z2, c1, c2, c3)


def _regressor_bwd(dscores, cache, params, cfg, grads):
    f_shape, midx, z1, z2, c1, c2, c3 = cache
    dz3 = np.zeros((dscores.shape[0], 1, 1, 1), dtype=dscores.dtype)
    dz3[:, 0, 0, 0] = dscores
    dr2 = _conv_b(dz3, c3, params, "regressor.conv3", grads, padding=0)
    dz2 = ops.relu_backward(dr2, z2)
    dr1 = _conv_b(dz2, c2, params, "regressor.conv2", grads, padding=0)
    dz1 = ops.relu_backward(dr1, z1)
    dz = _conv_b(dz1, c1, params, "regressor.conv1", grads, padding=0)
    c = f_shape[1]
    dmax, davg = dz[:, :c], dz[:, c:]
    df = ops.adaptive_max_pool_backward(dmax, midx, f_shape)
    df += ops.adaptive_avg_pool_backward(davg, f_shape, cfg.regressor_pool_size)
    return df


def regressor_forward(f, params, cfg: ModelConfig):
    """Score a feature map: adaptive max+avg pooling to a 4x4 grid,
    channel concatenation, then an unpadded 3x3/2x2/1x1 conv ladder down
    to one unbounded scalar per batch item."""
    _check_feature(f, "regressor input", channels=cfg.base_channels)
    scores, _ = _regressor_fwd(f, params, cfg)
    return scores


# ---------------------------------------------------------------------------
# full network


def _validate_image_tensor(image, min_side=128):
    _check_feature(image, "image tensor", channels=3)
    h, w = image.shape[2], image.shape[3]
    if h < min_side or w < min_side:
        raise ShapeError(
            f"image sides must be at least {min_side} so the final feature map "
            f"reaches the regressor's 4x4 minimum, got {(h, w)}"
        )
    if h % 32 or w % 32:
        raise ShapeError(f"image sides must be divisible by 32, got {(h, w)}")


def _tpnet_train_fwd(image, taps, params, cfg, keep_cols=True):
    f, _, _, caches = _textural_fwd(image, taps, params, cfg, keep_cols)
    scores, rcache = _regressor_fwd(f, params, cfg, keep_cols)
    return scores, (caches, rcache)


def _tpnet_train_bwd(dscores, cache, taps, params, cfg, need_perceptual_grads=False):
    caches, rcache = cache
    grads: dict = {}
    df = _regressor_bwd(dscores, rcache, params, cfg, grads)
    dtaps = _textural_bwd(df, caches, taps, params, cfg, grads, need_perceptual_grads)
    return grads, dtaps


def tpnet_forward(image, params, cfg: ModelConfig, backbone_cfg):
    """Quality scores for a batch of preprocessed images.

    ``params`` must hold both the scoring network and the backbone
    tensors (``backbone.*``). Deterministic given (image, params).
    """
    from .backbone import vgg_features

    _validate_image_tensor(image)
    taps = vgg_features(image, params, backbone_cfg)
    f, _, _, _ = _textural_fwd(image, taps, params, cfg)
    scores, _ = _regressor_fwd(f, params, cfg)
    return scores


def extract_attention(image, params, cfg: ModelConfig, backbone_cfg) -> AttentionMaps:
    """Per-stage attention gate maps, channel-averaged and min-max
    rescaled to [0, 1] per stage and batch item.

    A stage whose averaged map is constant (e.g. untrained zero weights
    give a flat 0.5 gate) exports as all zeros.
    """
    from .backbone import vgg_features

    if not cfg.use_sa:
        raise UnsupportedOperationError(
            "attention export requires a model configured with use_sa=True"
        )
    _validate_image_tensor(image)
    taps = vgg_features(image, params, backbone_cfg)
    _, _, attentions, _ = _textural_fwd(image, taps, params, cfg)
    out = AttentionMaps()
    for stage, a in enumerate(attentions, start=1):
        m = a.mean(axis=1, keepdims=True)
        mins = m.min(axis=(1, 2, 3))
        maxs = m.max(axis=(1, 2, 3))
        span = maxs - mins
        norm = np.zeros_like(m)
        ok = span > 0
        if ok.any():
            norm[ok] = (m[ok] - mins[ok, None, None, None]) / span[ok, None, None, None]
        out.maps[stage] = norm
        out.norm_records[stage] = (mins, maxs)
    return out
