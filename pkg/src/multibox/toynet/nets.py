"""The proposer network and the crop post-classifier.

The proposer maps an image to one (location residual, confidence logit)
pair per prior slot. Its base alternates 3x3 conv + ReLU blocks with
hybrid reductions down to the top map at the coarsest-but-largest grid
resolution; a tapering chain of valid convolutions then realizes each
smaller grid, and dedicated 1x1 LOC/CONF convolutions on every grid map
emit the slot outputs. The optional full-image slot is predicted from an
average pool of the top map and comes last in slot order, matching the
prior set exactly.

The post-classifier scores a resampled proposal crop over object classes
plus background (class 0); a whole-image context feature vector can be
concatenated before the classifier (absent context is a zero vector, so a
single classifier serves both modes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    Conv2D,
    Dense,
    GlobalAvgPool,
    HybridReduce,
    ReLU,
    sigmoid,
    softmax,
)

_INIT_STREAM = 7


@dataclass(frozen=True)
class SlotPredictions:
    """Per-slot location residuals (n, 4) and confidence logits (n,)."""

    residuals: np.ndarray = field(repr=False)
    logits: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class ProposerConfig:
    input_size: int = 64
    input_channels: int = 3
    grids: tuple[int, ...] = (8, 6, 4, 3, 2)
    templates_per_cell: int = 11
    include_global: bool = True
    block_channels: tuple[int, ...] = (12, 16, 24, 48)
    reduce_channels: tuple[int, ...] = (12, 16, 24)
    taper_channels: int = 48
    seed: int = 0

    def __post_init__(self):
        if len(self.reduce_channels) != len(self.block_channels) - 1:
            raise ValueError("need one reduction between consecutive base blocks")
        top = self.input_size // (2 ** len(self.reduce_channels))
        if top != self.grids[0]:
            raise ValueError(
                f"base produces a {top}x{top} top map but the largest grid is {self.grids[0]}"
            )
        if list(self.grids) != sorted(self.grids, reverse=True) or len(set(self.grids)) != len(
            self.grids
        ):
            raise ValueError("grids must be strictly decreasing")

    @property
    def n_slots(self) -> int:
        n = sum(m * m * self.templates_per_cell for m in self.grids)
        return n + (1 if self.include_global else 0)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "input_channels": self.input_channels,
            "grids": list(self.grids),
            "templates_per_cell": self.templates_per_cell,
            "include_global": self.include_global,
            "block_channels": list(self.block_channels),
            "reduce_channels": list(self.reduce_channels),
            "taper_channels": self.taper_channels,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ProposerConfig":
        known = {f for f in ProposerConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown proposer config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("grids", "block_channels", "reduce_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return ProposerConfig(**d)


class ProposerNet:
    def __init__(self, config: ProposerConfig):
        self.config = config
        rng = np.random.default_rng([_INIT_STREAM, config.seed])

        self.base: list[tuple[str, object]] = []
        c = config.input_channels
        for i, bc in enumerate(config.block_channels):
            self.base.append((f"base{i}.conv", Conv2D(3, 3, c, bc, pad=1, rng=rng)))
            self.base.append((f"base{i}.relu", ReLU()))
            c = bc
            if i < len(config.reduce_channels):
                rc = config.reduce_channels[i]
                self.base.append((f"base{i}.reduce", HybridReduce(c, rc, rng=rng)))
                c += rc
        self.top_channels = c

        # taper chain: each step is a valid conv shrinking grid s -> s'
        self.tapers: list[tuple[str, Conv2D, ReLU]] = []
        cur_c = c
        for a, b in zip(config.grids, config.grids[1:]):
            k = a - b + 1
            self.tapers.append(
                (f"taper{a}to{b}", Conv2D(k, k, cur_c, config.taper_channels, rng=rng), ReLU())
            )
            cur_c = config.taper_channels

        t = config.templates_per_cell
        self.heads: list[tuple[str, Conv2D, Conv2D]] = []
        for i, m in enumerate(config.grids):
            cm = self.top_channels if i == 0 else config.taper_channels
            self.heads.append(
                (
                    f"grid{m}",
                    Conv2D(1, 1, cm, 4 * t, rng=rng),
                    Conv2D(1, 1, cm, t, rng=rng),
                )
            )
        self.global_pool = GlobalAvgPool()
        if config.include_global:
            self.global_loc = Conv2D(1, 1, self.top_channels, 4, rng=rng)
            self.global_conf = Conv2D(1, 1, self.top_channels, 1, rng=rng)

    # -- parameter registry --------------------------------------------

    def named_layers(self) -> list[tuple[str, object]]:
        out = list(self.base)
        for name, conv, relu in self.tapers:
            out.append((name, conv))
            out.append((name + ".relu", relu))
        for name, loc, conf in self.heads:
            out.append((name + ".loc", loc))
            out.append((name + ".conf", conf))
        if self.config.include_global:
            out.append(("global.loc", self.global_loc))
            out.append(("global.conf", self.global_conf))
        return out

    @property
    def params(self) -> list[np.ndarray]:
        return [p for _, layer in self.named_layers() for p in layer.params]

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self.named_layers():
            for suffix, p in zip(("w", "b"), layer.params):
                out.append((f"{name}.{suffix}", p))
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            if name not in state:
                raise ValueError(f"checkpoint is missing parameter {name}")
            if state[name].shape != p.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {state[name].shape} vs {p.shape}"
                )
            p[...] = state[name]

    # -- forward / backward ---------------------------------------------

    def forward(self, image: np.ndarray) -> tuple[SlotPredictions, dict]:
        cfg = self.config
        if image.shape != (cfg.input_size, cfg.input_size, cfg.input_channels):
            raise ValueError(
                f"expected input {(cfg.input_size, cfg.input_size, cfg.input_channels)}, "
                f"got {image.shape}"
            )
        cache: dict = {"base": [], "tapers": [], "heads": []}
        x = image
        for _, layer in self.base:
            x, c = layer.forward(x)
            cache["base"].append(c)
        top = x

        grid_maps = [top]
        for _, conv, relu in self.tapers:
            y, c_conv = conv.forward(grid_maps[-1])
            y, c_relu = relu.forward(y)
            cache["tapers"].append((c_conv, c_relu))
            grid_maps.append(y)

        res_parts, logit_parts = [], []
        t = cfg.templates_per_cell
        for (name, loc, conf), gmap, m in zip(self.heads, grid_maps, cfg.grids):
            loc_out, c_loc = loc.forward(gmap)
            conf_out, c_conf = conf.forward(gmap)
            cache["heads"].append((c_loc, c_conf))
            res_parts.append(loc_out.reshape(m * m * t, 4))
            logit_parts.append(conf_out.reshape(m * m * t))

        if cfg.include_global:
            pooled, c_pool = self.global_pool.forward(top)
            gl, c_gl = self.global_loc.forward(pooled)
            gc, c_gc = self.global_conf.forward(pooled)
            cache["global"] = (c_pool, c_gl, c_gc)
            res_parts.append(gl.reshape(1, 4))
            logit_parts.append(gc.reshape(1))

        preds = SlotPredictions(np.concatenate(res_parts), np.concatenate(logit_parts))
        cache["grid_maps_shapes"] = [g.shape for g in grid_maps]
        return preds, cache

    def backward(
        self, cache: dict, grad_residuals: np.ndarray, grad_logits: np.ndarray
    ) -> list[np.ndarray]:
        cfg = self.config
        t = cfg.templates_per_cell
        grads: dict[int, list[np.ndarray]] = {}

        # split the flat slot gradients back into per-grid head outputs
        offsets, pos = [], 0
        for m in cfg.grids:
            offsets.append((pos, pos + m * m * t))
            pos += m * m * t

        dmaps = [None] * len(cfg.grids)
        head_param_grads = []
        for i, ((name, loc, conf), (c_loc, c_conf), m) in enumerate(
            zip(self.heads, cache["heads"], cfg.grids)
        ):
            lo, hi = offsets[i]
            dloc = grad_residuals[lo:hi].reshape(m, m, 4 * t)
            dconf = grad_logits[lo:hi].reshape(m, m, t)
            dmap_l, g_loc = loc.backward(dloc, c_loc)
            dmap_c, g_conf = conf.backward(dconf, c_conf)
            dmaps[i] = dmap_l + dmap_c
            head_param_grads.append((g_loc, g_conf))

        dtop_extra = None
        global_grads = None
        if cfg.include_global:
            c_pool, c_gl, c_gc = cache["global"]
            dgl = grad_residuals[pos : pos + 1].reshape(1, 1, 4)
            dgc = grad_logits[pos : pos + 1].reshape(1, 1, 1)
            dp_l, g_gl = self.global_loc.backward(dgl, c_gl)
            dp_c, g_gc = self.global_conf.backward(dgc, c_gc)
            dtop_extra, _ = self.global_pool.backward(dp_l + dp_c, c_pool)
            global_grads = (g_gl, g_gc)

        # walk the taper chain backward, accumulating into the top map
        taper_param_grads = []
        d_carry = dmaps[-1]
        for i in range(len(self.tapers) - 1, -1, -1):
            _, conv, relu = self.tapers[i]
            c_conv, c_relu = cache["tapers"][i]
            d_carry, _ = relu.backward(d_carry, c_relu)
            d_carry, g_conv = conv.backward(d_carry, c_conv)
            taper_param_grads.append(g_conv)
            d_carry = d_carry + dmaps[i]
        taper_param_grads.reverse()

        dtop = d_carry
        if dtop_extra is not None:
            dtop = dtop + dtop_extra

        base_param_grads = []
        dx = dtop
        for (_, layer), c in zip(reversed(self.base), reversed(cache["base"])):
            dx, g = layer.backward(dx, c)
            base_param_grads.append(g)
        base_param_grads.reverse()

        out: list[np.ndarray] = []
        for g in base_param_grads:
            out.extend(g)
        for g in taper_param_grads:
            out.extend(g)
            out.extend([])  # relus have no params
        for g_loc, g_conf in head_param_grads:
            out.extend(g_loc)
            out.extend(g_conf)
        if cfg.include_global:
            out.extend(global_grads[0])
            out.extend(global_grads[1])
        return out


def proposer_forward(net: ProposerNet, image: np.ndarray) -> SlotPredictions:
    """Slot outputs for one image; deterministic given weights and input."""
    preds, _ = net.forward(image)
    return preds


@dataclass(frozen=True)
class PostClassifierConfig:
    num_classes: int = 3
    input_size: int = 32
    input_channels: int = 3
    block_channels: tuple[int, ...] = (8, 16, 16)
    reduce_channels: tuple[int, ...] = (8, 16)
    feature_width: int = 32
    context_width: int = 32
    seed: int = 0

    def __post_init__(self):
        if len(self.reduce_channels) != len(self.block_channels) - 1:
            raise ValueError("need one reduction between consecutive blocks")
        if self.num_classes < 1:
            raise ValueError("need at least one foreground class")

    @property
    def n_outputs(self) -> int:
        return self.num_classes + 1  # background is class 0

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "input_channels": self.input_channels,
            "block_channels": list(self.block_channels),
            "reduce_channels": list(self.reduce_channels),
            "feature_width": self.feature_width,
            "context_width": self.context_width,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "PostClassifierConfig":
        known = {f for f in PostClassifierConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown post-classifier config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("block_channels", "reduce_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return PostClassifierConfig(**d)


class PostClassifierNet:
    """Crop feature extractor plus combiner softmax classifier.

    The same class also serves as the context-feature network (a separate
    instance with its own weights); ``crop_features`` is its topmost
    pre-classifier feature vector.
    """

    def __init__(self, config: PostClassifierConfig):
        self.config = config
        rng = np.random.default_rng([_INIT_STREAM + 1, config.seed])
        self.base: list[tuple[str, object]] = []
        c = config.input_channels
        for i, bc in enumerate(config.block_channels):
            self.base.append((f"pc{i}.conv", Conv2D(3, 3, c, bc, pad=1, rng=rng)))
            self.base.append((f"pc{i}.relu", ReLU()))
            c = bc
            if i < len(config.reduce_channels):
                rc = config.reduce_channels[i]
                self.base.append((f"pc{i}.reduce", HybridReduce(c, rc, rng=rng)))
                c += rc
        self.base.append(("pc.pool", GlobalAvgPool()))
        self._pooled_channels = c
        self.feat = Dense(c, config.feature_width, rng=rng)
        self.feat_relu = ReLU()
        self.combiner = Dense(config.feature_width + config.context_width, self.config.n_outputs, rng=rng)

    def named_layers(self):
        out = list(self.base)
        out.append(("pc.feat", self.feat))
        out.append(("pc.feat.relu", self.feat_relu))
        out.append(("pc.combiner", self.combiner))
        return out

    @property
    def params(self):
        return [p for _, layer in self.named_layers() for p in layer.params]

    def named_params(self):
        out = []
        for name, layer in self.named_layers():
            for suffix, p in zip(("w", "b"), layer.params):
                out.append((f"{name}.{suffix}", p))
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            if name not in state:
                raise ValueError(f"checkpoint is missing parameter {name}")
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p[...] = state[name]

    def crop_features(self, crop: np.ndarray) -> tuple[np.ndarray, dict]:
        cfg = self.config
        if crop.shape != (cfg.input_size, cfg.input_size, cfg.input_channels):
            raise ValueError(
                f"expected crop {(cfg.input_size, cfg.input_size, cfg.input_channels)}, "
                f"got {crop.shape}"
            )
        cache: dict = {"base": []}
        x = crop
        for _, layer in self.base:
            x, c = layer.forward(x)
            cache["base"].append(c)
        flat = x.reshape(-1)
        f, c_feat = self.feat.forward(flat)
        f, c_relu = self.feat_relu.forward(f)
        cache["feat"] = (c_feat, c_relu)
        return f, cache

    def classify(
        self, features: np.ndarray, context: np.ndarray | None
    ) -> tuple[np.ndarray, dict]:
        """Class probabilities from object features plus optional context."""
        ctx = np.zeros(self.config.context_width) if context is None else context
        if ctx.shape != (self.config.context_width,):
            raise ValueError(
                f"expected context of width {self.config.context_width}, got {ctx.shape}"
            )
        joint = np.concatenate([features, ctx])
        logits, c_comb = self.combiner.forward(joint)
        return softmax(logits), {"combiner": c_comb, "logits": logits}

    def forward(
        self, crop: np.ndarray, context: np.ndarray | None = None
    ) -> tuple[np.ndarray, dict]:
        features, c_crop = self.crop_features(crop)
        probs, c_cls = self.classify(features, context)
        return probs, {"crop": c_crop, "cls": c_cls}

    def backward(self, dlogits: np.ndarray, cache: dict) -> list[np.ndarray]:
        """Gradients of all parameters from a gradient on the combiner logits.

        Context features are treated as fixed inputs: only the combiner and
        the crop-feature path receive gradient.
        """
        djoint, g_comb = self.combiner.backward(dlogits, cache["cls"]["combiner"])
        dfeat = djoint[: self.config.feature_width]

        c_feat, c_relu = cache["crop"]["feat"]
        dfeat, _ = self.feat_relu.backward(dfeat, c_relu)
        dflat, g_feat = self.feat.backward(dfeat, c_feat)
        dx = dflat.reshape(1, 1, self._pooled_channels)

        base_grads = []
        for (_, layer), c in zip(reversed(self.base), reversed(cache["crop"]["base"])):
            dx, g = layer.backward(dx, c)
            base_grads.append(g)
        base_grads.reverse()

        out: list[np.ndarray] = []
        for g in base_grads:
            out.extend(g)
        out.extend(g_feat)
        out.extend([])  # feat relu
        out.extend(g_comb)
        return out


def postclassifier_forward(
    net: PostClassifierNet, crop: np.ndarray, context: np.ndarray | None = None
) -> np.ndarray:
    """Class distribution over (num_classes + 1) outcomes, background first."""
    probs, _ = net.forward(crop, context)
    return probs


def extract_context_features(net: PostClassifierNet, image_crop: np.ndarray) -> np.ndarray:
    """Topmost pre-classifier feature vector of the context network."""
    features, _ = net.crop_features(image_crop)
    return features


def decode_confidences(logits: np.ndarray) -> np.ndarray:
    return sigmoid(logits)
