"""Miniature two-stage matting network.

The coarse stage is an encoder-decoder with one shared encoder and three
parallel decoders (mask, color filter, refractive flow). Every decoder level
concatenates the encoder feature map of the same resolution. The refine
stage is a residual trunk that predicts corrections to the coarse filter and
flow; the mask passes through unchanged.

All convolutions are 3x3 with replicate padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError

HEADS = {"mask": 2, "filter": 3, "flow": 2}
REFINE_FLOW_STEP = 10.0  # pixels per unit of the refine flow head


def _conv_init(rng: np.random.Generator, c_out: int, c_in: int, dtype, zero: bool = False):
    shape = (c_out, c_in, 3, 3)
    if zero:
        w = np.zeros(shape, dtype=dtype)
    else:
        w = (rng.standard_normal(shape) * np.sqrt(2.0 / (c_in * 9))).astype(dtype)
    return T.Tensor(w, requires_grad=True), T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)


class _Params:
    weights: dict[str, T.Tensor]

    def tensors(self) -> list[T.Tensor]:
        return list(self.weights.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.weights.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.weights):
            missing = sorted(set(self.weights) - set(state))
            extra = sorted(set(state) - set(self.weights))
            raise ShapeError("checkpoint tensors do not match the architecture", missing=missing, extra=extra)
        for k, v in state.items():
            if v.shape != self.weights[k].shape:
                raise ShapeError("checkpoint tensor has the wrong shape", name=k, shape=list(v.shape))
            self.weights[k].data = np.array(v, dtype=self.weights[k].dtype)

    def n_parameters(self) -> int:
        return sum(v.data.size for v in self.weights.values())

    def _conv(self, name: str, x: T.Tensor, stride: int = 1) -> T.Tensor:
        return T.conv2d(x, self.weights[name + ".w"], self.weights[name + ".b"], stride=stride)


@dataclass
class CoarseNetParams(_Params):
    depth: int = 4
    base_features: int = 16
    weights: dict[str, T.Tensor] = field(default_factory=dict, repr=False)

    def features(self, level: int) -> int:
        # level 0 is the full-resolution stem; widths double per level, capped at 4x base
        if level == 0:
            return self.base_features
        return self.base_features * 2 ** min(level - 1, 2)

    def config(self) -> dict:
        return {"depth": self.depth, "base_features": self.base_features}


@dataclass
class RefineNetParams(_Params):
    blocks: int = 5
    features: int = 32
    weights: dict[str, T.Tensor] = field(default_factory=dict, repr=False)

    def config(self) -> dict:
        return {"blocks": self.blocks, "features": self.features}


@dataclass
class CoarsePrediction:
    mask_logits: T.Tensor
    filter: T.Tensor
    flow: T.Tensor

    def mask_prob(self) -> T.Tensor:
        """Foreground probability (softmax channel 1), keeping the channel axis."""
        return T.channel_softmax(self.mask_logits)[..., 1:2, :, :]


def init_coarse(seed: int, depth: int = 4, base_features: int = 16, dtype=np.float32) -> CoarseNetParams:
    rng = np.random.default_rng(seed)
    p = CoarseNetParams(depth, base_features)
    w = p.weights
    w["enc0.w"], w["enc0.b"] = _conv_init(rng, p.features(0), 3, dtype)
    for level in range(1, depth + 1):
        w[f"enc{level}.w"], w[f"enc{level}.b"] = _conv_init(rng, p.features(level), p.features(level - 1), dtype)
    for head, n_out in HEADS.items():
        prev = p.features(depth)
        for level in range(depth, 0, -1):
            c_out = p.features(level - 1)
            w[f"{head}.dec{level}.w"], w[f"{head}.dec{level}.b"] = _conv_init(
                rng, c_out, prev + p.features(level - 1), dtype
            )
            prev = c_out
        w[f"{head}.out.w"], w[f"{head}.out.b"] = _conv_init(rng, n_out, prev, dtype, zero=True)
    return p


def init_refine(seed: int, blocks: int = 5, features: int = 32, dtype=np.float32) -> RefineNetParams:
    rng = np.random.default_rng(seed)
    p = RefineNetParams(blocks, features)
    w = p.weights
    w["in.w"], w["in.b"] = _conv_init(rng, features, 10, dtype)
    for i in range(blocks):
        w[f"block{i}.a.w"], w[f"block{i}.a.b"] = _conv_init(rng, features, features, dtype)
        w[f"block{i}.b.w"], w[f"block{i}.b.b"] = _conv_init(rng, features, features, dtype)
    w["delta_filter.w"], w["delta_filter.b"] = _conv_init(rng, 3, features, dtype, zero=True)
    w["delta_flow.w"], w["delta_flow.b"] = _conv_init(rng, 2, features, dtype, zero=True)
    return p


def init_weights(seed: int, **kwargs) -> tuple[CoarseNetParams, RefineNetParams]:
    coarse_kw = {k: kwargs[k] for k in ("depth", "base_features", "dtype") if k in kwargs}
    refine_kw = {k: kwargs[k] for k in ("blocks", "features", "dtype") if k in kwargs}
    return init_coarse(seed, **coarse_kw), init_refine(seed + 1, **refine_kw)


def _as_input(image, dtype) -> T.Tensor:
    if isinstance(image, T.Tensor):
        return image
    return T.Tensor(np.asarray(image, dtype=dtype))


def flow_scale(height: int, width: int, dtype) -> np.ndarray:
    return np.array([width, height], dtype=dtype).reshape(2, 1, 1)


def coarse_forward(params: CoarseNetParams, image) -> CoarsePrediction:
    """Run the coarse stage on a ``[3,H,W]`` or ``[N,3,H,W]`` image in [0, 1]."""
    dtype = params.weights["enc0.w"].dtype
    x = _as_input(image, dtype)
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise ShapeError("coarse_forward expects a 3-channel image", shape=list(x.shape))
    h, w = x.shape[-2:]
    step = 2**params.depth
    if h % step or w % step:
        raise ShapeError(f"image size must be divisible by {step}", height=h, width=w)

    skips = [T.relu(params._conv("enc0", x - 0.5))]
    for level in range(1, params.depth + 1):
        skips.append(T.relu(params._conv(f"enc{level}", skips[-1], stride=2)))

    outs = {}
    for head in HEADS:
        y = skips[-1]
        for level in range(params.depth, 0, -1):
            y = T.concat([T.upsample_nearest2x(y), skips[level - 1]], axis=-3)
            y = T.relu(params._conv(f"{head}.dec{level}", y))
        outs[head] = params._conv(f"{head}.out", y)

    return CoarsePrediction(
        mask_logits=outs["mask"],
        filter=T.sigmoid(outs["filter"]),
        flow=T.mul(T.tanh(outs["flow"]), flow_scale(h, w, dtype)),
    )


def refine_forward(params: RefineNetParams, image, coarse: CoarsePrediction) -> tuple[T.Tensor, T.Tensor]:
    """Residual refinement of the coarse filter and flow."""
    dtype = params.weights["in.w"].dtype
    x = _as_input(image, dtype)
    if coarse.filter.shape[-2:] != x.shape[-2:] or coarse.flow.shape[-2:] != x.shape[-2:]:
        raise ShapeError(
            "image and coarse prediction sizes differ",
            image=list(x.shape),
            filter=list(coarse.filter.shape),
            flow=list(coarse.flow.shape),
        )
    h, w = x.shape[-2:]
    scale = flow_scale(h, w, dtype)
    prob = T.channel_softmax(coarse.mask_logits)
    feats = T.concat([x, prob, coarse.filter, T.mul(coarse.flow, 1.0 / scale)], axis=-3)

    y = T.relu(params._conv("in", feats))
    for i in range(params.blocks):
        y = y + params._conv(f"block{i}.b", T.relu(params._conv(f"block{i}.a", y)))
    y = T.relu(y)

    d_filter = params._conv("delta_filter", y)
    d_flow = params._conv("delta_flow", y)
    filt = T.clamp(coarse.filter + d_filter, 0.0, 1.0)
    flow = T.clamp(coarse.flow + d_flow * REFINE_FLOW_STEP, -scale, scale)
    return filt, flow
