"""Recurrent matching network hosting the graph reasoning stage.

Wiring per refinement iteration: correlation lookup around the current
flow estimate, motion encoding, graph reasoning and fusion of the two
feature streams, a ConvGRU state update, and a flow delta. The context
half of the graph stage depends only on the first frame, so it runs
once per pair and is reused across iterations.

No gradient detaching anywhere: the loss differentiates through every
iteration, including the flow estimates feeding later lookups, which
keeps finite-difference checks of the whole network honest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import FlowField
from .errors import ConfigError, ContractError, DimensionError
from .graph import GraphBlock
from .layers import Conv2d
from .tensor import (Tensor, absolute, add, avg_pool2x2, batched_sample,
                     bilinear_sample, concat, expand, matmul, mul, no_grad,
                     relu, reshape, scale, sigmoid, tanh, transpose, tsum)

PYRAMID_LEVELS = 4


@dataclass
class CorrelationPyramid:
    """Per-pixel matching costs against the target at 4 pooled scales."""

    levels: list        # level l: Tensor (N, ceil(h/2^l), ceil(w/2^l))
    feature_dim: int
    grid: tuple[int, int]


class ResBlock:
    def __init__(self, rng, ch):
        self.conv1 = Conv2d(rng, ch, ch, 3)
        self.conv2 = Conv2d(rng, ch, ch, 3)

    def __call__(self, x):
        return relu(add(x, self.conv2(relu(self.conv1(x)))))

    def register(self, params, prefix):
        self.conv1.register(params, f"{prefix}.conv1")
        self.conv2.register(params, f"{prefix}.conv2")


class Encoder:
    """Conv stem plus two residual blocks per scale, two stride-2 scales."""

    def __init__(self, rng, cout):
        mid = max(cout // 2, 2)
        self.stem = Conv2d(rng, 3, mid, 3, stride=2)
        self.blocks1 = [ResBlock(rng, mid), ResBlock(rng, mid)]
        self.down = Conv2d(rng, mid, cout, 3, stride=2)
        self.blocks2 = [ResBlock(rng, cout), ResBlock(rng, cout)]
        self.out = Conv2d(rng, cout, cout, 1, gain="linear")

    def __call__(self, x):
        h = relu(self.stem(x))
        for blk in self.blocks1:
            h = blk(h)
        h = relu(self.down(h))
        for blk in self.blocks2:
            h = blk(h)
        return self.out(h)

    def register(self, params, prefix):
        self.stem.register(params, f"{prefix}.stem")
        for i, blk in enumerate(self.blocks1):
            blk.register(params, f"{prefix}.layer1.block{i}")
        self.down.register(params, f"{prefix}.down")
        for i, blk in enumerate(self.blocks2):
            blk.register(params, f"{prefix}.layer2.block{i}")
        self.out.register(params, f"{prefix}.out")


class MotionEncoder:
    """Four convs: two on correlation features, one on flow, one after concat."""

    def __init__(self, rng, corr_ch, cout):
        half = max(cout // 2, 1)
        self.corr1 = Conv2d(rng, corr_ch, cout, 1)
        self.corr2 = Conv2d(rng, cout, cout, 3)
        self.flow1 = Conv2d(rng, 2, half, 3)
        self.fuse = Conv2d(rng, cout + half, cout, 3, gain="linear")

    def __call__(self, corr_feats, flow):
        a = relu(self.corr2(relu(self.corr1(corr_feats))))
        b = relu(self.flow1(flow))
        return self.fuse(concat([a, b], axis=0))

    def register(self, params, prefix):
        for name, conv in (("corr1", self.corr1), ("corr2", self.corr2),
                           ("flow1", self.flow1), ("fuse", self.fuse)):
            conv.register(params, f"{prefix}.{name}")


class ConvGRU:
    """Gated state update; input is the fused (2C) feature map."""

    def __init__(self, rng, hidden, input_ch):
        both = hidden + input_ch
        self.init_conv = Conv2d(rng, hidden, hidden, 3, gain="linear")
        self.convz = Conv2d(rng, both, hidden, 3, gain="linear")
        self.convr = Conv2d(rng, both, hidden, 3, gain="linear")
        self.convq = Conv2d(rng, both, hidden, 3, gain="linear")

    def initial_state(self, context):
        return tanh(self.init_conv(context))

    def __call__(self, hidden, x):
        hx = concat([hidden, x], axis=0)
        z = sigmoid(self.convz(hx))
        r = sigmoid(self.convr(hx))
        q = tanh(self.convq(concat([mul(r, hidden), x], axis=0)))
        one_minus_z = add(scale(z, -1.0), 1.0)
        return add(mul(one_minus_z, hidden), mul(z, q))

    def register(self, params, prefix):
        self.init_conv.register(params, f"{prefix}.init")
        self.convz.register(params, f"{prefix}.convz")
        self.convr.register(params, f"{prefix}.convr")
        self.convq.register(params, f"{prefix}.convq")


class FlowHead:
    def __init__(self, rng, hidden):
        self.conv1 = Conv2d(rng, hidden, hidden, 3)
        self.conv2 = Conv2d(rng, hidden, 2, 3, gain="linear")

    def __call__(self, hidden):
        return self.conv2(relu(self.conv1(hidden)))

    def register(self, params, prefix):
        self.conv1.register(params, f"{prefix}.conv1")
        self.conv2.register(params, f"{prefix}.conv2")


# -- correlation -------------------------------------------------------------


def build_corr_pyramid(f1: Tensor, f2: Tensor) -> CorrelationPyramid:
    """All-pairs dot products scaled by 1/sqrt(c_f), then 3 poolings."""
    if f1.shape != f2.shape:
        raise DimensionError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    c, h, w = f1.shape
    n = h * w
    a = transpose(reshape(f1, (c, n)))                 # (N, c)
    b = reshape(f2, (c, n))                            # (c, N)
    vol = scale(matmul(a, b), 1.0 / float(np.sqrt(c)))
    levels = [reshape(vol, (n, h, w))]
    for _ in range(PYRAMID_LEVELS - 1):
        levels.append(avg_pool2x2(levels[-1]))
    return CorrelationPyramid(levels=levels, feature_dim=c, grid=(h, w))


def lookup(pyr: CorrelationPyramid, flow: Tensor, radius: int) -> Tensor:
    """Cost windows around (p + flow(p)) / 2^l, all levels concatenated.

    Channel order is level-major, then window rows top to bottom, so
    channel l*(2r+1)^2 + (dy+r)*(2r+1) + (dx+r) reads offset (dx, dy)
    at level l.
    """
    h, w = pyr.grid
    n = h * w
    if flow.shape != (2, h, w):
        raise DimensionError(f"flow {flow.shape} does not match grid {(2, h, w)}")
    side = 2 * radius + 1
    s = side * side
    dtype = flow.dtype
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype),
                         indexing="ij")
    grid = Tensor(np.stack([xs, ys]), dtype=dtype)
    dy, dx = np.meshgrid(np.arange(-radius, radius + 1, dtype=dtype),
                         np.arange(-radius, radius + 1, dtype=dtype),
                         indexing="ij")
    offsets = Tensor(np.stack([dx.reshape(-1), dy.reshape(-1)])
                     .reshape(2, 1, s), dtype=dtype)
    centers = reshape(add(grid, flow), (2, n, 1))
    out = []
    for lvl, vol in enumerate(pyr.levels):
        coords = add(expand(scale(centers, 1.0 / 2 ** lvl), (2, n, s)),
                     expand(offsets, (2, n, s)))
        sampled = batched_sample(vol, coords)          # (N, S)
        out.append(reshape(transpose(sampled), (s, h, w)))
    return concat(out, axis=0)


def upsample_flow(flow: Tensor, d: int) -> Tensor:
    """Bilinear upsample by d with displacement values scaled by d.

    Sample positions are clamped to the border, so constant fields stay
    exactly constant.
    """
    if flow.data.ndim != 3 or flow.shape[0] != 2:
        raise DimensionError(f"flow must be (2,h,w), got {flow.shape}")
    _, h, w = flow.shape
    dtype = flow.dtype
    oy, ox = np.meshgrid(np.arange(h * d, dtype=dtype),
                         np.arange(w * d, dtype=dtype), indexing="ij")
    sy = np.clip((oy + 0.5) / d - 0.5, 0.0, h - 1.0)
    sx = np.clip((ox + 0.5) / d - 0.5, 0.0, w - 1.0)
    coords = Tensor(np.stack([sx, sy]), dtype=dtype)
    return scale(bilinear_sample(flow, coords), float(d))


# -- loss --------------------------------------------------------------------


def sequence_loss(preds, gt: FlowField, gamma: float = 0.8) -> Tensor:
    """Exponentially weighted L1 over the prediction sequence.

    Sum_i gamma^(T-1-i) * mean over valid pixels of |du| + |dv|; later
    iterations weigh more.
    """
    preds = [p.flow if isinstance(p, FlowField) else p for p in preds]
    if not preds:
        raise ContractError("sequence_loss needs at least one prediction")
    if not isinstance(gt, FlowField):
        gt = FlowField(flow=np.asarray(gt))
    garr = gt.array
    valid = gt.valid_mask()
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("no valid pixels in the ground truth")
    t = len(preds)
    total = None
    for i, pred in enumerate(preds):
        if pred.shape != garr.shape:
            raise DimensionError(
                f"prediction {i} shape {pred.shape} != ground truth {garr.shape}")
        gt_t = Tensor(garr, dtype=pred.dtype)
        mask = Tensor(np.broadcast_to(valid, garr.shape).astype(garr.dtype),
                      dtype=pred.dtype)
        diff = absolute(add(pred, scale(gt_t, -1.0)))
        term = scale(tsum(mul(diff, mask)), gamma ** (t - 1 - i) / n_valid)
        total = term if total is None else add(total, term)
    return total


# -- the full network --------------------------------------------------------


class FlowModel:
    """End-to-end network; parameters live in one ordered registry."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        side = 2 * cfg.lookup_radius + 1
        corr_ch = PYRAMID_LEVELS * side * side
        self.params: dict[str, Tensor] = {}
        self.fnet = Encoder(rng, cfg.feature_channels)
        self.fnet.register(self.params, "fnet")
        self.cnet = Encoder(rng, cfg.context_channels)
        self.cnet.register(self.params, "cnet")
        self.motion = MotionEncoder(rng, corr_ch, cfg.context_channels)
        self.motion.register(self.params, "mot")
        self.graph = GraphBlock(cfg.context_channels, cfg.nodes,
                                context_steps=cfg.context_iters,
                                motion_steps=cfg.motion_iters,
                                mode=cfg.graph, rng=rng)
        self.params.update(self.graph.params)
        self.gru = ConvGRU(rng, cfg.context_channels, 2 * cfg.context_channels)
        self.gru.register(self.params, "gru")
        self.head = FlowHead(rng, cfg.context_channels)
        self.head.register(self.params, "head")

    # -- plumbing ------------------------------------------------------------

    def _prep_image(self, img, name) -> Tensor:
        if isinstance(img, Tensor):
            arr = img.data
        else:
            arr = np.asarray(img)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DimensionError(f"{name} must be (3,H,W), got {arr.shape}")
        d = self.cfg.downsample
        if arr.shape[1] % d or arr.shape[2] % d:
            raise ConfigError(
                f"{name} extents {arr.shape[1]}x{arr.shape[2]} are not "
                f"divisible by downsample={d}")
        some = Tensor(arr, dtype=next(iter(self.params.values())).dtype)
        return add(scale(some, 2.0), -1.0)             # [0,1] -> [-1,1]

    def encode_features(self, i1, i2):
        x1 = self._prep_image(i1, "first image")
        x2 = self._prep_image(i2, "second image")
        return self.fnet(x1), self.fnet(x2)

    def encode_context(self, i1):
        return self.cnet(self._prep_image(i1, "first image"))

    def forward(self, i1, i2) -> list:
        """All refinement iterations' upsampled flow predictions."""
        cfg = self.cfg
        f1, f2 = self.encode_features(i1, i2)
        fc = self.encode_context(i1)
        pyr = build_corr_pyramid(f1, f2)
        hidden = self.gru.initial_state(fc)
        cache = self.graph.context_stage(fc)
        h, w = pyr.grid
        flow = Tensor(np.zeros((2, h, w)), dtype=f1.dtype)
        preds = []
        for _ in range(cfg.refine_iters):
            corr_feats = lookup(pyr, flow, cfg.lookup_radius)
            fm = self.motion(corr_feats, flow)
            fo = self.graph.forward(fc, fm, cache)
            hidden = self.gru(hidden, fo)
            flow = add(flow, self.head(hidden))
            preds.append(upsample_flow(flow, cfg.downsample))
        return preds

    def predict(self, i1, i2) -> FlowField:
        """Final full-resolution flow, gradient-free."""
        with no_grad():
            preds = self.forward(i1, i2)
        return FlowField(flow=preds[-1].data.astype(np.float32))

    # -- state ---------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        """Install weights; auxiliary 'opt.' / 'meta.' entries are ignored.

        Unknown parameter names or mismatched extents indicate a
        checkpoint written for a different configuration.
        """
        for name in entries:
            if name not in self.params and not name.startswith(("opt.", "meta.")):
                raise ContractError(
                    f"checkpoint entry {name!r} does not exist in this model")
        for name, p in self.params.items():
            if name not in entries:
                raise ContractError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(entries[name])
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: checkpoint extents {arr.shape} "
                    f"do not match model extents {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())
