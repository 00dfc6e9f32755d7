"""MobileNetV2-style multi-label classifier over log-Mel spectrograms.

The spectrogram is treated as a one-channel (time x mel) image. Layout:
stem conv -> inverted residual stack -> 1x1 conv to the embedding width ->
global mean pool -> linear -> sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import ArgumentError, ConfigurationError, NumericError, ShapeError, StateError
from ..labels import LabelVocabulary
from . import layers as L

RUNNING_SUFFIXES = (".running_mean", ".running_var")

# (expansion, output channels, repeats, first stride)
MOBILENET_V2_BLOCKS = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def make_divisible(v, divisor=8):
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


@dataclass(frozen=True)
class ArchitectureConfig:
    num_outputs: int
    blocks: tuple = MOBILENET_V2_BLOCKS
    stem_channels: int = 32
    stem_stride: int = 2
    embed_dim: int = 1280
    width_mult: float = 1.0
    n_mels: int = 64
    in_channels: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        if self.num_outputs < 1 or self.stem_channels < 1 or self.embed_dim < 1 \
                or self.n_mels < 1 or self.width_mult <= 0 or not self.blocks:
            raise ConfigurationError(f"invalid architecture config: {self}")
        for b in self.blocks:
            if len(b) != 4 or min(b) < 1:
                raise ConfigurationError(f"block spec must be 4 positive ints, got {b}")

    @property
    def stem_width(self) -> int:
        return make_divisible(self.stem_channels * self.width_mult)

    @property
    def embed_width(self) -> int:
        return make_divisible(self.embed_dim * max(1.0, self.width_mult))

    def layer_plan(self):
        """Yield (index, in_ch, hidden, out_ch, stride, expand, residual) per block."""
        cin = self.stem_width
        i = 0
        for t, c, n, s in self.blocks:
            cout = make_divisible(c * self.width_mult)
            for r in range(n):
                stride = s if r == 0 else 1
                hidden = int(round(cin * t))
                yield i, cin, hidden, cout, stride, t != 1, stride == 1 and cin == cout
                cin = cout
                i += 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


def reference_config(num_outputs: int = 537) -> ArchitectureConfig:
    return ArchitectureConfig(num_outputs=num_outputs)


def tiny_config(num_outputs: int = 5, n_mels: int = 8) -> ArchitectureConfig:
    """Two blocks, F=32: small enough for exhaustive gradient checks."""
    return ArchitectureConfig(num_outputs=num_outputs, blocks=((1, 8, 1, 1), (4, 8, 1, 2)),
                              stem_channels=8, embed_dim=32, n_mels=n_mels)


def small_config(num_outputs: int) -> ArchitectureConfig:
    """Desk-scale layout used for the synthetic experiments."""
    return ArchitectureConfig(num_outputs=num_outputs,
                              blocks=((1, 16, 1, 2), (4, 24, 2, 2), (4, 32, 2, 2), (4, 48, 1, 1)),
                              stem_channels=16, embed_dim=128)


PRESETS = {"reference": reference_config, "tiny": tiny_config, "small": small_config}


def preset_config(name: str, num_outputs: int) -> ArchitectureConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown architecture preset {name!r}; "
                                 f"choose from {sorted(PRESETS)}") from None
    if name == "tiny":
        return factory(num_outputs, 64)
    return factory(num_outputs)


@dataclass
class ModelParameters:
    config: ArchitectureConfig
    tensors: dict
    version: int = field(default=0, compare=False)

    def trainable_names(self):
        return [k for k in self.tensors if not k.endswith(RUNNING_SUFFIXES)]

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _conv_layers(cfg: ArchitectureConfig):
    """Yield (prefix, weight shape) for every conv+bn pair, in forward order."""
    yield "stem", (cfg.stem_width, cfg.in_channels, 3, 3)
    for i, cin, hidden, cout, stride, expand, _ in cfg.layer_plan():
        if expand:
            yield f"blocks.{i}.expand", (hidden, cin, 1, 1)
        yield f"blocks.{i}.dw", (hidden, 1, 3, 3)
        yield f"blocks.{i}.project", (cout, hidden, 1, 1)
    last = list(cfg.layer_plan())[-1][3]
    yield "head", (cfg.embed_width, last, 1, 1)


def parameter_shapes(cfg: ArchitectureConfig) -> dict:
    shapes = {}
    for prefix, wshape in _conv_layers(cfg):
        c = wshape[0]
        shapes[f"{prefix}.conv.weight"] = wshape
        for name in ("weight", "bias", "running_mean", "running_var"):
            shapes[f"{prefix}.bn.{name}"] = (c,)
    shapes["classifier.weight"] = (cfg.num_outputs, cfg.embed_width)
    shapes["classifier.bias"] = (cfg.num_outputs,)
    return shapes


def build_model(cfg: ArchitectureConfig, v: LabelVocabulary | None = None,
                seed: int = 0) -> ModelParameters:
    """Deterministically initialise parameters from ``seed``.

    Conv kernels are He-uniform over their fan-in, norms start at unit
    scale / zero shift, the classifier weight is uniform in
    ``+-1/sqrt(F)`` and its bias is zero.
    """
    if v is not None and len(v) != cfg.num_outputs:
        raise ConfigurationError(
            f"architecture has {cfg.num_outputs} outputs but vocabulary has {len(v)} labels")
    rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1)))
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("conv.weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            t = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(("bn.weight", "running_var")):
            t = np.ones(shape)
        elif name == "classifier.weight":
            bound = 1.0 / np.sqrt(shape[1])
            t = rng.uniform(-bound, bound, size=shape)
        else:
            t = np.zeros(shape)
        tensors[name] = t.astype(np.float32)
    return ModelParameters(cfg, tensors)


def count_parameters(p: ModelParameters) -> int:
    return int(sum(p.tensors[k].size for k in p.trainable_names()))


class ForwardCache:
    def __init__(self, version, steps, logits):
        self.version = version
        self.steps = steps
        self.logits = logits


def _conv_bn(p, prefix, x, train, stride=1, act=True, record=None):
    t = p.tensors
    cfg = p.config
    w = t[f"{prefix}.conv.weight"]
    if prefix.endswith(".dw"):
        y, conv_cache = L.depthwise_forward(x, w, stride)
        kind = "dw"
    elif w.shape[2] == 1:
        y, conv_cache = L.pointwise_forward(x, w)
        kind = "pw"
    else:
        y, conv_cache = L.conv_forward(x, w, stride)
        kind = "conv"
    y, bn_cache = L.batchnorm_forward(
        y, t[f"{prefix}.bn.weight"], t[f"{prefix}.bn.bias"],
        t[f"{prefix}.bn.running_mean"], t[f"{prefix}.bn.running_var"],
        train, cfg.bn_eps, cfg.bn_momentum)
    pre = None
    if act:
        y, pre = L.relu6_forward(y)
    if record is not None:
        record.append((prefix, kind, conv_cache, bn_cache, pre))
    return y


def _check_input(p: ModelParameters, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"expected (batch, frames, mels) input, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    if x.shape[2] != p.config.n_mels:
        raise ShapeError(f"model expects {p.config.n_mels} mel bins, got {x.shape[2]}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in model input")
    return x


def forward_logits(p: ModelParameters, x, mode: str = "eval"):
    """Return ``(logits, cache)``; the cache is None in eval mode."""
    if mode not in ("train", "eval"):
        raise ArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    dtype = p.tensors["classifier.weight"].dtype
    x = _check_input(p, x).astype(dtype, copy=False)
    cfg = p.config
    steps = [] if train else None

    h = _conv_bn(p, "stem", x[..., None], train, cfg.stem_stride, record=steps)
    for i, cin, hidden, cout, stride, expand, residual in cfg.layer_plan():
        if train:
            steps.append(("block_in", i, residual))
        inp = h
        if expand:
            h = _conv_bn(p, f"blocks.{i}.expand", h, train, record=steps)
        h = _conv_bn(p, f"blocks.{i}.dw", h, train, stride, record=steps)
        h = _conv_bn(p, f"blocks.{i}.project", h, train, act=False, record=steps)
        if residual:
            h = h + inp
    h = _conv_bn(p, "head", h, train, record=steps)
    pooled, pool_shape = L.mean_pool_forward(h)
    # accumulate in float64 so a column's logit does not depend on how many
    # other columns share the matmul (keeps stripped models consistent)
    w, b = p.tensors["classifier.weight"], p.tensors["classifier.bias"]
    logits = (pooled.astype(np.float64) @ w.T.astype(np.float64) + b).astype(dtype)
    if not train:
        return logits, None
    steps.append(("pool", pool_shape, pooled))
    return logits, ForwardCache(p.version, steps, logits)


def forward(p: ModelParameters, x, mode: str = "eval"):
    """Per-label sigmoid probabilities, shape (batch, num_outputs).

    In train mode returns ``(probs, cache)`` for :func:`backward`.
    """
    logits, cache = forward_logits(p, x, mode)
    probs = L.sigmoid(logits)
    return (probs, cache) if mode == "train" else probs


def _conv_bn_backward(p, step, dy, grads):
    prefix, kind, conv_cache, bn_cache, pre = step
    if pre is not None:
        dy = L.relu6_backward(dy, pre)
    dy, dgamma, dbeta = L.batchnorm_backward(dy, bn_cache)
    grads[f"{prefix}.bn.weight"] = dgamma
    grads[f"{prefix}.bn.bias"] = dbeta
    if kind == "dw":
        dx, dw = L.depthwise_backward(dy, conv_cache)
    elif kind == "pw":
        dx, dw = L.pointwise_backward(dy, conv_cache)
    else:
        dx, dw = L.conv_backward(dy, conv_cache)
    grads[f"{prefix}.conv.weight"] = dw
    return dx


def backward(p: ModelParameters, cache: ForwardCache, grad_logits) -> dict:
    """Gradients of every trainable tensor given d(loss)/d(logits).

    The cache must come from a train-mode forward on the same parameter
    version; batch-norm uses that batch's statistics.
    """
    if cache is None or not isinstance(cache, ForwardCache):
        raise StateError("backward needs the cache of a train-mode forward pass")
    if cache.version != p.version:
        raise StateError("forward cache is stale: parameters changed since it was produced")
    grad_logits = np.asarray(grad_logits, dtype=cache.logits.dtype)
    if grad_logits.shape != cache.logits.shape:
        raise ShapeError(f"grad_logits shape {grad_logits.shape} != logits {cache.logits.shape}")

    grads = {}
    steps = cache.steps
    _, pool_shape, pooled = steps[-1]
    grads["classifier.weight"] = grad_logits.T @ pooled
    grads["classifier.bias"] = grad_logits.sum(axis=0)
    dh = L.mean_pool_backward(grad_logits @ p.tensors["classifier.weight"], pool_shape)

    pos = len(steps) - 2
    dh = _conv_bn_backward(p, steps[pos], dh, grads)  # head
    pos -= 1
    # Walk blocks in reverse; each begins with a ("block_in", i, residual) marker.
    while steps[pos][0] != "stem":
        end = pos
        while steps[pos][0] != "block_in":
            pos -= 1
        residual = steps[pos][2]
        d_in = dh
        for step in reversed(steps[pos + 1:end + 1]):
            d_in = _conv_bn_backward(p, step, d_in, grads)
        dh = d_in + dh if residual else d_in
        pos -= 1
    _conv_bn_backward(p, steps[pos], dh, grads)
    return {k: grads[k] for k in p.trainable_names()}


def strip_output(p: ModelParameters, keep, v: LabelVocabulary):
    """Keep only the classifier rows for ``keep`` (in that order).

    Sound-event names must precede keyword names in ``keep`` so the result
    is still a valid (events, keywords) vocabulary.
    """
    keep = list(keep)
    if not keep:
        raise ArgumentError("keep list is empty")
    unknown = [n for n in keep if n not in v]
    if unknown:
        raise ArgumentError(f"unknown labels in keep list: {unknown}")
    if len(set(keep)) != len(keep):
        raise ArgumentError("keep list has duplicates")
    rows = [v.index(n) for n in keep]
    is_kw = [r >= v.C for r in rows]
    if any(a and not b for a, b in zip(is_kw, is_kw[1:])):
        raise ArgumentError("keep list must list sound events before keywords")
    if len(v) != p.config.num_outputs:
        raise ConfigurationError("model and vocabulary sizes differ")

    tensors = {k: t.copy() for k, t in p.tensors.items()}
    tensors["classifier.weight"] = p.tensors["classifier.weight"][rows].copy()
    tensors["classifier.bias"] = p.tensors["classifier.bias"][rows].copy()
    new_v = LabelVocabulary([n for n, k in zip(keep, is_kw) if not k],
                            [n for n, k in zip(keep, is_kw) if k])
    return ModelParameters(replace(p.config, num_outputs=len(keep)), tensors), new_v
