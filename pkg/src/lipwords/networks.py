"""Network variants for word-level visual speech recognition.

Every network is frontend -> per-timestep core -> temporal back-end:

  frontend   3D: conv 64x(5,7,7)/(1,2,2) + BN + ReLU + maxpool (1,3,3)/(1,2,2)
             2D: the same spatial recipe applied frame by frame
  core       ResNet-34 (pre-activation identity blocks, stages 3/4/6/3,
             widths 64/128/256/512) or a 3-layer DNN comparator
  back-end   two temporal conv layers + mean pool + linear, or a
             bidirectional LSTM with a per-timestep classifier

Variants:

  N1  2D frontend + ResNet + temporal-conv back-end
  N2  3D frontend + ResNet + temporal-conv back-end
  N3  3D frontend + DNN    + temporal-conv back-end
  N4  3D frontend + ResNet + 1-layer Bi-LSTM (add merge), trunk frozen
  N5  3D frontend + ResNet + 2-layer Bi-LSTM (add merge), trunk frozen
  N6  N5 topology, trained end-to-end
  N7  N6 with the final Bi-LSTM outputs concatenated instead of added

"Baseline" (a multi-tower VGG-M) is documented for comparison only and
cannot be built.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import ConfigError, ShapeError
from .layers import BatchNorm, BiLstm, Conv, Linear, MaxPool, Module

VARIANTS = ("N1", "N2", "N3", "N4", "N5", "N6", "N7")
DOCUMENTED_ONLY = ("Baseline",)


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and capacity knobs shared by all variants.

    Defaults give the full-size stack (31-frame 112x112 clips, 500-word
    vocabulary).  The "desk" preset shrinks frames and widths so that
    whole training runs finish in CPU-minutes.
    """

    frames: int = 31
    height: int = 112
    width: int = 112
    vocab: int = 500
    feat_dim: int = 256
    lstm_hidden: int = 256
    frontend_channels: int = 64
    resnet_blocks: tuple = (3, 4, 6, 3)
    resnet_widths: tuple = (64, 128, 256, 512)
    tconv_widths: tuple = (512, 1024)
    dnn_hidden: tuple = (384, 384)

    def __post_init__(self):
        for name in ("frames", "height", "width", "vocab", "feat_dim",
                     "lstm_hidden", "frontend_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model config field {name} must be positive")
        if len(self.resnet_blocks) != len(self.resnet_widths):
            raise ConfigError("resnet_blocks and resnet_widths must have equal length")
        object.__setattr__(self, "resnet_blocks", tuple(self.resnet_blocks))
        object.__setattr__(self, "resnet_widths", tuple(self.resnet_widths))
        object.__setattr__(self, "tconv_widths", tuple(self.tconv_widths))
        object.__setattr__(self, "dnn_hidden", tuple(self.dnn_hidden))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def frontend_spatial(self):
        """Per-frame spatial extents after the frontend conv + pool."""
        h = (self.height + 2 * 3 - 7) // 2 + 1
        w = (self.width + 2 * 3 - 7) // 2 + 1
        h = (h + 2 * 1 - 3) // 2 + 1
        w = (w + 2 * 1 - 3) // 2 + 1
        if h < 1 or w < 1:
            raise ConfigError(f"frames of {self.height}x{self.width} are too small for the frontend")
        return h, w

    def frontend_flat_size(self):
        h, w = self.frontend_spatial()
        return self.frontend_channels * h * w


def desk_config(vocab=10, crop=24, frames=31):
    """Reduced-capacity preset for CPU-scale experiments and tests."""
    return ModelConfig(
        frames=frames, height=crop, width=crop, vocab=vocab,
        feat_dim=64, lstm_hidden=64, frontend_channels=16,
        resnet_blocks=(1, 1, 1, 1), resnet_widths=(16, 32, 64, 128),
        tconv_widths=(64, 128), dnn_hidden=(96, 96))


PRESETS = {"full": lambda: ModelConfig(), "desk": desk_config}


# ---------------------------------------------------------------- frontends

class Frontend3d(Module):
    """Spatiotemporal conv + BN + ReLU + spatial max-pool."""

    def __init__(self, cfg, dtype=np.float32, rng=None):
        self.conv = Conv(1, cfg.frontend_channels, (5, 7, 7), stride=(1, 2, 2),
                         padding=(2, 3, 3), bias=True, dtype=dtype, rng=rng)
        self.bn = BatchNorm(cfg.frontend_channels, dtype=dtype)
        self.pool = MaxPool((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))

    def forward(self, x):
        return self.pool(self.bn(self.conv(x)).relu())


class Frontend2d(Module):
    """Per-frame 7x7 conv with the same spatial stride/pad/pool; time untouched."""

    def __init__(self, cfg, dtype=np.float32, rng=None):
        self.conv = Conv(1, cfg.frontend_channels, (7, 7), stride=(2, 2),
                         padding=(3, 3), bias=True, dtype=dtype, rng=rng)
        self.bn = BatchNorm(cfg.frontend_channels, dtype=dtype)
        self.pool = MaxPool((3, 3), stride=(2, 2), padding=(1, 1))

    def forward(self, x):
        if x.ndim != 5:
            raise ShapeError(f"frontend expects [N, 1, T, H, W], got {tuple(x.shape)}")
        n, _, t, h, w = x.shape
        frames = x.transpose((0, 2, 1, 3, 4)).reshape((n * t, 1, h, w))
        y = self.pool(self.bn(self.conv(frames)).relu())
        c, oh, ow = y.shape[1:]
        return y.reshape((n, t, c, oh, ow)).transpose((0, 2, 1, 3, 4))


# ---------------------------------------------------------------- cores

class PreactBlock(Module):
    """BN -> ReLU -> conv3x3 -> BN -> ReLU -> conv3x3 added to the shortcut."""

    def __init__(self, in_channels, out_channels, stride=1, dtype=np.float32, rng=None):
        self.bn1 = BatchNorm(in_channels, dtype=dtype)
        self.conv1 = Conv(in_channels, out_channels, (3, 3), stride=stride, padding=1,
                          bias=False, dtype=dtype, rng=rng)
        self.bn2 = BatchNorm(out_channels, dtype=dtype)
        self.conv2 = Conv(out_channels, out_channels, (3, 3), stride=1, padding=1,
                          bias=False, dtype=dtype, rng=rng)
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv(in_channels, out_channels, (1, 1), stride=stride, padding=0,
                             bias=False, dtype=dtype, rng=rng)
        else:
            self.proj = None

    def forward(self, x):
        y = self.conv1(self.bn1(x).relu())
        y = self.conv2(self.bn2(y).relu())
        shortcut = self.proj(x) if self.proj is not None else x
        return y + shortcut


class ResNet(Module):
    """Per-timestep residual tower: stages of pre-activation blocks, then
    global spatial average pooling, BN and a linear bridge to feat_dim."""

    def __init__(self, cfg, dtype=np.float32, rng=None):
        blocks = []
        in_ch = cfg.frontend_channels
        for stage, (depth, width) in enumerate(zip(cfg.resnet_blocks, cfg.resnet_widths)):
            for b in range(depth):
                stride = 2 if (stage > 0 and b == 0) else 1
                blocks.append(PreactBlock(in_ch, width, stride=stride, dtype=dtype, rng=rng))
                in_ch = width
        self.blocks = blocks
        self.bn_out = BatchNorm(in_ch, dtype=dtype)
        self.fc = Linear(in_ch, cfg.feat_dim, dtype=dtype, rng=rng)
        self._check_geometry(cfg)

    def _check_geometry(self, cfg):
        h, w = cfg.frontend_spatial()
        for stage in range(1, len(cfg.resnet_blocks)):
            h = (h + 2 - 3) // 2 + 1
            w = (w + 2 - 3) // 2 + 1
        if h < 1 or w < 1:
            raise ConfigError("input too small for the residual downsampling chain")

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        pooled = x.mean(axis=(2, 3))  # [M, C]
        return self.fc(self.bn_out(pooled))


class Dnn(Module):
    """Fully connected comparator: flat frontend maps -> hidden -> feat_dim,
    every layer followed by BN and ReLU."""

    def __init__(self, cfg, dtype=np.float32, rng=None):
        flat = cfg.frontend_flat_size()
        widths = [flat, *cfg.dnn_hidden, cfg.feat_dim]
        self.layers = [Linear(widths[i], widths[i + 1], dtype=dtype, rng=rng)
                       for i in range(len(widths) - 1)]
        self.norms = [BatchNorm(widths[i + 1], dtype=dtype) for i in range(len(widths) - 1)]
        self.input_size = flat

    def forward(self, x):
        flat = x.reshape((x.shape[0], int(np.prod(x.shape[1:]))))
        if flat.shape[1] != self.input_size:
            raise ConfigError(f"dnn built for flattened input {self.input_size}, got {flat.shape[1]}")
        for lin, bn in zip(self.layers, self.norms):
            flat = bn(lin(flat)).relu()
        return flat


# ---------------------------------------------------------------- back-ends

class TconvBackend(Module):
    """Two temporal conv layers (BN+ReLU+halving max-pool each), then mean
    pooling over time and a linear classifier; emits one logit vector."""

    def __init__(self, cfg, dtype=np.float32, rng=None):
        w0, w1 = cfg.tconv_widths
        t = cfg.frames
        if t // 2 // 2 < 1:
            raise ConfigError(f"{t} timesteps are too few for two temporal halvings")
        self.conv1 = Conv(cfg.feat_dim, w0, (5,), stride=1, padding=2, bias=False, dtype=dtype, rng=rng)
        self.bn1 = BatchNorm(w0, dtype=dtype)
        self.conv2 = Conv(w0, w1, (5,), stride=1, padding=2, bias=False, dtype=dtype, rng=rng)
        self.bn2 = BatchNorm(w1, dtype=dtype)
        self.pool = MaxPool((2,), stride=(2,))
        self.fc = Linear(w1, cfg.vocab, dtype=dtype, rng=rng)

    def forward(self, feats, n, t):
        x = feats.reshape((n, t, feats.shape[1])).transpose((0, 2, 1))  # [N, F, T]
        x = self.pool(self.bn1(self.conv1(x)).relu())
        x = self.pool(self.bn2(self.conv2(x)).relu())
        return self.fc(x.mean(axis=2))  # [N, V]


class BilstmBackend(Module):
    """Bidirectional LSTM over per-timestep features with a per-timestep
    classifier; no BN in front of the classifier."""

    def __init__(self, cfg, num_layers=2, merge="concat", dtype=np.float32, rng=None):
        self.rnn = BiLstm(cfg.feat_dim, cfg.lstm_hidden, num_layers=num_layers,
                          merge=merge, merge_between="add", dtype=dtype, rng=rng)
        self.fc = Linear(self.rnn.out_width, cfg.vocab, dtype=dtype, rng=rng)

    def forward(self, feats, n, t):
        seq = feats.reshape((n, t, feats.shape[1])).transpose((1, 0, 2))  # [T, N, F]
        merged = self.rnn(seq)
        flat = self.fc(merged.reshape((t * n, merged.shape[2])))
        return flat.reshape((t, n, flat.shape[1]))  # [T, N, V]


# ---------------------------------------------------------------- network

class Network(Module):
    """A built variant: frontend + per-timestep core + temporal back-end."""

    def __init__(self, variant, cfg, frontend, core, backend):
        self.variant = variant
        self.config = cfg
        self.trunk_frozen = False
        self.frontend = frontend
        self.core = core
        self.backend = backend

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"network expects [N, 1, T, H, W], got {tuple(x.shape)}")
        maps = self.frontend(x)  # [N, C, T, h, w]
        n, c, t, h, w = maps.shape
        per_step = maps.transpose((0, 2, 1, 3, 4)).reshape((n * t, c, h, w))
        feats = self.core(per_step)  # [N*T, feat]
        return self.backend(feats, n, t)

    def component_parameters(self):
        return {
            "frontend": self.frontend.named_parameters("frontend."),
            "core": self.core.named_parameters("core."),
            "backend": self.backend.named_parameters("backend."),
        }

    def parameter_counts(self):
        counts = {name: sum(p.size for p in params.values())
                  for name, params in self.component_parameters().items()}
        counts["total"] = sum(counts.values())
        return counts

    def freeze_trunk(self, frozen=True):
        """Freeze (or unfreeze) the frontend and core; the back-end stays live.

        Frozen components also stay in eval mode while the rest trains,
        so their batch-norm running statistics hold perfectly still.
        """
        self.trunk_frozen = bool(frozen)
        self.frontend.set_requires_grad(not frozen)
        self.core.set_requires_grad(not frozen)

    def set_training(self, flag):
        if self.trunk_frozen:
            self.backend.set_training(flag)
            self.frontend.set_training(False)
            self.core.set_training(False)
            self.training = bool(flag)
        else:
            super().set_training(flag)

    def trainable_parameters(self):
        return {name: p for name, p in self.named_parameters().items() if p.requires_grad}


_RECIPES = {
    "N1": dict(frontend="2d", core="resnet", backend="tconv"),
    "N2": dict(frontend="3d", core="resnet", backend="tconv"),
    "N3": dict(frontend="3d", core="dnn", backend="tconv"),
    "N4": dict(frontend="3d", core="resnet", backend="bilstm", layers=1, merge="add", frozen=True),
    "N5": dict(frontend="3d", core="resnet", backend="bilstm", layers=2, merge="add", frozen=True),
    "N6": dict(frontend="3d", core="resnet", backend="bilstm", layers=2, merge="add"),
    "N7": dict(frontend="3d", core="resnet", backend="bilstm", layers=2, merge="concat"),
}


def variant_recipe(variant):
    if variant in DOCUMENTED_ONLY:
        raise ConfigError(f"variant {variant!r} is documented for comparison only and cannot be built")
    if variant not in _RECIPES:
        raise ConfigError(f"unknown variant {variant!r}; choose one of {', '.join(VARIANTS)}")
    return dict(_RECIPES[variant])


def build_frontend(cfg, mode, dtype=np.float32, rng=None):
    if mode == "3d":
        return Frontend3d(cfg, dtype=dtype, rng=rng)
    if mode == "2d":
        return Frontend2d(cfg, dtype=dtype, rng=rng)
    raise ConfigError(f"unknown frontend mode {mode!r}")


def build_variant(variant, cfg=None, seed=0, dtype=np.float32):
    """Construct a named variant with seed-determined initial weights."""
    cfg = cfg or ModelConfig()
    recipe = variant_recipe(variant)
    rng = np.random.default_rng(np.random.SeedSequence([seed, VARIANTS.index(variant)]))
    frontend = build_frontend(cfg, recipe["frontend"], dtype=dtype, rng=rng)
    core = ResNet(cfg, dtype=dtype, rng=rng) if recipe["core"] == "resnet" else Dnn(cfg, dtype=dtype, rng=rng)
    if recipe["backend"] == "tconv":
        backend = TconvBackend(cfg, dtype=dtype, rng=rng)
    else:
        backend = BilstmBackend(cfg, num_layers=recipe["layers"], merge=recipe["merge"],
                                dtype=dtype, rng=rng)
    net = Network(variant, cfg, frontend, core, backend)
    if recipe.get("frozen"):
        net.freeze_trunk(True)
    return net
