"""Forecast networks: the spread (uncertainty) net, the bias-correction
U-Net with a locally connected head, and their calibrated composition.

All networks work in LAS-standardised space on the channel layout of
:func:`enspost.preprocess.assemble_batch`. Spreads are in "scaled" units
(field spread divided by the LAS std map).
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import ForecastDistribution
from .preprocess import LEAD_TIMES, Batch, LasMaps, spread_channel
from .tensor import (Conv2d, ConvBNReLU, LocallyConnected, Module, Parameter, Tensor, bilinear_upsample_2x,
                     concat, l1_adjacent_penalty, load_checkpoint, max_pool2x2, no_grad, save_checkpoint,
                     sigmoid, softplus)

__all__ = ["ModelConfig", "SpreadNet", "BiasNet", "ModelId", "parse_model_id", "calibrated_forecast",
           "build_model", "save_model", "load_model", "l1_adjacent_penalty", "SIGMA_FLOOR"]

SIGMA_FLOOR = 1e-4


@dataclass
class ModelConfig:
    """Architecture description, stored in every checkpoint header."""

    height: int = 32
    width: int = 64
    n_input_members: int = 5
    base_filters: int = 32
    n_inception_blocks: int = 10
    dilation_rates: tuple = (1, 2, 4)
    encoder_channels: int = 8
    unet_levels: int = 3
    unet_widths: tuple = (16, 32, 64)
    lcn_enabled: bool = True
    l1_adjacent_weight: float = 0.0
    wrap_longitude: bool = False
    head: str = "spread"
    w_init: float = -10.0
    w_lr_scale: float = 10.0
    init_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.dilation_rates = tuple(int(d) for d in self.dilation_rates)
        self.unet_widths = tuple(int(w) for w in self.unet_widths)
        if self.head not in ("spread", "bias", "crps"):
            raise ValueError(f"head must be spread, bias or crps, got {self.head!r}")
        if self.n_inception_blocks < 1:
            raise ValueError("n_inception_blocks must be >= 1")
        if self.unet_levels not in (0, 1, 2, 3):
            raise ValueError("unet_levels must be 0, 1, 2 or 3")
        if len(self.unet_widths) < self.unet_levels:
            raise ValueError("need one unet width per level")
        if self.n_input_members < 2:
            raise ValueError("need at least 2 input members for a spread channel")
        if self.l1_adjacent_weight < 0:
            raise ValueError("l1_adjacent_weight must be >= 0")
        step = 2 ** self.unet_levels
        if self.head == "bias" and (self.height % step or self.width % step):
            raise ValueError(f"grid {self.height}x{self.width} must be divisible by {step} for "
                             f"{self.unet_levels} U-Net levels; pad the grid (e.g. with pad_geo) first")

    @property
    def in_channels(self) -> int:
        return len(LEAD_TIMES) * (self.n_input_members + 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        d["unet_widths"] = list(self.unet_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check_input(x: Tensor, cfg: ModelConfig) -> None:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (N, {cfg.in_channels}, H, W) input for {cfg.n_input_members} members, "
                         f"got {x.shape}")
    if x.shape[2:] != (cfg.height, cfg.width):
        raise ValueError(f"grid {x.shape[2:]} does not match config {(cfg.height, cfg.width)}")


# -- spread net ------------------------------------------------------------

class InceptionBlock(Module):
    """Three dilated 3x3 branches, concatenated and projected back."""

    def __init__(self, cin: int, filters: int, dilations, *, rng, std: float, wrap_lon: bool):
        super().__init__()
        half = max(filters // 2, 1)
        self.reduce = [Conv2d(cin, half, 1, rng=rng, std=std) for _ in dilations]
        self.branches = [ConvBNReLU(half, half, 3, d, rng=rng, std=std, wrap_lon=wrap_lon) for d in dilations]
        self.project = Conv2d(half * len(dilations), filters, 1, rng=rng, std=std)

    def forward(self, x):
        outs = [b(r(x)) for r, b in zip(self.reduce, self.branches)]
        return self.project(concat(outs, axis=1))


class SpreadNet(Module):
    """Predicts the 48 h spread (scaled units) from a reduced ensemble.

    The output blends the network estimate with the input NWP spread,
    ``s(w) * sigma_nn + (1 - s(w)) * sigma_nwp``, where ``w`` is a
    per-gridpoint weight started far negative so the untrained net returns
    the NWP spread.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        std, wrap = cfg.init_std, cfg.wrap_longitude
        n = cfg.n_input_members
        self.spread_idx = [spread_channel(n, lt) for lt in LEAD_TIMES]
        self.other_idx = [c for c in range(cfg.in_channels) if c not in self.spread_idx]
        self.nwp_idx = spread_channel(n, 48)
        enc = cfg.encoder_channels
        self.encoder = [ConvBNReLU(len(self.other_idx), enc, 1, rng=rng, std=std),
                        ConvBNReLU(enc, enc, 1, rng=rng, std=std)]
        nwp_ch = enc + len(self.spread_idx)
        self.stem = Conv2d(nwp_ch, cfg.base_filters, 1, rng=rng, std=std)
        self.blocks = [InceptionBlock(cfg.base_filters + nwp_ch, cfg.base_filters, cfg.dilation_rates,
                                      rng=rng, std=std, wrap_lon=wrap)
                       for _ in range(cfg.n_inception_blocks)]
        self.head = Conv2d(cfg.base_filters, 1, 1, rng=rng, std=std)
        self.w = Parameter(np.full((1, 1, cfg.height, cfg.width), cfg.w_init), "w", l2=False,
                           lr_scale=cfg.w_lr_scale)

    def encode(self, x: Tensor) -> Tensor:
        h = x[:, self.other_idx]
        for layer in self.encoder:
            h = layer(h)
        return concat([h, x[:, self.spread_idx]], axis=1)

    def features(self, x: Tensor) -> Tensor:
        _check_input(x, self.config)
        nwp = self.encode(x)
        h = self.stem(nwp)
        for block in self.blocks:
            h = h + block(concat([h, nwp], axis=1))
        return h

    def trunk(self, x: Tensor) -> Tensor:
        """Network spread estimate before blending (translation-equivariant)."""
        return softplus(self.head(self.features(x))) + SIGMA_FLOOR

    def forward(self, x: Tensor) -> Tensor:
        sigma_nn = self.trunk(x)
        sigma_nwp = x[:, self.nwp_idx:self.nwp_idx + 1]
        s = sigmoid(self.w)
        return s * sigma_nn + (1.0 - s) * sigma_nwp


# -- bias net ----------------------------------------------------------------

class DoubleConv(Module):
    def __init__(self, cin: int, cout: int, *, rng, std: float, wrap_lon: bool):
        super().__init__()
        self.a = ConvBNReLU(cin, cout, 3, rng=rng, std=std, wrap_lon=wrap_lon)
        self.b = ConvBNReLU(cout, cout, 3, rng=rng, std=std, wrap_lon=wrap_lon)

    def forward(self, x):
        return self.b(self.a(x))


class BiasNet(Module):
    """U-Net predicting the standardised correction to the ensemble mean.

    Down path: double 3x3 conv then 2x2 max-pool per level, so the
    bottleneck runs at 1 / 2**levels of the grid. Up path:
    bilinear 2x upsampling, a 3x3 conv, concatenation with the skip and a
    double conv. A zero-initialised 1x1 locally connected layer produces the
    output, so the untrained net predicts no correction.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        std, wrap = cfg.init_std, cfg.wrap_longitude
        widths = cfg.unet_widths[:cfg.unet_levels]
        cin = cfg.in_channels
        self.down, self.up_conv, self.up = [], [], []
        for w in widths:
            self.down.append(DoubleConv(cin, w, rng=rng, std=std, wrap_lon=wrap))
            cin = w
        if widths:
            self.bottleneck = DoubleConv(cin, 2 * cin, rng=rng, std=std, wrap_lon=wrap)
            cin = 2 * cin
            for w in reversed(widths):
                self.up_conv.append(Conv2d(cin, w, 3, rng=rng, std=std, wrap_lon=wrap))
                self.up.append(DoubleConv(2 * w, w, rng=rng, std=std, wrap_lon=wrap))
                cin = w
        if cfg.lcn_enabled:
            self.out = LocallyConnected(cfg.height, cfg.width, cin, 1, zero_init=True,
                                        l1_adjacent_weight=cfg.l1_adjacent_weight)
        else:
            self.out = Conv2d(cin, 1, 1, rng=rng, std=std)
            self.out.weight.data[...] = 0.0

    def down_path(self, x: Tensor) -> tuple[Tensor, list]:
        """Pooled input to the bottleneck and the skip tensors."""
        _check_input(x, self.config)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = max_pool2x2(x)
        return x, skips

    def features(self, x: Tensor) -> Tensor:
        x, skips = self.down_path(x)
        if self.down:
            x = self.bottleneck(x)
            for conv, block, skip in zip(self.up_conv, self.up, reversed(skips)):
                x = conv(bilinear_upsample_2x(x))
                x = block(concat([x, skip], axis=1))
        return x

    def bottleneck_shape(self) -> tuple[int, int]:
        f = 2 ** self.config.unet_levels
        return self.config.height // f, self.config.width // f

    def forward(self, x: Tensor) -> Tensor:
        return self.out(self.features(x))


# -- model identities (Table-1 style notation) --------------------------------

MODEL_ID_GRAMMAR = ("E{n} raw ensemble | Lin{n} linear regression | EMOS{n} | B{n} bias net | "
                    "U{n} spread net | B{n}U{n} | B{n}U{n}C calibrated pipeline")
_ID_RE = re.compile(r"^(?:(?P<e>E)(?P<en>\d+)|Lin(?P<ln>\d+)|EMOS(?P<mn>\d+)|"
                    r"(?:B(?P<bn>\d+))?(?:U(?P<un>\d+))?(?P<c>C)?)$")


@dataclass(frozen=True)
class ModelId:
    kind: str  # raw | lin | emos | net
    n: int
    bias: bool = False
    spread: bool = False
    crps: bool = False

    def __str__(self) -> str:
        if self.kind == "raw":
            return f"E{self.n}"
        if self.kind == "lin":
            return f"Lin{self.n}"
        if self.kind == "emos":
            return f"EMOS{self.n}"
        return (f"B{self.n}" if self.bias else "") + (f"U{self.n}" if self.spread else "") + \
            ("C" if self.crps else "")


def parse_model_id(text: str) -> ModelId:
    m = _ID_RE.match(text.strip())
    if not m or not any(m.groupdict().values()):
        raise ValueError(f"unknown model id {text!r}; grammar: {MODEL_ID_GRAMMAR}")
    g = m.groupdict()
    if g["en"]:
        return ModelId("raw", int(g["en"]))
    if g["ln"]:
        return ModelId("lin", int(g["ln"]))
    if g["mn"]:
        return ModelId("emos", int(g["mn"]))
    bn, un = g["bn"], g["un"]
    if bn and un and bn != un:
        raise ValueError(f"{text!r}: bias and spread nets must use the same member count")
    if g["c"] and not (bn and un):
        raise ValueError(f"{text!r}: C (CRPS calibration) needs both B{{n}} and U{{n}}")
    n = int(bn or un)
    if n < 1:
        raise ValueError(f"{text!r}: member count must be >= 1")
    return ModelId("net", n, bias=bool(bn), spread=bool(un), crps=bool(g["c"]))


# -- composition, persistence ---------------------------------------------------

def build_model(cfg: ModelConfig) -> Module:
    return BiasNet(cfg) if cfg.head == "bias" else SpreadNet(cfg)


def save_model(path, model: Module, las_fingerprint: str = "", extra: dict | None = None) -> None:
    meta = {"model": model.config.to_dict(), "las_fingerprint": las_fingerprint, **(extra or {})}
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> Module:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    state, meta = load_checkpoint(path)
    model = build_model(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(state)
    model.las_fingerprint = meta.get("las_fingerprint", "")
    model.eval()
    return model


def predict(model: Module, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Evaluation-mode forward pass over an (N, C, H, W) array, no graph."""
    was_training = model.training
    model.eval()
    outs = []
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            outs.append(model(Tensor(inputs[i:i + batch_size])).data)
    model.train(was_training)
    return np.concatenate(outs).astype(np.float64)


def calibrated_forecast(bias: BiasNet | None, spread: SpreadNet | None, batch: Batch,
                        maps: LasMaps) -> ForecastDistribution:
    """Gaussian forecast in field units for every sample in ``batch``.

    ``bias=None`` keeps the raw ensemble mean; ``spread=None`` keeps the raw
    reduced-ensemble spread.
    """
    fp = maps.fingerprint()
    for net in (bias, spread):
        stored = getattr(net, "las_fingerprint", "") if net is not None else ""
        if stored and stored != fp:
            raise ValueError("model was trained with different LAS maps than the ones supplied")
    mu = batch.raw_mean.copy()
    if bias is not None:
        mu = mu + predict(bias, batch.inputs)[:, 0] * maps.std_map
    if spread is not None:
        sigma = predict(spread, batch.inputs)[:, 0] * maps.std_map
    else:
        sigma = np.maximum(batch.raw_spread, SIGMA_FLOOR * maps.std_map)
    return ForecastDistribution(mu, sigma)
