"""Gabor-Net, the parameter prediction net and the GSAC upsampler.

All three are built from :mod:`addl.autodiff` ops. Parameters are stored in a
flat ``{name: Tensor}`` mapping with stable prefixes (``gabor_net/``,
``predict_net/``, ``upsampler/``) so a whole model round-trips through one
ADWT checkpoint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ConvLayer, Tensor, TransposedConvLayer, ops
from .autodiff.checkpoint import dumps, model_id
from .gabor import PARAM_LO, PARAM_RANGE

_LO = PARAM_LO.reshape(1, 5, 1, 1)
_RANGE = PARAM_RANGE.reshape(1, 5, 1, 1)


@dataclass(frozen=True)
class GaborNetConfig:
    width: int = 16
    stages: int = 2
    kernel: int = 3

    @property
    def factor(self) -> int:
        return 2 ** (self.stages + 1)


@dataclass(frozen=True)
class PredictNetConfig:
    width: int = 8
    stages: int = 1
    kernel: int = 3

    @property
    def factor(self) -> int:
        return 2**self.stages


@dataclass(frozen=True)
class UpsamplerConfig:
    blocks: int = 4
    width: int = 16
    mod_width: int = 16


@dataclass(frozen=True)
class ModelConfig:
    gabor: GaborNetConfig = field(default_factory=GaborNetConfig)
    predict: PredictNetConfig = field(default_factory=PredictNetConfig)
    upsampler: UpsamplerConfig = field(default_factory=UpsamplerConfig)
    kernel_support: int = 6

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(GaborNetConfig(32, 4), PredictNetConfig(16, 3), UpsamplerConfig(16, 32, 32))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            GaborNetConfig(**d["gabor"]),
            PredictNetConfig(**d["predict"]),
            UpsamplerConfig(**d["upsampler"]),
            d.get("kernel_support", 6),
        )


def param_activation(raw: Tensor) -> Tensor:
    """Squash N x 5 x h x w raw outputs into the legal Gabor parameter ranges."""
    if raw.data.ndim != 4 or raw.shape[1] != 5:
        raise ValueError(f"expected N x 5 x h x w, got {raw.shape}")
    return ops.sigmoid(raw) * Tensor(_RANGE) + Tensor(_LO)


def normalize_params(params: Tensor) -> Tensor:
    """Map parameter maps onto [0, 1] per channel."""
    return (params - Tensor(_LO)) * Tensor(1.0 / _RANGE)


N_FEATURES = 7


def param_features(params: Tensor) -> Tensor:
    """GSAC extractor input: normalized lambda, sigma, gamma plus the angles
    as (cos 2theta, sin 2theta, cos psi, sin psi), continuous across wrap-around."""
    lin = ops.select_channels(normalize_params(params), [0, 3, 4])
    two_theta = ops.select_channels(params, [1]) * Tensor(np.array(2.0))
    psi = ops.select_channels(params, [2])
    out = lin
    for t in (ops.cos(two_theta), ops.sin(two_theta), ops.cos(psi), ops.sin(psi)):
        out = ops.concat_channels(out, t)
    return out


def _pad_to_multiple(x: Tensor, m: int) -> Tensor:
    H, W = x.shape[-2:]
    ph = (-H) % m
    pw = (-W) % m
    if ph == 0 and pw == 0:
        return x
    return ops.pad_symmetric(x, 0, ph, 0, pw)


class _Module:
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, layer in self._layers():
            out.update(layer.params(f"{self.prefix}{name}"))
        return out

    def _layers(self):
        raise NotImplementedError


class UNet(_Module):
    """U-Net style encoder-decoder; stage 0 keeps resolution, the rest pool by 2."""

    def __init__(self, rng: np.random.Generator, prefix: str, width: int, stages: int,
                 k: int = 3, head_stride: int = 1):
        self.prefix = prefix
        self.stages = stages
        self.head_stride = head_stride
        C = width
        self.inc = ConvLayer.create(rng, 1, C, k)
        self.enc = [(ConvLayer.create(rng, C, C, k), ConvLayer.create(rng, C, C, k)) for _ in range(stages + 1)]
        self.dec = [(ConvLayer.create(rng, 2 * C, C, k), ConvLayer.create(rng, C, C, k)) for _ in range(stages)]
        if head_stride == 2:
            self.head = ConvLayer.create(rng, C, 5, 4, stride=2, padding=1, gain=0.1)
        else:
            self.head = ConvLayer.create(rng, C, 5, k, gain=0.1)

    def _layers(self):
        yield "inc", self.inc
        for i, (a, b) in enumerate(self.enc):
            yield f"enc{i}a", a
            yield f"enc{i}b", b
        for i, (a, b) in enumerate(self.dec):
            yield f"dec{i}a", a
            yield f"dec{i}b", b
        yield "head", self.head

    def raw(self, x: Tensor) -> Tensor:
        h = ops.relu(self.inc(x))
        skips = []
        for i, (a, b) in enumerate(self.enc):
            if i > 0:
                h = ops.maxpool2(h)
            h = ops.relu(b(ops.relu(a(h))))
            skips.append(h)
        for i, (a, b) in enumerate(self.dec):
            skip = skips[self.stages - 1 - i]
            h = ops.concat_channels(ops.bilinear_up2(h), skip)
            h = ops.relu(b(ops.relu(a(h))))
        return self.head(h)


class GaborNet(UNet):
    def __init__(self, rng: np.random.Generator, cfg: GaborNetConfig):
        super().__init__(rng, "gabor_net/", cfg.width, cfg.stages, cfg.kernel, head_stride=2)
        self.cfg = cfg

    def __call__(self, x: Tensor) -> Tensor:
        """N x 1 x H x W (H, W even) -> N x 5 x H/2 x W/2 parameter maps."""
        H, W = x.shape[-2:]
        if H % 2 or W % 2:
            raise ValueError(f"Gabor-Net input must have even dims, got {H}x{W}")
        xp = _pad_to_multiple(x, self.cfg.factor)
        out = param_activation(self.raw(xp))
        if out.shape[-2:] != (H // 2, W // 2):
            out = ops.crop(out, H // 2, W // 2)
        return out


class PredictNet(UNet):
    def __init__(self, rng: np.random.Generator, cfg: PredictNetConfig):
        super().__init__(rng, "predict_net/", cfg.width, cfg.stages, cfg.kernel, head_stride=1)
        self.cfg = cfg

    def __call__(self, yhat: Tensor) -> Tensor:
        """N x 1 x h x w decoded base layer -> N x 5 x h x w predicted maps."""
        h, w = yhat.shape[-2:]
        xp = _pad_to_multiple(yhat, self.cfg.factor)
        out = param_activation(self.raw(xp))
        if out.shape[-2:] != (h, w):
            out = ops.crop(out, h, w)
        return out


class GsacLayer:
    """1 x 1 convolution whose input is modulated per pixel by features of the Gabor maps.

    y_i = sum_c W[:, c] * f_i[c] * x_i[c] + b, with f = conv(relu(conv(p))) two
    1 x 1 layers over the parameter features p (see :func:`param_features`).
    """

    def __init__(self, rng: np.random.Generator, channels: int, mod_width: int):
        self.ext1 = ConvLayer.create(rng, N_FEATURES, mod_width, 1, padding=0)
        self.ext2 = ConvLayer.create(rng, mod_width, channels, 1, padding=0, gain=0.1)
        # modulation starts near 1, i.e. close to a plain convolution
        self.ext2.bias = Tensor(np.ones(channels), requires_grad=True)
        self.conv = ConvLayer.create(rng, channels, channels, 1, padding=0)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.ext1.params(f"{prefix}.ext1")
        out.update(self.ext2.params(f"{prefix}.ext2"))
        out.update(self.conv.params(f"{prefix}.conv"))
        return out

    def modulation(self, pnorm: Tensor) -> Tensor:
        return self.ext2(ops.relu(self.ext1(pnorm)))

    def __call__(self, x: Tensor, pnorm: Tensor | None) -> Tensor:
        return gsac_forward(x, pnorm, self)


def gsac_forward(x: Tensor, pnorm: Tensor | None, layer: GsacLayer, modulation: Tensor | None = None) -> Tensor:
    """GSAC layer. ``pnorm=None`` means unit modulation (plain 1 x 1 conv).

    ``modulation`` overrides the extractor output (used by tests to pin f).
    """
    if modulation is None and pnorm is not None:
        if pnorm.shape[-2:] != x.shape[-2:]:
            pnorm = ops.resize_nearest(pnorm, *x.shape[-2:])
        modulation = layer.modulation(pnorm)
    if modulation is None:
        return layer.conv(x)
    if modulation.shape != x.shape:
        raise ValueError(f"modulation {modulation.shape} does not match input {x.shape}")
    return layer.conv(x * modulation)


class Upsampler(_Module):
    def __init__(self, rng: np.random.Generator, cfg: UpsamplerConfig):
        self.prefix = "upsampler/"
        self.cfg = cfg
        C = cfg.width
        self.head = ConvLayer.create(rng, 1, C, 3)
        self.blocks = []
        for _ in range(cfg.blocks):
            self.blocks.append(
                (
                    GsacLayer(rng, C, cfg.mod_width),
                    ConvLayer.create(rng, C, C, 3),
                    GsacLayer(rng, C, cfg.mod_width),
                    ConvLayer.create(rng, C, C, 3, gain=0.1),
                )
            )
        self.body = ConvLayer.create(rng, C, C, 3)
        tail = TransposedConvLayer.create(rng, C, 1, 4)
        # zero tail: an untrained upsampler is exactly bilinear interpolation
        tail.weight = Tensor(np.zeros_like(tail.weight.data), requires_grad=True)
        self.tail = tail

    def _layers(self):
        yield "head", self.head
        for i, (g1, c1, g2, c2) in enumerate(self.blocks):
            yield f"block{i}.gsac1", g1
            yield f"block{i}.conv1", c1
            yield f"block{i}.gsac2", g2
            yield f"block{i}.conv2", c2
        yield "body", self.body
        yield "tail", self.tail

    def __call__(self, yhat: Tensor, params: Tensor, unit_modulation: bool = False) -> Tensor:
        """N x 1 x h x w base + N x 5 x h x w maps -> N x 1 x 2h x 2w in [0, 1]."""
        if params.shape[0] != yhat.shape[0] or params.shape[1] != 5:
            raise ValueError(f"bad parameter maps {params.shape} for base {yhat.shape}")
        pnorm = None if unit_modulation else param_features(params)
        x = self.head(yhat)
        feat = x
        for g1, c1, g2, c2 in self.blocks:
            h = ops.relu(g1(x, pnorm))
            h = ops.relu(c1(h))
            h = ops.relu(g2(h, pnorm))
            x = x + c2(h)
        residual = self.tail(self.body(x) + feat)
        return ops.clip01(ops.bilinear_up2(yhat) + residual)


class ADDLModel:
    """The three networks plus helpers for (de)serializing them together."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        g_seed, p_seed, u_seed = np.random.SeedSequence(seed).spawn(3)
        self.gabor_net = GaborNet(np.random.default_rng(g_seed), self.config.gabor)
        self.predict_net = PredictNet(np.random.default_rng(p_seed), self.config.predict)
        self.upsampler = Upsampler(np.random.default_rng(u_seed), self.config.upsampler)

    @property
    def kernel_support(self) -> int:
        return self.config.kernel_support

    def params(self) -> dict[str, Tensor]:
        out = self.gabor_net.params()
        out.update(self.predict_net.params())
        out.update(self.upsampler.params())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def load_state_dict(self, weights: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(weights)
        extra = set(weights) - set(params) - {_CONFIG_KEY}
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for k, p in params.items():
            if weights[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {weights[k].shape} != {p.shape}")
            p.data = np.array(weights[k], dtype=np.float64)

    def to_bytes(self) -> bytes:
        weights = self.state_dict()
        weights[_CONFIG_KEY] = _encode_config(self.config)
        return dumps(weights)

    @classmethod
    def from_weights(cls, weights: dict[str, np.ndarray]) -> "ADDLModel":
        config = _decode_config(weights[_CONFIG_KEY]) if _CONFIG_KEY in weights else ModelConfig()
        model = cls(config)
        model.load_state_dict(weights)
        return model

    def model_id(self) -> bytes:
        return model_id(self.to_bytes())

    def digest(self, prefix: str) -> bytes:
        """Identity of one sub-network's weights (stage isolation checks)."""
        return model_id(dumps({k: v for k, v in self.state_dict().items() if k.startswith(prefix)}))


_CONFIG_KEY = "meta/config"


def _encode_config(cfg: ModelConfig) -> np.ndarray:
    g, p, u = cfg.gabor, cfg.predict, cfg.upsampler
    return np.array([g.width, g.stages, g.kernel, p.width, p.stages, p.kernel,
                     u.blocks, u.width, u.mod_width, cfg.kernel_support], dtype=np.float64)


def _decode_config(v: np.ndarray) -> ModelConfig:
    a = [int(x) for x in v]
    return ModelConfig(GaborNetConfig(*a[0:3]), PredictNetConfig(*a[3:6]), UpsamplerConfig(*a[6:9]), a[9])


def init_weights(config: ModelConfig | None = None, seed: int = 0) -> dict[str, np.ndarray]:
    """He-uniform fan-in initialisation from a seeded generator."""
    return ADDLModel(config, seed).state_dict()
