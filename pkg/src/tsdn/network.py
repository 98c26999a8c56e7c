"""The two-stream decoder reconstruction network.

One shared convolutional encoder feeds two decoders: an abnormality
decoder that predicts which pixels were synthetically repainted, and a
normality decoder that reconstructs the clean image.  A small gating
network (the feature normality estimator, FNE) scores each bottleneck
channel and suppresses the abnormal ones before reconstruction.

The paper-scale pretrained backbone is out of scope here; the encoder is
a plain 5-stage strided CNN whose widths double per stage, which keeps
every mechanism intact at desk scale.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "NetworkConfig",
    "ModelOutputs",
    "TsdnModel",
    "apply_normality_weights",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"TSDN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture switches; the boolean flags realize the ablation variants."""

    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    base_channels: int = 8
    latent_channels: int = 16
    use_skips_dcd_a: bool = True
    use_skips_dcd_n: bool = True
    enable_dcd_a: bool = True
    enable_fne: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        h, w = self.input_size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.enable_fne and not self.enable_dcd_a:
            raise ValueError("the FNE target needs the predicted mask; disable the FNE when the abnormality decoder is off")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


@dataclass
class ModelOutputs:
    """Everything a forward pass produces.

    ``m_pred`` is ``None`` when the abnormality decoder is disabled.  With
    the FNE disabled ``w_pred`` is a constant all-ones gate, making
    ``f_nml`` identical to ``f_latent``.
    """

    m_pred: Tensor | None
    w_pred: Tensor
    f_latent: Tensor
    f_nml: Tensor
    r_surf: Tensor


def _uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Registry:
    """Flat name -> parameter tensor map shared by all layers of a model."""

    def __init__(self, seed: int, dtype):
        self.params: dict[str, Tensor] = {}
        self.dtype = dtype
        self._seq = np.random.SeedSequence(seed)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self._seq.spawn(1)[0])

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t


class _Conv:
    def __init__(self, reg: _Registry, name: str, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0):
        rng = reg.rng()
        self.stride, self.pad = stride, pad
        self.w = reg.register(f"{name}.w", _uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, reg.dtype))
        self.b = reg.register(f"{name}.b", np.zeros(c_out, dtype=reg.dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class _Deconv:
    def __init__(self, reg: _Registry, name: str, c_in: int, c_out: int, k: int = 4, stride: int = 2, pad: int = 1):
        rng = reg.rng()
        self.stride, self.pad = stride, pad
        self.w = reg.register(f"{name}.w", _uniform_init(rng, (c_in, c_out, k, k), c_out * k * k, reg.dtype))
        self.b = reg.register(f"{name}.b", np.zeros(c_out, dtype=reg.dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class _Linear:
    def __init__(self, reg: _Registry, name: str, n_in: int, n_out: int):
        rng = reg.rng()
        self.w = reg.register(f"{name}.w", _uniform_init(rng, (n_in, n_out), n_in, reg.dtype))
        self.b = reg.register(f"{name}.b", np.zeros(n_out, dtype=reg.dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w) + self.b


class _ChannelNorm:
    """Per-sample normalization over (C, H, W) with per-channel affine."""

    EPS = 1e-5

    def __init__(self, reg: _Registry, name: str, channels: int):
        self.c = channels
        self.gamma = reg.register(f"{name}.g", np.ones(channels, dtype=reg.dtype))
        self.beta = reg.register(f"{name}.b", np.zeros(channels, dtype=reg.dtype))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(1, 2, 3), keepdims=True)
        normed = centered / ad.sqrt(var + self.EPS)
        return normed * self.gamma.reshape(1, self.c, 1, 1) + self.beta.reshape(1, self.c, 1, 1)


class _ConvBlock:
    """conv -> channel norm -> ELU."""

    def __init__(self, reg, name, c_in, c_out, k, stride, pad):
        self.conv = _Conv(reg, f"{name}.conv", c_in, c_out, k, stride, pad)
        self.norm = _ChannelNorm(reg, f"{name}.norm", c_out)

    def __call__(self, x):
        return ad.elu(self.norm(self.conv(x)))


class _DeconvBlock:
    def __init__(self, reg, name, c_in, c_out):
        self.deconv = _Deconv(reg, f"{name}.deconv", c_in, c_out)
        self.norm = _ChannelNorm(reg, f"{name}.norm", c_out)

    def __call__(self, x):
        return ad.elu(self.norm(self.deconv(x)))


class _Encoder:
    """Five stages at strides 2..32; each stage downsamples then refines."""

    def __init__(self, reg: _Registry, cfg: NetworkConfig):
        self.stages = []
        c_in = cfg.in_channels
        for i in range(5):
            c_out = cfg.base_channels * (2**i)
            down = _ConvBlock(reg, f"encoder.s{i + 1}.down", c_in, c_out, k=3, stride=2, pad=1)
            refine = _ConvBlock(reg, f"encoder.s{i + 1}.refine", c_out, c_out, k=3, stride=1, pad=1)
            self.stages.append((down, refine))
            c_in = c_out

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for down, refine in self.stages:
            x = refine(down(x))
            feats.append(x)
        return feats


class _Decoder:
    """Five doubling deconvolution blocks with optional skip fusion."""

    def __init__(self, reg: _Registry, cfg: NetworkConfig, name: str, out_channels: int, use_skips: bool):
        base = cfg.base_channels
        enc_widths = [base * (2**i) for i in range(5)]
        dec_widths = [base * 8, base * 4, base * 2, base, base]
        self.use_skips = use_skips
        self.fuses = []
        self.blocks = []
        c_in = cfg.latent_channels
        for i in range(5):
            skip_ch = enc_widths[4 - i]
            if use_skips:
                self.fuses.append(_ConvBlock(reg, f"{name}.b{i + 1}.fuse", c_in + skip_ch, c_in, k=3, stride=1, pad=1))
            else:
                self.fuses.append(None)
            self.blocks.append(_DeconvBlock(reg, f"{name}.b{i + 1}", c_in, dec_widths[i]))
            c_in = dec_widths[i]
        self.head = _Conv(reg, f"{name}.head", c_in, out_channels, k=3, stride=1, pad=1)

    def __call__(self, f: Tensor, pyramid: list[Tensor]) -> Tensor:
        x = f
        for i in range(5):
            if self.use_skips:
                x = self.fuses[i](ad.concat([x, pyramid[4 - i]], axis=1))
            x = self.blocks[i](x)
        return ad.sigmoid(self.head(x))


class _Fne:
    """conv 3x3 -> flatten -> three-layer MLP -> sigmoid channel scores."""

    def __init__(self, reg: _Registry, cfg: NetworkConfig):
        c = cfg.latent_channels
        h, w = cfg.input_size[0] // 32, cfg.input_size[1] // 32
        self.conv = _Conv(reg, "fne.conv", c, c, k=3, stride=1, pad=1)
        n_in = c * h * w
        self.fc1 = _Linear(reg, "fne.fc1", n_in, 4 * c)
        self.fc2 = _Linear(reg, "fne.fc2", 4 * c, 2 * c)
        self.fc3 = _Linear(reg, "fne.fc3", 2 * c, c)

    def __call__(self, f: Tensor) -> Tensor:
        n = f.shape[0]
        x = self.conv(f).reshape(n, -1)
        x = ad.relu(self.fc1(x))
        x = ad.relu(self.fc2(x))
        return ad.sigmoid(self.fc3(x))


def apply_normality_weights(f: Tensor, w: Tensor) -> Tensor:
    """Scale each latent channel by its normality score.

    ``f`` is (N, C, h, w) and ``w`` is (N, C); a zero score annihilates the
    channel exactly, an all-ones vector returns ``f`` unchanged.
    """
    f = ad.as_tensor(f)
    w = ad.as_tensor(w)
    if f.shape[:2] != w.shape:
        raise ValueError(f"weight vector {w.shape} does not match feature block {f.shape}")
    return f * w.reshape(w.shape[0], w.shape[1], 1, 1)


class TsdnModel:
    """Encoder + channel reduction + two decoders + channel gate."""

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or NetworkConfig()
        cfg = self.config
        self._registry = _Registry(seed, dtype)
        self.encoder = _Encoder(self._registry, cfg)
        self.reduce = _Conv(self._registry, "reduce", cfg.base_channels * 16, cfg.latent_channels, k=1)
        self.dcd_a = _Decoder(self._registry, cfg, "dcd_a", 1, cfg.use_skips_dcd_a) if cfg.enable_dcd_a else None
        self.fne = _Fne(self._registry, cfg) if cfg.enable_fne else None
        self.dcd_n = _Decoder(self._registry, cfg, "dcd_n", cfg.in_channels, cfg.use_skips_dcd_n)

    @property
    def params(self) -> dict[str, Tensor]:
        return self._registry.params

    def param_tensors(self) -> list[Tensor]:
        return list(self._registry.params.values())

    def _check_input(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != cfg.input_size:
            raise ValueError(
                f"expected input (N, {cfg.in_channels}, {cfg.input_size[0]}, {cfg.input_size[1]}), got {x.shape}"
            )
        return x

    def encoder_forward(self, x) -> list[Tensor]:
        return self.encoder(self._check_input(x))

    def reduce_channels(self, deepest: Tensor) -> Tensor:
        return self.reduce(deepest)

    def dcd_a_forward(self, f: Tensor, pyramid: list[Tensor]) -> Tensor:
        if self.dcd_a is None:
            raise ValueError("the abnormality decoder is disabled in this configuration")
        return self.dcd_a(f, pyramid)

    def fne_forward(self, f: Tensor) -> Tensor:
        if self.fne is None:
            raise ValueError("the FNE is disabled in this configuration")
        return self.fne(f)

    def dcd_n_forward(self, f_nml: Tensor, pyramid: list[Tensor]) -> Tensor:
        return self.dcd_n(f_nml, pyramid)

    def forward(self, x, compute_mask: bool = True) -> ModelOutputs:
        """Run the full network.

        ``compute_mask=False`` skips the abnormality decoder (its output
        feeds only the training target construction, never the
        reconstruction), which is the inference configuration.
        """
        x = self._check_input(x)
        pyramid = self.encoder(x)
        f_latent = self.reduce(pyramid[-1])
        m_pred = None
        if self.dcd_a is not None and compute_mask:
            m_pred = self.dcd_a(f_latent, pyramid)
        if self.fne is not None:
            w_pred = self.fne(f_latent)
        else:
            w_pred = Tensor(np.ones(f_latent.shape[:2], dtype=f_latent.dtype))
        f_nml = apply_normality_weights(f_latent, w_pred)
        r_surf = self.dcd_n(f_nml, pyramid)
        return ModelOutputs(m_pred=m_pred, w_pred=w_pred, f_latent=f_latent, f_nml=f_nml, r_surf=r_surf)

    def reconstruct(self, img: np.ndarray) -> np.ndarray:
        """Inference helper: reconstruction of a single (C, H, W) image."""
        out = self.forward(img[None] if img.ndim == 3 else img, compute_mask=False)
        return out.r_surf.data[0]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._registry.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self._registry.params
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ValueError(f"parameter names do not match the configuration (missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]})")
        for name, arr in arrays.items():
            if own[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {own[name].data.shape} vs {arr.shape}")
            own[name].data = arr.astype(own[name].data.dtype, copy=False)


# checkpoint container --------------------------------------------------------


def save_checkpoint(path, model: TsdnModel) -> None:
    """Write a versioned binary checkpoint (float32, little endian)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    arrays = model.state_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", 0, data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, dtype=np.float32) -> TsdnModel:
    """Reconstruct a model from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", view, 8)
    off = 12
    config = NetworkConfig.from_dict(json.loads(bytes(view[off : off + cfg_len]).decode("utf-8")))
    off += cfg_len
    (n_tensors,) = struct.unpack_from("<I", view, off)
    off += 4
    arrays = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off : off + name_len]).decode("utf-8")
        off += name_len
        tag, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        if tag != 0:
            raise ValueError(f"{path}: unsupported dtype tag {tag} for {name}")
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(view, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    model = TsdnModel(config, dtype=dtype)
    model.load_state_arrays(arrays)
    return model
