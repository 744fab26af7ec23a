"""The binary event-driven spiking transformer network.

Layers are small forward/backward objects with explicit caches (no
autodiff): LIF populations unrolled over time, binary linear/conv layers
running on the packed popcount kernel, batch normalization, the
spike-attention block (BSSA), the binary MLP (BMLP), and two encoder
topologies: reversible two-stream blocks with a closed-form inverse, and
the standard residual baseline.

Array layout is time-major: activations are (T, B, N, D) for token
streams and (T, B, C, H, W) inside the convolutional stem. Spikes are
float32 zeros/ones; attention maps before binarization are nonnegative
integers carried in float32 (exact below 2**24).

Backward passes use surrogate gradients through the spike nonlinearity
and the straight-through estimator through weight signs; the membrane
reset path is treated as constant during backprop.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import binary, neuron
from .errors import ConfigError, DataError, NumericError, ShapeError
from .numeric import DTYPE, BatchNormParams, Rng, Tensor

# Runtime validation of spike alphabets / attention integrality. Cheap at
# desk scale; cmd_bench disables it around timed sections.
strict_checks = True


def set_strict_checks(enabled: bool) -> bool:
    global strict_checks
    prev = strict_checks
    strict_checks = bool(enabled)
    return prev


class Param:
    """A trainable array plus its gradient accumulator.

    `version` increments on every optimizer update so binary-weight packs
    can be cached at inference and invalidated on change.
    """

    __slots__ = ("value", "grad", "version", "positive")

    def __init__(self, value: Tensor, positive: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.version = 0
        self.positive = positive

    def zero_grad(self):
        self.grad[...] = 0.0

    def bump(self):
        self.version += 1


# ---------------------------------------------------------------------------
# elementary layers


class LifLayer:
    """LIF population unrolled over the leading time axis.

    Forward caches the pre-reset membranes for backprop-through-time; the
    backward pass routes gradients through the surrogate derivative at
    each firing decision and through the decay recurrence, with the reset
    gate held constant.
    """

    def __init__(self, params: neuron.LifParams):
        self.p = params
        self._u_pre = None
        self._spikes = None

    def forward(self, x: Tensor, cache: bool = False) -> Tensor:
        T = x.shape[0]
        dt = x.dtype if x.dtype.kind == "f" else DTYPE
        u = np.zeros(x.shape[1:], dtype=dt)
        spikes = np.empty_like(x)
        u_pre = np.empty_like(x) if cache else None
        tau = dt.type(self.p.tau)
        vth = dt.type(self.p.v_threshold)
        for t in range(T):
            up = tau * u + x[t]
            s = (up >= vth).astype(dt)
            if cache:
                u_pre[t] = up
            spikes[t] = s
            if self.p.reset is neuron.Reset.HARD:
                u = (1.0 - s) * up
            else:
                u = up - vth * s
        if cache:
            self._u_pre = u_pre
            self._spikes = spikes
        return spikes

    def backward(self, g_spikes: Tensor) -> Tensor:
        u_pre, spikes = self._u_pre, self._spikes
        T = g_spikes.shape[0]
        tau = DTYPE(self.p.tau)
        g_x = np.empty_like(g_spikes)
        g_u = np.zeros(g_spikes.shape[1:], dtype=g_spikes.dtype)
        hard = self.p.reset is neuron.Reset.HARD
        for t in range(T - 1, -1, -1):
            sg = neuron.surrogate_grad(u_pre[t], self.p)
            g_upre = g_spikes[t] * sg
            if hard:
                g_upre = g_upre + g_u * (1.0 - spikes[t])
            else:
                g_upre = g_upre + g_u
            g_x[t] = g_upre
            g_u = tau * g_upre
        return g_x

    def params(self):
        return []


class BinaryLinearLayer:
    """Linear layer over the trailing feature axis.

    In `binary` mode the latent weights are standardized and signed each
    forward pass (cached between passes at inference) and the product is
    computed by the packed AND/popcount kernel, so inputs must be {0,1}
    spikes. In `full` mode the latent weights are used directly.
    """

    def __init__(self, name: str, in_features: int, out_features: int, rng: Rng,
                 mode: str = "binary", ste_clip: float = 1.0, per_channel: bool = False):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.mode = mode
        self.ste_clip = ste_clip
        self.per_channel = per_channel
        std = 1.0 / np.sqrt(in_features)
        self.weight = Param(rng.normal((out_features, in_features), std=std))
        self._pack_cache = None  # (version, PackedBits, signs)
        self._in2d = None
        self._signs = None
        self.last_in_spikes = 0.0  # spike count seen by the last forward

    def _binary_operands(self):
        cached = self._pack_cache
        if cached is not None and cached[0] == self.weight.version:
            return cached[1], cached[2]
        pb, _ = binary.binarize_weights(self.weight.value, self.per_channel)
        signs = binary.unpack(pb, binary.ALPHABET_PM1)
        self._pack_cache = (self.weight.version, pb, signs)
        return pb, signs

    def forward(self, x: Tensor, cache: bool = False) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"{self.name}: input features {x.shape[-1]} != {self.in_features}"
            )
        lead = x.shape[:-1]
        flat = np.ascontiguousarray(x.reshape(-1, self.in_features))
        self.last_in_spikes = float(flat.sum(dtype=np.float64))
        if self.mode == "binary":
            pb, signs = self._binary_operands()
            # pack() validates the {0,1} spike alphabet as a side effect.
            out = binary.packed_linear(binary.pack(flat, binary.ALPHABET_01), pb)
            out = out.astype(DTYPE)
            mat = signs
        else:
            mat = self.weight.value
            out = flat @ mat.T
        if cache:
            self._in2d = flat
            self._signs = mat
        return out.reshape(lead + (self.out_features,))

    def backward(self, g_out: Tensor) -> Tensor:
        g2 = g_out.reshape(-1, self.out_features)
        g_mat = g2.T @ self._in2d
        if self.mode == "binary":
            self.weight.grad += binary.ste_backward(
                g_mat, self.weight.value, self.ste_clip, self.per_channel
            )
        else:
            self.weight.grad += g_mat
        g_in = g2 @ self._signs
        return g_in.reshape(g_out.shape[:-1] + (self.in_features,))

    def params(self):
        return [(f"{self.name}.weight", self.weight)]


class BatchNormLayer:
    """Per-channel batch normalization over the trailing axis."""

    def __init__(self, name: str, channels: int, epsilon: float = 1e-5, momentum: float = 0.1):
        self.name = name
        self.gamma = Param(np.ones(channels, dtype=DTYPE))
        self.beta = Param(np.zeros(channels, dtype=DTYPE))
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.epsilon = epsilon
        self.momentum = momentum
        self.channels = channels
        self._xhat = None
        self._inv = None
        self._training = False

    def forward(self, x: Tensor, training: bool, cache: bool = False) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"{self.name}: channel mismatch {x.shape[-1]} != {self.channels}")
        dt = x.dtype if x.dtype.kind == "f" else DTYPE
        if training:
            flat = x.reshape(-1, self.channels)
            mean = flat.mean(axis=0, dtype=np.float64).astype(dt)
            var = flat.var(axis=0, dtype=np.float64).astype(dt)
            m = self.momentum
            self.running_mean[:] = ((1.0 - m) * self.running_mean + m * mean).astype(DTYPE)
            self.running_var[:] = ((1.0 - m) * self.running_var + m * var).astype(DTYPE)
        else:
            mean, var = self.running_mean, self.running_var
        denom = var + dt.type(self.epsilon)
        if np.any(denom <= 0):
            raise NumericError(f"{self.name}: variance + epsilon <= 0")
        inv = 1.0 / np.sqrt(denom)
        xhat = (x - mean) * inv
        if cache:
            self._xhat = xhat
            self._inv = inv
            self._training = training
        return xhat * self.gamma.value + self.beta.value

    def backward(self, g_out: Tensor) -> Tensor:
        xhat, inv = self._xhat, self._inv
        axes = tuple(range(g_out.ndim - 1))
        self.beta.grad += g_out.sum(axis=axes)
        self.gamma.grad += (g_out * xhat).sum(axis=axes)
        g_xhat = g_out * self.gamma.value
        if not self._training:
            return g_xhat * inv
        n = float(np.prod(g_out.shape[:-1]))
        mean_g = g_xhat.sum(axis=axes) / n
        mean_gx = (g_xhat * xhat).sum(axis=axes) / n
        return (g_xhat - mean_g - xhat * mean_gx) * inv

    def params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]

    def bn_params(self) -> BatchNormParams:
        """Snapshot as the plain numeric-module parameter record."""
        return BatchNormParams(
            gamma=self.gamma.value, beta=self.beta.value,
            running_mean=self.running_mean, running_var=self.running_var,
            epsilon=self.epsilon, momentum=self.momentum,
        )


class LinearHead:
    """Full-precision affine head used for classification/distillation."""

    def __init__(self, name: str, in_features: int, out_features: int, rng: Rng):
        self.name = name
        self.weight = Param(rng.normal((out_features, in_features), std=1.0 / np.sqrt(in_features)))
        self.bias = Param(np.zeros(out_features, dtype=DTYPE))
        self._in = None

    def forward(self, x: Tensor, cache: bool = False) -> Tensor:
        if cache:
            self._in = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, g_out: Tensor) -> Tensor:
        self.weight.grad += g_out.T @ self._in
        self.bias.grad += g_out.sum(axis=0)
        return g_out @ self.weight.value

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


class LambdaLayer:
    """Per-timestep learnable positive scale on binarized attention."""

    def __init__(self, name: str, timesteps: int):
        self.name = name
        self.scale = Param(np.ones((timesteps, 1, 1), dtype=DTYPE), positive=True)
        self._pre = None

    def to_scale(self) -> binary.LambdaScale:
        return binary.LambdaScale(values=self.scale.value)

    def forward(self, x: Tensor, cache: bool = False) -> Tensor:
        T = x.shape[0]
        lam = self.scale.value.reshape((T,) + (1,) * (x.ndim - 1))
        if cache:
            self._pre = x
        return x * lam

    def backward(self, g_out: Tensor) -> Tensor:
        T = g_out.shape[0]
        axes = tuple(range(1, g_out.ndim))
        self.scale.grad += (g_out * self._pre).sum(axis=axes).reshape(T, 1, 1)
        lam = self.scale.value.reshape((T,) + (1,) * (g_out.ndim - 1))
        return g_out * lam

    def params(self):
        return [(f"{self.name}.scale", self.scale)]


# ---------------------------------------------------------------------------
# convolution support (stem only)


def _im2col(x: Tensor, k: int, pad: int) -> Tensor:
    # x: (R, C, H, W) -> (R*H*W, C*k*k) with zero padding, stride 1
    R, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(R * H * W, C * k * k)
    return np.ascontiguousarray(cols)


def _col2im(g_cols: Tensor, shape, k: int, pad: int) -> Tensor:
    R, C, H, W = shape
    g = g_cols.reshape(R, H, W, C, k, k)
    out = np.zeros((R, C, H + 2 * pad, W + 2 * pad), dtype=g_cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + H, dj:dj + W] += g[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, pad:pad + H, pad:pad + W]


class Conv3x3Layer:
    """3x3 same-padding convolution as im2col + the binary linear kernel."""

    def __init__(self, name: str, in_ch: int, out_ch: int, rng: Rng, mode: str,
                 ste_clip: float = 1.0):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.linear = BinaryLinearLayer(name, in_ch * 9, out_ch, rng, mode=mode, ste_clip=ste_clip)
        self._shape = None

    def forward(self, x: Tensor, cache: bool = False) -> Tensor:
        T, B, C, H, W = x.shape
        cols = _im2col(x.reshape(T * B, C, H, W), 3, 1)
        out = self.linear.forward(cols, cache=cache)
        if cache:
            self._shape = (T * B, C, H, W)
        return out.reshape(T, B, H, W, self.out_ch).transpose(0, 1, 4, 2, 3)

    def backward(self, g_out: Tensor) -> Tensor:
        T, B, C, H, W = g_out.shape[0], g_out.shape[1], self.out_ch, g_out.shape[3], g_out.shape[4]
        g_cols = self.linear.backward(
            np.ascontiguousarray(g_out.transpose(0, 1, 3, 4, 2)).reshape(-1, self.out_ch)
        )
        g_x = _col2im(g_cols, self._shape, 3, 1)
        return g_x.reshape(T, B, self._shape[1], H, W)

    def params(self):
        return self.linear.params()


class MaxPool2Layer:
    """2x2 stride-2 max pool; gradient routes to the first maximum."""

    def __init__(self):
        self._idx = None
        self._shape = None

    def forward(self, x: Tensor, cache: bool = False) -> Tensor:
        T, B, C, H, W = x.shape
        xr = x.reshape(T, B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
        xr = np.ascontiguousarray(xr).reshape(T, B, C, H // 2, W // 2, 4)
        idx = xr.argmax(axis=-1)
        out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        if cache:
            self._idx = idx
            self._shape = (T, B, C, H, W)
        return out

    def backward(self, g_out: Tensor) -> Tensor:
        T, B, C, H, W = self._shape
        g = np.zeros((T, B, C, H // 2, W // 2, 4), dtype=g_out.dtype)
        np.put_along_axis(g, self._idx[..., None], g_out[..., None], axis=-1)
        g = g.reshape(T, B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
        return np.ascontiguousarray(g).reshape(T, B, C, H, W)

    def params(self):
        return []


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StemSpec:
    """Input tokenizer description.

    kind "conv": images (in_channels, image_size, image_size) split into
    patch_size x patch_size patches by four LIF -> binary-conv -> BN
    stages with stride-2 max pools in the final log2(patch_size) stages.
    kind "vector": flat inputs chopped into `tokens` equal chunks, each
    projected to the embedding dim by a shared LIF -> binary-linear -> BN.
    """

    kind: str = "vector"
    in_features: int = 64
    tokens: int = 4
    in_channels: int = 3
    image_size: int = 32
    patch_size: int = 4


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    embed_dim: int = 64
    heads: int = 2
    timesteps: int = 2
    tau: float = 0.5
    v_threshold: float = 1.0
    hidden_ratio: float = 4.0
    num_classes: int = 10
    stem: StemSpec = field(default_factory=StemSpec)
    surrogate: neuron.SurrogateSpec = field(default_factory=neuron.SurrogateSpec)
    weight_mode: str = "binary"       # "binary" | "full"
    topology: str = "reversible"      # "reversible" | "residual"
    dual_head: bool = True            # distillation head present
    classify_on: str = "x0"           # which stream feeds the classification head
    ste_clip: float = 1.0
    attn_scale: float = 0.125         # full-precision attention only

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.timesteps < 1:
            raise ConfigError("timesteps must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.weight_mode not in ("binary", "full"):
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")
        if self.topology not in ("reversible", "residual"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.classify_on not in ("x0", "x1"):
            raise ConfigError(f"classify_on must be 'x0' or 'x1', got {self.classify_on!r}")

    def lif(self, reset=neuron.Reset.HARD) -> neuron.LifParams:
        return neuron.LifParams(
            tau=self.tau, v_threshold=self.v_threshold, reset=reset, surrogate=self.surrogate
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["surrogate"] = {"kind": self.surrogate.kind.value, "width_or_alpha": self.surrogate.width_or_alpha}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stem"] = StemSpec(**d["stem"])
        sur = d["surrogate"]
        d["surrogate"] = neuron.SurrogateSpec(
            kind=neuron.SurrogateKind(sur["kind"]), width_or_alpha=sur["width_or_alpha"]
        )
        return cls(**d)


@dataclass
class ReversibleState:
    """The two-stream state threaded through reversible encoder blocks."""

    x0: Tensor
    x1: Tensor

    def copy(self) -> "ReversibleState":
        return ReversibleState(self.x0.copy(), self.x1.copy())


# ---------------------------------------------------------------------------
# stems


class VectorStem:
    def __init__(self, cfg: ModelConfig, rng: Rng):
        spec = cfg.stem
        if spec.in_features % spec.tokens != 0:
            raise ConfigError(
                f"in_features {spec.in_features} not divisible by tokens {spec.tokens}"
            )
        self.tokens = spec.tokens
        self.chunk = spec.in_features // spec.tokens
        self.timesteps = cfg.timesteps
        self.lif = LifLayer(cfg.lif())
        self.linear = BinaryLinearLayer(
            "stem.proj", self.chunk, cfg.embed_dim, rng.child(1),
            mode=cfg.weight_mode, ste_clip=cfg.ste_clip,
        )
        self.bn = BatchNormLayer("stem.bn", cfg.embed_dim)

    def forward(self, x: Tensor, training: bool, cache: bool = False) -> Tensor:
        B = x.shape[0]
        tokens = x.reshape(B, self.tokens, self.chunk)
        rep = np.broadcast_to(tokens, (self.timesteps,) + tokens.shape).astype(DTYPE)
        s = self.lif.forward(rep, cache=cache)
        h = self.linear.forward(s, cache=cache)
        return self.bn.forward(h, training, cache=cache)

    def backward(self, g: Tensor) -> None:
        g = self.bn.backward(g)
        g = self.linear.backward(g)
        self.lif.backward(g)

    def layers(self):
        return [self.linear, self.bn]

    def lifs(self):
        return [self.lif]

    def params(self):
        return self.linear.params() + self.bn.params()

    def buffers(self):
        return self.bn.buffers()


class ConvStem:
    """Patch-splitting stem: four LIF -> binary-conv3x3 -> BN stages with
    channel doubling up to the embedding dim; the last log2(patch_size)
    stages end in a stride-2 max pool."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        spec = cfg.stem
        D = cfg.embed_dim
        if D % 8 != 0:
            raise ConfigError("conv stem needs embed_dim divisible by 8")
        patch = spec.patch_size
        if patch & (patch - 1) or patch < 1:
            raise ConfigError(f"patch_size must be a power of two, got {patch}")
        n_pool = patch.bit_length() - 1
        if n_pool > 4:
            raise ConfigError("patch_size larger than 16 is not supported")
        if spec.image_size % patch != 0:
            raise ConfigError(
                f"image_size {spec.image_size} not divisible by patch_size {patch}"
            )
        chans = [spec.in_channels, D // 8, D // 4, D // 2, D]
        self.stages = []
        for i in range(4):
            lif = LifLayer(cfg.lif())
            conv = Conv3x3Layer(
                f"stem.stage{i}.conv", chans[i], chans[i + 1], rng.child(10 + i),
                mode=cfg.weight_mode, ste_clip=cfg.ste_clip,
            )
            bn = BatchNormLayer(f"stem.stage{i}.bn", chans[i + 1])
            pool = MaxPool2Layer() if i >= 4 - n_pool else None
            self.stages.append((lif, conv, bn, pool))
        self.timesteps = cfg.timesteps
        self.tokens = (spec.image_size // patch) ** 2
        self.embed_dim = D

    def forward(self, x: Tensor, training: bool, cache: bool = False) -> Tensor:
        B = x.shape[0]
        h = np.broadcast_to(x, (self.timesteps,) + x.shape).astype(DTYPE)
        for lif, conv, bn, pool in self.stages:
            s = lif.forward(np.ascontiguousarray(h), cache=cache)
            h = conv.forward(s, cache=cache)
            # BN over channels: move channel axis last and back
            h = np.moveaxis(bn.forward(np.moveaxis(h, 2, -1), training, cache=cache), -1, 2)
            if pool is not None:
                h = pool.forward(h, cache=cache)
        T, B, C, H, W = h.shape
        return np.ascontiguousarray(h.transpose(0, 1, 3, 4, 2)).reshape(T, B, H * W, C)

    def backward(self, g: Tensor) -> None:
        T, B, N, C = g.shape
        side = int(np.sqrt(N))
        g = g.reshape(T, B, side, side, C).transpose(0, 1, 4, 2, 3)
        for lif, conv, bn, pool in reversed(self.stages):
            if pool is not None:
                g = pool.backward(g)
            g = np.moveaxis(bn.backward(np.moveaxis(g, 2, -1)), -1, 2)
            g = conv.backward(np.ascontiguousarray(g))
            g = lif.backward(g)

    def layers(self):
        out = []
        for _, conv, bn, _ in self.stages:
            out.extend([conv.linear, bn])
        return out

    def lifs(self):
        return [lif for lif, _, _, _ in self.stages]

    def params(self):
        out = []
        for _, conv, bn, _ in self.stages:
            out.extend(conv.params())
            out.extend(bn.params())
        return out

    def buffers(self):
        out = []
        for _, _, bn, _ in self.stages:
            out.extend(bn.buffers())
        return out


def bsps_stem(images: Tensor, cfg: ModelConfig, rng: Rng | None = None,
              training: bool = False) -> ReversibleState:
    """Build a fresh patch-splitting stem, run it, and seed the two
    reversible streams with identical copies of the token embedding."""
    stem = ConvStem(cfg, rng if rng is not None else Rng(0)) if cfg.stem.kind == "conv" \
        else VectorStem(cfg, rng if rng is not None else Rng(0))
    e = stem.forward(np.asarray(images, dtype=DTYPE), training)
    return ReversibleState(x0=e.copy(), x1=e.copy())


# ---------------------------------------------------------------------------
# encoder blocks


class BssaBlock:
    """Binary spiking self attention.

    Each projection has its own input LIF turning the real-valued stream
    into spikes for the packed kernel; Q/K/V then pass through their own
    LIF after BN so the attention product QK^T is a nonnegative integer
    map. That map is binarized by a soft-reset LIF over time and scaled
    by the learnable per-timestep lambda; the context is accumulated from
    V's spikes and leaves through the output projection's LIF -> binary
    linear -> BN.

    In full-precision mode the attention map is not binarized; the
    context is attn * attn_scale @ V, matching the non-binary teacher.
    """

    def __init__(self, name: str, cfg: ModelConfig, rng: Rng):
        D = cfg.embed_dim
        self.name = name
        self.heads = cfg.heads
        self.head_dim = D // cfg.heads
        self.binary_attn = cfg.weight_mode == "binary"
        self.attn_scale = DTYPE(cfg.attn_scale)
        mk = lambda tag, i: BinaryLinearLayer(
            f"{name}.{tag}", D, D, rng.child(i), mode=cfg.weight_mode, ste_clip=cfg.ste_clip
        )
        self.q_in, self.k_in, self.v_in, self.o_in = (LifLayer(cfg.lif()) for _ in range(4))
        self.q_proj, self.k_proj, self.v_proj, self.o_proj = (
            mk("q", 1), mk("k", 2), mk("v", 3), mk("o", 4)
        )
        self.q_bn = BatchNormLayer(f"{name}.q_bn", D)
        self.k_bn = BatchNormLayer(f"{name}.k_bn", D)
        self.v_bn = BatchNormLayer(f"{name}.v_bn", D)
        self.o_bn = BatchNormLayer(f"{name}.o_bn", D)
        self.q_lif, self.k_lif, self.v_lif = (LifLayer(cfg.lif()) for _ in range(3))
        self.attn_lif = LifLayer(cfg.lif(reset=neuron.Reset.SOFT))
        self.lam = LambdaLayer(f"{name}.lambda", cfg.timesteps)
        self._cache = None
        self.last_attn = None
        self.last_out = None
        self.last_sops = 0.0

    def _split(self, x: Tensor) -> Tensor:
        T, B, N, D = x.shape
        return np.ascontiguousarray(
            x.reshape(T, B, N, self.heads, self.head_dim).transpose(0, 1, 3, 2, 4)
        )

    def _merge(self, x: Tensor) -> Tensor:
        T, B, h, N, d = x.shape
        return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4)).reshape(T, B, N, h * d)

    def forward(self, x: Tensor, training: bool, cache: bool = False) -> Tensor:
        q = self.q_lif.forward(
            self.q_bn.forward(self.q_proj.forward(self.q_in.forward(x, cache), cache), training, cache),
            cache,
        )
        k = self.k_lif.forward(
            self.k_bn.forward(self.k_proj.forward(self.k_in.forward(x, cache), cache), training, cache),
            cache,
        )
        v = self.v_lif.forward(
            self.v_bn.forward(self.v_proj.forward(self.v_in.forward(x, cache), cache), training, cache),
            cache,
        )
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        attn = np.einsum("tbhnd,tbhmd->tbhnm", qh, kh, optimize=True)
        if strict_checks:
            if np.any(attn < 0) or np.any(attn != np.round(attn)):
                raise NumericError(f"{self.name}: attention map is not a nonnegative integer tensor")
        self.last_attn = attn
        if self.binary_attn:
            s_attn = self.attn_lif.forward(attn, cache)
            ctx0 = np.einsum("tbhnm,tbhmd->tbhnd", s_attn, vh, optimize=True)
            ctx = self.lam.forward(ctx0, cache)
            self.last_sops = float(q.sum()) * attn.shape[-1] + float(s_attn.sum()) * self.head_dim
        else:
            s_attn = attn
            ctx = np.einsum("tbhnm,tbhmd->tbhnd", attn, vh, optimize=True) * self.attn_scale
            self.last_sops = 0.0
        if cache:
            self._cache = (qh, kh, vh, s_attn)
        out = self.o_bn.forward(
            self.o_proj.forward(self.o_in.forward(self._merge(ctx), cache), cache), training, cache
        )
        self.last_out = out
        return out

    def backward(self, g_out: Tensor) -> Tensor:
        qh, kh, vh, s_attn = self._cache
        g = self.o_bn.backward(g_out)
        g = self.o_proj.backward(g)
        g = self.o_in.backward(g)
        g_ctx = self._split(g)
        if self.binary_attn:
            g_ctx0 = self.lam.backward(g_ctx)
            g_sattn = np.einsum("tbhnd,tbhmd->tbhnm", g_ctx0, vh, optimize=True)
            g_vh = np.einsum("tbhnm,tbhnd->tbhmd", s_attn, g_ctx0, optimize=True)
            g_attn = self.attn_lif.backward(g_sattn)
        else:
            g_attn = np.einsum("tbhnd,tbhmd->tbhnm", g_ctx, vh, optimize=True) * self.attn_scale
            g_vh = np.einsum("tbhnm,tbhnd->tbhmd", s_attn, g_ctx, optimize=True) * self.attn_scale
        g_qh = np.einsum("tbhnm,tbhmd->tbhnd", g_attn, kh, optimize=True)
        g_kh = np.einsum("tbhnm,tbhnd->tbhmd", g_attn, qh, optimize=True)
        g_x = np.zeros(g_out.shape, dtype=g_out.dtype)
        for gh, lif, bn, proj, lin in (
            (g_qh, self.q_lif, self.q_bn, self.q_proj, self.q_in),
            (g_kh, self.k_lif, self.k_bn, self.k_proj, self.k_in),
            (g_vh, self.v_lif, self.v_bn, self.v_proj, self.v_in),
        ):
            gp = lif.backward(self._merge(gh))
            gp = bn.backward(gp)
            gp = proj.backward(gp)
            g_x += lin.backward(gp)
        return g_x

    def layers(self):
        return [self.q_proj, self.k_proj, self.v_proj, self.o_proj,
                self.q_bn, self.k_bn, self.v_bn, self.o_bn, self.lam]

    def lifs(self):
        return [self.q_in, self.k_in, self.v_in, self.o_in,
                self.q_lif, self.k_lif, self.v_lif, self.attn_lif]

    def params(self):
        out = []
        for lyr in (self.q_proj, self.k_proj, self.v_proj, self.o_proj,
                    self.q_bn, self.k_bn, self.v_bn, self.o_bn):
            out.extend(lyr.params())
        if self.binary_attn:
            out.extend(self.lam.params())
        return out

    def buffers(self):
        out = []
        for bn in (self.q_bn, self.k_bn, self.v_bn, self.o_bn):
            out.extend(bn.buffers())
        return out


class BmlpBlock:
    """Binary MLP: LIF -> binary linear -> BN, twice, with hidden expansion."""

    def __init__(self, name: str, cfg: ModelConfig, rng: Rng):
        D = cfg.embed_dim
        hidden = int(round(cfg.hidden_ratio * D))
        self.name = name
        self.lif1 = LifLayer(cfg.lif())
        self.fc1 = BinaryLinearLayer(f"{name}.fc1", D, hidden, rng.child(1),
                                     mode=cfg.weight_mode, ste_clip=cfg.ste_clip)
        self.bn1 = BatchNormLayer(f"{name}.bn1", hidden)
        self.lif2 = LifLayer(cfg.lif())
        self.fc2 = BinaryLinearLayer(f"{name}.fc2", hidden, D, rng.child(2),
                                     mode=cfg.weight_mode, ste_clip=cfg.ste_clip)
        self.bn2 = BatchNormLayer(f"{name}.bn2", D)
        self.last_out = None  # the block's final normalized map, for rep-cap probes

    def forward(self, x: Tensor, training: bool, cache: bool = False) -> Tensor:
        h = self.bn1.forward(self.fc1.forward(self.lif1.forward(x, cache), cache), training, cache)
        out = self.bn2.forward(self.fc2.forward(self.lif2.forward(h, cache), cache), training, cache)
        self.last_out = out
        return out

    def backward(self, g: Tensor) -> Tensor:
        g = self.bn2.backward(g)
        g = self.fc2.backward(g)
        g = self.lif2.backward(g)
        g = self.bn1.backward(g)
        g = self.fc1.backward(g)
        return self.lif1.backward(g)

    def layers(self):
        return [self.fc1, self.bn1, self.fc2, self.bn2]

    def lifs(self):
        return [self.lif1, self.lif2]

    def params(self):
        out = []
        for lyr in (self.fc1, self.bn1, self.fc2, self.bn2):
            out.extend(lyr.params())
        return out

    def buffers(self):
        return self.bn1.buffers() + self.bn2.buffers()


class ReversibleBlock:
    """Two-stream coupling with a closed-form inverse:

        x0' = BSSA(x1) + (x0 + x1) / 2
        x1' = BMLP(x0') + (x1 + x0') / 2

    The inverse re-simulates the sub-blocks from the same zero neuron
    state, which is what makes reconstruction exact up to float32
    rounding.
    """

    def __init__(self, name: str, cfg: ModelConfig, rng: Rng):
        self.name = name
        self.bssa = BssaBlock(f"{name}.bssa", cfg, rng.child(1))
        self.bmlp = BmlpBlock(f"{name}.bmlp", cfg, rng.child(2))

    def forward(self, s: ReversibleState, training: bool, cache: bool = False) -> ReversibleState:
        # The coupling algebra follows the state dtype. Training uses
        # float32 states; the reconstruction harness threads float64
        # states because the inverse amplifies stream error by a factor
        # of roughly 4.5 per unwound block, which at depth 4 lifts
        # float32 storage rounding to the 1e-4 scale and can flip
        # borderline spikes. Sub-blocks always evaluate on the float32
        # cast, so both directions see bit-identical inputs.
        a = self.bssa.forward(np.ascontiguousarray(s.x1, dtype=DTYPE), training, cache)
        x0n = a.astype(s.x0.dtype) + 0.5 * (s.x0 + s.x1)
        m = self.bmlp.forward(np.ascontiguousarray(x0n, dtype=DTYPE), training, cache)
        x1n = m.astype(s.x0.dtype) + 0.5 * (s.x1 + x0n)
        return ReversibleState(x0=x0n, x1=x1n)

    def inverse(self, s: ReversibleState) -> ReversibleState:
        m = self.bmlp.forward(np.ascontiguousarray(s.x0, dtype=DTYPE), training=False)
        x1 = 2.0 * (s.x1 - m.astype(s.x0.dtype)) - s.x0
        a = self.bssa.forward(np.ascontiguousarray(x1, dtype=DTYPE), training=False)
        x0 = 2.0 * (s.x0 - a.astype(s.x0.dtype)) - x1
        return ReversibleState(x0=x0, x1=x1)

    def backward(self, g0: Tensor, g1: Tensor) -> tuple[Tensor, Tensor]:
        g0_total = g0 + self.bmlp.backward(g1) + 0.5 * g1
        g_x1 = 0.5 * g1 + self.bssa.backward(g0_total) + 0.5 * g0_total
        g_x0 = 0.5 * g0_total
        return g_x0, g_x1

    def sub_blocks(self):
        return self.bssa, self.bmlp

    def params(self):
        return self.bssa.params() + self.bmlp.params()

    def buffers(self):
        return self.bssa.buffers() + self.bmlp.buffers()


class ResidualBlock:
    """Standard (non-reversible) encoder block: x += BSSA(x); x += BMLP(x)."""

    def __init__(self, name: str, cfg: ModelConfig, rng: Rng):
        self.name = name
        self.bssa = BssaBlock(f"{name}.bssa", cfg, rng.child(1))
        self.bmlp = BmlpBlock(f"{name}.bmlp", cfg, rng.child(2))

    def forward(self, x: Tensor, training: bool, cache: bool = False) -> Tensor:
        x = x + self.bssa.forward(x, training, cache)
        return (x + self.bmlp.forward(x, training, cache)).astype(DTYPE)

    def backward(self, g: Tensor) -> Tensor:
        g = g + self.bmlp.backward(g)
        return g + self.bssa.backward(g)

    def sub_blocks(self):
        return self.bssa, self.bmlp

    def params(self):
        return self.bssa.params() + self.bmlp.params()

    def buffers(self):
        return self.bssa.buffers() + self.bmlp.buffers()


def reversible_forward(s: ReversibleState, blk: ReversibleBlock,
                       training: bool = False) -> ReversibleState:
    return blk.forward(s, training)


def reversible_inverse(s: ReversibleState, blk: ReversibleBlock) -> ReversibleState:
    return blk.inverse(s)


# ---------------------------------------------------------------------------
# the full network


class SpikingTransformer:
    """Stem -> encoder blocks -> time/token mean -> linear head(s).

    Reversible topology carries the (x0, x1) stream pair and exposes a
    classification head on one stream and an optional distillation head
    on the other; residual topology carries a single stream and one head.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = Rng(seed)
        if cfg.stem.kind == "conv":
            self.stem = ConvStem(cfg, rng.child(0))
        elif cfg.stem.kind == "vector":
            self.stem = VectorStem(cfg, rng.child(0))
        else:
            raise ConfigError(f"unknown stem kind {cfg.stem.kind!r}")
        self.reversible = cfg.topology == "reversible"
        cls_blk = ReversibleBlock if self.reversible else ResidualBlock
        self.blocks = [
            cls_blk(f"block{i}", cfg, rng.child(100 + i)) for i in range(cfg.depth)
        ]
        D = cfg.embed_dim
        self.head_cls = LinearHead("head_cls", D, cfg.num_classes, rng.child(900))
        self.head_dist = (
            LinearHead("head_dist", D, cfg.num_classes, rng.child(901))
            if (self.reversible and cfg.dual_head) else None
        )
        self._pool_shape = None
        self.block_taps: list[tuple[str, Tensor]] = []
        self.capture_taps = False

    # -- forward / backward ------------------------------------------------

    def embed(self, x: Tensor, training: bool, cache: bool = False) -> Tensor:
        return self.stem.forward(np.asarray(x, dtype=DTYPE), training, cache)

    def forward(self, x: Tensor, training: bool = False,
                cache: bool = False) -> tuple[Tensor, Tensor | None]:
        cache = cache or training
        e = self.embed(x, training, cache)
        # Taps record each block's final normalized map (the last
        # LIF -> binary-linear -> BN output inside the block), the
        # real-valued quantity whose value diversity tracks representation
        # capability.
        taps = []
        if self.reversible:
            state = ReversibleState(x0=e.copy(), x1=e.copy())
            for blk in self.blocks:
                state = blk.forward(state, training, cache)
                if self.capture_taps:
                    taps.append((blk.name, blk.bmlp.last_out.copy()))
            x0, x1 = state.x0, state.x1
            pooled0 = x0.mean(axis=(0, 2))
            pooled1 = x1.mean(axis=(0, 2))
            self._pool_shape = x0.shape
            if self.cfg.classify_on == "x0":
                cls_in, dist_in = pooled0, pooled1
            else:
                cls_in, dist_in = pooled1, pooled0
            logits = self.head_cls.forward(cls_in, cache)
            dist_logits = self.head_dist.forward(dist_in, cache) if self.head_dist else None
        else:
            h = e
            for blk in self.blocks:
                h = blk.forward(h, training, cache)
                if self.capture_taps:
                    taps.append((blk.name, blk.bmlp.last_out.copy()))
            self._pool_shape = h.shape
            logits = self.head_cls.forward(h.mean(axis=(0, 2)), cache)
            dist_logits = None
        if self.capture_taps:
            self.block_taps = taps
        return logits, dist_logits

    def backward(self, g_logits: Tensor, g_dist: Tensor | None = None) -> None:
        T, B, N, D = self._pool_shape
        scale = DTYPE(1.0 / (T * N))

        def unpool(g2d):
            return np.broadcast_to(g2d[None, :, None, :] * scale, (T, B, N, D)).astype(DTYPE)

        if self.reversible:
            g_cls = self.head_cls.backward(g_logits)
            if self.head_dist is not None and g_dist is not None:
                g_dst = self.head_dist.backward(g_dist)
            else:
                g_dst = np.zeros_like(g_cls)
            if self.cfg.classify_on == "x0":
                g0, g1 = unpool(g_cls), unpool(g_dst)
            else:
                g0, g1 = unpool(g_dst), unpool(g_cls)
            for blk in reversed(self.blocks):
                g0, g1 = blk.backward(g0, g1)
            self.stem.backward((g0 + g1).astype(DTYPE))
        else:
            g = unpool(self.head_cls.backward(g_logits))
            for blk in reversed(self.blocks):
                g = blk.backward(g)
            self.stem.backward(g)

    def calibrate(self, x: Tensor) -> None:
        """Re-estimate every BN layer's running statistics from one batch
        (momentum forced to 1 for the pass), so inference-mode streams
        match the data scale. Used before inference-time reconstruction
        and instrumentation."""
        bns = [lyr for lyr in self._all_layers() if isinstance(lyr, BatchNormLayer)]
        saved = [bn.momentum for bn in bns]
        for bn in bns:
            bn.momentum = 1.0
        try:
            self.forward(x, training=True)
        finally:
            for bn, m in zip(bns, saved):
                bn.momentum = m

    def _all_layers(self):
        out = list(self.stem.layers())
        for blk in self.blocks:
            for sub in blk.sub_blocks():
                out.extend(sub.layers())
        return out

    def run_reversible(self, x: Tensor) -> tuple[ReversibleState, ReversibleState]:
        """Inference helper: returns (stem state, final state).

        Streams are carried in float64 so that `invert` reconstructs the
        stem state to architecture accuracy rather than the storage-
        rounding floor; sub-blocks still run at float32.
        """
        if not self.reversible:
            raise ConfigError("run_reversible requires reversible topology")
        e = self.embed(x, training=False).astype(np.float64)
        stem_state = ReversibleState(x0=e.copy(), x1=e.copy())
        state = stem_state.copy()
        for blk in self.blocks:
            state = blk.forward(state, training=False)
        return stem_state, state

    def invert(self, final: ReversibleState) -> ReversibleState:
        state = final
        for blk in reversed(self.blocks):
            state = blk.inverse(state)
        return state

    def heads_forward(self, s: ReversibleState) -> tuple[Tensor, Tensor | None]:
        """Apply the pooled dual heads to a final reversible state."""
        pooled0 = s.x0.mean(axis=(0, 2))
        pooled1 = s.x1.mean(axis=(0, 2))
        if self.cfg.classify_on == "x0":
            cls_in, dist_in = pooled0, pooled1
        else:
            cls_in, dist_in = pooled1, pooled0
        y = self.head_cls.forward(cls_in)
        y_d = self.head_dist.forward(dist_in) if self.head_dist else None
        return y, y_d

    # -- parameter plumbing --------------------------------------------------

    def named_params(self) -> list[tuple[str, Param]]:
        out = list(self.stem.params())
        for blk in self.blocks:
            out.extend(blk.params())
        out.extend(self.head_cls.params())
        if self.head_dist is not None:
            out.extend(self.head_dist.params())
        return out

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        out = list(self.stem.buffers())
        for blk in self.blocks:
            out.extend(blk.buffers())
        return out

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()

    def binary_linear_layers(self) -> Iterator[BinaryLinearLayer]:
        for lyr in self.stem.layers():
            if isinstance(lyr, BinaryLinearLayer):
                yield lyr
        for blk in self.blocks:
            for sub in blk.sub_blocks():
                for lyr in sub.layers():
                    if isinstance(lyr, BinaryLinearLayer):
                        yield lyr

    def bssa_blocks(self) -> Iterator[BssaBlock]:
        for blk in self.blocks:
            yield blk.sub_blocks()[0]

    def lif_layers(self) -> Iterator[LifLayer]:
        yield from self.stem.lifs()
        for blk in self.blocks:
            for sub in blk.sub_blocks():
                yield from sub.lifs()

    # -- checkpointing ---------------------------------------------------------

    CKPT_MAGIC = b"SBCK\x01\x00"

    def save_checkpoint(self, path) -> None:
        save_checkpoint(self, path)

    @property
    def state_entries(self) -> list[tuple[str, Tensor]]:
        entries = [(n, p.value) for n, p in self.named_params()]
        entries.extend(self.named_buffers())
        return entries


def checkpoint_bytes(model: SpikingTransformer) -> bytes:
    """Versioned binary container: magic, JSON header (config, seed, and
    the array manifest), raw little-endian float32 blobs in manifest
    order, then the packed 1-bit weight images in the PackedBits layout."""
    entries = model.state_entries
    packed_entries = []
    for lyr in model.binary_linear_layers():
        if lyr.mode == "binary":
            pb, _ = binary.binarize_weights(lyr.weight.value, lyr.per_channel)
            packed_entries.append((f"{lyr.name}.packed", binary.packed_bytes(pb)))
    header = {
        "format": 1,
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in entries],
        "packed": [{"name": n, "size": len(b)} for n, b in packed_entries],
    }
    blob = io.BytesIO()
    blob.write(SpikingTransformer.CKPT_MAGIC)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob.write(struct.pack("<I", len(hb)))
    blob.write(hb)
    for _, a in entries:
        blob.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    for _, b in packed_entries:
        blob.write(b)
    return blob.getvalue()


def save_checkpoint(model: SpikingTransformer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> SpikingTransformer:
    with open(path, "rb") as fh:
        magic = fh.read(len(SpikingTransformer.CKPT_MAGIC))
        if magic != SpikingTransformer.CKPT_MAGIC:
            raise DataError(f"bad checkpoint magic: {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        if header.get("format") != 1:
            raise DataError(f"unsupported checkpoint format {header.get('format')!r}")
        cfg = ModelConfig.from_dict(header["config"])
        model = SpikingTransformer(cfg, seed=header["seed"])
        entries = model.state_entries
        names = [e["name"] for e in header["arrays"]]
        if names != [n for n, _ in entries]:
            raise DataError("checkpoint array manifest does not match the model layout")
        for spec, (_, arr) in zip(header["arrays"], entries):
            want = tuple(spec["shape"])
            if tuple(arr.shape) != want:
                raise DataError(f"shape mismatch for {spec['name']}: {want} vs {arr.shape}")
            raw = fh.read(arr.size * 4)
            arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
        for spec in header["packed"]:
            binary.packed_from_bytes(fh.read(spec["size"]))  # validated, then discarded
    return model
