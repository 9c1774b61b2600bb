"""The spectral (fully connected) and spatial (UNet-like) noise predictors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .diffusion import NoiseSchedule, denoise_loss
from .tensor import DimensionError, NonFiniteError, Tensor

EMBED_DIM = 128


class TrainingDivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


def timestep_embedding(t, dim: int = EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding; scalar t gives shape (dim,), an array of n steps gives (n, dim)."""
    t_arr = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t_arr[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal parameter container: attributes that are Tensors or Modules."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            missing = set(params) ^ set(state)
            raise KeyError(f"state dict keys do not match parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (n_in, n_out), n_in)
        self.bias = _uniform(rng, (n_out,), n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.add_bias(tn.matmul(x, self.weight), self.bias, axis=-1)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1):
        fan_in = c_in * kernel * kernel
        self.weight = _uniform(rng, (c_out, c_in, kernel, kernel), fan_in)
        self.bias = _uniform(rng, (c_out,), fan_in)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return tn.add_bias(tn.conv2d(x, self.weight, self.stride), self.bias, axis=-3)


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, rng)
        self.temb = Linear(EMBED_DIM, c_out, rng)
        self.conv2 = Conv2d(c_out, c_out, rng)
        self.skip = Conv2d(c_in, c_out, rng, kernel=1) if c_in != c_out else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(tn.silu(x))
        e = self.temb(emb)
        h = tn.add_bias(h, e.reshape(e.shape[-1]) if x.ndim == 3 else e, axis=-3)
        h = self.conv2(tn.silu(h))
        shortcut = self.skip(x) if self.skip is not None else x
        return shortcut + h


class Stage(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.blocks = [ResBlock(c_in, c_out, rng), ResBlock(c_out, c_out, rng)]

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x, emb)
        return x


class SpectralNet(Module):
    """Fully connected C -> 256 -> 512 -> 256 -> C with per-layer timestep injection."""

    def __init__(self, bands: int, hidden=(256, 512, 256), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.bands = bands
        self.hidden = tuple(hidden)
        widths = (bands, *self.hidden)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.temb = [Linear(EMBED_DIM, w, rng) for w in self.hidden]
        self.head = Linear(self.hidden[-1], bands, rng)

    def __call__(self, e_noisy, t) -> Tensor:
        return spectral_forward(self, e_noisy, t)


def spectral_forward(net: SpectralNet, e_noisy, t) -> Tensor:
    """Predict noise for a (rows x C) stack of spectra; t is a step or one step per row."""
    x = tn.as_tensor(e_noisy)
    if x.ndim != 2 or x.shape[1] != net.bands:
        raise DimensionError(f"spectral net expects (rows, {net.bands}), got {x.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        t_arr = np.full(x.shape[0], float(t_arr))
    emb = Tensor(timestep_embedding(t_arr))
    h = x
    for layer, proj in zip(net.layers, net.temb):
        h = tn.silu(layer(h) + proj(emb))
    return net.head(h)


class SpatialNet(Module):
    """UNet-like: 4 stride-2 stages, a middle stage, 4 upsampling stages; two ResBlocks each."""

    def __init__(self, channels: int, base: int = 16, mult=(1, 2, 3, 4), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.base = base
        self.mult = tuple(mult)
        widths = [base * m for m in self.mult]
        self.inp = Conv2d(channels, base, rng)
        self.down_stages, self.downsample = [], []
        prev = base
        for w in widths:
            self.down_stages.append(Stage(prev, w, rng))
            self.downsample.append(Conv2d(w, w, rng, stride=2))
            prev = w
        self.middle = Stage(prev, prev, rng)
        self.upsample, self.up_stages = [], []
        for w in reversed(widths):
            self.upsample.append(Conv2d(prev, prev, rng))
            self.up_stages.append(Stage(prev + w, w, rng))
            prev = w
        self.out = Conv2d(prev, channels, rng)

    @property
    def factor(self) -> int:
        return 2 ** len(self.mult)

    def __call__(self, a_noisy, t) -> Tensor:
        return spatial_forward(self, a_noisy, t)


def spatial_forward(net: SpatialNet, a_noisy, t) -> Tensor:
    """Predict noise for a (dim, rows, cols) or (N, dim, rows, cols) input."""
    x = tn.as_tensor(a_noisy)
    if x.ndim not in (3, 4) or x.shape[-3] != net.channels:
        raise DimensionError(f"spatial net expects {net.channels} channels, got {x.shape}")
    h, w = x.shape[-2:]
    if h % net.factor or w % net.factor:
        raise DimensionError(f"spatial size {h}x{w} not divisible by {net.factor}")
    t_arr = np.asarray(t, dtype=np.float64)
    if x.ndim == 3:
        emb = Tensor(timestep_embedding(float(t_arr))[None])
    else:
        if t_arr.ndim == 0:
            t_arr = np.full(x.shape[0], float(t_arr))
        emb = Tensor(timestep_embedding(t_arr))
    h_ = net.inp(x)
    skips = []
    for stage, down in zip(net.down_stages, net.downsample):
        h_ = stage(h_, emb)
        skips.append(h_)
        h_ = down(h_)
    h_ = net.middle(h_, emb)
    for up, stage in zip(net.upsample, net.up_stages):
        h_ = up(tn.resize_nearest(h_, 2))
        h_ = stage(tn.concat([h_, skips.pop()], axis=-3), emb)
    return net.out(tn.silu(h_))


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.k = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.k += 1
        c1 = 1.0 - self.beta1**self.k
        c2 = 1.0 - self.beta2**self.k
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip_gradients(params: list[Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)


@dataclass
class TrainResult:
    losses: np.ndarray
    seconds: float


def train_network(
    net: Module,
    dataset_sampler: Callable[[np.random.Generator], np.ndarray],
    schedule: NoiseSchedule,
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
    t_axis_rows: int | None = None,
    clip_norm: float | None = 1.0,
) -> TrainResult:
    """Noise-prediction training on samples drawn by ``dataset_sampler``.

    Each step draws a batch, one timestep per sample, Gaussian noise, and takes
    an Adam step on the mean squared noise error. For the spectral net the batch
    is a (k*dim, bands) stack; pass ``t_axis_rows=dim`` so each group of dim rows shares
    one timestep. For the spatial net the batch is (N, dim, h, w).
    Gradients are rescaled to global norm ``clip_norm`` when it is exceeded.
    """
    import time

    rng = np.random.default_rng(seed)
    opt = Adam(net.parameters(), lr=lr)
    losses = np.empty(steps)
    start = time.perf_counter()
    for step in range(steps):
        x0 = np.asarray(dataset_sampler(rng), dtype=np.float64)
        if t_axis_rows is not None:
            n = x0.shape[0] // t_axis_rows
            t = np.repeat(rng.integers(1, schedule.num_steps + 1, size=n), t_axis_rows)
            coef_shape = (-1, 1)
        else:
            t = rng.integers(1, schedule.num_steps + 1, size=x0.shape[0])
            coef_shape = (-1,) + (1,) * (x0.ndim - 1)
        abar = schedule.alphabar[t - 1].reshape(coef_shape)
        eps = rng.standard_normal(x0.shape)
        x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
        net.zero_grad()
        try:
            loss = denoise_loss(net(Tensor(x_t), t), Tensor(eps))
            tn.backward(loss)
        except NonFiniteError as err:
            raise TrainingDivergenceError(step, str(err)) from err
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergenceError(step, f"loss {value}")
        losses[step] = value
        if clip_norm is not None:
            _clip_gradients(opt.params, clip_norm)
        opt.step()
    return TrainResult(losses=losses, seconds=time.perf_counter() - start)
