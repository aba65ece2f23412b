"""Layers with hand-written backward passes and a finite-difference checker.

Every layer caches what its backward needs during ``forward``; ``backward``
takes the upstream gradient, accumulates parameter gradients into
``self.grads`` and returns the gradient w.r.t. the layer input. Sequence
tensors are channel-major, ``(C, N, T)``, so every convolution is a single
matrix product; 2-D ``(C, T)`` inputs are accepted as one sequence. Vector
layers (linear, normalization of embeddings) take ``(N, D)``.

A layer instance holds one activation cache, so it must not serve two
forwards at once. Use separate instances (or ``copy.deepcopy``) per worker.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError, TooShortError

VAR_FLOOR = 1e-9
BN_EPS = 1e-5


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Layer] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def add(self, name: str, layer: Layer) -> Layer:
        self.children[name] = layer
        return layer

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    # -- traversal -----------------------------------------------------------
    def modules(self, prefix: str = "") -> Iterator[tuple[str, Layer]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.modules(f"{prefix}{name}.")

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for prefix, mod in self.modules():
            for name, p in mod.params.items():
                yield prefix + name, p, mod.grads[name]

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.named_parameters()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: g for name, _, g in self.named_parameters()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {prefix + k: b for prefix, mod in self.modules() for k, b in mod.buffers.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.parameters()
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in own.items():
            if name not in state:
                continue
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src

    def n_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def zero_grad(self):
        for _, _, g in self.named_parameters():
            g.fill(0.0)

    def train(self, mode: bool = True):
        for _, mod in self.modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for _, mod in self.modules():
            for d in (mod.params, mod.grads, mod.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
        return self

    @property
    def dtype(self):
        for _, p, _ in self.named_parameters():
            return p.dtype
        return np.dtype(np.float64)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(list(self.children.values())):
            dy = layer.backward(dy)
        return dy


class Linear(Layer):
    """``y = x W^T + b`` on ``(N, D_in)`` inputs."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng=None):
        super().__init__()
        rng = _rng(rng)
        self.d_in, self.d_out = d_in, d_out
        self.add_param("weight", he_uniform(rng, (d_out, d_in), d_in))
        if bias:
            self.add_param("bias", np.zeros(d_out))

    def forward(self, x):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
        self._x = x
        y = x @ w.T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        self.grads["weight"] += dy.T @ self._x
        if "bias" in self.params:
            self.grads["bias"] += dy.sum(axis=0)
        return dy @ self.params["weight"]


class Conv1d(Layer):
    """Dilated 1-D cross-correlation with 'same' zero padding.

    ``(C_in, N, T) -> (C_out, N, T)``; a 2-D ``(C_in, T)`` input is treated as
    a single sequence.
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 1, dilation: int = 1,
                 bias: bool = True, rng=None):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel_size}")
        if dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {dilation}")
        rng = _rng(rng)
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size, self.dilation = kernel_size, dilation
        self.pad = dilation * (kernel_size - 1) // 2
        fan_in = c_in * kernel_size
        self.add_param("weight", he_uniform(rng, (c_out, c_in, kernel_size), fan_in))
        if bias:
            self.add_param("bias", np.zeros(c_out))

    def _flat_weight(self):
        # (C_out, K * C_in), tap-major to match the column layout
        return self.params["weight"].transpose(0, 2, 1).reshape(self.c_out, -1)

    def forward(self, x):
        if x.ndim not in (2, 3) or x.shape[0] != self.c_in:
            raise ShapeError(
                f"conv1d: input shape {x.shape} does not match weight shape "
                f"{self.params['weight'].shape}"
            )
        self._squeeze = x.ndim == 2
        if self._squeeze:
            x = x[:, None, :]
        C, N, T = x.shape
        if self.kernel_size == 1:
            cols = np.ascontiguousarray(x).reshape(C, N * T)
        else:
            d = self.dilation
            xp = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad)))
            cols = np.concatenate(
                [xp[:, :, k * d : k * d + T] for k in range(self.kernel_size)], axis=0
            ).reshape(self.kernel_size * C, N * T)
        self._cols, self._nt = cols, (N, T)
        y = (self._flat_weight() @ cols).reshape(self.c_out, N, T)
        if "bias" in self.params:
            y += self.params["bias"][:, None, None]
        return y[:, 0] if self._squeeze else y

    def backward(self, dy):
        N, T = self._nt
        dy2 = np.ascontiguousarray(dy).reshape(self.c_out, N * T)
        dw = dy2 @ self._cols.T
        self.grads["weight"] += dw.reshape(self.c_out, self.kernel_size, self.c_in).transpose(0, 2, 1)
        if "bias" in self.params:
            self.grads["bias"] += dy2.sum(axis=1)
        dcols = self._flat_weight().T @ dy2
        if self.kernel_size == 1:
            dx = dcols.reshape(self.c_in, N, T)
        else:
            d, c = self.dilation, self.c_in
            dcols = dcols.reshape(self.kernel_size, c, N, T)
            dxp = np.zeros((c, N, T + 2 * self.pad), dtype=dy.dtype)
            for k in range(self.kernel_size):
                dxp[:, :, k * d : k * d + T] += dcols[k]
            dx = dxp[:, :, self.pad : self.pad + T]
        return dx[:, 0] if self._squeeze else dx


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y ** 2)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Layer):
    """GELU, tanh approximation ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""

    def forward(self, x):
        self._x = x
        self._t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self._t)

    def backward(self, dy):
        x, t = self._x, self._t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner)


class BatchNorm1d(Layer):
    """Per-channel batch norm; channels on axis 0, statistics over all other axes."""

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x):
        if x.ndim < 2 or x.shape[0] != self.channels:
            raise ShapeError(f"batchnorm: expected {self.channels} channels on axis 0, got {x.shape}")
        axes = tuple(range(1, x.ndim))
        bshape = (-1,) + (1,) * (x.ndim - 1)
        gamma = self.params["gamma"].reshape(bshape)
        beta = self.params["beta"].reshape(bshape)
        if self.training:
            n = x.size // self.channels
            if n < 2:
                raise TooShortError("batchnorm in train mode needs N*T >= 2")
            mean = x.mean(axis=axes)
            centered = x - mean.reshape(bshape)
            var = np.mean(centered * centered, axis=axes)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - m
            rm += m * mean
            rv *= 1 - m
            rv += m * var * n / (n - 1)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
            centered = x - mean.reshape(bshape).astype(x.dtype)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = centered * inv_std.reshape(bshape)
        self._xhat, self._inv_std, self._axes, self._bshape = xhat, inv_std, axes, bshape
        self._batch_stats = self.training
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, axes, bshape = self._xhat, self._axes, self._bshape
        self.grads["gamma"] += (dy * xhat).sum(axis=axes)
        self.grads["beta"] += dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"].reshape(bshape)
        inv_std = self._inv_std.reshape(bshape)
        if not self._batch_stats:
            return dxhat * inv_std
        mean_d = dxhat.mean(axis=axes, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
        return inv_std * (dxhat - mean_d - xhat * mean_dx)


class TDNNBlock(Sequential):
    """conv1d -> ReLU -> batch norm."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 1, dilation: int = 1, rng=None):
        super().__init__(Conv1d(c_in, c_out, kernel_size, dilation, rng=rng), ReLU(),
                         BatchNorm1d(c_out))


class SEBlock(Layer):
    """Squeeze-excitation: ``s = sigmoid(W2 relu(W1 mean_T(x)))``, output ``s_c * x_c``.

    ``bypass=True`` forces ``s = 1`` (debugging / identity checks).
    """

    def __init__(self, channels: int, reduction: int = 4, rng=None, bypass: bool = False):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"channels {channels} not divisible by SE reduction {reduction}")
        rng = _rng(rng)
        self.bypass = bypass
        self.fc1 = self.add("fc1", Linear(channels, channels // reduction, rng=rng))
        self.relu = ReLU()
        self.fc2 = self.add("fc2", Linear(channels // reduction, channels, rng=rng))

    def forward(self, x):
        if self.bypass:
            return x
        self._x = x
        squeezed = x.mean(axis=-1).reshape(x.shape[0], -1).T
        z = self.fc2.forward(self.relu.forward(self.fc1.forward(squeezed)))
        self.scale = sigmoid(z).T.reshape(x.shape[:-1])
        return x * self.scale[..., None]

    def backward(self, dy):
        if self.bypass:
            return dy
        x, s = self._x, self.scale
        ds = (dy * x).sum(axis=-1)
        dz = (ds * s * (1.0 - s)).reshape(x.shape[0], -1).T
        dm = self.fc1.backward(self.relu.backward(self.fc2.backward(dz))).T.reshape(x.shape[:-1])
        return dy * s[..., None] + dm[..., None] / x.shape[-1]


class Res2NetBlock(Layer):
    """SE-Res2Net block: 1x1 TDNN, hierarchical split convs, 1x1 TDNN, SE, identity skip.

    Group 1 passes through, group 2 is convolved, group i > 2 is convolved
    after adding the output of group i-1.
    """

    def __init__(self, channels: int, scale: int = 2, kernel_size: int = 3, dilation: int = 1,
                 se_reduction: int = 4, rng=None):
        super().__init__()
        if scale < 2 or channels % scale:
            raise ConfigError(f"channels {channels} not divisible by Res2Net scale {scale}")
        rng = _rng(rng)
        self.channels, self.scale = channels, scale
        width = channels // scale
        self.tdnn1 = self.add("tdnn1", TDNNBlock(channels, channels, 1, rng=rng))
        self.groups = [self.add(f"group{i}", TDNNBlock(width, width, kernel_size, dilation, rng=rng))
                       for i in range(1, scale)]
        self.tdnn2 = self.add("tdnn2", TDNNBlock(channels, channels, 1, rng=rng))
        self.se = self.add("se", SEBlock(channels, se_reduction, rng=rng))

    def forward(self, x):
        h = self.tdnn1.forward(x)
        xs = np.split(h, self.scale, axis=0)
        ys = [xs[0]]
        for i in range(1, self.scale):
            inp = xs[i] if i == 1 else xs[i] + ys[-1]
            ys.append(self.groups[i - 1].forward(inp))
        out = self.se.forward(self.tdnn2.forward(np.concatenate(ys, axis=0)))
        return out + x

    def backward(self, dy):
        dcat = self.tdnn2.backward(self.se.backward(dy))
        dys = [g.copy() for g in np.split(dcat, self.scale, axis=0)]
        dxs = [None] * self.scale
        for i in range(self.scale - 1, 0, -1):
            dinp = self.groups[i - 1].backward(dys[i])
            dxs[i] = dinp
            if i >= 2:
                dys[i - 1] += dinp
        dxs[0] = dys[0]
        return self.tdnn1.backward(np.concatenate(dxs, axis=0)) + dy


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class AttentiveStatsPool(Layer):
    """Channel- and context-dependent attentive statistics pooling, ``(C, N, T) -> (N, 2C)``.

    Attention logits come from ``conv(tanh(TDNN([h, mean, std])))``, softmaxed
    over time per channel. ``uniform=True`` replaces the attention with 1/T.
    A 2-D ``(C, T)`` input returns a ``(2C,)`` vector.
    """

    def __init__(self, channels: int, attention_channels: int = 64, global_context: bool = True,
                 rng=None, uniform: bool = False):
        super().__init__()
        rng = _rng(rng)
        self.channels, self.global_context, self.uniform = channels, global_context, uniform
        c_ctx = 3 * channels if global_context else channels
        self.tdnn = self.add("tdnn", TDNNBlock(c_ctx, attention_channels, 1, rng=rng))
        self.tanh = Tanh()
        # a bias here would be cancelled by the softmax over time
        self.conv = self.add("conv", Conv1d(attention_channels, channels, 1, bias=False, rng=rng))

    def forward(self, h):
        self._squeeze = h.ndim == 2
        if self._squeeze:
            h = h[:, None, :]
        C, N, T = h.shape
        if T < 2:
            raise TooShortError(f"attentive pooling needs T >= 2 frames, got {T}")
        if C != self.channels:
            raise ShapeError(f"pooling expects {self.channels} channels, got shape {h.shape}")
        self._h = h
        if self.uniform:
            alpha = np.full_like(h, 1.0 / T)
        else:
            if self.global_context:
                m = h.mean(axis=2, keepdims=True)
                v = ((h - m) ** 2).mean(axis=2, keepdims=True)
                sd = np.sqrt(np.maximum(v, VAR_FLOOR))
                self._ctx = (m, v, sd)
                ctx = np.concatenate([h, np.broadcast_to(m, h.shape), np.broadcast_to(sd, h.shape)],
                                     axis=0)
            else:
                ctx = h
            e = self.conv.forward(self.tanh.forward(self.tdnn.forward(ctx)))
            alpha = _softmax(e, axis=2)
        mu = (alpha * h).sum(axis=2)
        var = (alpha * h * h).sum(axis=2) - mu ** 2
        sigma = np.sqrt(np.maximum(var, VAR_FLOOR))
        self.alpha, self._mu, self._var, self._sigma = alpha, mu, var, sigma
        out = np.concatenate([mu, sigma], axis=0).T
        return out[0] if self._squeeze else out

    def backward(self, dy):
        h, alpha, mu, sigma = self._h, self.alpha, self._mu, self._sigma
        C, N, T = h.shape
        dy = dy.reshape(N, 2 * C).T
        dmu, dsigma = dy[:C], dy[C:]
        dvar = np.where(self._var > VAR_FLOOR, dsigma * 0.5 / sigma, 0.0)
        dmu3, dvar3, mu3 = dmu[:, :, None], dvar[:, :, None], mu[:, :, None]
        dh = alpha * (dmu3 + 2.0 * dvar3 * (h - mu3))
        if not self.uniform:
            dalpha = h * dmu3 + dvar3 * (h * h - 2.0 * mu3 * h)
            de = alpha * (dalpha - (alpha * dalpha).sum(axis=2, keepdims=True))
            dctx = self.tdnn.backward(self.tanh.backward(self.conv.backward(de)))
            if self.global_context:
                m, v, sd = self._ctx
                dh = dh + dctx[:C]
                dm = dctx[C : 2 * C].sum(axis=2, keepdims=True)
                dsd = dctx[2 * C :].sum(axis=2, keepdims=True)
                dv = np.where(v > VAR_FLOOR, dsd * 0.5 / sd, 0.0)
                dh = dh + dm / T + dv * 2.0 * (h - m) / T
            else:
                dh = dh + dctx
        return dh[:, 0] if self._squeeze else dh


class L2Normalize(Layer):
    def __init__(self, min_norm: float = 1e-12):
        super().__init__()
        self.min_norm = min_norm

    def forward(self, v):
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.any(norm <= self.min_norm):
            raise ValueError("cannot L2-normalize a (near-)zero vector")
        self._y, self._norm = v / norm, norm
        return self._y

    def backward(self, dy):
        y = self._y
        return (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / self._norm


class WeightNormLinear(Layer):
    """Bias-free linear layer whose rows are unit-normalized (gain fixed at 1)."""

    def __init__(self, d_in: int, d_out: int, rng=None):
        super().__init__()
        rng = _rng(rng)
        self.add_param("v", he_uniform(rng, (d_out, d_in), d_in))

    def forward(self, x):
        v = self.params["v"]
        self._x = x
        self._norm = np.linalg.norm(v, axis=1, keepdims=True)
        self._w = v / self._norm
        return x @ self._w.T

    def backward(self, dy):
        w = self._w
        dw = dy.T @ self._x
        self.grads["v"] += (dw - w * (w * dw).sum(axis=1, keepdims=True)) / self._norm
        return dy @ w


def softmax_temp(logits, tau: float):
    """Softmax of ``logits / tau`` along the last axis."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return _softmax(np.asarray(logits) / tau, axis=-1)


def softmax_temp_backward(p, dp, tau: float):
    """Gradient w.r.t. logits given probabilities ``p`` and upstream ``dp``."""
    return p * (dp - (p * dp).sum(axis=-1, keepdims=True)) / tau


# ---------------------------------------------------------------------------
# finite-difference checking


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(layer: Layer, x: np.ndarray, eps: float = 1e-5, seed: int = 0,
               check_input: bool = True, params: bool = True,
               max_entries: int | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(R * layer(x))`` for a fixed random ``R``. Every
    parameter entry and (optionally) every input entry is perturbed, and the
    error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.

    Analytic gradients come from the double-precision backward pass. The
    finite differences are evaluated in extended precision (``np.longdouble``)
    so that gradients down to ~1e-8 are resolvable; entries where both values
    sit below the residual roundoff level are exact (structural) zeros and are
    not scored.

    ``max_entries`` caps how many entries of each tensor are probed (a seeded
    random sample); use it for layers too large for an exhaustive sweep.
    """
    if layer.dtype != np.float64 or np.asarray(x).dtype != np.float64:
        raise ConfigError("grad_check requires double precision")
    x = np.array(x, dtype=np.float64)
    y = layer.forward(x)
    pick = np.random.default_rng(seed)
    r = pick.standard_normal(y.shape)
    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(r)
    analytic = {name: g.copy() for name, g in layer.gradients().items()}
    for name, ana in list(analytic.items()) + [("<input>", dx)]:
        if not np.all(np.isfinite(ana)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(ana))[0])
            raise NonFiniteError(f"non-finite analytic gradient at {name}{bad}")

    ext = np.longdouble
    layer.astype(ext)
    x_ext, r_ext = x.astype(ext), r.astype(ext)
    noise = 64 * float(np.finfo(ext).eps) * float(np.sum(np.abs(r * y))) / eps
    try:
        def objective():
            val = np.sum(r_ext * layer.forward(x_ext))
            if not np.isfinite(val):
                raise NonFiniteError("non-finite objective during grad check")
            return val

        targets = []
        if params:
            targets += [(name, p, analytic[name]) for name, p, _ in layer.named_parameters()]
        if check_input:
            targets.append(("<input>", x_ext, dx))
        worst = 0.0
        for name, arr, ana in targets:
            flat, ana = arr.reshape(-1), ana.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(pick.choice(flat.size, max_entries, replace=False))
            for i in idx:
                old = flat[i]
                flat[i] = old + ext(eps)
                fp = objective()
                flat[i] = old - ext(eps)
                fm = objective()
                flat[i] = old
                num = float((fp - fm) / (2 * ext(eps)))
                if max(abs(ana[i]), abs(num)) <= noise:
                    continue
                worst = max(worst, float(_rel_err(ana[i], num)))
    finally:
        layer.astype(np.float64)
    return worst
