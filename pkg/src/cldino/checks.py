"""Finite-difference gradient suite over every differentiable piece of the model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .dino import DinoHead, HeadConfig, dino_loss
from .encoder import Encoder, EncoderConfig
from .training import aam_softmax_loss

LAYER_TOL = 1e-5
TIGHT_TOL = 1e-6
ENCODER_TOL = 1e-4

MICRO_ENCODER = EncoderConfig(channels=8, res2net_scale=2, se_reduction=2, dilations=(1, 2, 3),
                              embedding_dim=4, feature_dim=5, attention_channels=4)


class FunctionLayer(nn.Layer):
    """Wrap ``f(x) -> (value, grad)`` for a scalar loss so grad_check can probe it."""

    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x):
        value, self._grad = self.fn(x)
        return np.asarray(value).reshape(1)

    def backward(self, dy):
        return dy[0] * self._grad


class _AAMProbe(nn.Layer):
    """AAM loss as a layer: input is the embedding batch, ``weight`` is a parameter."""

    def __init__(self, n_classes, dim, rng, labels, scale=30.0, margin=0.2):
        super().__init__()
        w = rng.standard_normal((n_classes, dim))
        self.add_param("weight", w / np.linalg.norm(w, axis=1, keepdims=True))
        self.labels, self.scale, self.margin = labels, scale, margin

    def forward(self, x):
        loss, self._de, dw, _ = _aam_any_dtype(x, self.labels, self.params["weight"],
                                               self.scale, self.margin)
        self._dw = dw
        return np.asarray(loss).reshape(1)

    def backward(self, dy):
        self.grads["weight"] += dy[0] * self._dw
        return dy[0] * self._de


def _aam_any_dtype(emb, labels, weight, scale, margin):
    # aam_softmax_loss works in float64; re-run the same formula in the input dtype when the
    # checker probes in extended precision
    if emb.dtype == np.float64 and weight.dtype == np.float64:
        return aam_softmax_loss(emb, labels, weight, scale, margin)
    dt = np.result_type(emb, weight)
    rows = np.arange(len(labels))
    cos = emb @ weight.T
    ct = cos[rows, labels]
    logits = scale * cos
    logits[rows, labels] = scale * (ct * dt.type(np.cos(margin))
                                    - np.sqrt(1 - ct * ct) * dt.type(np.sin(margin)))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[rows, labels].mean(), None, None, logits


@dataclass
class CheckRow:
    name: str
    seed: int
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _cases(seed: int, desk_entries: int):
    r = np.random.default_rng([seed, 0x6C])

    def away_from_zero(shape):
        x = r.standard_normal(shape)
        return np.where(np.abs(x) < 1e-3, 0.5, x)

    yield "linear", nn.Linear(4, 2, rng=r), r.standard_normal((3, 4)), TIGHT_TOL, {}
    conv = nn.Conv1d(3, 2, 3, dilation=2, rng=r)
    conv.params["bias"][...] = r.standard_normal(2)
    yield "conv1d", conv, r.standard_normal((3, 2, 7)), TIGHT_TOL, {}
    yield "relu", nn.ReLU(), away_from_zero((3, 2, 5)), LAYER_TOL, {}
    yield "tanh", nn.Tanh(), r.standard_normal((3, 4)), LAYER_TOL, {}
    yield "gelu", nn.GELU(), r.standard_normal((3, 4)), LAYER_TOL, {}
    bn = nn.BatchNorm1d(3)
    bn.params["gamma"][...] = r.uniform(0.5, 1.5, 3)
    bn.params["beta"][...] = r.standard_normal(3)
    yield "batchnorm1d", bn, r.standard_normal((3, 2, 4)), LAYER_TOL, {}
    yield "tdnn_block", nn.TDNNBlock(3, 4, 3, 2, rng=r), r.standard_normal((3, 2, 6)), LAYER_TOL, {}
    yield "se_block", nn.SEBlock(4, 2, rng=r), r.standard_normal((4, 2, 5)), LAYER_TOL, {}
    yield "res2net_block", nn.Res2NetBlock(8, 2, 3, 2, 2, rng=r), r.standard_normal((8, 2, 6)), \
        LAYER_TOL, {}
    yield "attentive_pool", nn.AttentiveStatsPool(4, 3, rng=r), r.standard_normal((4, 2, 6)), \
        LAYER_TOL, {}
    yield "l2_normalize", nn.L2Normalize(), r.standard_normal((3, 4)), TIGHT_TOL, {}
    yield "weightnorm_linear", nn.WeightNormLinear(4, 5, rng=r), r.standard_normal((3, 4)), \
        LAYER_TOL, {}
    yield "dino_head", DinoHead(4, HeadConfig(hidden_dim=6, bottleneck_dim=3, out_dim=5),
                                seed=seed), r.standard_normal((3, 4)), LAYER_TOL, {}

    t_probs = nn.softmax_temp(r.standard_normal((2, 2, 6)), 0.04)

    def dino_fn(logits):
        p = nn.softmax_temp(logits, 0.1)
        loss, grad = dino_loss(t_probs.astype(logits.dtype), p, 0.1)
        return loss, grad
    # the head emits cosines times a near-unit weight norm, so logits live in about [-1, 1];
    # wider inputs at temperature 0.1 push probabilities to ~1e-18 and the check only
    # measures roundoff of log terms
    # with eps=1e-5 the roundoff of the ~30-sized objective reaches 1e-5 relative on the
    # smallest gradients; a 3e-5 step keeps truncation and roundoff both near 1e-6
    yield "dino_loss", FunctionLayer(dino_fn), r.uniform(-1.0, 1.0, (2, 7, 6)), LAYER_TOL, \
        {"eps": 3e-5}

    labels = r.integers(0, 4, size=5)
    e = r.standard_normal((5, 3))
    yield "aam_softmax", _AAMProbe(4, 3, r, labels), e / np.linalg.norm(e, axis=1, keepdims=True), \
        LAYER_TOL, {}

    yield "encoder_micro", Encoder(MICRO_ENCODER, seed=seed), \
        r.standard_normal((2, MICRO_ENCODER.feature_dim, 8)), ENCODER_TOL, {"max_entries": 12}
    if desk_entries:
        yield "encoder_desk", Encoder(EncoderConfig(), seed=seed), \
            r.standard_normal((2, EncoderConfig().feature_dim, 8)), ENCODER_TOL, \
            {"max_entries": desk_entries}


def gradient_suite(seeds=range(5), eps: float = 1e-5, desk_entries: int = 3, only=None):
    """Run every case for every seed; returns a list of :class:`CheckRow`."""
    rows = []
    for seed in seeds:
        for name, layer, x, tol, kw in _cases(seed, desk_entries):
            if only is not None and name not in only:
                continue
            t0 = time.perf_counter()
            err = nn.grad_check(layer, x, seed=seed, **{"eps": eps, **kw})
            rows.append(CheckRow(name, seed, err, tol, time.perf_counter() - t0))
    return rows


def format_table(rows) -> str:
    worst = {}
    for r in rows:
        if r.name not in worst or r.error > worst[r.name].error:
            worst[r.name] = r
    lines = [f"{'check':<20} {'worst rel err':>14} {'tol':>8}  result"]
    for name, r in worst.items():
        ok = all(x.passed for x in rows if x.name == name)
        lines.append(f"{name:<20} {r.error:>14.3e} {r.tol:>8.0e}  {'pass' if ok else 'FAIL'}")
    return "\n".join(lines)
