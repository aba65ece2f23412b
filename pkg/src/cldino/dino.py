"""Self-distillation pieces: multi-crop views, projection head, loss, EMA teacher, centering."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .corpus import AugmentPool
from .errors import ConfigError, ShapeError, TooShortError
from .frontend import FeatureMatrix, FrontendConfig, Waveform, mfcc

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class ViewConfig:
    n_global: int = 2
    n_local: int = 5
    global_dur: float = 3.0
    local_dur: float = 1.5

    @classmethod
    def desk(cls) -> ViewConfig:
        return cls(global_dur=2.0, local_dur=1.0)

    @property
    def n_views(self) -> int:
        return self.n_global + self.n_local

    def validate(self):
        if self.n_global != 2 or self.n_local < 1:
            raise ConfigError(
                f"need exactly 2 global views and at least one local view, got "
                f"{self.n_global}/{self.n_local}")
        if not self.global_dur > self.local_dur > 0:
            raise ConfigError(
                f"need global_dur > local_dur > 0, got {self.global_dur}/{self.local_dur}")
        return self


@dataclass
class ViewSet:
    global_feats: list  # FeatureMatrix x n_global
    local_feats: list   # FeatureMatrix x n_local
    augmented: list     # bool per view, globals first
    offsets: list       # crop start sample per view, globals first

    def __len__(self):
        return len(self.global_feats) + len(self.local_feats)

    @property
    def views(self) -> list:
        return self.global_feats + self.local_feats


def make_views(wave: Waveform, cfg: ViewConfig, aug_this_utt: bool, rng: np.random.Generator,
               pool: AugmentPool | None = None,
               frontend: FrontendConfig = FrontendConfig()) -> ViewSet:
    """Random global and local crops of one utterance, each augmented independently.

    The draw order is fixed (all offsets first, then one augmentation per
    view), so a given generator state always yields the same views.
    """
    cfg.validate()
    sr = wave.sample_rate
    g_len, l_len = int(round(cfg.global_dur * sr)), int(round(cfg.local_dur * sr))
    if len(wave) < g_len:
        raise TooShortError(
            f"utterance is {wave.duration:.3f} s, shorter than the {cfg.global_dur} s global crop")
    if aug_this_utt and pool is None:
        raise ConfigError("augmentation requested but no augmentation pool given")
    lengths = [g_len] * cfg.n_global + [l_len] * cfg.n_local
    offsets = [int(rng.integers(len(wave) - n + 1)) for n in lengths]
    feats = []
    for off, n in zip(offsets, lengths):
        crop = wave.samples[off : off + n]
        if aug_this_utt:
            crop = pool.apply(crop, rng)
        feats.append(mfcc(Waveform(crop, sr), frontend))
    return ViewSet(feats[: cfg.n_global], feats[cfg.n_global :],
                   [bool(aug_this_utt)] * len(lengths), offsets)


def stack_features(feats: list) -> np.ndarray:
    """Equal-length ``T x F`` matrices -> encoder batch ``(N, F, T)``."""
    frames = [f.frames if isinstance(f, FeatureMatrix) else np.asarray(f) for f in feats]
    if len({f.shape for f in frames}) != 1:
        raise ShapeError(f"cannot stack feature matrices of shapes {sorted({f.shape for f in frames})}")
    return np.ascontiguousarray(np.stack(frames).transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# head


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    out_dim: int = 256
    student_temp: float = 0.1
    teacher_temp: float = 0.04

    def validate(self):
        if not self.student_temp > self.teacher_temp > 0:
            raise ConfigError(
                f"need student_temp > teacher_temp > 0, got {self.student_temp}/{self.teacher_temp}")
        if min(self.hidden_dim, self.bottleneck_dim, self.out_dim) < 1:
            raise ConfigError("head dimensions must be positive")
        return self


class DinoHead(nn.Layer):
    """3-layer MLP -> L2 normalization -> weight-normalized prototypes (K logits)."""

    def __init__(self, in_dim: int, cfg: HeadConfig = HeadConfig(), seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0x4EAD])
        H, B = cfg.hidden_dim, cfg.bottleneck_dim
        self.mlp = self.add("mlp", nn.Sequential(
            nn.Linear(in_dim, H, rng=rng), nn.GELU(),
            nn.Linear(H, H, rng=rng), nn.GELU(),
            nn.Linear(H, B, rng=rng)))
        self.norm = self.add("norm", nn.L2Normalize())
        self.last = self.add("last", nn.WeightNormLinear(B, cfg.out_dim, rng=rng))

    def forward(self, x):
        return self.last.forward(self.norm.forward(self.mlp.forward(x)))

    def backward(self, dy):
        return self.mlp.backward(self.norm.backward(self.last.backward(dy)))


def head_prob(logits, role: str, cfg: HeadConfig = HeadConfig(), center=None) -> np.ndarray:
    """Student: softmax(l / tau_s). Teacher: softmax((l - center) / tau_t)."""
    if role == "student":
        return nn.softmax_temp(logits, cfg.student_temp)
    if role == "teacher":
        if center is None:
            raise ConfigError("teacher probabilities need the running center")
        return nn.softmax_temp(np.asarray(logits) - center, cfg.teacher_temp)
    raise ConfigError(f"role must be 'student' or 'teacher', got {role!r}")


# ---------------------------------------------------------------------------
# loss


def _check_rows(p, what):
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(p < 0):
        bad = np.unravel_index(np.argmax(np.abs(sums - 1.0)), sums.shape)
        raise ValueError(f"{what} row {tuple(int(i) for i in bad)} is not a probability vector "
                         f"(sums to {float(sums[bad]):.8f})")


def dino_loss(teacher_probs, student_probs, student_temp: float = 0.1,
              n_global: int | None = None):
    """Cross-view cross-entropy between teacher and student distributions.

    ``teacher_probs`` is ``(G, K)`` or ``(N, G, K)``; ``student_probs`` is
    ``(V, K)`` or ``(N, V, K)`` with the G global views first. For each
    utterance the loss sums H(P_t(x), P_s(y)) = -sum P_t log P_s over the G
    teacher views x and the V-1 student views y != x, so 2 x 6 = 12 terms for
    the default 2 + 5 views. Batched inputs are averaged over N.

    Returns ``(loss, grad)`` where ``grad`` is d loss / d student logits for
    ``student_probs = softmax(logits / student_temp)``. Nothing flows back to
    the teacher.
    """
    t, s = np.asarray(teacher_probs), np.asarray(student_probs)
    single = t.ndim == 2
    if single:
        t, s = t[None], s[None]
    if t.ndim != 3 or s.ndim != 3 or t.shape[0] != s.shape[0] or t.shape[2] != s.shape[2]:
        raise ShapeError(f"teacher {np.shape(teacher_probs)} and student "
                         f"{np.shape(student_probs)} shapes do not match")
    _check_rows(t, "teacher")
    _check_rows(s, "student")
    N, G, V = t.shape[0], t.shape[1], s.shape[1]
    if n_global is not None and n_global != G:
        raise ShapeError(f"expected {n_global} teacher views, got {G}")
    if V <= G:
        raise ShapeError(f"need more student views ({V}) than teacher views ({G})")
    # weight of teacher target on each student view: all teacher views, minus the matching one
    target = view_targets(t, V)
    loss, grad = cross_entropy_part(target, s, student_temp)
    return loss, (grad[0] if single else grad)


def view_targets(teacher_probs, n_views: int) -> np.ndarray:
    """Summed teacher targets per student view, ``(N, V, K)``.

    Student view ``v`` is matched against every teacher view except itself
    (teacher views are the first G student views).
    """
    t = np.asarray(teacher_probs)
    G = t.shape[1]
    mask = np.ones((G, n_views))
    mask[np.arange(G), np.arange(G)] = 0.0
    return np.einsum("gv,ngk->nvk", mask, t)


def cross_entropy_part(target, student_probs, student_temp: float = 0.1, batch: int | None = None):
    """Loss and logit gradient for a slice of student views against fixed targets.

    The loss is linear in the per-view terms once teacher targets are fixed,
    so global and local views can be scored in separate passes; the pieces
    add up to :func:`dino_loss`. ``batch`` is the N to average over (defaults
    to the leading axis).
    """
    s = np.asarray(student_probs)
    N = s.shape[0] if batch is None else batch
    safe = np.maximum(s, LOG_CLAMP)
    loss = -np.sum(target * np.log(safe)) / N
    dp = np.where(s < LOG_CLAMP, 0.0, -target / safe) / N
    return loss, nn.softmax_temp_backward(s, dp, student_temp)


def n_loss_terms(n_global: int = 2, n_views: int = 7) -> int:
    return n_global * (n_views - 1)


# ---------------------------------------------------------------------------
# teacher


def ema_update(teacher: nn.Layer, student: nn.Layer, momentum: float) -> nn.Layer:
    """theta_t <- m * theta_t + (1 - m) * theta_s for every parameter, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum must be in [0, 1], got {momentum}")
    sp = student.parameters()
    tp = teacher.parameters()
    if set(sp) != set(tp):
        raise ShapeError("teacher and student parameter names differ")
    for name, t in tp.items():
        s = sp[name]
        if s.shape != t.shape:
            raise ShapeError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t *= momentum
        t += (1.0 - momentum) * s.astype(t.dtype, copy=False)
    return teacher


def center_update(center, batch_logits, momentum: float) -> np.ndarray:
    """c <- m * c + (1 - m) * mean over the batch of teacher logits."""
    batch_logits = np.asarray(batch_logits)
    if batch_logits.ndim != 2 or batch_logits.shape[0] < 1:
        raise ShapeError(f"expected (N >= 1, K) teacher logits, got {batch_logits.shape}")
    return momentum * np.asarray(center) + (1.0 - momentum) * batch_logits.mean(axis=0)


def collapse_probe(center, temp: float = 0.2) -> float:
    """max of softmax(center / temp): how much one prototype dominates the running mean.

    At temp=1 the probe cannot exceed about e^2/K (the head's logits are cosines
    scaled by a near-unit weight norm), so it is blind to collapse; at the teacher
    temperature it already saturates during the healthy early epochs. 0.2 sits
    between the two and was fixed from pilot runs with centering on and off.
    """
    return float(nn.softmax_temp(np.asarray(center, dtype=np.float64), temp).max())


@dataclass
class TeacherState:
    encoder: nn.Layer
    head: nn.Layer
    center: np.ndarray
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    centering: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ema_momentum", "center_momentum"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        self.encoder.eval()
        self.head.eval()

    @classmethod
    def from_student(cls, encoder: nn.Layer, head: DinoHead, **kw) -> TeacherState:
        center = np.zeros(head.cfg.out_dim)
        return cls(copy.deepcopy(encoder), copy.deepcopy(head), center, **kw)

    def logits(self, x):
        return self.head.forward(self.encoder.forward(x))

    def probs(self, logits, cfg: HeadConfig):
        c = self.center if self.centering else np.zeros_like(self.center)
        return head_prob(logits, "teacher", cfg, c)

    def update(self, encoder: nn.Layer, head: nn.Layer, batch_logits):
        """One EMA step of the weights and the center.

        BN running statistics are not averaged: the teacher takes the
        student's current ones (it always runs with eval-mode BN).
        """
        ema_update(self.encoder, encoder, self.ema_momentum)
        ema_update(self.head, head, self.ema_momentum)
        own = self.encoder.named_buffers()
        for name, buf in encoder.named_buffers().items():
            own[name][...] = buf
        self.center = center_update(self.center, batch_logits, self.center_momentum)

    def state_dict(self) -> dict:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        out["center"] = np.asarray(self.center)
        return out

    def load_state_dict(self, state: dict):
        self.encoder.load_state_dict(
            {k[8:]: v for k, v in state.items() if k.startswith("encoder.")})
        self.head.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("head.")})
        self.center = np.array(state["center"], dtype=np.float64)
