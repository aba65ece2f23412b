"""Optimizer, self-supervised training loop, and AAM-softmax fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .corpus import AugmentConfig, AugmentPool, Manifest
from .curriculum import Course, aug_mask, course_value, epoch_subset, preset
from .dino import (DinoHead, HeadConfig, TeacherState, ViewConfig, collapse_probe,
                   cross_entropy_part, head_prob, make_views, stack_features, view_targets)
from .encoder import Checkpoint, Encoder, EncoderConfig, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, NonFiniteError, ShapeError
from .frontend import FrontendConfig, Waveform, mfcc
from .schedule import LrConfig, sgdr_lr

log = logging.getLogger(__name__)

__all__ = [
    "Adam", "LrConfig", "sgdr_lr", "TrainConfig", "SSLTrainer", "train_ssl",
    "aam_softmax_loss", "AAMHead", "FinetuneConfig", "finetune",
]


# ---------------------------------------------------------------------------
# optimizer


def default_decay_filter(name: str, p: np.ndarray) -> bool:
    """Weight decay applies to weight matrices only, not to biases or BN scale/shift."""
    return p.ndim > 1


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Decay is applied first, ``theta <- theta - lr * wd * theta``, then the
    usual Adam update. Parameters are updated in place.
    """

    def __init__(self, params: dict, weight_decay: float = 5e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, decay_filter=default_decay_filter):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decays = {k: bool(decay_filter(k, p)) for k, p in params.items()}
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ShapeError(f"{name}: gradient {g.shape} vs parameter {self.params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay and self.decays[name]:
                p -= lr * self.weight_decay * p
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array(self.t, dtype=np.int64)
        return out

    def load_state_dict(self, state: dict):
        for k in self.params:
            self.m[k][...] = state[f"m.{k}"]
            self.v[k][...] = state[f"v.{k}"]
        self.t = int(state["t"])


def adam_step(params: dict, grads: dict, state: Adam, lr: float):
    """Functional spelling of ``state.step``; ``state`` must own ``params``."""
    if state.params is not params and set(state.params) != set(params):
        raise ConfigError("optimizer state does not belong to these parameters")
    state.step(grads, lr)
    return params, state


# ---------------------------------------------------------------------------
# configuration


def _course(spec, block: int) -> Course:
    if isinstance(spec, Course):
        return spec
    if isinstance(spec, str):
        return preset(spec, block)
    return Course("custom", tuple(tuple(bp) for bp in spec))


@dataclass
class TrainConfig:
    batch_size: int = 200
    epochs: int = 80
    seed: int = 0
    data_course: object = "none"   # preset name or explicit breakpoint list
    aug_course: object = "none"
    subset_strategy: str = "random"
    n_clusters: int = 40           # cluster strategy only
    lr: LrConfig = field(default_factory=LrConfig)
    weight_decay: float = 5e-5
    decay_bn_bias: bool = False
    views: ViewConfig = field(default_factory=ViewConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    centering: bool = True
    probe_temp: float = 0.2
    probe_bound: float = 10.0      # warn when max prob >= probe_bound / K
    dtype: str = "float32"
    deterministic: bool = True

    @classmethod
    def desk(cls, **kw) -> TrainConfig:
        base = cls(batch_size=32, epochs=40, lr=LrConfig(restart_period=8),
                   views=ViewConfig.desk())
        return replace(base, **kw)

    @property
    def block(self) -> int:
        return self.lr.restart_period

    def courses(self) -> tuple[Course, Course]:
        return _course(self.data_course, self.block), _course(self.aug_course, self.block)

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.subset_strategy not in ("random", "cluster", "fixed_speakers"):
            raise ConfigError(f"unknown subset strategy {self.subset_strategy!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.lr.validate()
        self.views.validate()
        self.head.validate()
        self.frontend.validate()
        self.courses()
        return self


# ---------------------------------------------------------------------------
# self-supervised training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    data_fraction: float
    aug_fraction: float
    center_max_prob: float
    wall_time_s: float | None
    collapse_warning: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def _subsets_for(cfg: TrainConfig, manifest: Manifest, clustering):
    cache = {}

    def get(fraction):
        if fraction not in cache:
            cache[fraction] = epoch_subset(manifest, fraction, cfg.subset_strategy, cfg.seed,
                                           clustering=clustering)
        return cache[fraction]
    return get


class SSLTrainer:
    """Student/teacher training over a manifest, one optimizer step per mini-batch.

    Each epoch draws from the data-curriculum subset, each batch augments
    exactly round(fraction * batch) utterances, and each utterance yields
    2 global + n_local views. The teacher (eval-mode BN) sees the global views;
    the student sees all of them. Randomness is keyed on (seed, epoch, batch),
    so a run resumed from a checkpoint continues exactly as if uninterrupted.
    """

    def __init__(self, manifest: Manifest, cfg: TrainConfig,
                 encoder_cfg: EncoderConfig = EncoderConfig(), out_dir=None,
                 pool: AugmentPool | None = None):
        self.cfg = cfg.validate()
        self.manifest = manifest.without_labels() if manifest.has_labels else manifest
        self.encoder_cfg = encoder_cfg.validate()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.dtype = np.dtype(cfg.dtype)
        self.data_course, self.aug_course = cfg.courses()
        min_dur = min(u.duration for u in self.manifest)
        if min_dur < cfg.views.global_dur:
            raise ConfigError(f"shortest utterance is {min_dur:.3f} s, below the "
                              f"{cfg.views.global_dur} s global crop")
        self.encoder = Encoder(encoder_cfg, seed=cfg.seed).astype(self.dtype)
        self.head = DinoHead(encoder_cfg.embedding_dim, cfg.head, seed=cfg.seed).astype(self.dtype)
        self.teacher = TeacherState.from_student(
            self.encoder, self.head, ema_momentum=cfg.ema_momentum,
            center_momentum=cfg.center_momentum, centering=cfg.centering)
        self.student_params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        self.student_params.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        decay = (lambda n, p: True) if cfg.decay_bn_bias else default_decay_filter
        self.opt = Adam(self.student_params, cfg.weight_decay, decay_filter=decay)
        self.pool = pool or AugmentPool.synthetic(cfg.augment, cfg.frontend.sample_rate, cfg.seed)
        self.clustering = None
        if cfg.subset_strategy == "cluster":
            from .selection import cluster_manifest
            self.clustering = cluster_manifest(manifest, min(cfg.n_clusters, len(manifest)),
                                               seed=cfg.seed)
        # fixed_speakers is an analysis-only strategy and is the one place labels are read
        labelled = manifest if cfg.subset_strategy == "fixed_speakers" else self.manifest
        self.subset = _subsets_for(cfg, labelled, self.clustering)
        self.epoch = 0  # number of completed epochs
        self.history: list[EpochRecord] = []
        self.audit: list[dict] = []

    # -- state -----------------------------------------------------------
    def student_grads(self) -> dict:
        g = {f"encoder.{k}": v for k, v in self.encoder.gradients().items()}
        g.update({f"head.{k}": v for k, v in self.head.gradients().items()})
        return g

    def checkpoint(self) -> Checkpoint:
        meta = {"history": [asdict(r) for r in self.history],
                "train_config": config_summary(self.cfg)}
        return Checkpoint(
            encoder_config=self.encoder_cfg, encoder=self.encoder.state_dict(),
            head=self.head.state_dict(), teacher=self.teacher.state_dict(),
            optimizer=self.opt.state_dict(), epoch=self.epoch, meta=meta)

    def load(self, ckpt: Checkpoint):
        if ckpt.encoder_config != self.encoder_cfg:
            raise ConfigError("checkpoint encoder config differs from the run config")
        if not ckpt.head or not ckpt.teacher or not ckpt.optimizer:
            raise CheckpointError("checkpoint lacks head/teacher/optimizer state; cannot resume")
        self.encoder.load_state_dict(ckpt.encoder)
        self.head.load_state_dict(ckpt.head)
        self.teacher.load_state_dict(ckpt.teacher)
        self.opt.load_state_dict(ckpt.optimizer)
        self.epoch = ckpt.epoch
        self.history = [EpochRecord(**r) for r in ckpt.meta.get("history", [])][: self.epoch]

    # -- one batch -------------------------------------------------------
    def _views(self, batch_ids, mask, rng):
        vcfg, fe = self.cfg.views, self.cfg.frontend
        glob, loc = [], []
        for utt_id, aug in zip(batch_ids, mask):
            utt = self.manifest[utt_id]
            vs = make_views(Waveform(self.manifest.load(utt_id), utt.sample_rate), vcfg,
                            bool(aug), rng, self.pool, fe)
            glob += vs.global_feats
            loc += vs.local_feats
        return (stack_features(glob).astype(self.dtype), stack_features(loc).astype(self.dtype))

    def _step(self, batch_ids, mask, rng, lr) -> float:
        N, G = len(batch_ids), self.cfg.views.n_global
        V, hc = self.cfg.views.n_views, self.cfg.head
        xg, xl = self._views(batch_ids, mask, rng)

        t_logits = self.teacher.logits(xg)                       # (G*N, K), utterance-major
        t_probs = self.teacher.probs(t_logits.astype(np.float64), hc).reshape(N, G, -1)
        target = view_targets(t_probs, V)                       # (N, V, K)

        self.encoder.train()
        self.head.train()
        self.encoder.zero_grad()
        self.head.zero_grad()
        loss = 0.0
        for x, views in ((xg, slice(0, G)), (xl, slice(G, V))):
            n_v = views.stop - views.start
            logits = self.head.forward(self.encoder.forward(x)).astype(np.float64)
            probs = head_prob(logits, "student", hc).reshape(N, n_v, -1)
            part, dlogits = cross_entropy_part(target[:, views], probs, hc.student_temp)
            loss += part
            d = dlogits.reshape(N * n_v, -1).astype(self.dtype)
            self.encoder.backward(self.head.backward(d))
        if not math.isfinite(loss):
            raise NonFiniteError("non-finite loss")
        self.opt.step(self.student_grads(), lr)
        self.teacher.update(self.encoder, self.head, t_logits.astype(np.float64))
        return loss

    # -- epochs ----------------------------------------------------------
    def batches(self, epoch: int):
        cfg = self.cfg
        frac_d = course_value(self.data_course, epoch)
        ids = self.subset(frac_d)
        order = np.random.default_rng([cfg.seed, epoch, 0xE0]).permutation(len(ids))
        ids = [ids[i] for i in order]
        bounds = list(range(0, len(ids), cfg.batch_size)) + [len(ids)]
        if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
            bounds.pop(-2)  # a single leftover utterance joins the previous batch
        return [ids[a:b] for a, b in zip(bounds, bounds[1:])], frac_d

    def run_epoch(self) -> EpochRecord:
        cfg, epoch = self.cfg, self.epoch
        t0 = time.perf_counter()
        batches, frac_d = self.batches(epoch)
        frac_a = course_value(self.aug_course, epoch)
        losses = []
        for b, batch_ids in enumerate(batches):
            rng = np.random.default_rng([cfg.seed, epoch, b, 0xBA])
            mask = aug_mask(len(batch_ids), frac_a, rng)
            lr = sgdr_lr(epoch, b / len(batches), cfg.lr)
            try:
                losses.append(self._step(batch_ids, mask, rng, lr))
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} batch {b}: {exc}") from exc
            self.audit.append({"epoch": epoch, "batch": b, "data_fraction": frac_d,
                               "aug_fraction": frac_a, "n_aug": int(mask.sum()),
                               "utt_ids": list(batch_ids)})
        probe = collapse_probe(self.teacher.center, cfg.probe_temp)
        warn = probe >= cfg.probe_bound / cfg.head.out_dim
        if warn:
            log.warning("epoch %d: collapse probe %.4f above %.4f", epoch, probe,
                        cfg.probe_bound / cfg.head.out_dim)
        rec = EpochRecord(epoch, float(np.mean(losses)), sgdr_lr(epoch, 0.0, cfg.lr), frac_d,
                          frac_a, probe, None if cfg.deterministic else time.perf_counter() - t0,
                          bool(warn))
        self.history.append(rec)
        self.epoch += 1
        return rec

    def _write(self, rec: EpochRecord, start_audit: int):
        if self.out_dir is None:
            return
        with open(self.out_dir / "metrics.jsonl", "a") as fh:
            fh.write(rec.to_json() + "\n")
        with open(self.out_dir / "audit.jsonl", "a") as fh:
            for row in self.audit[start_audit:]:
                fh.write(json.dumps(row) + "\n")
        if self.epoch % self.cfg.block == 0 or self.epoch == self.cfg.epochs:
            ckdir = self.out_dir / "checkpoints"
            ckdir.mkdir(exist_ok=True)
            ck = self.checkpoint()
            save_checkpoint(ck, ckdir / f"epoch{self.epoch:03d}.ckpt")
            save_checkpoint(ck, self.out_dir / "last.ckpt")

    def _prepare_out(self):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        # keep only records/audit rows for epochs already completed (resume)
        for name, key in (("metrics.jsonl", "epoch"), ("audit.jsonl", "epoch")):
            path = self.out_dir / name
            if path.exists():
                rows = [ln for ln in path.read_text().splitlines()
                        if ln and json.loads(ln)[key] < self.epoch]
                path.write_text("".join(r + "\n" for r in rows))

    def run(self, until: int | None = None) -> list[EpochRecord]:
        until = self.cfg.epochs if until is None else min(until, self.cfg.epochs)
        self._prepare_out()
        while self.epoch < until:
            start = len(self.audit)
            rec = self.run_epoch()
            log.info("epoch %d loss %.4f lr %.6f data %.2f aug %.2f probe %.4f", rec.epoch,
                     rec.loss, rec.lr, rec.data_fraction, rec.aug_fraction, rec.center_max_prob)
            self._write(rec, start)
        return self.history


def train_ssl(manifest: Manifest, cfg: TrainConfig, encoder_cfg: EncoderConfig = EncoderConfig(),
              out_dir=None, resume=None, until: int | None = None) -> SSLTrainer:
    """Run (or resume) self-supervised training; returns the trainer holding the final state."""
    trainer = SSLTrainer(manifest, cfg, encoder_cfg, out_dir)
    if resume is not None:
        trainer.load(resume if isinstance(resume, Checkpoint) else load_checkpoint(resume))
    trainer.run(until)
    return trainer


def config_summary(cfg) -> dict:
    """JSON-safe dict of a (nested) config dataclass."""
    def clean(v):
        if isinstance(v, Course):
            return v.to_list()
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        return v
    return clean(asdict(cfg))


# ---------------------------------------------------------------------------
# supervised fine-tuning

COS_CLAMP = 1.0 - 1e-7


def aam_softmax_loss(emb, labels, weight, scale: float = 30.0, margin: float = 0.2):
    """Additive angular margin softmax on unit-norm embeddings and class weights.

    Logit for the true class is ``s * cos(theta_y + m)``, the others
    ``s * cos(theta_j)``; cosines are clamped to ``[-1 + 1e-7, 1 - 1e-7]`` in the gradient.
    Returns ``(mean loss, d emb, d weight, logits)``.
    """
    emb, weight = np.asarray(emb, dtype=np.float64), np.asarray(weight, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    N, C = len(emb), len(weight)
    if not scale > 0 or not 0 <= margin < math.pi / 2:
        raise ConfigError(f"need scale > 0 and 0 <= margin < pi/2, got {scale}, {margin}")
    if labels.shape != (N,) or np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must be {N} integers in [0, {C})")
    cos_raw = emb @ weight.T
    # the forward value only needs cos in [-1, 1]; the clamp guards d theta / d cos,
    # which is infinite at +-1, so it enters the derivative and nothing else
    cos = np.clip(cos_raw, -1.0, 1.0)
    inside = (cos_raw > -COS_CLAMP) & (cos_raw < COS_CLAMP)
    rows = np.arange(N)
    ct = cos[rows, labels]
    st = np.sqrt(1.0 - ct * ct)
    ct_g = np.clip(ct, -COS_CLAMP, COS_CLAMP)
    logits = scale * cos
    logits[rows, labels] = scale * (ct * math.cos(margin) - st * math.sin(margin))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[rows, labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= N
    dcos = scale * dlogits
    dcos[rows, labels] = scale * dlogits[rows, labels] * (math.cos(margin) + math.sin(margin) * ct_g / np.sqrt(1.0 - ct_g * ct_g))
    dcos *= inside
    return loss, dcos @ weight, dcos.T @ emb, logits


class AAMHead(nn.Layer):
    """Class prototypes for AAM-softmax; rows are normalized inside the loss."""

    def __init__(self, dim: int, n_classes: int, scale: float = 30.0, margin: float = 0.2,
                 seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 0xAA])
        self.add_param("weight", rng.standard_normal((n_classes, dim)))
        self.scale, self.margin = scale, margin
        self.norm = nn.L2Normalize()

    def loss(self, emb, labels):
        w = self.params["weight"]
        wn = np.linalg.norm(w, axis=1, keepdims=True)
        w_hat = w / wn
        e = self.norm.forward(np.asarray(emb, dtype=np.float64))
        loss, de, dw_hat, _ = aam_softmax_loss(e, labels, w_hat, self.scale, self.margin)
        self.grads["weight"] += ((dw_hat - w_hat * (w_hat * dw_hat).sum(1, keepdims=True)) / wn
                                 ).astype(w.dtype)
        return loss, self.norm.backward(de), e @ w_hat.T


@dataclass
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 200
    seed: int = 0
    crop_dur: float = 2.0
    aug_fraction: float = 0.0
    lr: LrConfig = field(default_factory=lambda: LrConfig(mode="single_cosine", total_epochs=50))
    weight_decay: float = 5e-5
    scale: float = 30.0
    margin: float = 0.2
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dtype: str = "float32"
    deterministic: bool = True

    def validate(self):
        if self.batch_size < 2 or self.epochs < 1:
            raise ConfigError("fine-tuning needs batch_size >= 2 and epochs >= 1")
        if self.lr.mode != "single_cosine":
            raise ConfigError("fine-tuning uses the single_cosine learning-rate mode")
        self.lr.validate()
        return self


@dataclass
class FinetuneResult:
    encoder: Encoder
    head: AAMHead
    history: list
    classes: list


def finetune(init, manifest: Manifest, cfg: FinetuneConfig = FinetuneConfig(),
             encoder_cfg: EncoderConfig | None = None, out_dir=None) -> FinetuneResult:
    """Supervised AAM-softmax training of the encoder from ``init``.

    ``init`` is ``"random"`` or a checkpoint (object or path) whose encoder
    weights are used; any DINO head in it is ignored.
    """
    cfg.validate()
    if not manifest.has_labels:
        raise ConfigError("fine-tuning needs speaker labels")
    dtype = np.dtype(cfg.dtype)
    if isinstance(init, str) and init == "random":
        enc_cfg = encoder_cfg or EncoderConfig()
        encoder = Encoder(enc_cfg, seed=cfg.seed)
    else:
        ckpt = init if isinstance(init, Checkpoint) else load_checkpoint(init)
        enc_cfg = ckpt.encoder_config
        if encoder_cfg is not None and encoder_cfg != enc_cfg:
            raise ConfigError("checkpoint encoder config differs from the requested one")
        encoder = Encoder(enc_cfg, seed=cfg.seed)
        encoder.load_state_dict(ckpt.encoder)
    encoder.astype(dtype)
    shapes = {k: v.shape for k, v in encoder.state_dict().items()}
    classes = sorted(manifest.speakers)
    label_of = {s: i for i, s in enumerate(classes)}
    head = AAMHead(enc_cfg.embedding_dim, len(classes), cfg.scale, cfg.margin, seed=cfg.seed)
    params = {f"encoder.{k}": v for k, v in encoder.parameters().items()}
    params["head.weight"] = head.params["weight"]
    opt = Adam(params, cfg.weight_decay)
    pool = AugmentPool.synthetic(cfg.augment, cfg.frontend.sample_rate, cfg.seed)
    crop = int(round(cfg.crop_dur * cfg.frontend.sample_rate))
    ids = manifest.ids
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch, 0xF7]).permutation(len(ids))
        bounds = list(range(0, len(ids), cfg.batch_size)) + [len(ids)]
        if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
            bounds.pop(-2)
        losses, correct = [], 0
        for b, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
            rng = np.random.default_rng([cfg.seed, epoch, b, 0xF8])
            batch = [ids[i] for i in order[lo:hi]]
            mask = aug_mask(len(batch), cfg.aug_fraction, rng)
            feats = []
            for utt_id, aug in zip(batch, mask):
                wav = manifest.load(utt_id)
                if len(wav) < crop:
                    raise ConfigError(f"{utt_id} is shorter than the {cfg.crop_dur} s crop")
                off = int(rng.integers(len(wav) - crop + 1))
                seg = wav[off : off + crop]
                if aug:
                    seg = pool.apply(seg, rng)
                feats.append(mfcc(Waveform(seg, cfg.frontend.sample_rate), cfg.frontend))
            x = stack_features(feats).astype(dtype)
            labels = np.array([label_of[manifest.speaker_of(u)] for u in batch])
            encoder.train()
            encoder.zero_grad()
            head.zero_grad()
            emb = encoder.forward(x)
            loss, demb, cosines = head.loss(emb, labels)
            encoder.backward(demb.astype(dtype))
            grads = {f"encoder.{k}": v for k, v in encoder.gradients().items()}
            grads["head.weight"] = head.grads["weight"]
            try:
                opt.step(grads, sgdr_lr(epoch, b / (len(bounds) - 1), cfg.lr))
            except NonFiniteError as exc:
                raise NonFiniteError(f"fine-tune epoch {epoch} batch {b}: {exc}") from exc
            losses.append(loss)
            correct += int((cosines.argmax(1) == labels).sum())
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": sgdr_lr(epoch, 0.0, cfg.lr),
               "data_fraction": 1.0, "aug_fraction": cfg.aug_fraction, "center_max_prob": None,
               "wall_time_s": None if cfg.deterministic else time.perf_counter() - t0,
               "accuracy": correct / len(ids)}
        history.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
    if {k: v.shape for k, v in encoder.state_dict().items()} != shapes:
        raise ShapeError("encoder shapes changed during fine-tuning")
    if out is not None:
        save_checkpoint(Checkpoint(enc_cfg, encoder.state_dict(),
                                   head={"aam.weight": head.params["weight"]},
                                   epoch=cfg.epochs, meta={"history": history, "classes": classes}),
                        out / "finetuned.ckpt")
    return FinetuneResult(encoder, head, history, classes)
