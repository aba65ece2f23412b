"""Run configuration: a flat ``section.key`` namespace stored as TOML.

Every key has a default (the paper-scale values); the ``desk`` preset
overrides the handful that shrink a run to CPU scale. Values are resolved
as defaults < preset < config file < command-line ``--set`` overrides, and
the merged result is what gets written next to a run's outputs.
"""

from __future__ import annotations

from pathlib import Path

import tomli
import tomli_w

from .corpus import AugmentConfig
from .curriculum import Course
from .dino import HeadConfig, ViewConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .frontend import FrontendConfig
from .schedule import LrConfig

DEFAULTS: dict = {
    "preset": "paper",
    "seed": 0,
    # front end
    "frontend.sample_rate": 16000,
    "frontend.frame_ms": 25.0,
    "frontend.hop_ms": 10.0,
    "frontend.n_fft": 512,
    "frontend.n_mels": 40,
    "frontend.n_ceps": 40,
    "frontend.f_min": 0.0,
    "frontend.f_max": "nyquist",
    "frontend.log_floor": 1e-10,
    "frontend.window": "hamming",
    "frontend.cms": True,
    "frontend.cmvn": False,
    # encoder
    "encoder.channels": 64,
    "encoder.res2net_scale": 2,
    "encoder.se_reduction": 4,
    "encoder.dilations": [2, 3, 4],
    "encoder.embedding_dim": 64,
    "encoder.feature_dim": 40,
    "encoder.kernel_size": 3,
    "encoder.first_kernel": 5,
    "encoder.attention_channels": 64,
    # views and head
    "views.n_local": 5,
    "views.global_dur": 3.0,
    "views.local_dur": 1.5,
    "head.hidden_dim": 256,
    "head.bottleneck_dim": 64,
    "head.out_dim": 256,
    "head.student_temp": 0.1,
    "head.teacher_temp": 0.04,
    # teacher
    "dino.ema_momentum": 0.996,
    "dino.center_momentum": 0.9,
    "dino.centering": True,
    "dino.probe_temp": 0.2,
    "dino.probe_bound": 10.0,
    # curricula
    "curriculum.data": "none",
    "curriculum.aug": "none",
    "curriculum.strategy": "random",
    "curriculum.n_clusters": 40,
    # augmentation
    "augment.snr_min": 0.0,
    "augment.snr_max": 15.0,
    "augment.rt60_min": 0.2,
    "augment.rt60_max": 0.8,
    "augment.n_noise_clips": 12,
    "augment.noise_clip_dur": 5.0,
    "augment.n_rirs": 24,
    # optimisation
    "train.batch_size": 200,
    "train.epochs": 80,
    "train.lr_max": 0.001,
    "train.restart_period": 16,
    "train.lr_decay": 0.8,
    "train.lr_min": 0.0,
    "train.weight_decay": 5e-5,
    "train.decay_bn_bias": False,
    "train.dtype": "float32",
    "train.deterministic": True,
    # fine-tuning
    "finetune.epochs": 50,
    "finetune.batch_size": 200,
    "finetune.lr_max": 0.001,
    "finetune.crop_dur": 2.0,
    "finetune.aug_fraction": 0.0,
    "finetune.scale": 30.0,
    "finetune.margin": 0.2,
    # evaluation
    "eval.p_target": 0.05,
}

PRESETS: dict = {
    "paper": {},
    "desk": {
        "train.batch_size": 32,
        "train.epochs": 40,
        "train.restart_period": 8,
        "views.global_dur": 2.0,
        "views.local_dur": 1.0,
        "finetune.batch_size": 32,
        "finetune.epochs": 20,
    },
}


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def nest(flat: dict) -> dict:
    tree: dict = {}
    for key, v in flat.items():
        *path, leaf = key.split(".")
        node = tree
        for p in path:
            node = node.setdefault(p, {})
        node[leaf] = v
    return tree


def parse_value(text: str):
    """Interpret a ``--set key=value`` right-hand side as a TOML value, else a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _check_type(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif key in ("curriculum.data", "curriculum.aug"):
        ok = isinstance(value, (str, list))
    elif key == "frontend.f_max":
        ok = value == "nyquist" or isinstance(value, (int, float))
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"config key {key!r}: bad value {value!r} "
                          f"(expected something like {default!r})")
    return float(value) if isinstance(default, float) and key != "frontend.f_max" else value


class RunConfig:
    """Resolved flat configuration with typed builders for each module."""

    def __init__(self, values: dict | None = None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        name = values.get("preset", DEFAULTS["preset"])
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        merged = {**DEFAULTS, **PRESETS[name], **values}
        self.values = {k: _check_type(k, merged[k], DEFAULTS[k]) for k in DEFAULTS}

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> RunConfig:
        values = {}
        if path is not None:
            try:
                values = flatten(tomli.loads(Path(path).read_text()))
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **flat) -> RunConfig:
        return RunConfig({**self.values, **{k.replace("__", "."): v for k, v in flat.items()}})

    def to_toml(self) -> str:
        return tomli_w.dumps(nest(self.values))

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_toml())
        return path

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    # -- builders ----------------------------------------------------------
    def frontend(self) -> FrontendConfig:
        s = self.section("frontend")
        s["f_max"] = None if s["f_max"] == "nyquist" else float(s["f_max"])
        return FrontendConfig(**s).validate()

    def encoder(self) -> EncoderConfig:
        s = self.section("encoder")
        s["dilations"] = tuple(s["dilations"])
        return EncoderConfig(**s).validate()

    def views(self) -> ViewConfig:
        return ViewConfig(**self.section("views")).validate()

    def head(self) -> HeadConfig:
        return HeadConfig(**self.section("head")).validate()

    def augment(self) -> AugmentConfig:
        s = self.section("augment")
        return AugmentConfig(snr_range=(s["snr_min"], s["snr_max"]),
                             rt60_range=(s["rt60_min"], s["rt60_max"]),
                             n_noise_clips=s["n_noise_clips"], noise_clip_dur=s["noise_clip_dur"],
                             n_rirs=s["n_rirs"])

    def lr(self) -> LrConfig:
        t = self.section("train")
        return LrConfig(lr_max=t["lr_max"], restart_period=t["restart_period"],
                        decay=t["lr_decay"], lr_min=t["lr_min"]).validate()

    @staticmethod
    def _course(value):
        return value if isinstance(value, str) else Course("custom", tuple(map(tuple, value)))

    def train(self):
        from .training import TrainConfig

        t, d, c = self.section("train"), self.section("dino"), self.section("curriculum")
        return TrainConfig(
            batch_size=t["batch_size"], epochs=t["epochs"], seed=self["seed"],
            data_course=self._course(c["data"]), aug_course=self._course(c["aug"]),
            subset_strategy=c["strategy"], n_clusters=c["n_clusters"], lr=self.lr(),
            weight_decay=t["weight_decay"], decay_bn_bias=t["decay_bn_bias"],
            views=self.views(), head=self.head(), frontend=self.frontend(),
            augment=self.augment(), ema_momentum=d["ema_momentum"],
            center_momentum=d["center_momentum"], centering=d["centering"],
            probe_temp=d["probe_temp"], probe_bound=d["probe_bound"], dtype=t["dtype"],
            deterministic=t["deterministic"]).validate()

    def finetune(self):
        from .training import FinetuneConfig

        f, t = self.section("finetune"), self.section("train")
        return FinetuneConfig(
            epochs=f["epochs"], batch_size=f["batch_size"], seed=self["seed"],
            crop_dur=f["crop_dur"], aug_fraction=f["aug_fraction"],
            lr=LrConfig(lr_max=f["lr_max"], mode="single_cosine", total_epochs=f["epochs"]),
            weight_decay=t["weight_decay"], scale=f["scale"], margin=f["margin"],
            frontend=self.frontend(), augment=self.augment(), dtype=t["dtype"],
            deterministic=t["deterministic"]).validate()
