"""Synthetic speaker corpus, noise and RIR generators, augmentation, trial lists.

Speakers are harmonic sources: a fundamental frequency plus a log-normal
harmonic amplitude profile. Each utterance jitters the profile, bends the
pitch slightly and gates the source with a syllable-like on/off envelope, so
speaker identity survives cepstral mean subtraction.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ConfigError, ZeroPowerError
from .frontend import Waveform

N_HARMONICS = 8
F0_RANGE = (80.0, 300.0)


@dataclass
class SpeakerProfile:
    speaker_id: str
    f0: float
    harmonic_amplitudes: np.ndarray
    formant_jitter_scale: float = 0.1

    def __post_init__(self):
        amps = np.asarray(self.harmonic_amplitudes, dtype=np.float64)
        if not (F0_RANGE[0] <= self.f0 <= F0_RANGE[1]):
            raise ConfigError(f"f0 {self.f0} outside {F0_RANGE}")
        if np.any(amps < 0) or not np.any(amps > 0):
            raise ConfigError("harmonic amplitudes must be non-negative and not all zero")
        self.harmonic_amplitudes = amps


@dataclass
class Utterance:
    utt_id: str
    path: str
    duration: float
    sample_rate: int = 16000
    speaker_id: str | None = None


@dataclass
class Manifest:
    utterances: list[Utterance]
    root: Path = field(default_factory=Path)
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [u.utt_id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ValueError("utt_ids in a manifest must be unique")
        self._index = {u.utt_id: i for i, u in enumerate(self.utterances)}
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def ids(self) -> list[str]:
        return [u.utt_id for u in self.utterances]

    @property
    def has_labels(self) -> bool:
        return all(u.speaker_id is not None for u in self.utterances)

    @property
    def speakers(self) -> list[str]:
        if not self.has_labels:
            raise ValueError("manifest has no speaker labels")
        return sorted({u.speaker_id for u in self.utterances})

    def __getitem__(self, utt_id: str) -> Utterance:
        return self.utterances[self._index[utt_id]]

    def __contains__(self, utt_id):
        return utt_id in self._index

    def speaker_of(self, utt_id: str) -> str:
        spk = self[utt_id].speaker_id
        if spk is None:
            raise ValueError(f"{utt_id} has no speaker label")
        return spk

    def subset(self, utt_ids) -> Manifest:
        return Manifest([self[i] for i in utt_ids], self.root, self.seed, dict(self.params))

    def without_labels(self) -> Manifest:
        utts = [Utterance(u.utt_id, u.path, u.duration, u.sample_rate) for u in self.utterances]
        return Manifest(utts, self.root, self.seed, dict(self.params))

    def resolve(self, utt: Utterance) -> Path:
        p = Path(utt.path)
        return p if p.is_absolute() else self.root / p

    def load(self, utt_id: str, cache: bool = True) -> np.ndarray:
        """Samples of one utterance as float64 in [-1, 1]."""
        if utt_id in self._cache:
            return self._cache[utt_id]
        utt = self[utt_id]
        x = load_waveform(self.resolve(utt), utt.sample_rate).samples
        if cache:
            x.setflags(write=False)
            self._cache[utt_id] = x
        return x

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for u in self.utterances:
                fh.write(json.dumps({
                    "utt_id": u.utt_id,
                    "speaker_id": u.speaker_id,
                    "path": u.path,
                    "duration": u.duration,
                    "sample_rate": u.sample_rate,
                }) + "\n")
        return path

    @classmethod
    def read(cls, path) -> Manifest:
        path = Path(path)
        utts = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                utts.append(Utterance(
                    utt_id=rec["utt_id"],
                    path=rec["path"],
                    duration=float(rec["duration"]),
                    sample_rate=int(rec.get("sample_rate", 16000)),
                    speaker_id=rec.get("speaker_id"),
                ))
        params, seed = {}, None
        meta = path.parent / "corpus.json"
        if meta.exists():
            params = json.loads(meta.read_text())
            seed = params.get("seed")
        manifest = cls(utts, path.parent, seed, params)
        missing = [u.utt_id for u in utts if not manifest.resolve(u).exists()]
        if missing:
            raise FileNotFoundError(f"{len(missing)} manifest paths do not resolve, e.g. {missing[0]}")
        return manifest


# ---------------------------------------------------------------------------
# audio I/O


def load_waveform(path, sample_rate: int | None = None) -> Waveform:
    """Read mono PCM-16 WAV, or raw little-endian float32 (``.f32``/``.raw``)."""
    path = Path(path)
    if path.suffix.lower() in (".f32", ".raw"):
        if sample_rate is None:
            raise ConfigError(f"{path}: raw float32 audio needs a sample rate")
        return Waveform(np.fromfile(path, dtype="<f4").astype(np.float64), sample_rate)
    sr, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if sample_rate is not None and sr != sample_rate:
        raise ValueError(f"{path}: file is {sr} Hz, manifest says {sample_rate} Hz")
    return Waveform(x, sr)


def write_wav(path, samples: np.ndarray, sample_rate: int):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(path, sample_rate, pcm)


# ---------------------------------------------------------------------------
# synthetic speakers


def utt_rng(seed: int, key: str, *extra: int) -> np.random.Generator:
    """Independent RNG stream for one (seed, id) pair."""
    return np.random.default_rng([int(seed), zlib.crc32(key.encode()), *map(int, extra)])


def sample_speaker(speaker_id: str, rng: np.random.Generator,
                   jitter: float = 0.1, spread: float = 0.8) -> SpeakerProfile:
    f0 = float(np.exp(rng.uniform(np.log(F0_RANGE[0]), np.log(F0_RANGE[1]))))
    log_amp = rng.normal(0.0, spread, N_HARMONICS) - 0.3 * np.arange(N_HARMONICS)
    return SpeakerProfile(speaker_id, f0, np.exp(log_amp), jitter)


def _syllable_envelope(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    env = np.zeros(n)
    ramp = int(0.02 * sr)
    t = int(rng.uniform(0.02, 0.1) * sr)
    while t < n:
        seg = int(rng.uniform(0.12, 0.35) * sr)
        end = min(n, t + seg)
        env[t:end] = rng.uniform(0.6, 1.0)
        t = end + int(rng.uniform(0.04, 0.15) * sr)
    # raised-cosine edges
    k = np.hanning(2 * ramp + 1)
    k /= k.sum()
    return np.convolve(env, k, mode="same")


def synthesize_utterance(profile: SpeakerProfile, duration: float, sample_rate: int,
                         rng: np.random.Generator, noise_db: float = -30.0) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    amps = profile.harmonic_amplitudes * np.exp(
        rng.normal(0.0, profile.formant_jitter_scale, N_HARMONICS))
    f0 = profile.f0 * np.exp(rng.normal(0.0, 0.02))
    rate, phase0 = rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
    f0_track = f0 * (1.0 + 0.04 * np.sin(2 * np.pi * rate * t + phase0))
    phase = 2 * np.pi * np.cumsum(f0_track) / sample_rate
    harmonics = np.arange(1, N_HARMONICS + 1)
    offsets = rng.uniform(0, 2 * np.pi, N_HARMONICS)
    voiced = np.sin(phase[:, None] * harmonics[None, :] + offsets[None, :]) @ amps
    x = voiced * _syllable_envelope(n, sample_rate, rng)
    rms = np.sqrt(np.mean(x ** 2)) or 1.0
    x = x + rng.normal(0.0, rms * 10 ** (noise_db / 20), n)
    return 0.5 * x / np.max(np.abs(x))


def generate_corpus(n_speakers: int, utts_per_speaker: int, dur_range=(2.0, 4.0),
                    seed: int = 0, out_dir=".", sample_rate: int = 16000,
                    prefix: str = "") -> Manifest:
    """Write a synthetic corpus (``wav/*.wav``, ``manifest.jsonl``, ``corpus.json``)."""
    if n_speakers < 2 or utts_per_speaker < 2:
        raise ConfigError("need at least 2 speakers with at least 2 utterances each")
    lo, hi = map(float, dur_range)
    if not 0 < lo <= hi:
        raise ConfigError(f"invalid duration range {dur_range}")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(wav_dir, os.W_OK):
        raise PermissionError(f"{wav_dir} is not writable")

    utts = []
    for s in range(n_speakers):
        spk = f"{prefix}spk{s:03d}"
        profile = sample_speaker(spk, utt_rng(seed, spk))
        for j in range(utts_per_speaker):
            utt_id = f"{spk}-u{j:03d}"
            rng = utt_rng(seed, utt_id)
            n = int(round(rng.uniform(lo, hi) * sample_rate))
            x = synthesize_utterance(profile, n / sample_rate, sample_rate, rng)
            rel = Path("wav") / f"{utt_id}.wav"
            write_wav(out_dir / rel, x, sample_rate)
            utts.append(Utterance(utt_id, str(rel), n / sample_rate, sample_rate, spk))

    params = {
        "seed": seed, "n_speakers": n_speakers, "utts_per_speaker": utts_per_speaker,
        "dur_range": [lo, hi], "sample_rate": sample_rate, "prefix": prefix,
    }
    (out_dir / "corpus.json").write_text(json.dumps(params, indent=2) + "\n")
    manifest = Manifest(utts, out_dir, seed, params)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# noise, reverberation, augmentation


def generate_noise(n: int, color: str, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS coloured Gaussian noise (white, pink or brown)."""
    exponent = {"white": 0.0, "pink": 0.5, "brown": 1.0}[color]
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / f ** exponent, n=n)
    return x / np.sqrt(np.mean(x ** 2))


def generate_rir(rt60: float, sample_rate: int = 16000, seed: int = 0) -> np.ndarray:
    """Direct path at t=0 followed by an exponentially decaying noise tail.

    The amplitude envelope is ``10**(-3 t / rt60)``, i.e. the energy drops by
    60 dB at ``t = rt60``.
    """
    if not 0 < rt60 <= 2:
        raise ConfigError(f"rt60 must be in (0, 2] seconds, got {rt60}")
    n = math.ceil(rt60 * sample_rate)
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    rir = rng.standard_normal(n) * 10.0 ** (-3.0 * t / rt60)
    if n > 1:
        rir *= 0.5 / np.max(np.abs(rir[1:]))
    rir[0] = 1.0
    return rir


def reverberate(samples: np.ndarray, rir: np.ndarray) -> np.ndarray:
    """Full convolution truncated to the input length, rescaled to the input peak."""
    x = np.asarray(samples, dtype=np.float64)
    y = scipy.signal.fftconvolve(x, np.asarray(rir, dtype=np.float64))[: len(x)]
    peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
    if peak_out == 0:
        return y
    return y * (peak_in / peak_out)


def add_noise(samples: np.ndarray, noise: np.ndarray, snr_db: float,
              rng: np.random.Generator | None = None) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    if not math.isfinite(snr_db):
        raise ConfigError(f"snr_db must be finite or +inf, got {snr_db}")
    p_sig = np.mean(x ** 2)
    if p_sig == 0:
        raise ZeroPowerError("zero-power signal: cannot mix noise at a target SNR")
    noise = np.asarray(noise, dtype=np.float64)
    start = int(rng.integers(len(noise))) if rng is not None else 0
    n = noise[(start + np.arange(len(x))) % len(noise)]
    p_noise = np.mean(n ** 2)
    if p_noise == 0:
        raise ZeroPowerError("zero-power noise clip")
    return x + n * np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))


def augment(wave, kind: str, resource: np.ndarray, snr_db: float = math.inf,
            rng: np.random.Generator | None = None):
    """Apply one augmentation; returns the same type it was given."""
    x = wave.samples if isinstance(wave, Waveform) else wave
    if kind == "noise":
        y = add_noise(x, resource, snr_db, rng)
    elif kind == "reverb":
        y = reverberate(x, resource)
    else:
        raise ConfigError(f"unknown augmentation kind {kind!r}")
    return Waveform(y, wave.sample_rate) if isinstance(wave, Waveform) else y


@dataclass(frozen=True)
class AugmentConfig:
    snr_range: tuple = (0.0, 15.0)
    rt60_range: tuple = (0.2, 0.8)
    kinds: tuple = ("noise", "reverb")
    n_noise_clips: int = 12
    noise_clip_dur: float = 5.0
    n_rirs: int = 24


class AugmentPool:
    """Pre-generated noise clips and RIRs that augmentation draws from."""

    def __init__(self, noises, rirs, cfg: AugmentConfig = AugmentConfig()):
        self.noises = list(noises)
        self.rirs = list(rirs)
        self.cfg = cfg

    @classmethod
    def synthetic(cls, cfg: AugmentConfig = AugmentConfig(), sample_rate: int = 16000,
                  seed: int = 0) -> AugmentPool:
        rng = np.random.default_rng([seed, 0xA06])
        colors = ("white", "pink", "brown")
        n = int(cfg.noise_clip_dur * sample_rate)
        noises = [generate_noise(n, colors[i % 3], rng) for i in range(cfg.n_noise_clips)]
        rirs = [generate_rir(float(rng.uniform(*cfg.rt60_range)), sample_rate,
                             int(rng.integers(2 ** 31)))
                for _ in range(cfg.n_rirs)]
        return cls(noises, rirs, cfg)

    def draw(self, rng: np.random.Generator):
        kind = self.cfg.kinds[int(rng.integers(len(self.cfg.kinds)))]
        if kind == "noise":
            clip = self.noises[int(rng.integers(len(self.noises)))]
            return kind, clip, float(rng.uniform(*self.cfg.snr_range))
        return kind, self.rirs[int(rng.integers(len(self.rirs)))], math.inf

    def apply(self, samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        kind, resource, snr = self.draw(rng)
        return augment(samples, kind, resource, snr, rng)


# ---------------------------------------------------------------------------
# trials


@dataclass
class TrialList:
    trials: list[tuple[str, str, bool]]

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def n_target(self) -> int:
        return sum(1 for t in self.trials if t[2])

    def validate(self, manifest: Manifest):
        for a, b, _ in self.trials:
            for u in (a, b):
                if u not in manifest:
                    raise KeyError(f"trial utterance {u} not in manifest")
        n_tgt = self.n_target
        if n_tgt == 0 or n_tgt == len(self.trials):
            raise ValueError("trial list needs at least one target and one nontarget trial")

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(f"{a} {b} {int(t)}\n" for a, b, t in self.trials))
        return path

    @classmethod
    def read(cls, path) -> TrialList:
        trials = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                a, b, t = line.split()
                trials.append((a, b, t == "1"))
        return cls(trials)


def make_trials(manifest: Manifest, n_target: int, n_nontarget: int, seed: int = 0) -> TrialList:
    """Sample same-speaker and cross-speaker pairs without replacement."""
    ids = manifest.ids
    labels = np.array([manifest.speaker_of(u) for u in ids])
    counts = {s: int(np.sum(labels == s)) for s in set(labels)}
    if sum(1 for c in counts.values() if c >= 2) < 2:
        raise ValueError("need at least 2 speakers with 2 or more utterances each")
    i, j = np.triu_indices(len(ids), k=1)
    same = labels[i] == labels[j]
    tgt, non = np.flatnonzero(same), np.flatnonzero(~same)
    if n_target > tgt.size or n_nontarget > non.size:
        raise ValueError(
            f"requested {n_target} target / {n_nontarget} nontarget trials but only "
            f"{tgt.size} / {non.size} pairs exist"
        )
    rng = np.random.default_rng([seed, 0x7121])
    pick_t = np.sort(rng.choice(tgt, size=n_target, replace=False))
    pick_n = np.sort(rng.choice(non, size=n_nontarget, replace=False))
    trials = [(ids[i[k]], ids[j[k]], True) for k in pick_t]
    trials += [(ids[i[k]], ids[j[k]], False) for k in pick_n]
    order = rng.permutation(len(trials))
    return TrialList([trials[k] for k in order])

