"""Seeded synthetic truth fields and biased, noisy forecast ensembles.

The truth is a spectrally synthesised Gaussian random field on a
latitude/longitude grid (periodic in longitude) that is advected eastward
and refreshed with smooth innovations each step (one step = 24 h).
Forecast members advect the initial state with a perturbed speed, add
smooth noise whose size grows with lead time and varies in space and
season, and carry a static bias field shared by all members.

Random streams are keyed by ``(seed, purpose, date, member)`` on a Philox
counter-based generator, so any sample can be regenerated independently.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import LEAD_TIMES, EnsembleSample, save_sample, write_grd

_PURPOSES = {"truth_init": 1, "innovation": 2, "speed": 3, "member_speed": 4, "member_noise": 5,
             "bias": 6, "uncertainty": 7}
STEP_HOURS = 24


@dataclass
class SynthConfig:
    seed: int = 0
    height: int = 32
    width: int = 64
    n_dates: int = 400
    n_members: int = 10
    spectral_slope: float = -3.0
    advection_speed: float = 1.5
    speed_jitter: float = 0.4
    bias_field_amplitude: float = 0.5
    noise_growth: tuple = (0.05, 0.45, 0.64)
    climate_amplitude: float = 1.5
    uncertainty_contrast: float = 0.5
    seasonal_period: float = 104.0
    seasonal_amplitude: float = 0.3
    split_fractions: tuple = (0.7, 0.15, 0.15)
    field_id: str = "T850-like"

    def __post_init__(self):
        self.noise_growth = tuple(float(v) for v in self.noise_growth)
        self.split_fractions = tuple(float(v) for v in self.split_fractions)
        if len(self.noise_growth) != len(LEAD_TIMES):
            raise ValueError("noise_growth needs one value per lead time")
        if min(self.noise_growth) < 0:
            raise ValueError("noise_growth must be >= 0")
        # all-zero is the noiseless degenerate case; otherwise strictly increasing
        if any(self.noise_growth) and any(b <= a for a, b in zip(self.noise_growth, self.noise_growth[1:])):
            raise ValueError("noise_growth must increase with lead time")
        if self.noise_growth[1] >= 1:
            raise ValueError("24 h noise level must be < 1 (it sets the innovation size)")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split_fractions must be non-negative and sum to 1")
        if self.n_dates < 3:
            raise ValueError("need at least 3 dates")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator for one (purpose, date, member) stream."""
    ss = np.random.SeedSequence([int(seed), _PURPOSES[purpose], *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def gaussian_random_field(height: int, width: int, slope: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance field with power spectrum ~ k**slope.

    Synthesised on a (2H, W) torus and cropped to H rows, so it is periodic
    in longitude only.
    """
    h2 = 2 * height
    noise = rng.standard_normal((h2, width))
    # cycles per gridpoint in both directions keeps the field isotropic
    k = np.hypot(np.fft.fftfreq(h2)[:, None], np.fft.fftfreq(width)[None, :])
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** (slope / 2.0)
    if width % 2 == 0:
        # no energy at the longitude Nyquist frequency, so fractional shifts compose exactly
        amp[:, width // 2] = 0.0
    f = np.fft.ifft2(np.fft.fft2(noise) * amp).real[:height]
    f -= f.mean()
    return f / f.std()


def shift_lon(values: np.ndarray, shift: float) -> np.ndarray:
    """Advect eastward by ``shift`` gridpoints (fractional, periodic).

    The Nyquist term of an even-width grid is scaled by cos(pi * shift),
    which is exact for integer shifts.
    """
    w = values.shape[-1]
    k = np.fft.rfftfreq(w)
    phase = np.exp(-2j * np.pi * k * shift)
    if w % 2 == 0:
        phase[-1] = np.cos(np.pi * shift)
    return np.fft.irfft(np.fft.rfft(values, axis=-1) * phase, n=w, axis=-1)


def seasonal_factor(cfg: SynthConfig, t) -> np.ndarray:
    return 1.0 + cfg.seasonal_amplitude * np.sin(2 * np.pi * np.asarray(t, dtype=float) / cfg.seasonal_period)


def _lat_frac(cfg: SynthConfig) -> np.ndarray:
    return (np.arange(cfg.height) + 0.5) / cfg.height


def climatology(cfg: SynthConfig) -> np.ndarray:
    """Warm-equator mean state (H, W) in raw units."""
    lat = _lat_frac(cfg)
    return np.repeat((cfg.climate_amplitude * np.sin(np.pi * lat))[:, None], cfg.width, axis=1)


def uncertainty_map(cfg: SynthConfig) -> np.ndarray:
    """Static positive map (mean ~1) modulating forecast error size."""
    lat = _lat_frac(cfg)
    band = 0.6 + 0.8 * np.sin(np.pi * lat) ** 2
    g = gaussian_random_field(cfg.height, cfg.width, cfg.spectral_slope, stream(cfg.seed, "uncertainty"))
    u = band[:, None] * np.exp(cfg.uncertainty_contrast * g)
    return u / u.mean()


def bias_field(cfg: SynthConfig) -> np.ndarray:
    """Hidden static bias (raw units, RMS = bias_field_amplitude)."""
    g = gaussian_random_field(cfg.height, cfg.width, cfg.spectral_slope, stream(cfg.seed, "bias"))
    return cfg.bias_field_amplitude * g / np.sqrt((g ** 2).mean())


@dataclass
class TruthSequence:
    """Standardised truth fields (T, H, W) plus what members need to match them."""

    fields: np.ndarray
    offset: float
    scale: float
    speeds: np.ndarray
    config: SynthConfig = field(repr=False)

    def raw(self, t: int) -> np.ndarray:
        return self.fields[t] * self.scale + self.offset


def generate_truth(cfg: SynthConfig) -> TruthSequence:
    """Truth for ``n_dates + 2`` steps (the last two only serve as 48 h verification)."""
    n_steps = cfg.n_dates + len(LEAD_TIMES) - 1
    clim = climatology(cfg)
    u = uncertainty_map(cfg)
    q = cfg.noise_growth[1]
    rho = np.sqrt(1.0 - q * q)
    anom = gaussian_random_field(cfg.height, cfg.width, cfg.spectral_slope, stream(cfg.seed, "truth_init"))
    out = np.empty((n_steps, cfg.height, cfg.width))
    speeds = np.empty(n_steps)
    for t in range(n_steps):
        out[t] = clim + anom
        speeds[t] = cfg.advection_speed + cfg.speed_jitter * stream(cfg.seed, "speed", t).standard_normal()
        xi = gaussian_random_field(cfg.height, cfg.width, cfg.spectral_slope, stream(cfg.seed, "innovation", t))
        anom = rho * shift_lon(anom, speeds[t]) + q * u * seasonal_factor(cfg, t) * xi
    offset, scale = float(out.mean()), float(out.std())
    return TruthSequence((out - offset) / scale, offset, scale, speeds, cfg)


@dataclass
class SynthDataset:
    samples: list
    bias_field: np.ndarray  # standardised units; for oracle checks only
    config: SynthConfig

    def split(self, name: str) -> list:
        return [self.samples[i] for i in split_indices(self.config)[name]]


def split_indices(cfg: SynthConfig) -> dict:
    n = cfg.n_dates
    n_train = int(round(cfg.split_fractions[0] * n))
    n_val = int(round(cfg.split_fractions[1] * n))
    return {"train": list(range(0, n_train)), "val": list(range(n_train, n_train + n_val)),
            "test": list(range(n_train + n_val, n))}


def generate_ensemble(truth: TruthSequence, cfg: SynthConfig | None = None) -> SynthDataset:
    """Build one :class:`EnsembleSample` per date from the truth sequence."""
    cfg = cfg or truth.config
    if truth.fields.shape[0] < cfg.n_dates + 2:
        raise ValueError("truth sequence too short for the 48 h verification offset")
    clim = climatology(cfg)
    u = uncertainty_map(cfg)
    bias = bias_field(cfg)
    q = cfg.noise_growth[1]
    rho = np.sqrt(1.0 - q * q)
    samples = []
    for t in range(cfg.n_dates):
        anom0 = truth.raw(t) - clim
        season = seasonal_factor(cfg, t)
        # slow modulation of the systematic error, out of phase with the noise cycle
        bias_t = bias * (1.0 + 0.25 * np.cos(2 * np.pi * t / cfg.seasonal_period))
        members = {}
        for li, lead in enumerate(LEAD_TIMES):
            steps = lead // STEP_HOURS
            arr = np.empty((cfg.n_members, cfg.height, cfg.width))
            for m in range(cfg.n_members):
                dv = stream(cfg.seed, "member_speed", t, m).standard_normal()
                disp = steps * cfg.advection_speed + np.sqrt(steps) * cfg.speed_jitter * dv
                xi = gaussian_random_field(cfg.height, cfg.width, cfg.spectral_slope,
                                           stream(cfg.seed, "member_noise", t, m, lead))
                sigma = cfg.noise_growth[li] * u * season
                arr[m] = clim + rho ** steps * shift_lon(anom0, disp) + sigma * xi + bias_t
            members[lead] = ((arr - truth.offset) / truth.scale).astype(np.float32)
        gt = truth.fields[t + 2].astype(np.float32)
        samples.append(EnsembleSample(members, gt, t, cfg.field_id))
    return SynthDataset(samples, bias / truth.scale, cfg)


def generate(cfg: SynthConfig) -> SynthDataset:
    return generate_ensemble(generate_truth(cfg), cfg)


def write_dataset(ds: SynthDataset, out_dir) -> Path:
    """Write GRD1 sample files, the manifest, and the hidden bias oracle file.

    Returns the manifest path. The bias file is not listed in the manifest.
    """
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    splits = {}
    for name, idx in split_indices(ds.config).items():
        paths = []
        for i in idx:
            rel = f"samples/date{i:05d}.grd"
            save_sample(out / rel, ds.samples[i])
            paths.append(rel)
        splits[name] = paths
    manifest = {"field_id": ds.config.field_id, "n_members": ds.config.n_members,
                "lead_times": list(LEAD_TIMES), "grid": [ds.config.height, ds.config.width],
                "synth_config": ds.config.to_dict(), "splits": splits}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    oracle = out / "oracle"
    oracle.mkdir(exist_ok=True)
    write_grd(oracle / "bias_field.grd", ds.bias_field.astype(np.float32), {"kind": "hidden_bias_field"})
    return path
