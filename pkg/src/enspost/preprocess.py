"""Local area-wise standardisation (LAS), grid I/O and batch assembly.

Grids are latitude x longitude arrays; longitude is periodic, latitude is
not. LAS maps are built by taking 7x7 moving-window statistics over the
training set, padding the reduced maps back to full size (edge rows in
latitude, wrap-around in longitude) and blurring them with a wide
Gaussian.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LEAD_TIMES = (0, 24, 48)
GRD_MAGIC = b"ENSGRD1\0"
STD_EPS = 1e-3


@dataclass
class GeoGrid:
    """A latitude x longitude scalar field."""

    values: np.ndarray
    field_id: str = "synthetic-0"
    units: str = "1"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"GeoGrid needs a 2-D array, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _grid(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, GeoGrid) else x)


# -- moving statistics, padding, smoothing ---------------------------------

def _box_sum(a: np.ndarray, k: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(a, (k, k)).sum(axis=(2, 3))


def moving_stats(field, k: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std over every k x k window (step 1, no padding).

    ``field`` is (H, W) or a stack (T, H, W); for a stack each window pools
    all T layers. Output maps are (H - k + 1, W - k + 1).
    """
    x = np.asarray(_grid(field), dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd, got {k}")
    if k > min(x.shape[1:]):
        raise ValueError(f"window size {k} exceeds grid {x.shape[1:]}")
    # pool the layers first so memory stays O(H * W); centring on the global
    # mean keeps E[x^2] - E[x]^2 well conditioned (and exactly 0 for constants)
    ref = x.mean()
    xc = x - ref
    count = x.shape[0] * k * k
    s1 = _box_sum(xc.sum(axis=0), k) / count
    s2 = _box_sum((xc * xc).sum(axis=0), k) / count
    var = np.maximum(s2 - s1 * s1, 0.0)
    mean = s1 + ref
    return mean, np.sqrt(var)


def pad_geo(values, target_h: int, target_w: int) -> np.ndarray:
    """Pad to (target_h, target_w): edge rows in latitude, wrap in longitude.

    Odd padding puts the extra row/column on the high-index side.
    """
    x = _grid(values)
    h, w = x.shape
    if target_h < h or target_w < w:
        raise ValueError(f"target {target_h}x{target_w} is smaller than the map {h}x{w}")
    dh, dw = target_h - h, target_w - w
    x = np.pad(x, ((dh // 2, dh - dh // 2), (0, 0)), mode="edge")
    return np.pad(x, ((0, 0), (dw // 2, dw - dw // 2)), mode="wrap")


def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = int(math.ceil(truncate * sigma))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return k / k.sum()


def smooth_axis(values, sigma: float, truncate: float = 4.0, axis: int = 1) -> np.ndarray:
    """1-D Gaussian pass: wrap boundary along longitude (axis 1), edge
    replication along latitude (axis 0)."""
    x = np.asarray(_grid(values), dtype=np.float64)
    k = gaussian_kernel(sigma, truncate)
    r = len(k) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="wrap" if axis == 1 else "edge")
    out = np.zeros_like(x)
    n = x.shape[axis]
    for i, wt in enumerate(k):
        out += wt * (xp[i:i + n] if axis == 0 else xp[:, i:i + n])
    return out


def gaussian_smooth(values, sigma: float = 10.0, truncate: float = 4.0) -> np.ndarray:
    """Separable Gaussian blur with radius ceil(truncate * sigma)."""
    return smooth_axis(smooth_axis(values, sigma, truncate, axis=0), sigma, truncate, axis=1)


# -- LAS ------------------------------------------------------------------

@dataclass
class LasMaps:
    """Smoothed local mean/std maps for one field."""

    mean_map: np.ndarray
    std_map: np.ndarray
    filter_size: int = 7
    gaussian_sigma: float = 10.0
    truncate: float = 4.0
    eps: float = STD_EPS
    field_id: str = "synthetic-0"
    mode: str = "las"

    @classmethod
    def fit(cls, stack, filter_size: int = 7, gaussian_sigma: float = 10.0, truncate: float = 4.0,
            eps: float = STD_EPS, field_id: str = "synthetic-0", mode: str = "las") -> "LasMaps":
        """Fit from a (T, H, W) stack of training-split fields.

        ``mode="global"`` uses one mean and std for the whole grid instead.
        """
        x = np.asarray(stack, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        h, w = x.shape[1:]
        if mode == "global":
            mean = np.full((h, w), x.mean())
            std = np.full((h, w), x.std())
        elif mode == "las":
            m, s = moving_stats(x, filter_size)
            mean = gaussian_smooth(pad_geo(m, h, w), gaussian_sigma, truncate)
            std = gaussian_smooth(pad_geo(s, h, w), gaussian_sigma, truncate)
        else:
            raise ValueError(f"unknown standardisation mode {mode!r}")
        # stored as f32 on disk; round now so in-memory and reloaded maps agree
        mean = mean.astype(np.float32).astype(np.float64)
        std = np.maximum(std, eps).astype(np.float32).astype(np.float64)
        return cls(mean, std, filter_size, gaussian_sigma, truncate, eps, field_id, mode)

    @property
    def shape(self) -> tuple:
        return self.mean_map.shape

    def _check(self, x):
        if x.shape[-2:] != self.shape:
            raise ValueError(f"field dims {x.shape[-2:]} do not match LAS maps {self.shape}")

    def standardize(self, x) -> np.ndarray:
        x = np.asarray(_grid(x))
        self._check(x)
        return (x - self.mean_map) / self.std_map

    def destandardize(self, z) -> np.ndarray:
        z = np.asarray(_grid(z))
        self._check(z)
        return z * self.std_map + self.mean_map

    def scale(self, spread) -> np.ndarray:
        """Express a spread (or any std) in standardised units."""
        spread = np.asarray(_grid(spread))
        self._check(spread)
        return spread / self.std_map

    def unscale(self, spread) -> np.ndarray:
        spread = np.asarray(_grid(spread))
        self._check(spread)
        return spread * self.std_map

    def to_dict(self) -> dict:
        return {"filter_size": self.filter_size, "gaussian_sigma": self.gaussian_sigma,
                "truncate": self.truncate, "eps": self.eps, "field_id": self.field_id, "mode": self.mode}

    def save(self, path) -> None:
        write_grd(path, np.stack([self.mean_map, self.std_map]), {"kind": "las_maps", **self.to_dict(),
                                                                   "channels": ["mean", "std"]})

    @classmethod
    def load(cls, path) -> "LasMaps":
        data, meta = read_grd(path)
        if meta.get("kind") != "las_maps":
            raise ValueError(f"{path} does not hold LAS maps")
        kw = {k: meta[k] for k in ("filter_size", "gaussian_sigma", "truncate", "eps", "field_id", "mode")}
        return cls(data[0].astype(np.float64), data[1].astype(np.float64), **kw)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean_map, np.float64).tobytes())
        h.update(np.ascontiguousarray(self.std_map, np.float64).tobytes())
        return h.hexdigest()[:16]


def fit_las(samples: Sequence["EnsembleSample"], **kwargs) -> LasMaps:
    """Fit LAS maps on member fields of the given (training) samples,
    pooling all lead times and members."""
    if not samples:
        raise ValueError("cannot fit LAS maps on an empty split")
    stack = np.concatenate([np.concatenate([s.members[lt] for lt in LEAD_TIMES]) for s in samples])
    return LasMaps.fit(stack, field_id=samples[0].field_id, **kwargs)


# -- samples and batches --------------------------------------------------

@dataclass
class EnsembleSample:
    """One forecast date: members per lead time plus the 48 h ground truth."""

    members: dict  # lead hours -> (n_members, H, W)
    ground_truth: np.ndarray
    date_index: int
    field_id: str = "synthetic-0"

    @property
    def n_members(self) -> int:
        return self.members[LEAD_TIMES[0]].shape[0]

    @property
    def shape(self) -> tuple:
        return self.ground_truth.shape

    def ensemble_mean(self, lead: int = 48, n: int | None = None) -> np.ndarray:
        m = self.members[lead][:n].astype(np.float64)
        return m.mean(axis=0)

    def ensemble_spread(self, lead: int = 48, n: int | None = None) -> np.ndarray:
        """Sample standard deviation (ddof=1) across the first ``n`` members."""
        m = self.members[lead][:n].astype(np.float64)
        if m.shape[0] < 2:
            return np.zeros(m.shape[1:])
        return m.std(axis=0, ddof=1)


def channel_layout(n_members: int) -> list[str]:
    """Input channel names, in order: for each lead, mean, spread, members."""
    names = []
    for lt in LEAD_TIMES:
        names += [f"mean_{lt}h", f"spread_{lt}h"] + [f"member{m}_{lt}h" for m in range(n_members)]
    return names


def spread_channel(n_members: int, lead: int = 48) -> int:
    return LEAD_TIMES.index(lead) * (n_members + 2) + 1


def mean_channel(n_members: int, lead: int = 48) -> int:
    return LEAD_TIMES.index(lead) * (n_members + 2)


@dataclass
class Batch:
    """Network-ready arrays for a set of samples.

    ``inputs`` is (N, 3 * (n + 2), H, W) in standardised units; spreads are
    divided by the LAS std map but not shifted so they stay positive.
    """

    inputs: np.ndarray
    spread_target: np.ndarray     # full-ensemble 48 h spread, standardised scale (N, 1, H, W)
    truth: np.ndarray             # standardised ground truth (N, 1, H, W)
    raw_truth: np.ndarray         # field units (N, H, W)
    raw_mean: np.ndarray          # reduced-ensemble 48 h mean, field units
    raw_spread: np.ndarray        # reduced-ensemble 48 h spread, field units
    raw_full_spread: np.ndarray   # full-ensemble 48 h spread, field units
    date_index: np.ndarray
    n_members: int
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.inputs[idx], self.spread_target[idx], self.truth[idx], self.raw_truth[idx],
                     self.raw_mean[idx], self.raw_spread[idx], self.raw_full_spread[idx],
                     self.date_index[idx], self.n_members, {k: v[idx] for k, v in self.extras.items()})


def assemble_batch(samples: Sequence[EnsembleSample], maps: LasMaps | dict, n_input_members: int,
                   dtype=np.float32) -> Batch:
    """Stack samples into network inputs and targets (layout: :func:`channel_layout`)."""
    if not samples:
        raise ValueError("no samples to assemble")
    if isinstance(maps, dict):
        maps = maps[samples[0].field_id]
    n = n_input_members
    inputs, spread_t, truth, raw = [], [], [], {"truth": [], "mean": [], "spread": [], "full": []}
    for s in samples:
        missing = [lt for lt in LEAD_TIMES if lt not in s.members]
        if missing:
            raise ValueError(f"sample {s.date_index} is missing lead times {missing}")
        if n > s.n_members:
            raise ValueError(f"requested {n} input members but sample {s.date_index} has {s.n_members}")
        chans = []
        for lt in LEAD_TIMES:
            chans.append(maps.standardize(s.ensemble_mean(lt, n)))
            chans.append(maps.scale(s.ensemble_spread(lt, n)))
            chans.extend(maps.standardize(m) for m in s.members[lt][:n])
        inputs.append(np.stack(chans))
        full = s.ensemble_spread(48)
        spread_t.append(maps.scale(full)[None])
        truth.append(maps.standardize(s.ground_truth)[None])
        raw["truth"].append(s.ground_truth)
        raw["mean"].append(s.ensemble_mean(48, n))
        raw["spread"].append(s.ensemble_spread(48, n))
        raw["full"].append(full)
    return Batch(np.stack(inputs).astype(dtype), np.stack(spread_t).astype(dtype),
                 np.stack(truth).astype(dtype), np.stack(raw["truth"]).astype(np.float64),
                 np.stack(raw["mean"]), np.stack(raw["spread"]), np.stack(raw["full"]),
                 np.array([s.date_index for s in samples]), n)


# -- GRD1 files and manifests ---------------------------------------------

def write_grd(path, data: np.ndarray, sidecar: dict | None = None) -> None:
    """Write a (C, H, W) or (H, W) array as GRD1 plus a ``.json`` sidecar."""
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValueError(f"GRD1 holds (C, H, W) data, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("refusing to write non-finite values")
    c, h, w = data.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(GRD_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    if sidecar is not None:
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def read_grd(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != GRD_MAGIC:
        raise ValueError(f"{path}: not a GRD1 file")
    h, w, c = struct.unpack("<III", raw[8:20])
    expected = 20 + 4 * h * w * c
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=20).reshape(c, h, w).astype(np.float32)
    side = path.with_suffix(path.suffix + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return data, meta


def save_sample(path, sample: EnsembleSample) -> None:
    chans, meta = [], []
    for lt in LEAD_TIMES:
        for m, arr in enumerate(sample.members[lt]):
            chans.append(arr)
            meta.append({"kind": "member", "lead": lt, "member": m})
    chans.append(sample.ground_truth)
    meta.append({"kind": "truth", "lead": 48, "member": None})
    write_grd(path, np.stack(chans), {"field_id": sample.field_id, "units": "1",
                                       "date_index": sample.date_index, "channels": meta})


def load_sample(path) -> EnsembleSample:
    data, meta = read_grd(path)
    members = {lt: [] for lt in LEAD_TIMES}
    truth = None
    for arr, ch in zip(data, meta["channels"]):
        if ch["kind"] == "member":
            members[ch["lead"]].append(arr)
        else:
            truth = arr
    return EnsembleSample({lt: np.stack(v) for lt, v in members.items()}, truth,
                          int(meta["date_index"]), meta.get("field_id", "synthetic-0"))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    manifest["_root"] = str(path.parent)
    return manifest


def load_split(manifest: dict, split: str) -> list[EnsembleSample]:
    if split not in manifest["splits"]:
        raise ValueError(f"unknown split {split!r}")
    root = Path(manifest.get("_root", "."))
    return [load_sample(root / p) for p in manifest["splits"][split]]
