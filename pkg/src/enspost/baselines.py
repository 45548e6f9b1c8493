"""Non-neural references: gridpoint-wise linear regression (Lin{n}) and
8-parameter EMOS trained on CRPS."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import ForecastDistribution, crps_gaussian
from .preprocess import Batch, EnsembleSample, read_grd, write_grd
from .tensor import Module, Parameter, Tensor, sqrt, tmean, tsum
from .training import TrainConfig, TrainState, train

RIDGE = 1e-6
EMOS_SIGMA_EPS = 1e-8  # keeps sigma > 0 when c = d = 0


def stack_members(samples: Sequence[EnsembleSample], n: int, lead: int = 48) -> np.ndarray:
    """(N, n, H, W) float64 array of the first ``n`` members."""
    if not samples:
        raise ValueError("no samples")
    if n > samples[0].n_members:
        raise ValueError(f"requested {n} members but samples have {samples[0].n_members}")
    return np.stack([s.members[lead][:n] for s in samples]).astype(np.float64)


# -- Lin{n} ---------------------------------------------------------------------

@dataclass
class LinRegModel:
    """Per-gridpoint affine map; ``coef[..., 0]`` is the intercept."""

    coef: np.ndarray  # (H, W, n + 1)
    target: str
    n_members: int
    ridged: np.ndarray | None = None  # gridpoints that needed the ridge fallback

    def predict(self, members: np.ndarray) -> np.ndarray:
        x = np.asarray(members, dtype=np.float64)
        if x.shape[1] != self.n_members:
            raise ValueError(f"expected {self.n_members} members, got {x.shape[1]}")
        return self.coef[..., 0] + np.einsum("nkhw,hwk->nhw", x, self.coef[..., 1:])

    def save(self, path) -> None:
        write_grd(path, np.moveaxis(self.coef, -1, 0).astype(np.float32),
                  {"kind": "linreg", "target": self.target, "n_members": self.n_members})

    @classmethod
    def load(cls, path) -> "LinRegModel":
        data, meta = read_grd(path)
        if meta.get("kind") != "linreg":
            raise ValueError(f"{path} does not hold a linear regression model")
        return cls(np.moveaxis(data, 0, -1).astype(np.float64), meta["target"], int(meta["n_members"]))


def linreg_solve(x: np.ndarray, y: np.ndarray, ridge: float | None = RIDGE):
    """Per-gridpoint least squares with intercept.

    ``x`` is (N, k, H, W) and ``y`` (N, H, W). Solves the centred normal
    equations; gridpoints whose Gram matrix is numerically singular get a
    ridge of ``ridge`` on the slopes (``None`` disables it and raises).
    Returns ``(coef (H, W, k + 1), ridged mask)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = x.shape[:2]
    if n < k + 2:
        raise ValueError(f"need at least {k + 2} samples for {k} predictors, got {n}")
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc = np.moveaxis(x - xm, (0, 1), (-2, -1))       # (H, W, N, k)
    yc = np.moveaxis(y - ym, 0, -1)[..., None]       # (H, W, N, 1)
    gram = np.swapaxes(xc, -1, -2) @ xc              # (H, W, k, k)
    rhs = np.swapaxes(xc, -1, -2) @ yc
    eig = np.linalg.eigvalsh(gram)
    scale = np.maximum(eig[..., -1], 1e-300)
    singular = eig[..., 0] <= 1e-12 * scale
    if singular.any():
        if ridge is None:
            i, j = np.argwhere(singular)[0]
            raise np.linalg.LinAlgError(f"rank-deficient design at gridpoint ({i}, {j}) "
                                        f"({int(singular.sum())} gridpoints); enable the ridge fallback")
        gram = gram + np.where(singular[..., None, None], ridge * np.eye(k), 0.0)
    beta = np.linalg.solve(gram, rhs)[..., 0]        # (H, W, k)
    intercept = ym - np.einsum("khw,hwk->hw", xm, beta)
    return np.concatenate([intercept[..., None], beta], axis=-1), singular


def linreg_fit(samples: Sequence[EnsembleSample], target: str, n_members: int,
               ridge: float | None = RIDGE) -> LinRegModel:
    """Fit Lin{n} on training samples; target "mean" (truth) or "spread"
    (full-ensemble 48 h spread)."""
    x = stack_members(samples, n_members)
    if target == "mean":
        y = np.stack([s.ground_truth for s in samples])
    elif target == "spread":
        y = np.stack([s.ensemble_spread(48) for s in samples])
    else:
        raise ValueError("target must be 'mean' or 'spread'")
    coef, ridged = linreg_solve(x, y, ridge)
    return LinRegModel(coef, target, n_members, ridged)


def linreg_forecast(mean_model: LinRegModel, spread_model: LinRegModel, members: np.ndarray,
                    floor: float = 1e-4) -> ForecastDistribution:
    return ForecastDistribution(mean_model.predict(members), np.maximum(spread_model.predict(members), floor))


# -- EMOS -------------------------------------------------------------------------

class EmosModel(Module):
    """mu = a + sum_i b_i x_i,  sigma = sqrt(c^2 + d^2 S^2) with S^2 the
    member variance. Eight scalars for five members."""

    def __init__(self, n_members: int = 5, c_init: float = 0.1):
        super().__init__()
        self.n_members = n_members
        self.a = Parameter(np.zeros(1), "a", l2=False)
        self.b = Parameter(np.full(n_members, 1.0 / n_members), "b", l2=False)
        self.c = Parameter(np.array([c_init]), "c", l2=False)
        self.d = Parameter(np.ones(1), "d", l2=False)

    def forward(self, members) -> tuple[Tensor, Tensor]:
        """``members`` is (N, n, H, W); returns (mu, sigma), each (N, H, W)."""
        x = members if isinstance(members, Tensor) else Tensor(np.asarray(members, dtype=self.b.dtype))
        if x.shape[1] != self.n_members:
            raise ValueError(f"expected {self.n_members} members, got {x.shape[1]}")
        var = np.var(x.data, axis=1, ddof=1)
        mu = tsum(x * self.b.reshape(1, -1, 1, 1), axis=1) + self.a
        sigma = sqrt(self.c * self.c + self.d * self.d * var + EMOS_SIGMA_EPS)
        return mu, sigma

    def to_dict(self) -> dict:
        return {"a": float(self.a.data[0]), "b": [float(v) for v in self.b.data],
                "c": float(self.c.data[0]), "d": float(self.d.data[0]), "n_members": self.n_members}

    @classmethod
    def from_dict(cls, d: dict) -> "EmosModel":
        m = cls(int(d["n_members"]))
        m.a.data[...] = d["a"]
        m.b.data[...] = d["b"]
        m.c.data[...] = d["c"]
        m.d.data[...] = d["d"]
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EmosModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def predict(self, members: np.ndarray) -> ForecastDistribution:
        mu, sigma = self.forward(np.asarray(members, dtype=np.float64).astype(self.b.dtype))
        return ForecastDistribution(mu.data, sigma.data)


def emos_batch(samples: Sequence[EnsembleSample], n_members: int = 5) -> Batch:
    """Pack raw members and truth in a :class:`Batch` for the shared trainer."""
    x = stack_members(samples, n_members)
    truth = np.stack([s.ground_truth for s in samples]).astype(np.float64)
    empty = np.zeros((len(samples), 0, 1, 1))
    return Batch(x, empty, truth[:, None], truth, x.mean(axis=1), np.zeros_like(truth), np.zeros_like(truth),
                 np.array([s.date_index for s in samples]), n_members)


def emos_loss(model: EmosModel, b: Batch):
    mu, sigma = model(Tensor(b.inputs.astype(model.b.dtype)))
    return tmean(crps_gaussian(mu, sigma, b.raw_truth))


def emos_fit(train_samples: Sequence[EnsembleSample], val_samples: Sequence[EnsembleSample],
             n_members: int = 5, cfg: TrainConfig | None = None, log=None) -> tuple[EmosModel, TrainState]:
    """Fit EMOS by minimising mean CRPS with the shared Adam/early-stopping loop."""
    cfg = cfg or TrainConfig(loss="crps", max_steps=3000, l2_weight=0.0)
    model = EmosModel(n_members)
    state = train(model, emos_loss, emos_batch(train_samples, n_members), emos_batch(val_samples, n_members),
                  cfg, log)
    return model, state
