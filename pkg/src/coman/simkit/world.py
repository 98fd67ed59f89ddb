"""Synthetic incentive-response world with known per-(city, period) curves."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..activations import FpmParams, fpm, fpm_slope

N_CITIES = 5
N_PERIODS = 5
TREATMENTS = np.arange(1, 17) * 0.5

# campaign kind -> direction of the conversion rate in the treatment value
CAMPAIGNS = {"amount": 1, "threshold": -1, "delivery_fee": -1}

# column layout of the ctx_* block in logged datasets
N_DISTRICTS = 20
N_AOIS = 60
N_SHOPS = 100
SEQ_LEN = 5
N_NUMERIC = 4
FEATURE_LAYOUT = (
    ["district", "aoi", "weekday", "holiday", "query_shop"]
    + [f"behavior_{k}" for k in range(SEQ_LEN)]
    + [f"numeric_{k}" for k in range(N_NUMERIC)]
)
N_CTX = len(FEATURE_LAYOUT)
CTX_SEQ = slice(5, 5 + SEQ_LEN)
CTX_NUMERIC = slice(5 + SEQ_LEN, N_CTX)

SPLITS = ("biased-train", "unbiased-eval")


@dataclass
class SyntheticWorld:
    seed: int
    params: np.ndarray  # (city, period, 4) ground-truth FPM parameters in treatment units
    treatments: np.ndarray = field(default_factory=lambda: TREATMENTS.copy())
    campaign: str = "amount"
    city_weights: np.ndarray = field(default_factory=lambda: np.full(N_CITIES, 1.0 / N_CITIES))
    period_weights: np.ndarray = field(default_factory=lambda: np.full(N_PERIODS, 1.0 / N_PERIODS))

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        self.treatments = np.asarray(self.treatments, dtype=float)
        if self.params.shape != (N_CITIES, N_PERIODS, 4):
            raise ValueError(f"params must have shape {(N_CITIES, N_PERIODS, 4)}")
        if self.campaign not in CAMPAIGNS:
            raise ValueError(f"unknown campaign {self.campaign!r}")
        for c in range(N_CITIES):
            for p in range(N_PERIODS):
                self.cell(c, p)  # validates

    @property
    def direction(self) -> int:
        return CAMPAIGNS[self.campaign]

    @property
    def t_min(self) -> float:
        return float(self.treatments[0])

    @property
    def t_max(self) -> float:
        return float(self.treatments[-1])

    def cell(self, city: int, period: int) -> FpmParams:
        return FpmParams(*self.params[city, period])

    def _axis(self, t):
        t = np.asarray(t, dtype=float)
        return t if self.direction > 0 else self.t_min + self.t_max - t

    def curve(self, city, period, t) -> np.ndarray:
        """Ground-truth conversion rate; ``city``/``period``/``t`` broadcast together."""
        city, period = np.asarray(city), np.asarray(period)
        p = self.params[city, period]
        x = self._axis(t)
        return p[..., 0] + (p[..., 3] - p[..., 0]) / (1.0 + np.exp(-p[..., 1] * (x - p[..., 2])))

    def curves(self, city, period, grid=None) -> np.ndarray:
        """Per-row curves on ``grid`` (default: the treatment grid), shape ``(n, G)``."""
        grid = self.treatments if grid is None else np.asarray(grid, dtype=float)
        return self.curve(np.asarray(city)[:, None], np.asarray(period)[:, None], grid[None, :])

    def inflection_slope(self, city: int, period: int) -> float:
        p = self.cell(city, period)
        return float(fpm_slope(p.omega2, p))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "campaign": self.campaign,
            "direction": self.direction,
            "treatments": self.treatments.tolist(),
            "city_weights": self.city_weights.tolist(),
            "period_weights": self.period_weights.tolist(),
            "feature_layout": [f"ctx_{k}={name}" for k, name in enumerate(FEATURE_LAYOUT)],
            "cells": [
                {"city": c, "period": p, "omega0": float(v[0]), "omega1": float(v[1]),
                 "omega2": float(v[2]), "omega3": float(v[3])}
                for c in range(N_CITIES) for p in range(N_PERIODS)
                for v in [self.params[c, p]]
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorld":
        params = np.zeros((N_CITIES, N_PERIODS, 4))
        for cell in d["cells"]:
            params[cell["city"], cell["period"]] = [cell[f"omega{k}"] for k in range(4)]
        return cls(d["seed"], params, np.array(d["treatments"]), d["campaign"],
                   np.array(d["city_weights"]), np.array(d["period_weights"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SyntheticWorld":
        return cls.from_dict(json.loads(Path(path).read_text()))


def gen_world(seed: int = 0, uniform: bool = False, two_tier: bool = False,
              campaign: str = "amount") -> SyntheticWorld:
    """Sample ground-truth curves for every (city, period) cell.

    The inflection point is an additive city effect plus a period effect plus
    cell noise; slope, floor and ceiling vary per cell. ``uniform`` gives every
    cell the same curve. ``two_tier`` splits cells into a steep, wide-range
    tier and a flat, narrow-range tier.
    """
    rng = np.random.default_rng([seed, 7001])
    city_shift = rng.uniform(-1.3, 1.3, N_CITIES)
    period_shift = rng.uniform(-1.3, 1.3, N_PERIODS)
    mid = 0.5 * (TREATMENTS[0] + TREATMENTS[-1])
    params = np.zeros((N_CITIES, N_PERIODS, 4))
    params[..., 2] = np.clip(mid + city_shift[:, None] + period_shift[None, :]
                             + rng.normal(0, 0.3, (N_CITIES, N_PERIODS)), 1.5, 7.0)
    params[..., 1] = np.clip(np.exp(rng.normal(np.log(1.2), 0.35, (N_CITIES, N_PERIODS))), 0.5, 3.0)
    params[..., 0] = rng.uniform(0.03, 0.25, (N_CITIES, N_PERIODS))
    params[..., 3] = np.minimum(params[..., 0] + rng.uniform(0.3, 0.6, (N_CITIES, N_PERIODS)), 0.95)
    if uniform:
        params[:] = np.array([0.1, 1.2, mid, 0.55])
    if two_tier:
        tier = rng.permutation(np.arange(N_CITIES * N_PERIODS) % 2).reshape(N_CITIES, N_PERIODS)
        params[..., 1] = np.where(tier == 1, 2.0, 0.5)
        params[..., 3] = params[..., 0] + np.where(tier == 1, 0.6, 0.15)
    city_weights = np.sort(rng.dirichlet(np.full(N_CITIES, 4.0)))[::-1]
    period_weights = np.array([0.15, 0.3, 0.12, 0.28, 0.15])
    return SyntheticWorld(seed, params, TREATMENTS.copy(), campaign, city_weights, period_weights)


@dataclass
class LoggedDataset:
    user_id: np.ndarray
    city: np.ndarray
    period: np.ndarray
    ctx: np.ndarray  # (n, N_CTX), layout in FEATURE_LAYOUT
    treatment: np.ndarray
    label: np.ndarray
    value: np.ndarray
    split: str = "biased-train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")

    def __len__(self) -> int:
        return len(self.user_id)

    def subset(self, idx) -> "LoggedDataset":
        return LoggedDataset(self.user_id[idx], self.city[idx], self.period[idx], self.ctx[idx],
                             self.treatment[idx], self.label[idx], self.value[idx], self.split)

    def with_treatment(self, t) -> "LoggedDataset":
        out = self.subset(slice(None))
        out.treatment = np.broadcast_to(np.asarray(t, dtype=float), self.treatment.shape).copy()
        return out

    def header(self) -> list[str]:
        return ["user_id", "city", "period", *[f"ctx_{k}" for k in range(self.ctx.shape[1])],
                "treatment", "label", "value"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for i in range(len(self)):
                w.writerow([int(self.user_id[i]), int(self.city[i]), int(self.period[i]),
                            *(f"{v:.17g}" for v in self.ctx[i]), f"{self.treatment[i]:.17g}",
                            int(self.label[i]), f"{self.value[i]:.17g}"])

    @classmethod
    def from_csv(cls, path, split: str = "biased-train") -> "LoggedDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = np.array([[float(v) for v in r] for r in reader], dtype=float).reshape(-1, len(header))
        n_ctx = len(header) - 6
        expected = ["user_id", "city", "period", *[f"ctx_{k}" for k in range(n_ctx)], "treatment", "label", "value"]
        if header != expected:
            raise SchemaError(f"{path}: header {header[:4]}... does not match the dataset schema")
        return cls(rows[:, 0].astype(np.int64), rows[:, 1].astype(np.int64), rows[:, 2].astype(np.int64),
                   rows[:, 3:3 + n_ctx], rows[:, -3], rows[:, -2], rows[:, -1], split)


class SchemaError(ValueError):
    pass


def biased_treatment_probs(treatments: np.ndarray) -> np.ndarray:
    w = np.exp(-treatments / treatments.mean())
    return w / w.sum()


def gen_dataset(world: SyntheticWorld, n_users: int, policy: str = "biased", seed: int = 0,
                id_offset: int = 0) -> LoggedDataset:
    """Log one record per user: context, assigned treatment and Bernoulli outcome.

    ``biased`` assigns treatment ``t`` with probability proportional to
    ``exp(-t / mean(treatments))``; ``uniform`` assigns uniformly at random.
    """
    if n_users <= 0:
        raise ValueError("n_users must be positive")
    if policy not in ("biased", "uniform"):
        raise ValueError("policy must be 'biased' or 'uniform'")
    rng = np.random.default_rng([world.seed, seed, 1 if policy == "biased" else 2])
    n = n_users
    city = rng.choice(N_CITIES, size=n, p=world.city_weights)
    period = rng.choice(N_PERIODS, size=n, p=world.period_weights)
    ctx = np.zeros((n, N_CTX))
    ctx[:, 0] = city * (N_DISTRICTS // N_CITIES) + rng.integers(0, N_DISTRICTS // N_CITIES, n)
    ctx[:, 1] = rng.integers(0, N_AOIS, n)
    ctx[:, 2] = rng.integers(0, 7, n)
    ctx[:, 3] = rng.random(n) < 0.1
    ctx[:, 4] = rng.integers(0, N_SHOPS, n)
    seq_len = rng.integers(0, SEQ_LEN + 1, n)
    seq = rng.integers(0, N_SHOPS, (n, SEQ_LEN)).astype(float)
    seq[np.arange(SEQ_LEN)[None, :] >= seq_len[:, None]] = -1
    ctx[:, CTX_SEQ] = seq
    ctx[:, CTX_NUMERIC] = rng.normal(0, 1, (n, N_NUMERIC))
    probs = biased_treatment_probs(world.treatments) if policy == "biased" else None
    treatment = rng.choice(world.treatments, size=n, p=probs)
    cvr = world.curve(city, period, treatment)
    label = (rng.random(n) < cvr).astype(float)
    amount = np.exp(rng.normal(0.2 * ctx[:, CTX_NUMERIC.start], 0.3))
    value = label * amount
    split = "biased-train" if policy == "biased" else "unbiased-eval"
    return LoggedDataset(np.arange(n, dtype=np.int64) + id_offset, city, period, ctx, treatment,
                         label, value, split)
