"""Longitudinal dataset container: per-subject responses, covariates, times."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class Subject:
    y: np.ndarray  # (n_i,)
    covariates: dict[str, np.ndarray] = field(default_factory=dict)  # each (n_i,)
    times: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 1 or self.y.size < 1:
            raise ConfigError("subject response must be a nonempty vector")
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        for name, v in self.covariates.items():
            if v.shape != self.y.shape:
                raise ConfigError(f"covariate {name!r} length {v.size} != n_i {self.y.size}")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float)
            if self.times.shape != self.y.shape:
                raise ConfigError("times length must equal n_i")

    @property
    def n_obs(self) -> int:
        return self.y.size


@dataclass
class LongitudinalDataset:
    subjects: list[Subject]

    def __post_init__(self):
        if not self.subjects:
            raise ConfigError("dataset needs at least one subject")

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def N(self) -> int:
        return sum(s.n_obs for s in self.subjects)

    @property
    def sizes(self) -> list[int]:
        return [s.n_obs for s in self.subjects]

    @property
    def y(self) -> np.ndarray:
        """Stacked response vector, subject-major."""
        return np.concatenate([s.y for s in self.subjects])

    def covariate_column(self, name: str) -> np.ndarray:
        cols = []
        for i, s in enumerate(self.subjects):
            if name not in s.covariates:
                raise ConfigError(f"covariate {name!r} missing for subject {i}")
            cols.append(s.covariates[name])
        return np.concatenate(cols)

    def time_column(self) -> np.ndarray:
        cols = []
        for i, s in enumerate(self.subjects):
            if s.times is None:
                raise ConfigError(f"subject {i} has no observation times")
            cols.append(s.times)
        return np.concatenate(cols)

    def subset(self, indices) -> "LongitudinalDataset":
        """New dataset from a list of subject indices (repeats allowed)."""
        return LongitudinalDataset([self.subjects[i] for i in indices])

    def drop_subject(self, i: int) -> "LongitudinalDataset":
        return LongitudinalDataset(self.subjects[:i] + self.subjects[i + 1:])
