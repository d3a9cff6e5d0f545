"""Trajectory bundles: K synchronized time series for one parameter value."""

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import DatasetError, DegenerateTruthError, InvalidArgumentError, ShapeError


@dataclass
class TrajectoryBundle:
    theta: np.ndarray
    times: np.ndarray
    channels: list  # K arrays of shape (N_t + 1, N_u); channel k is the k-th time derivative
    kind: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        self.times = np.asarray(self.times, dtype=float)
        self.channels = [np.asarray(c, dtype=float) for c in self.channels]
        self.validate()

    @property
    def K(self):
        return len(self.channels)

    @property
    def n_t(self):
        """Number of time intervals (frames minus one)."""
        return len(self.times) - 1

    @property
    def n_u(self):
        return self.channels[0].shape[1]

    @property
    def duration(self):
        return float(self.times[-1] - self.times[0])

    def validate(self):
        if self.times.ndim != 1 or len(self.times) < 1:
            raise ShapeError("times must be a non-empty 1-D array")
        if self.times[0] != 0.0:
            raise InvalidArgumentError(f"times must start at 0, got {self.times[0]}")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise InvalidArgumentError("times must be strictly increasing")
        if not self.channels:
            raise ShapeError("a bundle needs at least one channel")
        n_u = self.channels[0].shape[-1]
        for k, c in enumerate(self.channels):
            if c.shape != (len(self.times), n_u):
                raise ShapeError(f"channel {k} has shape {c.shape}, expected {(len(self.times), n_u)}")

    def sigma(self):
        """Standard deviation of all components of each channel, shape (K,)."""
        s = np.array([float(np.std(c)) for c in self.channels])
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise DegenerateTruthError(
                f"bundle at theta={self.theta.tolist()} has a constant channel (sigma={s.tolist()})"
            )
        return s

    def strided(self, stride):
        """Every ``stride``-th frame (the last frame is always kept)."""
        if stride == 1:
            return self
        idx = np.arange(0, len(self.times), stride)
        if idx[-1] != len(self.times) - 1:
            idx = np.append(idx, len(self.times) - 1)
        return TrajectoryBundle(self.theta, self.times[idx], [c[idx] for c in self.channels],
                                self.kind, dict(self.meta, stride=stride))

    def initial_condition(self):
        return [c[0].copy() for c in self.channels]


def save_bundle(bundle, path, extra=None):
    header = {
        "kind": "trajectory-bundle",
        "problem": bundle.kind,
        "theta": bundle.theta.tolist(),
        "K": bundle.K,
        "N_u": bundle.n_u,
        "N_t": bundle.n_t,
        "meta": bundle.meta,
    }
    header.update(extra or {})
    arrays = {"times": bundle.times}
    for k, c in enumerate(bundle.channels):
        arrays[f"channel{k}"] = c
    write_container(path, header, arrays)


def load_bundle(path):
    header, arrays = read_container(path)
    if header.get("kind") != "trajectory-bundle":
        raise DatasetError(f"{path} does not hold a trajectory bundle")
    try:
        channels = [arrays[f"channel{k}"] for k in range(int(header["K"]))]
        return TrajectoryBundle(header["theta"], arrays["times"], channels,
                                header.get("problem", "custom"), header.get("meta", {}))
    except KeyError as exc:
        raise DatasetError(f"{path}: missing field {exc}") from exc
