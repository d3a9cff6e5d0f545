"""Episodic training, greedy sampling, inference and evaluation.

An episode trains the networks and the per-parameter coefficients for
``sampling_freq`` Adam iterations, fits the GP ensemble on the trained
coefficients, and (when more training follows) adds the testing parameter
whose sampled predictions vary the most. The new parameter's coefficients
start from the GP posterior mean.
"""

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autoencoder import MLPSpec, decode, encode, init_stack, load_stack, save_stack
from .bundle import TrajectoryBundle, load_bundle, save_bundle
from .config import TrainingConfig, config_from_dict
from .errors import DatasetError, DegenerateTruthError, DivergenceError, ShapeError
from .gp import fit_ensemble, sample_posterior_matrices
from .latent import DIVERGENCE_GUARD, integrate_batch
from .losses import TERMS, LossContext, TrainingBatch, anneal_horizons, evaluate

log = logging.getLogger(__name__)


def relative_error(pred, truth):
    """max over frames of the mean absolute error, divided by the std of the whole truth series."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    sigma = float(np.std(truth))
    if sigma == 0 or not np.isfinite(sigma):
        raise DegenerateTruthError("truth series has zero standard deviation")
    return float(np.max(np.mean(np.abs(truth - pred), axis=1)) / sigma)


def grid_parameters(ranges, points):
    """Row-major (first parameter slowest) grid of parameter points."""
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(ranges, points)]
    A, B = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([A.ravel(), B.ravel()]), axes


def corner_indices(points):
    n1, n2 = points
    return sorted({0, n2 - 1, (n1 - 1) * n2, n1 * n2 - 1})


@dataclass
class EpisodeRecord:
    episode: int
    epoch: int
    selected: int = None
    theta: tuple = None
    max_variance: float = None
    losses: dict = field(default_factory=dict)


class MemoryLoader:
    """Bundles held in memory, indexed like the parameter grid."""

    def __init__(self, bundles):
        self.bundles = list(bundles)

    def __call__(self, i):
        return self.bundles[i]

    def __len__(self):
        return len(self.bundles)


class DiskLoader:
    """Reads ``theta_XXXX.bin`` files written by ``write_dataset``."""

    def __init__(self, directory):
        self.directory = directory

    def __call__(self, i):
        return load_bundle(os.path.join(self.directory, f"theta_{i:04d}.bin"))


def write_dataset(directory, thetas, bundles, problem_header):
    os.makedirs(directory, exist_ok=True)
    for i, bd in enumerate(bundles):
        extra = {"index": i, "grid": problem_header.get("grid", {}),
                 "seed": problem_header.get("grid", {}).get("obs_seed")}
        save_bundle(bd, os.path.join(directory, f"theta_{i:04d}.bin"), extra)
    with open(os.path.join(directory, "index.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "theta1", "theta2", "file"])
        for i, th in enumerate(thetas):
            w.writerow([i, repr(float(th[0])), repr(float(th[1])), f"theta_{i:04d}.bin"])
    with open(os.path.join(directory, "problem.json"), "w") as fh:
        json.dump(problem_header, fh, indent=2, sort_keys=True)


def read_dataset_index(directory):
    path = os.path.join(directory, "index.csv")
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DatasetError(f"missing dataset index {path}; run the fom command first") from exc
    return np.array([[float(r["theta1"]), float(r["theta2"])] for r in rows])


class Pipeline:
    def __init__(self, config, thetas, loader, train_indices=None):
        if not isinstance(config, TrainingConfig):
            config = config_from_dict(config)
        self.config = config
        self.thetas = np.asarray(thetas, dtype=float)
        self.loader = loader
        self.weights = config.weights
        self.settings = config.settings
        self.spec = MLPSpec.parse(config.architecture)
        first = loader(train_indices[0] if train_indices else 0)
        self.K = first.K
        self.L = self.spec.latent_width
        if first.n_u != self.spec.input_width:
            raise ShapeError(f"architecture input {self.spec.input_width} != data width {first.n_u}")
        self.times = first.times
        self.stack = init_stack(self.spec, self.K, config.seed)
        self.adam = ad.AdamState(lr=config.learning_rate)
        if train_indices is None:
            if config.initial_train is not None:
                train_indices = [self.index_of(th) for th in config.initial_train]
            else:
                train_indices = corner_indices(config.grid_points)
        self.train = list(train_indices)
        self.coefs = {i: np.zeros((self.L, self.K * self.L + 1)) for i in self.train}
        self.epoch = 0
        self.episodes = []
        self.loss_log = []
        self.gp = None
        self._cache = {}
        self._batch = None

    # ------------------------------------------------------------------ data

    def index_of(self, theta):
        d = np.linalg.norm(self.thetas - np.asarray(theta, dtype=float), axis=1)
        i = int(np.argmin(d))
        if d[i] > 1e-9 * max(1.0, np.abs(self.thetas).max()):
            raise DatasetError(f"parameter {list(theta)} is not on the dataset grid")
        return i

    def bundle(self, i):
        if i not in self._cache:
            self._cache[i] = self.loader(i)
        return self._cache[i]

    def training_bundle(self, i):
        return self.bundle(i).strided(self.config.time_stride)

    @property
    def test_indices(self):
        chosen = set(self.train)
        return [i for i in range(len(self.thetas)) if i not in chosen]

    def batch(self):
        if self._batch is None:
            bundles = [self.training_bundle(i) for i in self.train]
            # sigma from the full-resolution series so striding does not change the loss scale
            sigma = np.array([self.bundle(i).sigma() for i in self.train])
            self._batch = TrainingBatch(bundles, sigma)
        return self._batch

    # -------------------------------------------------------------- training

    def _leaves(self):
        named = self.stack.named_parameters()
        leaves = [ad.Tensor(a, requires_grad=True) for _, a in named]
        it = iter(leaves)
        enc = [[(next(it), next(it)) for _ in layers] for layers in self.stack.encoders]
        dec = [[(next(it), next(it)) for _ in layers] for layers in self.stack.decoders]
        coef_leaves = [ad.Tensor(self.coefs[i], requires_grad=True) for i in self.train]
        return named, leaves, enc, dec, coef_leaves

    def loss_context(self, enc=None, dec=None, coef_leaves=None):
        if enc is None:
            enc, dec = self.stack.encoders, self.stack.decoders
            coef_leaves = [self.coefs[i] for i in self.train]
        return LossContext(self.batch(), enc, dec, coef_leaves, self.settings,
                           need_jvp=self.weights.chain_rule > 0)

    def anneal(self, epoch=None):
        c = self.config
        return anneal_horizons(self.epoch if epoch is None else epoch, c.anneal_rate, c.anneal_every,
                               c.rollout_cap)

    def epoch_rng(self, epoch=None):
        return np.random.default_rng([self.config.seed, self.epoch if epoch is None else epoch])

    def step(self):
        """One full-batch Adam iteration; returns the loss breakdown."""
        named, leaves, enc, dec, coef_leaves = self._leaves()
        ctx = self.loss_context(enc, dec, coef_leaves)
        total, breakdown = evaluate(ctx, self.weights, self.anneal(), self.epoch_rng())
        grads = ad.gradients(total, leaves + coef_leaves)
        params = [a for _, a in named] + [self.coefs[i] for i in self.train]
        keys = [n for n, _ in named] + [f"coef{i}" for i in self.train]
        self.adam.lr = self.config.learning_rate * self.config.lr_decay**self.epoch
        ad.adam_step(params, grads, self.adam, keys)
        breakdown["epoch"] = self.epoch
        self.epoch += 1
        self.stack.epoch = self.epoch
        return breakdown

    def train_iterations(self, n):
        for _ in range(n):
            row = self.step()
            if self.config.log_every and row["epoch"] % self.config.log_every == 0:
                self.loss_log.append(row)

    # ------------------------------------------------------------ surrogates

    def fit_gp(self):
        thetas = self.thetas[self.train]
        mats = np.array([self.coefs[i] for i in self.train])
        self.gp = fit_ensemble(thetas, mats, self.K)
        return self.gp

    def _encode_ic(self, channels):
        return np.concatenate([encode(self.stack, k, channels[k]) for k in range(self.K)])

    def _decode_states(self, states):
        """states (..., KL) -> K arrays (..., N_u)."""
        lead = states.shape[:-1]
        flat = states.reshape(-1, self.K * self.L)
        return [decode(self.stack, k, flat[:, k * self.L:(k + 1) * self.L]).reshape(*lead, -1)
                for k in range(self.K)]

    def prediction_variance(self, i, seed):
        bd = self.training_bundle(i)
        x0 = self._encode_ic([c[0] for c in bd.channels])
        draws = sample_posterior_matrices(self.gp, self.thetas[i], self.config.n_samples, seed)
        KL = self.K * self.L
        ns = len(draws)
        h = np.tile(np.diff(bd.times), (ns, 1))
        X, _ = integrate_batch(draws[:, :, :KL], draws[:, :, KL], np.tile(x0, (ns, 1)), h,
                               np.full(ns, h.shape[1]), DIVERGENCE_GUARD, "clamp")
        frames = self._decode_states(X.value)
        # shifting by one draw makes identical draws give exactly zero
        return max(float(np.max(np.var(f - f[0], axis=0))) for f in frames)

    def greedy_sample(self, seed=None):
        """Testing index with the largest sampled prediction variance (ties -> lowest index)."""
        candidates = self.test_indices
        if not candidates:
            return None, 0.0
        if self.gp is None:
            self.fit_gp()
        base = self.config.seed if seed is None else seed
        best, best_var = None, -np.inf
        for i in candidates:
            var = self.prediction_variance(i, [base, len(self.episodes), i])
            if var > best_var:
                best, best_var = i, var
        return best, best_var

    def add_training_point(self, i):
        if i in self.train:
            raise ValueError(f"parameter {i} is already a training point")
        mean, _ = self.gp.posterior_matrices(self.thetas[i][None])
        self.coefs[i] = mean[0].copy()
        self.train.append(i)
        self._batch = None

    def run(self, progress=None):
        c = self.config
        n_episodes = c.iterations // c.sampling_freq
        for ep in range(n_episodes):
            t0 = time.time()
            self.train_iterations(c.sampling_freq)
            self.fit_gp()
            rec = EpisodeRecord(ep, self.epoch, losses=dict(self.loss_log[-1]) if self.loss_log else {})
            if ep < n_episodes - 1:
                sel, var = self.greedy_sample()
                if sel is not None:
                    self.add_training_point(sel)
                    rec.selected, rec.theta, rec.max_variance = sel, tuple(self.thetas[sel]), var
            self.episodes.append(rec)
            log.info("episode %d done in %.1fs, epoch %d, selected %s", ep, time.time() - t0, self.epoch, rec.selected)
            if progress:
                progress(rec)
        if self.gp is None or n_episodes == 0:
            self.fit_gp()
        return self

    # ------------------------------------------------------------- inference

    def infer(self, theta, ic_channels=None, times=None):
        if self.gp is None:
            self.fit_gp()
        theta = np.asarray(theta, dtype=float)
        if ic_channels is None:
            ic_channels = [c[0] for c in self.bundle(self.index_of(theta)).channels]
        times = self.times if times is None else np.asarray(times, dtype=float)
        mean, _ = self.gp.posterior_matrices(theta[None])
        KL = self.K * self.L
        x0 = self._encode_ic(ic_channels)
        h = np.diff(times)[None]
        try:
            X, _ = integrate_batch(mean[:, :, :KL], mean[:, :, KL], x0[None], h, [h.shape[1]],
                                   DIVERGENCE_GUARD, "raise")
        except DivergenceError as exc:
            exc.context = dict(exc.context or {}, theta=theta.tolist())
            raise DivergenceError(f"{exc} (theta={theta.tolist()})", exc.step, exc.context) from exc
        channels = self._decode_states(X.value[0])
        return TrajectoryBundle(theta, times, channels, "prediction")

    def evaluate_grid(self, indices=None):
        """(Q, K) relative errors against the stored full-resolution truth."""
        indices = range(len(self.thetas)) if indices is None else indices
        out = []
        for i in indices:
            truth = self.loader(i)
            pred = self.infer(self.thetas[i], [c[0] for c in truth.channels], truth.times)
            out.append([relative_error(p, t) for p, t in zip(pred.channels, truth.channels)])
        return np.array(out)

    # ------------------------------------------------------------ persistence

    def save(self, path):
        header = {
            "config": self.config.to_dict(),
            "train": [int(i) for i in self.train],
            "thetas": self.thetas.tolist(),
            "gp_length_scales": [m.length_scale for m in self.gp.models] if self.gp else None,
            "episodes": [
                {"episode": r.episode, "epoch": r.epoch, "selected": r.selected,
                 "max_variance": r.max_variance}
                for r in self.episodes
            ],
        }
        arrays = {f"coef{i}": self.coefs[i] for i in self.train}
        arrays["gp_inputs"] = self.thetas[self.train]
        arrays["gp_targets"] = np.array([self.coefs[i] for i in self.train])
        save_stack(self.stack, path, header, arrays)

    @classmethod
    def load(cls, path, loader):
        """Restore a saved run. Adam moments are not stored, so training resumes from a fresh optimizer."""
        stack, header, arrays = load_stack(path)
        config = config_from_dict(header["config"])
        pipe = cls(config, np.array(header["thetas"]), loader, header["train"])
        pipe.stack = stack
        pipe.epoch = stack.epoch
        pipe.coefs = {i: arrays[f"coef{i}"] for i in pipe.train}
        for r in header.get("episodes", []):
            pipe.episodes.append(EpisodeRecord(r["episode"], r["epoch"], r["selected"],
                                               None, r["max_variance"]))
        pipe.fit_gp()
        return pipe

    def write_loss_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", *TERMS, "total"])
            for row in self.loss_log:
                w.writerow([row["epoch"], *["" if row[t] is None else repr(row[t]) for t in TERMS],
                            repr(row["total"])])

    def write_episodes(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "epoch", "selected", "theta1", "theta2", "max_variance", "total_loss"])
            for r in self.episodes:
                th = self.thetas[r.selected] if r.selected is not None else (None, None)
                w.writerow([r.episode, r.epoch, "" if r.selected is None else r.selected,
                            "" if th[0] is None else repr(float(th[0])),
                            "" if th[1] is None else repr(float(th[1])),
                            "" if r.max_variance is None else repr(r.max_variance),
                            repr(r.losses.get("total", float("nan")))])


def write_error_heatmap(path, thetas, errors, train_indices):
    train = set(int(i) for i in train_indices)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        K = errors.shape[1]
        names = ["eps_u", "eps_v"][:K] if K <= 2 else [f"eps_{k}" for k in range(K)]
        w.writerow(["theta1", "theta2", *names, "is_training_point"])
        for i, (th, e) in enumerate(zip(thetas, errors)):
            w.writerow([repr(float(th[0])), repr(float(th[1])), *[repr(float(x)) for x in e], int(i in train)])
