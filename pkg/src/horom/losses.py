"""The seven training losses and the horizon-annealing schedule.

All terms are mean absolute errors (an MSE switch exists per term) weighted
by the per-parameter, per-derivative standard deviation of the training
data. ``TrainingBatch`` concatenates the frames of every training
parameter so each network runs once per channel per iteration;
``LossContext`` evaluates the terms on that batch, caching encodings so the
chain-rule JVP shares its primal pass with the plain encoding.

Normalizations (``F`` = total number of frames over all parameters):

    recon        sum_k sum_i 1/sigma_ik sum_j |u - dec(enc(u))|_1 / F
    latent dyn.  sum_i sum_j |z^(K) estimate - rhs|_1 / F   ("frames", default)
                 or without the 1/F                          ("sum")
    rollout      sum_k sum_i 1/sigma_ik sum_j |...|_1 / N_ro (rollable frames)
    IC rollout   sum_k sum_i 1/((N_IC,i + 1) sigma_ik) sum_j |...|_1
    consistency  1/N_theta sum_k sum_i 1/(N_t,i + 1) sum_j |...|_1
    chain rule   same normalization as consistency
    coefficient  sum_i ||[C_0 .. C_{K-1} | b]_i||_F^2
"""

from dataclasses import dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autoencoder import mlp_apply
from .errors import InvalidArgumentError, NonFiniteLossError, ShapeError
from .latent import DIVERGENCE_GUARD, check_convex, integrate_batch
from .stencils import derivative_matrix

TERMS = ("recon", "ld", "rollout", "ic_rollout", "consistency", "chain_rule", "coefficient")


@dataclass
class LossWeights:
    recon: float = 1.0
    ld: float = 1.0
    rollout: float = 1.0
    ic_rollout: float = 1.0
    consistency: float = 1.0
    chain_rule: float = 1.0
    coefficient: float = 1e-4

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise InvalidArgumentError(f"loss weight {f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)

    @classmethod
    def from_sequence(cls, seq):
        seq = list(seq)
        if len(seq) != len(TERMS):
            raise InvalidArgumentError(f"expected {len(TERMS)} loss weights, got {len(seq)}")
        return cls(*seq)

    def as_tuple(self):
        return tuple(getattr(self, t) for t in TERMS)


@dataclass(frozen=True)
class AnnealState:
    epoch: int
    rollout_fraction: float
    ic_fraction: float

    def ic_steps(self, n_t):
        return int(round(self.ic_fraction * n_t))


def anneal_horizons(epoch, rate=0.01, every=100, rollout_cap=0.75, ic_cap=1.0):
    """Horizon fractions at ``epoch``: both grow by ``rate`` every ``every`` epochs.

    The rollout fraction (of the trajectory duration) stops at
    ``rollout_cap``; the IC-rollout fraction (of the frame count) at
    ``ic_cap``.
    """
    if epoch < 0:
        raise InvalidArgumentError("epoch must be >= 0")
    steps = epoch // every
    # round away the binary noise of rate * steps (0.01 * 7 != 0.07)
    grown = round(rate * steps, 12)
    return AnnealState(int(epoch), min(rollout_cap, grown), min(ic_cap, grown))


@dataclass
class LossSettings:
    top_weights: tuple = (1.0, 0.0)
    ld_normalization: str = "frames"
    penalties: dict = field(default_factory=dict)  # term -> "mae" | "mse"
    guard: float = DIVERGENCE_GUARD

    def penalty(self, term):
        kind = self.penalties.get(term, "mae")
        if kind not in ("mae", "mse"):
            raise InvalidArgumentError(f"unknown penalty {kind!r} for {term}")
        return kind


def _row_penalty(diff, kind):
    """Per-row l1 norm (or squared l2 norm) of a (rows, width) tensor."""
    return ad.tsum(ad.tabs(diff) if kind == "mae" else ad.square(diff), axis=1)


class TrainingBatch:
    """Frames of all training parameters, concatenated per channel."""

    def __init__(self, bundles, sigma=None):
        if not bundles:
            raise InvalidArgumentError("need at least one training bundle")
        K = bundles[0].K
        n_u = bundles[0].n_u
        for bd in bundles:
            if bd.K != K or bd.n_u != n_u:
                raise ShapeError("all training bundles must share K and N_u")
        self.bundles = list(bundles)
        self.K = K
        self.n_u = n_u
        self.n_theta = len(bundles)
        self.times = [bd.times for bd in bundles]
        self.n_frames = np.array([len(t) for t in self.times])
        self.starts = np.concatenate([[0], np.cumsum(self.n_frames)])
        self.F = int(self.starts[-1])
        self.U = [np.vstack([bd.channels[k] for bd in bundles]) for k in range(K)]
        self.row_theta = np.repeat(np.arange(self.n_theta), self.n_frames)
        if sigma is None:
            sigma = np.array([bd.sigma() for bd in bundles])
        self.sigma = np.asarray(sigma, dtype=float).reshape(self.n_theta, K)
        self._dmats = {}

    def segment(self, i):
        return slice(int(self.starts[i]), int(self.starts[i + 1]))

    def derivative_operator(self, d):
        """Block-diagonal sparse finite-difference operator over all frames."""
        if d not in self._dmats:
            blocks = [derivative_matrix(t, d) for t in self.times]
            self._dmats[d] = sp.block_diag(blocks, format="csr")
        return self._dmats[d]

    def frame_weights(self, per_theta):
        """Broadcast a per-parameter scalar to every frame row."""
        return np.asarray(per_theta, dtype=float)[self.row_theta]


def coefficient_blocks(coefs, K, L):
    """Split stacked (L, KL+1) coefficient tensors into G (N, L, KL) and b (N, L)."""
    KL = K * L
    G = ad.stack([c[:, :KL] for c in coefs], axis=0)
    b = ad.stack([c[:, KL] for c in coefs], axis=0)
    return G, b


class LossContext:
    """Evaluates loss terms for one parameter set.

    ``encoders`` / ``decoders`` are K lists of (W, c) pairs (tensors or
    arrays); ``coefs`` holds one (L, KL+1) tensor per training parameter.
    """

    def __init__(self, batch, encoders, decoders, coefs, settings=None, need_jvp=False):
        self.batch = batch
        self.enc = encoders
        self.dec = decoders
        self.coefs = [ad.as_tensor(c) for c in coefs]
        self.settings = settings or LossSettings()
        self.K = batch.K
        self.L = self.coefs[0].shape[0] if self.coefs else None
        self._need_jvp = need_jvp and self.K > 1
        self._Z = None
        self._J = None
        self._Zcat = None

    # -------------------------------------------------------------- encodings

    def _encode_all(self):
        b = self.batch
        Z, J = [], []
        for k in range(self.K):
            if self._need_jvp and k < self.K - 1:
                out = mlp_apply(self.enc[k], ad.Dual(b.U[k], b.U[k + 1]))
                Z.append(out.primal)
                J.append(out.tangent)
            else:
                Z.append(mlp_apply(self.enc[k], ad.Tensor(b.U[k])))
        self._Z, self._J = Z, J

    @property
    def Z(self):
        if self._Z is None:
            self._encode_all()
        return self._Z

    @property
    def J(self):
        if not self._J:
            self._need_jvp = True
            self._encode_all()
        return self._J

    @property
    def Zcat(self):
        if self._Zcat is None:
            self._Zcat = self.Z[0] if self.K == 1 else ad.concat(self.Z, axis=1)
        return self._Zcat

    def _decode_compare(self, states, targets_rows, row_weights, term):
        """Decode stacked states (R, KL) per channel and sum weighted row errors."""
        L = self.L
        kind = self.settings.penalty(term)
        total = None
        for k in range(self.K):
            zk = states if self.K == 1 else states[:, k * L:(k + 1) * L]
            pred = mlp_apply(self.dec[k], zk)
            part = ad.weighted_row_penalty(pred, targets_rows[k], row_weights[k], kind)
            total = part if total is None else total + part
        return total

    # ------------------------------------------------------------------ terms

    def recon(self):
        b = self.batch
        kind = self.settings.penalty("recon")
        total = None
        for k in range(self.K):
            pred = mlp_apply(self.dec[k], self.Z[k])
            w = b.frame_weights(1.0 / b.sigma[:, k]) / b.F
            part = ad.weighted_row_penalty(pred, b.U[k], w, kind)
            total = part if total is None else total + part
        return total

    def top_derivative_estimate(self):
        b = self.batch
        w1, w2 = check_convex(self.settings.top_weights)
        K = self.K
        if K == 1 and w2:
            raise InvalidArgumentError("K=1 admits only the first-derivative branch")
        est = None
        if w1:
            est = ad.linear_apply(b.derivative_operator(1), self.Z[K - 1]) * w1
        if w2:
            part = ad.linear_apply(b.derivative_operator(2), self.Z[K - 2]) * w2
            est = part if est is None else est + part
        return est

    def ld(self):
        b = self.batch
        KL = self.K * self.L
        est = self.top_derivative_estimate()
        parts = []
        for i, c in enumerate(self.coefs):
            seg = b.segment(i)
            rhs = ad.matmul(self.Zcat[seg], ad.transpose(c[:, :KL])) + c[:, KL]
            parts.append(rhs)
        rhs = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        rows = _row_penalty(est - rhs, self.settings.penalty("ld"))
        scale = 1.0 / b.F if self.settings.ld_normalization == "frames" else 1.0
        return ad.tsum(rows) * scale

    def consistency(self):
        b = self.batch
        if self.K == 1:
            return ad.Tensor(0.0)
        D1 = b.derivative_operator(1)
        w = b.frame_weights(1.0 / (b.n_theta * b.n_frames))
        kind = self.settings.penalty("consistency")
        total = None
        for k in range(self.K - 1):
            diff = ad.linear_apply(D1, self.Z[k]) - self.Z[k + 1]
            part = ad.tsum(_row_penalty(diff, kind) * w)
            total = part if total is None else total + part
        return total

    def chain_rule(self):
        b = self.batch
        if self.K == 1:
            return ad.Tensor(0.0)
        w = b.frame_weights(1.0 / (b.n_theta * b.n_frames))
        kind = self.settings.penalty("chain_rule")
        total = None
        for k in range(self.K - 1):
            diff = self.J[k] - self.Z[k + 1]
            part = ad.tsum(_row_penalty(diff, kind) * w)
            total = part if total is None else total + part
        return total

    def coefficient(self):
        total = None
        for c in self.coefs:
            part = ad.tsum(ad.square(c))
            total = part if total is None else total + part
        return total

    def ic_rollout(self, anneal):
        b = self.batch
        n_ic = np.array([anneal.ic_steps(len(t) - 1) for t in b.times])
        S = int(n_ic.max())
        h = np.zeros((b.n_theta, S))
        for i, t in enumerate(b.times):
            h[i, :n_ic[i]] = np.diff(t)[:n_ic[i]]
        G, bb = coefficient_blocks(self.coefs, self.K, self.L)
        x0 = self.Zcat[b.starts[:-1]]
        X, _ = integrate_batch(G, bb, x0, h, n_ic, self.settings.guard, "clamp")
        ti = np.concatenate([np.full(n + 1, i) for i, n in enumerate(n_ic)])
        ji = np.concatenate([np.arange(n + 1) for n in n_ic])
        states = X[ti, ji]
        rows = b.starts[ti] + ji
        targets = [b.U[k][rows] for k in range(self.K)]
        weights = [1.0 / ((n_ic[ti] + 1) * b.sigma[ti, k]) for k in range(self.K)]
        return self._decode_compare(states, targets, weights, "ic_rollout")

    def rollout(self, anneal, rng):
        b = self.batch
        thetas, frames, dts = [], [], []
        for i, t in enumerate(b.times):
            T = t[-1]
            dt_max = anneal.rollout_fraction * T
            rollable = np.nonzero(t + dt_max <= T * (1 + 1e-12))[0]
            thetas.append(np.full(len(rollable), i))
            frames.append(rollable)
            dts.append(rng.uniform(0.0, dt_max, size=len(rollable)) if dt_max > 0 else np.zeros(len(rollable)))
        ti = np.concatenate(thetas)
        ji = np.concatenate(frames)
        dt = np.concatenate(dts)
        n_ro = len(ti)
        if n_ro == 0:
            return ad.Tensor(0.0)
        t0 = np.array([b.times[i][j] for i, j in zip(ti, ji)])
        target_t = t0 + dt
        nsteps = np.empty(n_ro, dtype=np.int64)
        lo = np.empty(n_ro, dtype=np.int64)
        alpha = np.empty(n_ro)
        for i, t in enumerate(b.times):
            m = ti == i
            tt = np.minimum(target_t[m], t[-1])
            # FOM intervals spanned by (t_j, t_j + dt], at least one step
            nsteps[m] = np.maximum(1, np.searchsorted(t, tt, side="left") - ji[m])
            seg = np.clip(np.searchsorted(t, tt, side="right") - 1, 0, len(t) - 2)
            lo[m] = seg
            alpha[m] = (tt - t[seg]) / (t[seg + 1] - t[seg])
        S = int(nsteps.max())
        h = np.where(np.arange(S)[None, :] < nsteps[:, None], (dt / nsteps)[:, None], 0.0)
        G, bb = coefficient_blocks(self.coefs, self.K, self.L)
        Gr, br = G[ti], bb[ti]
        rows0 = b.starts[ti] + ji
        x0 = self.Zcat[rows0]
        X, _ = integrate_batch(Gr, br, x0, h, nsteps, self.settings.guard, "clamp")
        end = X[np.arange(n_ro), nsteps]
        r_lo = b.starts[ti] + lo
        targets = [(1 - alpha)[:, None] * b.U[k][r_lo] + alpha[:, None] * b.U[k][r_lo + 1] for k in range(self.K)]
        weights = [1.0 / (n_ro * b.sigma[ti, k]) for k in range(self.K)]
        return self._decode_compare(end, targets, weights, "rollout")


def evaluate(ctx, weights, anneal, rng=None, all_terms=False):
    """Weighted total loss and per-term values.

    Terms with zero weight are skipped (reported as ``None``) unless
    ``all_terms`` is set. Raises NonFiniteLossError naming the first
    offending term.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    calls = {
        "recon": ctx.recon,
        "ld": ctx.ld,
        "rollout": lambda: ctx.rollout(anneal, rng),
        "ic_rollout": lambda: ctx.ic_rollout(anneal),
        "consistency": ctx.consistency,
        "chain_rule": ctx.chain_rule,
        "coefficient": ctx.coefficient,
    }
    breakdown = {}
    total = None
    for term in TERMS:
        w = getattr(weights, term)
        if w == 0 and not all_terms:
            breakdown[term] = None
            continue
        value = calls[term]()
        v = float(value.value)
        if not np.isfinite(v):
            raise NonFiniteLossError(f"loss term {term!r} is not finite ({v})", term=term)
        breakdown[term] = v
        if w == 0:
            continue
        part = value * w
        total = part if total is None else total + part
    if total is None:
        total = ad.Tensor(0.0)
    breakdown["total"] = float(total.value)
    return total, breakdown


# ------------------------------------------------- convenience entry points
# Each takes a plain AutoencoderStack and arrays and returns a float.


def _ctx(stack, bundles, coefs=None, settings=None, sigma=None):
    batch = TrainingBatch(bundles, sigma)
    if coefs is None:
        coefs = [np.zeros((stack.L, stack.K * stack.L + 1)) for _ in bundles]
    coefs = [c.to_matrix() if hasattr(c, "to_matrix") else c for c in coefs]
    return LossContext(batch, stack.encoders, stack.decoders, coefs, settings)


def loss_recon(stack, bundles, sigma=None, settings=None):
    return float(_ctx(stack, bundles, None, settings, sigma).recon().value)


def loss_latent_dynamics(stack, coefs, bundles, settings=None):
    return float(_ctx(stack, bundles, coefs, settings).ld().value)


def loss_rollout(stack, coefs, bundles, anneal, rng, settings=None, sigma=None):
    return float(_ctx(stack, bundles, coefs, settings, sigma).rollout(anneal, rng).value)


def loss_ic_rollout(stack, coefs, bundles, anneal, settings=None, sigma=None):
    return float(_ctx(stack, bundles, coefs, settings, sigma).ic_rollout(anneal).value)


def loss_consistency(stack, bundles, settings=None):
    return float(_ctx(stack, bundles, None, settings).consistency().value)


def loss_chain_rule(stack, bundles, settings=None):
    return float(_ctx(stack, bundles, None, settings).chain_rule().value)


def loss_coefficient_reg(coefs):
    coefs = [c.to_matrix() if hasattr(c, "to_matrix") else np.asarray(c) for c in coefs]
    return float(sum(np.sum(c * c) for c in coefs))


def total_loss(stack, coefs, bundles, weights, anneal, rng=None, settings=None, sigma=None):
    ctx = _ctx(stack, bundles, coefs, settings, sigma)
    _, breakdown = evaluate(ctx, weights, anneal, rng, all_terms=True)
    return breakdown["total"], breakdown
