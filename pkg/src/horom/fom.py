"""Full-order solvers for the benchmark PDE families.

- ``burgers1d``: u_t = -u u_x on [-3, 3], forward Euler in time, centred
  differences in space, edge values clamped to the initial condition. The
  velocity channel is computed afterwards from the stored u series with a
  five-point O(dt^4) stencil in time.
- ``burgers2d``: u_t = -u u_x + nu (u_xx + u_yy) on [-2, 2]^2, forward Euler,
  centred differences, boundary values held at the initial condition.
- ``wave`` / ``telegrapher`` / ``kleingordon``: u_tt = c^2 lap(u) - 2 alpha u_t
  - m^2 u on a cell-centred grid over [-2, 2]^2 with homogeneous Neumann
  boundaries, integrated with RK4 on (u, u_t), observed at fixed random
  grid cells.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bundle import TrajectoryBundle
from .errors import InvalidArgumentError, StabilityError
from .stencils import general_stencil

KINDS = ("burgers1d", "burgers2d", "wave", "telegrapher", "kleingordon")


@dataclass
class FOMProblem:
    kind: str
    param_names: tuple
    param_ranges: tuple  # ((lo, hi), (lo, hi)); None when it must be configured
    T: float
    n_steps: int
    grid: dict
    constants: dict = field(default_factory=dict)
    K: int = 2

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def grid_axes(self, n=11):
        if self.param_ranges is None or any(r is None for r in self.param_ranges):
            raise InvalidArgumentError(f"{self.kind}: parameter ranges must be configured explicitly")
        return [np.linspace(lo, hi, n) for lo, hi in self.param_ranges]


def default_problem(kind, **overrides):
    """Benchmark defaults for ``kind``; keyword overrides replace fields or constants."""
    if kind == "burgers1d":
        prob = FOMProblem(kind, ("a", "w"), ((0.45, 0.55), (0.18, 0.22)), 1.0, 500,
                          {"x_min": -3.0, "x_max": 3.0, "n_x": 1001}, {}, K=2)
    elif kind == "burgers2d":
        prob = FOMProblem(kind, ("k", "nu"), ((0.45, 0.55), (0.009, 0.011)), 2.0, 500,
                          {"x_min": -2.0, "x_max": 2.0, "n_x": 31}, {"omega": 0.5}, K=1)
    elif kind == "wave":
        prob = FOMProblem(kind, ("c", "k"), ((0.5, 0.6), (2.0, 2.2)), 2.0, 500,
                          {"x_min": -2.0, "x_max": 2.0, "n_x": 64, "n_obs": 1000, "obs_seed": 0}, {}, K=2)
    elif kind == "telegrapher":
        prob = FOMProblem(kind, ("alpha", "k"), ((0.09, 1.1), (0.09, 1.1)), 2.0, 500,
                          {"x_min": -2.0, "x_max": 2.0, "n_x": 64, "n_obs": 1000, "obs_seed": 0},
                          {"c": 0.2}, K=2)
    elif kind == "kleingordon":
        prob = FOMProblem(kind, ("m", "w"), None, 2.0, 500,
                          {"x_min": -2.0, "x_max": 2.0, "n_x": 64, "n_obs": 1000, "obs_seed": 0},
                          {"c": 0.2}, K=2)
    else:
        raise InvalidArgumentError(f"unknown problem kind {kind!r}; expected one of {KINDS}")
    for key, value in overrides.items():
        if key in ("T", "n_steps", "param_ranges"):
            setattr(prob, key, value)
        elif key in prob.grid:
            prob.grid[key] = value
        else:
            prob.constants[key] = value
    if prob.param_ranges is not None:
        prob.param_ranges = tuple(tuple(float(v) for v in r) for r in prob.param_ranges)
    return prob


def _warn_range(problem, theta):
    if problem.param_ranges is None:
        return
    for name, (lo, hi), v in zip(problem.param_names, problem.param_ranges, theta):
        if not lo <= v <= hi:
            warnings.warn(f"{problem.kind}: {name}={v} outside [{lo}, {hi}]", RuntimeWarning, stacklevel=3)


# --------------------------------------------------------------- 1-D Burgers


def time_derivative_o4(times, values):
    """d/dt of a uniformly sampled series with five-point O(dt^4) stencils.

    Central windows in the interior; the first two and last two frames use
    the one-sided windows [0, 4] and [N-5, N-1].
    """
    n = len(times)
    if n < 5:
        raise InvalidArgumentError("the O(dt^4) time derivative needs at least 5 frames")
    dt = times[1] - times[0]
    out = np.empty_like(values)
    central = general_stencil(np.arange(-2, 3) * dt, 1, 4).coefficients
    out[2:-2] = sum(c * values[i:n - 4 + i] for i, c in enumerate(central))
    for j in (0, 1):
        head = general_stencil((np.arange(5) - j) * dt, 1, 4).coefficients
        out[j] = np.tensordot(head, values[:5], axes=1)
        tail = general_stencil((np.arange(5) - 4 + j) * dt, 1, 4).coefficients
        out[n - 1 - j] = np.tensordot(tail, values[-5:], axes=1)
    return out


def burgers1d_ic(x, a, w):
    return np.cos(np.pi * w * x) * np.exp(-a * x * x)


def solve_burgers1d(a, w, problem=None):
    problem = problem or default_problem("burgers1d")
    _warn_range(problem, (a, w))
    g = problem.grid
    x = np.linspace(g["x_min"], g["x_max"], g["n_x"])
    dx = x[1] - x[0]
    times = problem.times
    dt = times[1] - times[0]
    u = burgers1d_ic(x, a, w)
    umax = np.abs(u).max()
    if umax * dt / dx > 1.0:
        raise StabilityError(f"advective CFL {umax * dt / dx:.3f} exceeds 1 (dt={dt}, dx={dx})")
    U = np.empty((len(times), len(x)))
    U[0] = u
    for n in range(problem.n_steps):
        un = u.copy()
        un[1:-1] = u[1:-1] - dt * u[1:-1] * (u[2:] - u[:-2]) / (2 * dx)
        u = un  # edge values stay at the initial condition
        U[n + 1] = u
    V = time_derivative_o4(times, U)
    return TrajectoryBundle((a, w), times, [U, V], "burgers1d", {"x": [g["x_min"], g["x_max"], g["n_x"]]})


# --------------------------------------------------------------- 2-D Burgers


def burgers2d_ic(X, Y, k, omega=0.5):
    return np.exp(-k * (X * X + Y * Y)) * np.sin(np.pi * omega * X) * np.sin(np.pi * omega * Y)


def solve_burgers2d(k, nu, problem=None, return_grid=False):
    problem = problem or default_problem("burgers2d")
    _warn_range(problem, (k, nu))
    g = problem.grid
    x = np.linspace(g["x_min"], g["x_max"], g["n_x"])
    dx = x[1] - x[0]
    X, Y = np.meshgrid(x, x, indexing="xy")  # axis 0 is y, axis 1 is x
    times = problem.times
    dt = times[1] - times[0]
    u = burgers2d_ic(X, Y, k, problem.constants.get("omega", 0.5))
    umax = np.abs(u).max()
    limit = dx * dx / (4 * nu) if nu > 0 else np.inf
    if dt > limit or umax * dt / dx > 1.0:
        raise StabilityError(f"forward Euler unstable: dt={dt}, diffusive limit {limit:.4g}, "
                             f"advective CFL {umax * dt / dx:.3f}")
    frames = np.empty((len(times), u.size))
    frames[0] = u.ravel()
    for n in range(problem.n_steps):
        c = u[1:-1, 1:-1]
        ux = (u[1:-1, 2:] - u[1:-1, :-2]) / (2 * dx)
        lap = (u[1:-1, 2:] + u[1:-1, :-2] + u[2:, 1:-1] + u[:-2, 1:-1] - 4 * c) / (dx * dx)
        un = u.copy()
        un[1:-1, 1:-1] = c + dt * (-c * ux + nu * lap)
        u = un
        frames[n + 1] = u.ravel()
    bundle = TrajectoryBundle((k, nu), times, [frames], "burgers2d", {"x": [g["x_min"], g["x_max"], g["n_x"]]})
    return (bundle, x) if return_grid else bundle


# -------------------------------------------------------------- wave family


def cell_centres(problem):
    g = problem.grid
    n = g["n_x"]
    dx = (g["x_max"] - g["x_min"]) / n
    return g["x_min"] + dx * (np.arange(n) + 0.5), dx


def observation_indices(problem, seed=None):
    """Fixed random grid cells (flat indices, sorted) observed for every theta."""
    g = problem.grid
    n_cells = g["n_x"] ** 2
    n_obs = g.get("n_obs", n_cells)
    if n_obs > n_cells:
        raise InvalidArgumentError(f"cannot observe {n_obs} of {n_cells} cells")
    rng = np.random.default_rng(g.get("obs_seed", 0) if seed is None else seed)
    return np.sort(rng.choice(n_cells, size=n_obs, replace=False))


def sample_points(frames, indices):
    """Restrict frames (N, ny, nx) or (N, cells) to flat cell ``indices``."""
    frames = np.asarray(frames)
    flat = frames.reshape(frames.shape[0], -1)
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= flat.shape[1]):
        raise IndexError(f"observation index out of range 0..{flat.shape[1] - 1}")
    return flat[:, indices]


def neumann_laplacian(u, dx):
    p = np.pad(u, 1, mode="edge")  # ghost cell mirrors its neighbour: zero normal gradient
    return (p[1:-1, 2:] + p[1:-1, :-2] + p[2:, 1:-1] + p[:-2, 1:-1] - 4 * u) / (dx * dx)


def wave_energy(u, v, c, dx):
    """sum(u_t^2 + c^2 |grad u|^2) dx^2 with face differences (conserved by the semi-discrete wave)."""
    gx = np.diff(u, axis=1) / dx
    gy = np.diff(u, axis=0) / dx
    return float((np.sum(v * v) + c * c * (np.sum(gx * gx) + np.sum(gy * gy))) * dx * dx)


def wave_family_physics(kind, theta, problem):
    """(c, alpha, m, initial u) for one parameter value."""
    p1, p2 = theta
    x, _ = cell_centres(problem)
    X, Y = np.meshgrid(x, x, indexing="xy")
    c = problem.constants.get("c", 0.2)
    alpha = problem.constants.get("alpha", 0.0)
    m = problem.constants.get("m", 0.0)
    if kind == "wave":
        c, kk = p1, p2
        u0 = np.exp(-kk * (X * X + Y * Y))
    elif kind == "telegrapher":
        alpha, kk = p1, p2
        u0 = np.exp(-kk * (X * X + Y * Y))
    elif kind == "kleingordon":
        m, w = p1, p2
        kk = problem.constants.get("k", 1.0)
        u0 = np.exp(-kk * (X * X + Y * Y)) * np.sin(np.pi * w * X) * np.sin(np.pi * w * Y)
    else:
        raise InvalidArgumentError(f"{kind!r} is not a wave-family problem")
    return c, alpha, m, u0


def solve_wave_family(kind, theta, problem=None, return_fields=False):
    problem = problem or default_problem(kind)
    _warn_range(problem, theta)
    c, alpha, m, u = wave_family_physics(kind, theta, problem)
    _, dx = cell_centres(problem)
    times = problem.times
    dt = times[1] - times[0]
    if c * dt / dx > 1 / np.sqrt(2):
        raise StabilityError(f"CFL number c dt/dx = {c * dt / dx:.3f} exceeds 1/sqrt(2)")
    v = np.zeros_like(u)

    def f(u, v):
        return v, c * c * neumann_laplacian(u, dx) - 2 * alpha * v - m * m * u

    nt = len(times)
    Uf = np.empty((nt, *u.shape))
    Vf = np.empty((nt, *u.shape))
    Uf[0], Vf[0] = u, v
    for n in range(problem.n_steps):
        k1u, k1v = f(u, v)
        k2u, k2v = f(u + 0.5 * dt * k1u, v + 0.5 * dt * k1v)
        k3u, k3v = f(u + 0.5 * dt * k2u, v + 0.5 * dt * k2v)
        k4u, k4v = f(u + dt * k3u, v + dt * k3v)
        u = u + dt / 6 * (k1u + 2 * k2u + 2 * k3u + k4u)
        v = v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        Uf[n + 1], Vf[n + 1] = u, v
    if return_fields:
        return Uf, Vf, dict(c=c, alpha=alpha, m=m, dx=dx)
    idx = observation_indices(problem)
    meta = {"obs_seed": problem.grid.get("obs_seed", 0), "n_obs": len(idx)}
    return TrajectoryBundle(theta, times, [sample_points(Uf, idx), sample_points(Vf, idx)], kind, meta)


def solve(problem, theta):
    """Dispatch on ``problem.kind``."""
    theta = tuple(float(t) for t in theta)
    if problem.kind == "burgers1d":
        return solve_burgers1d(*theta, problem=problem)
    if problem.kind == "burgers2d":
        return solve_burgers2d(*theta, problem=problem)
    return solve_wave_family(problem.kind, theta, problem)


def initial_condition(problem, theta):
    """Analytic initial channels on the observed nodes (what inference starts from)."""
    theta = tuple(float(t) for t in theta)
    if problem.kind == "burgers1d":
        # the velocity channel has no closed form; one short solve yields it
        short = default_problem("burgers1d", n_steps=4, T=4 * problem.T / problem.n_steps)
        short.grid = dict(problem.grid)
        bd = solve_burgers1d(*theta, problem=short)
        return [bd.channels[0][0], bd.channels[1][0]]
    if problem.kind == "burgers2d":
        g = problem.grid
        x = np.linspace(g["x_min"], g["x_max"], g["n_x"])
        X, Y = np.meshgrid(x, x, indexing="xy")
        return [burgers2d_ic(X, Y, theta[0], problem.constants.get("omega", 0.5)).ravel()]
    _, _, _, u0 = wave_family_physics(problem.kind, theta, problem)
    idx = observation_indices(problem)
    return [u0.ravel()[idx], np.zeros(len(idx))]
