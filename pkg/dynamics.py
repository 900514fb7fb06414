# -------------------------

block_size = 1024 # columns integrated per RNG stream
fd_step = 1e-6
fd_tolerance = 1e-5
lag_tolerance = 1e-12

example1_matrix = ((0.48, -0.06), (-0.16, 0.52))

# -------------------------

import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy import linalg

from estimators import TrajectoryPairs, save_pairs


class IntegrationDivergedError(FloatingPointError):
    pass


# Potentials

@dataclass(frozen=True)
class PotentialField:
    """V and its gradient, both vectorized over the trailing axes of a d x ... array."""
    name: str
    dim: int
    value: Callable
    gradient: Callable

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))

    def force(self, x):
        return -self.gradient(np.asarray(x, dtype=float))


def _double_well_value(x):
    return (x[0] ** 2 - 1) ** 2 + x[1] ** 2


def _double_well_gradient(x):
    return np.stack([4 * x[0] * (x[0] ** 2 - 1), 2 * x[1]])


def _triple_well_terms(x):
    e1 = 3 * np.exp(-x[0] ** 2 - (x[1] - 1 / 3) ** 2)
    e2 = 3 * np.exp(-x[0] ** 2 - (x[1] - 5 / 3) ** 2)
    e3 = 5 * np.exp(-(x[0] - 1) ** 2 - x[1] ** 2)
    e4 = 5 * np.exp(-(x[0] + 1) ** 2 - x[1] ** 2)
    return e1, e2, e3, e4


def _triple_well_value(x):
    e1, e2, e3, e4 = _triple_well_terms(x)
    return e1 - e2 - e3 - e4 + 0.2 * x[0] ** 4 + 0.2 * (x[1] - 1 / 3) ** 4


def _triple_well_gradient(x):
    e1, e2, e3, e4 = _triple_well_terms(x)
    gx = (-2 * x[0] * e1 + 2 * x[0] * e2 + 2 * (x[0] - 1) * e3 + 2 * (x[0] + 1) * e4
          + 0.8 * x[0] ** 3)
    gy = (-2 * (x[1] - 1 / 3) * e1 + 2 * (x[1] - 5 / 3) * e2 + 2 * x[1] * e3 + 2 * x[1] * e4
          + 0.8 * (x[1] - 1 / 3) ** 3)
    return np.stack([gx, gy])


double_well = PotentialField('double-well', 2, _double_well_value, _double_well_gradient)
triple_well = PotentialField('triple-well', 2, _triple_well_value, _triple_well_gradient)
double_well_1d = PotentialField(
    'double-well-1d', 1,
    lambda x: (x[0] ** 2 - 1) ** 2,
    lambda x: np.stack([4 * x[0] * (x[0] ** 2 - 1)]),
)


def circle_cosine(n=3):
    """U(phi) = cos(n phi), n wells on the circle at the odd multiples of pi/n."""
    return PotentialField(
        f'circle-cos{n}', 1,
        lambda x: np.cos(n * x[0]),
        lambda x: np.stack([-n * np.sin(n * x[0])]),
    )


def check_gradient(potential, points, h=fd_step):
    """Largest relative deviation of the gradient from central finite differences."""
    points = np.asarray(points, dtype=float).reshape(potential.dim, -1)
    analytic = potential.gradient(points)
    numeric = np.empty_like(points)
    for i in range(potential.dim):
        step = np.zeros((potential.dim, 1))
        step[i] = h
        numeric[i] = (potential(points + step) - potential(points - step)) / (2 * h)
    scale = np.maximum(np.linalg.norm(analytic, axis=0), 1.0)
    return float(np.max(np.linalg.norm(analytic - numeric, axis=0) / scale))


# Systems

@dataclass(frozen=True)
class LinearMap:
    A: np.ndarray
    name: str = 'linear'

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1] or not np.all(np.isfinite(A)):
            raise ValueError(f"linear map needs a finite square matrix, got shape {A.shape}")
        object.__setattr__(self, 'A', A)

    @property
    def dim(self):
        return self.A.shape[0]

    def __call__(self, x):
        return self.A @ x


@dataclass(frozen=True)
class DeterministicMap:
    name: str
    dim: int
    func: Callable

    def __call__(self, x):
        return self.func(x)


@dataclass(frozen=True)
class SdeSystem:
    """dX = drift(t, X) dt + sigma dW.

    sigma is a scalar multiplying independent noises per coordinate or a d x d matrix.
    With `period` set the state lives on [0, period)^d and is wrapped after each step.
    """
    dim: int
    drift: Callable
    sigma: object = 0.0
    potential: Optional[PotentialField] = None
    period: Optional[float] = None
    name: str = 'sde'

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 0:
            if sigma < 0:
                raise ValueError(f"sigma must be >= 0, got {float(sigma)}")
            object.__setattr__(self, 'sigma', float(sigma))
        elif sigma.shape != (self.dim, self.dim):
            raise ValueError(f"sigma must be a scalar or a {self.dim} x {self.dim} matrix")
        else:
            object.__setattr__(self, 'sigma', sigma)

    @classmethod
    def from_potential(cls, potential, sigma, period=None, name=None):
        return cls(potential.dim, lambda t, x: potential.force(x), sigma, potential,
                   period, name or potential.name)

    def diffuse(self, t, x, dw):
        if np.ndim(self.sigma) == 0:
            return self.sigma * dw
        return self.sigma @ dw


@dataclass(frozen=True)
class LangevinSystem:
    """Langevin dynamics for the state (q, p) of 2n phase-space coordinates.

        dq = M^-1 p dt
        dp = -grad V(q) dt - gamma M^-1 p dt + sigma dW

    sigma is derived from gamma and beta so that 2 gamma = beta sigma sigma^T.
    """
    potential: PotentialField
    mass: object = 1.0
    gamma: object = 1.0
    beta: float = 1.0
    name: str = 'langevin'
    sigma: np.ndarray = field(init=False, repr=False)
    period = None

    def __post_init__(self):
        n = self.potential.dim
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        mass = _as_matrix(self.mass, n)
        gamma = _as_matrix(self.gamma, n)
        if not np.allclose(mass, mass.T) or np.any(linalg.eigvalsh(mass) <= 0):
            raise ValueError("mass matrix must be symmetric positive definite")
        if not np.allclose(gamma, gamma.T) or np.any(linalg.eigvalsh(gamma) < -1e-12):
            raise ValueError("friction must be symmetric positive semidefinite")
        if np.ndim(self.gamma) == 0:
            sigma = np.sqrt(2 * float(self.gamma) / self.beta) * np.eye(n)
        else:
            sigma = linalg.cholesky(2 * gamma / self.beta, lower=True)
        object.__setattr__(self, 'mass', mass)
        object.__setattr__(self, 'gamma', gamma)
        object.__setattr__(self, 'sigma', sigma)
        object.__setattr__(self, '_mass_inv', linalg.inv(mass))

    @property
    def dim(self):
        return 2 * self.potential.dim

    @property
    def config_dim(self):
        return self.potential.dim

    def fd_residual(self):
        return float(np.max(np.abs(2 * self.gamma - self.beta * self.sigma @ self.sigma.T)))

    def drift(self, t, x):
        n = self.potential.dim
        q, p = x[:n], x[n:]
        velocity = self._mass_inv @ p
        return np.concatenate([velocity, self.potential.force(q) - self.gamma @ velocity])

    def diffuse(self, t, x, dw):
        n = self.potential.dim
        return np.concatenate([np.zeros_like(dw[:n]), self.sigma @ dw[n:]])


@dataclass(frozen=True)
class MarkovChain:
    """Finite-state chain on {0, ..., k-1} with row-stochastic transition matrix T."""
    T: np.ndarray
    name: str = 'markov-chain'

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float)
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0):
            raise ValueError("transition matrix must be row-stochastic")
        object.__setattr__(self, 'T', T)

    @property
    def dim(self):
        return 1

    @property
    def k(self):
        return self.T.shape[0]

    def stationary(self):
        values, vectors = linalg.eig(self.T.T)
        f = np.real(vectors[:, np.argmin(np.abs(values - 1.0))])
        return f / f.sum()

    def step(self, states, rng):
        states = np.asarray(states, dtype=np.int64)
        cdf = np.cumsum(self.T, axis=1)
        u = rng.random(states.shape)
        return np.minimum((cdf[states] <= u[..., None]).sum(axis=-1), self.k - 1)

    def sample_orbit(self, n, start=0, seed=0):
        cdf = np.cumsum(self.T, axis=1)
        u = _stream(seed, 3).random(n - 1)
        orbit = np.empty(n, dtype=np.int64)
        orbit[0] = start
        for t in range(1, n):
            orbit[t] = min(np.searchsorted(cdf[orbit[t - 1]], u[t - 1], side='right'), self.k - 1)
        return orbit


# Integration

@dataclass(frozen=True)
class IntegratorConfig:
    h: float = 1e-3
    n_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError(f"step size must be positive, got {self.h}")
        if int(self.n_steps) < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, 'n_steps', int(self.n_steps))
        object.__setattr__(self, 'seed', int(self.seed))

    @property
    def lag(self):
        return self.h * self.n_steps

    @classmethod
    def from_lag(cls, lag, h, seed=0):
        n_steps = int(round(lag / h))
        if n_steps < 1 or abs(h * n_steps - lag) > lag_tolerance * max(1.0, abs(lag)):
            raise ValueError(f"lag {lag} is not a whole number of steps of size {h}")
        return cls(h, n_steps, seed)


@dataclass(frozen=True)
class SampleDesign:
    """Where the X columns come from.

    per-box         `per_box` uniform points in every box of the `counts` partition
    uniform-domain  `total` uniform points in the domain
    single-orbit    `orbits` orbits of `length` states, pairs `lag` ticks apart
    """
    mode: str
    lower: tuple = ()
    upper: tuple = ()
    counts: tuple = ()
    per_box: int = 0
    total: int = 0
    length: int = 0
    lag: int = 1
    orbits: int = 1
    x0: Optional[tuple] = None
    block_size: int = block_size

    def __post_init__(self):
        if self.mode not in ('per-box', 'uniform-domain', 'single-orbit'):
            raise ValueError(f"unknown sample design mode '{self.mode}'")
        for key in ('lower', 'upper', 'counts'):
            object.__setattr__(self, key, tuple(np.atleast_1d(getattr(self, key)).tolist()))
        if self.x0 is not None:
            object.__setattr__(self, 'x0', tuple(np.atleast_1d(self.x0).tolist()))
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    @property
    def m(self):
        if self.mode == 'per-box':
            return int(np.prod(self.counts)) * self.per_box if self.counts else 0
        if self.mode == 'uniform-domain':
            return self.total
        return max(self.length - self.lag, 0) * self.orbits


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _as_matrix(value, n):
    value = np.asarray(value, dtype=float)
    return value * np.eye(n) if value.ndim == 0 else value


def euler_maruyama_step(system, x, h, noise, t=0.0, step=None):
    """x + h drift(t, x) + sigma sqrt(h) noise, with noise standard normal."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    noise = np.atleast_1d(np.asarray(noise, dtype=float))
    if x.shape[0] != system.dim or noise.shape != x.shape:
        raise ValueError(f"state {x.shape} and noise {noise.shape} do not match dimension {system.dim}")
    out = x + h * system.drift(t, x) + system.diffuse(t, x, np.sqrt(h) * noise)
    if not np.all(np.isfinite(out)):
        where = 'step' if step is None else f'step {step}'
        raise IntegrationDivergedError(f"Euler-Maruyama produced a non-finite state at {where} (t = {t:g})")
    if system.period is not None:
        out = np.mod(out, system.period)
    return out


def _integrate(system, x, cfg, rng):
    if isinstance(system, (LinearMap, DeterministicMap)):
        return system(x)
    if isinstance(system, MarkovChain):
        return system.step(x, rng)
    for step in range(cfg.n_steps):
        x = euler_maruyama_step(system, x, cfg.h, rng.standard_normal(x.shape), t=step * cfg.h, step=step)
    return x


def evolve(system, x0, cfg, index=0):
    """State after one operator tick (n_steps Euler-Maruyama steps for SDEs).

    x0 may be a d-vector or a d x m matrix; the noise comes from the stream
    derived from (cfg.seed, index).
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.int64 if isinstance(system, MarkovChain) else float))
    if not isinstance(system, MarkovChain) and x0.shape[0] != system.dim:
        raise ValueError(f"initial state has dimension {x0.shape[0]}, system has {system.dim}")
    return _integrate(system, x0, cfg, _stream(cfg.seed, 1, index))


def _sample_domain(design, seed):
    lower = np.array(design.lower, dtype=float)[:, None]
    upper = np.array(design.upper, dtype=float)[:, None]
    if design.mode == 'per-box':
        counts = design.counts
        widths = (upper - lower)[:, 0] / np.array(counts)
        blocks = []
        for b in range(int(np.prod(counts))):
            cell = np.array(np.unravel_index(b, counts))
            lo = lower[:, 0] + cell * widths
            blocks.append(lo[:, None] + widths[:, None] * _stream(seed, 0, b).random((len(counts), design.per_box)))
        return np.hstack(blocks)
    columns = []
    for b, start in enumerate(range(0, design.total, design.block_size)):
        n = min(design.block_size, design.total - start)
        columns.append(lower + (upper - lower) * _stream(seed, 0, b).random((len(lower), n)))
    return np.hstack(columns)


def generate_pairs(system, design, cfg, threads=1):
    """Sample pairs (X, Y) with Y[:, i] the image of X[:, i] after one tick."""
    if design.m < 1:
        raise ValueError("sample design is empty (m = 0)")
    meta = {'system': system.name, 'seed': cfg.seed, 'design': asdict(design),
            'h': cfg.h, 'n_steps': cfg.n_steps}

    if design.mode == 'single-orbit':
        return _orbit_pairs(system, design, cfg, meta)

    if len(design.lower) != system.dim:
        raise ValueError(f"design domain has dimension {len(design.lower)}, system has {system.dim}")
    X = _sample_domain(design, cfg.seed)
    starts = list(range(0, X.shape[1], design.block_size))

    def run(b):
        block = X[:, starts[b]:starts[b] + design.block_size]
        return _integrate(system, block, cfg, _stream(cfg.seed, 1, b))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        Y = np.hstack(list(pool.map(run, range(len(starts)))))
    return TrajectoryPairs(X, Y, meta)


def _orbit_pairs(system, design, cfg, meta):
    if design.length <= design.lag or design.lag < 1:
        raise ValueError(f"orbit of length {design.length} has no pairs at lag {design.lag}")
    R = design.orbits
    if design.x0 is not None:
        z = np.repeat(np.asarray(design.x0, dtype=float).reshape(-1, 1), R, axis=1)
    else:
        lower = np.array(design.lower, dtype=float)[:, None]
        upper = np.array(design.upper, dtype=float)[:, None]
        z = lower + (upper - lower) * _stream(cfg.seed, 0, 0).random((len(lower), R))
    if isinstance(system, MarkovChain):
        z = z.astype(np.int64)
    orbit = [z]
    for t in range(1, design.length):
        z = _integrate(system, z, cfg, _stream(cfg.seed, 2, t))
        orbit.append(z)
    orbit = np.stack(orbit, axis=1).astype(float) # d x length x R
    L = design.lag
    X = np.hstack([orbit[:, :-L, r] for r in range(R)])
    Y = np.hstack([orbit[:, L:, r] for r in range(R)])
    return TrajectoryPairs(X, Y, meta)


# Registry

def _linear_example1(A=example1_matrix):
    return LinearMap(np.array(A, dtype=float), name='linear-example1')


def _double_well(sigma=0.7):
    return SdeSystem.from_potential(double_well, sigma)


def _triple_well(sigma=1.09):
    return SdeSystem.from_potential(triple_well, sigma)


def _langevin_1d(mass=1.0, gamma=1.0, beta=4.0):
    return LangevinSystem(double_well_1d, mass, gamma, beta, name='langevin-1d')


def _circle_3well(sigma=0.9, wells=3):
    return SdeSystem.from_potential(circle_cosine(wells), sigma, period=2 * np.pi, name='circle-3well')


def _doubling_map():
    return DeterministicMap('doubling-map', 1, lambda x: np.mod(2 * x, 1.0))


def _rotation_map(shift=0.6):
    return DeterministicMap('rotation-map', 1, lambda x: np.mod(x + shift, 1.0))


SYSTEMS = {
    'linear-example1': _linear_example1,
    'double-well': _double_well,
    'triple-well': _triple_well,
    'langevin-1d': _langevin_1d,
    'circle-3well': _circle_3well,
    'doubling-map': _doubling_map,
    'rotation-map': _rotation_map,
}


def build_system(name, **params):
    if name not in SYSTEMS:
        raise ValueError(f"unknown system '{name}', expected one of {', '.join(SYSTEMS)}")
    return SYSTEMS[name](**params)


if __name__ == "__main__":
    '''Command: python3 dynamics.py <system> <lower> <upper> <counts> <per_box> <h> <n_steps> <seed> <pairs.csv>'''
    system = build_system(sys.argv[1])
    lower = [float(v) for v in sys.argv[2].split(',')]
    upper = [float(v) for v in sys.argv[3].split(',')]
    counts = [int(v) for v in sys.argv[4].split(',')]
    design = SampleDesign('per-box', lower, upper, counts, per_box=int(sys.argv[5]))
    cfg = IntegratorConfig(float(sys.argv[6]), int(sys.argv[7]), int(sys.argv[8]))

    print("[Generate Pairs] ...", end='\r')
    pairs = generate_pairs(system, design, cfg)
    save_pairs(pairs, sys.argv[9])
    print(f"[Generate Pairs] m = {pairs.m}                 ")
