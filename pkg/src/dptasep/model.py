"""Particle model and brute-force oracles.

Discrete-time TASEP with parallel updates: all particles look at the
configuration at the start of a step, and every particle whose right
neighbor site is empty hops with probability p, independently.  The model
lives either on a ring of L sites (periodic mode, N particles per period)
or on the infinite lattice (infinite mode, finitely many particles with a
rightmost one).

Positions are kept as strictly decreasing integers x_1 > x_2 > ... > x_N;
in periodic mode x_N + L > x_1 and indices wrap via x_{i+N} = x_i - L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .errors import StateSpaceOverflow, ValidationError


@dataclass(frozen=True)
class ModelParams:
    """Ring length L, particle count N, hop probability p, derived constants."""

    L: int
    N: int
    p: float

    def __post_init__(self):
        if not (0 < self.N < self.L):
            raise ValidationError(f"need 0 < N < L, got N={self.N}, L={self.L}")
        if not (0.0 < self.p < 1.0):
            raise ValidationError(f"need 0 < p < 1, got p={self.p}")

    @property
    def rho(self) -> float:
        return self.N / self.L

    @property
    def nu(self) -> float:
        r = self.rho
        return math.sqrt(1.0 - 4.0 * self.p * r * (1.0 - r))

    @property
    def w_c(self) -> float:
        return -2.0 * self.rho / (1.0 + self.nu)

    @property
    def r_c(self) -> float:
        wc, r = self.w_c, self.rho
        return (-wc / (1.0 + self.p * wc)) ** r * (1.0 + wc) ** (1.0 - r)


@dataclass(frozen=True)
class Configuration:
    """Strictly decreasing particle positions, periodic or infinite mode."""

    positions: tuple
    mode: str = "periodic"  # "periodic" | "infinite"

    def __post_init__(self):
        pos = tuple(int(x) for x in self.positions)
        object.__setattr__(self, "positions", pos)
        if self.mode not in ("periodic", "infinite"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if any(a <= b for a, b in zip(pos, pos[1:])):
            raise ValidationError(f"positions not strictly decreasing: {pos}")

    @property
    def n(self) -> int:
        return len(self.positions)

    def validate(self, params: ModelParams | None = None):
        if self.mode == "periodic":
            if params is None:
                raise ValidationError("periodic configuration needs params")
            if self.n != params.N:
                raise ValidationError("particle count differs from params.N")
            if not (self.positions[-1] + params.L > self.positions[0]):
                raise ValidationError("ring wrap violated: x_N + L must exceed x_1")
        return self

    def position(self, k: int, L: int | None = None) -> int:
        """Position of particle k, with periodic index wrap x_{i+N} = x_i - L."""
        n = self.n
        if 1 <= k <= n:
            return self.positions[k - 1]
        if self.mode == "infinite":
            raise ValidationError(f"particle index {k} outside 1..{n}")
        j, k0 = divmod(k - 1, n)
        return self.positions[k0] - j * L


def step_config(params: ModelParams | None, mode: str = "periodic", n: int | None = None) -> Configuration:
    """Packed initial condition y_i = -i."""
    if mode == "periodic":
        n = params.N
    return Configuration(tuple(-i for i in range(1, n + 1)), mode)


def flat_config(params: ModelParams) -> Configuration:
    """Evenly spaced initial condition y_i = -i * (L // N).

    When N divides L this is the flat profile with spacing d = L/N; otherwise
    it is simply the most evenly spaced packing with integer gap L // N.
    """
    d = params.L // params.N
    if d < 2:
        raise ValidationError("flat spacing needs L >= 2N")
    return Configuration(tuple(-i * d for i in range(1, params.N + 1)), "periodic")


@dataclass(frozen=True)
class ObsPoint:
    k: int
    t: int
    a: int


@dataclass(frozen=True)
class ObservationSet:
    """Joint event ∩_i { x_{k_i}(t_i) >= a_i } with nondecreasing times."""

    points: tuple

    def __post_init__(self):
        pts = tuple(p if isinstance(p, ObsPoint) else ObsPoint(*p) for p in self.points)
        object.__setattr__(self, "points", pts)
        ts = [p.t for p in pts]
        if any(t < 0 for t in ts):
            raise ValidationError("observation times must be >= 0")
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValidationError("observation times must be nondecreasing")
        if len({(p.k, p.t) for p in pts}) != len(pts):
            raise ValidationError("(k, t) pairs must be distinct")

    @property
    def m(self) -> int:
        return len(self.points)

    @property
    def t_max(self) -> int:
        return max(p.t for p in self.points)

    def reduced(self, params: ModelParams | None, mode: str, n_particles: int) -> "ObservationSet":
        """Wrap indices into 1..N using x_{k+jN} = x_k - jL (periodic only)."""
        out = []
        for p in self.points:
            k, a = p.k, p.a
            if mode == "periodic":
                j, k0 = divmod(k - 1, n_particles)
                out.append(ObsPoint(k0 + 1, p.t, a + j * params.L))
            else:
                if not (1 <= k <= n_particles):
                    raise ValidationError(f"particle index {k} outside 1..{n_particles}")
                out.append(p)
        return ObservationSet(tuple(out))


@dataclass(frozen=True)
class ProbEstimate:
    value: float
    stderr: float
    samples: int

    def __post_init__(self):
        if not (-1e-12 <= self.value <= 1.0 + 1e-12):
            raise ValidationError(f"probability {self.value} outside [0, 1]")
        if self.stderr < 0:
            raise ValidationError("stderr must be >= 0")


# ---------------------------------------------------------------------------
# dynamics


def movable_mask(positions: Sequence[int], L: int | None, mode: str) -> tuple:
    """Particles whose right neighbor site is empty in the given configuration."""
    n = len(positions)
    out = []
    for i in range(n):
        if i == 0:
            gap = (positions[n - 1] + L - positions[0]) if mode == "periodic" else None
            out.append(True if gap is None else gap > 1)
        else:
            out.append(positions[i - 1] - positions[i] > 1)
    return tuple(out)


def step_parallel(params: ModelParams | None, config: Configuration, rng: np.random.Generator) -> Configuration:
    """One parallel update; moves are decided from the input configuration."""
    L = params.L if config.mode == "periodic" else None
    mov = movable_mask(config.positions, L, config.mode)
    draws = rng.random(config.n) < (params.p if params is not None else 0.0)
    new = tuple(x + 1 if (m and d) else x for x, m, d in zip(config.positions, mov, draws))
    return Configuration(new, config.mode)


def _step_array(x: np.ndarray, L: int | None, p: float, rng: np.random.Generator, mode: str) -> None:
    """In-place vectorized parallel step on an array of shape (batch, N)."""
    prev = np.empty_like(x)
    prev[:, 1:] = x[:, :-1]
    if mode == "periodic":
        prev[:, 0] = x[:, -1] + L
        movable = (prev - x) > 1
    else:
        movable = (prev - x) > 1
        movable[:, 0] = True
    moves = movable & (rng.random(x.shape) < p)
    x += moves


# ---------------------------------------------------------------------------
# exact (dynamic programming) oracle


def dp_joint_probability(
    params: ModelParams | None,
    y: Configuration,
    obs: ObservationSet,
    cap: int = 200_000,
) -> ProbEstimate:
    """Exact probability of the joint event by pushing the full distribution forward.

    Mass violating a constraint is zeroed at that constraint's time.  Raises
    StateSpaceOverflow when the live state count exceeds ``cap``.
    """
    mode = y.mode
    L = params.L if mode == "periodic" else None
    p = params.p
    n = y.n
    obs = obs.reduced(params, mode, n)
    by_time: dict[int, list[ObsPoint]] = {}
    for pt in obs.points:
        by_time.setdefault(pt.t, []).append(pt)

    dist: dict[tuple, float] = {y.positions: 1.0}

    def apply_constraints(t: int):
        nonlocal dist
        pts = by_time.get(t)
        if not pts:
            return
        dist = {s: w for s, w in dist.items() if all(s[pt.k - 1] >= pt.a for pt in pts)}

    t_max = obs.t_max
    apply_constraints(0)
    for t in range(t_max):
        nxt: dict[tuple, float] = {}
        for state, w in dist.items():
            mov = [i for i, m in enumerate(movable_mask(state, L, mode)) if m]
            for r in range(len(mov) + 1):
                base = (p ** r) * ((1.0 - p) ** (len(mov) - r))
                for sub in combinations(mov, r):
                    new = list(state)
                    for i in sub:
                        new[i] += 1
                    key = tuple(new)
                    nxt[key] = nxt.get(key, 0.0) + w * base
        if len(nxt) > cap:
            raise StateSpaceOverflow(f"{len(nxt)} states exceed cap {cap}")
        dist = nxt
        apply_constraints(t + 1)
    return ProbEstimate(min(max(math.fsum(dist.values()), 0.0), 1.0), 0.0, 0)


def dp_transition_matrix(params: ModelParams, y: Configuration, t: int) -> dict[tuple, float]:
    """Exact law of the configuration after t steps, keyed by position tuple."""
    mode = y.mode
    L = params.L if mode == "periodic" else None
    p = params.p
    dist = {y.positions: 1.0}
    for _ in range(t):
        nxt: dict[tuple, float] = {}
        for state, w in dist.items():
            mov = [i for i, m in enumerate(movable_mask(state, L, mode)) if m]
            for r in range(len(mov) + 1):
                base = (p ** r) * ((1.0 - p) ** (len(mov) - r))
                for sub in combinations(mov, r):
                    new = list(state)
                    for i in sub:
                        new[i] += 1
                    key = tuple(new)
                    nxt[key] = nxt.get(key, 0.0) + w * base
        dist = nxt
    return dist


# ---------------------------------------------------------------------------
# Monte Carlo oracle


def mc_joint_probability(
    params: ModelParams | None,
    y: Configuration,
    obs: ObservationSet,
    samples: int,
    seed: int,
    batch: int = 100_000,
) -> ProbEstimate:
    """Unbiased Monte Carlo estimate of the same event as dp_joint_probability.

    Samples are sharded into fixed-size batches, each driven by an independent
    substream spawned from the seed, and merged in a fixed order, so the result
    is deterministic given (samples, seed, batch).
    """
    if samples < 1:
        raise ValidationError("samples must be >= 1")
    mode = y.mode
    L = params.L if mode == "periodic" else None
    p = params.p
    n = y.n
    obs = obs.reduced(params, mode, n)
    by_time: dict[int, list[ObsPoint]] = {}
    for pt in obs.points:
        by_time.setdefault(pt.t, []).append(pt)
    t_max = obs.t_max

    n_batches = (samples + batch - 1) // batch
    streams = np.random.SeedSequence(seed).spawn(n_batches)
    hits = 0
    for b in range(n_batches):
        size = min(batch, samples - b * batch)
        rng = np.random.Generator(np.random.Philox(streams[b]))
        x = np.tile(np.asarray(y.positions, dtype=np.int64), (size, 1))
        ok = np.ones(size, dtype=bool)
        for pt in by_time.get(0, []):
            ok &= x[:, pt.k - 1] >= pt.a
        for t in range(t_max):
            _step_array(x, L, p, rng, mode)
            for pt in by_time.get(t + 1, []):
                ok &= x[:, pt.k - 1] >= pt.a
        hits += int(ok.sum())
    phat = hits / samples
    stderr = math.sqrt(max(phat * (1.0 - phat), 0.0) / samples)
    return ProbEstimate(phat, stderr, samples)


# ---------------------------------------------------------------------------
# stationary measure on the ring


def stationary_weight(params: ModelParams, config: Configuration) -> float:
    """Unnormalized stationary weight: (1 - p) per adjacent particle pair."""
    if config.mode != "periodic":
        raise ValidationError("stationary weight is defined in periodic mode")
    x = config.positions
    n = len(x)
    w = 1.0
    for i in range(n):
        prev = x[i - 1] if i > 0 else x[-1] + params.L
        if prev - x[i] == 1:
            w *= 1.0 - params.p
    return w


def occupancy_states(params: ModelParams) -> list:
    """All occupancy patterns of the ring with N particles, as sorted site tuples."""
    return [tuple(c) for c in combinations(range(params.L), params.N)]


def occupancy_transition_matrix(params: ModelParams) -> np.ndarray:
    """Transition matrix of the parallel dynamics on ring occupancy patterns."""
    states = occupancy_states(params)
    index = {s: i for i, s in enumerate(states)}
    L, p = params.L, params.p
    P = np.zeros((len(states), len(states)))
    for i, s in enumerate(states):
        occ = set(s)
        movable = [site for site in s if (site + 1) % L not in occ]
        for r in range(len(movable) + 1):
            base = (p ** r) * ((1.0 - p) ** (len(movable) - r))
            for sub in combinations(movable, r):
                nxt = set(occ)
                for site in sub:
                    nxt.remove(site)
                    nxt.add((site + 1) % L)
                P[i, index[tuple(sorted(nxt))]] += base
    return P


def occupancy_stationary_vector(params: ModelParams) -> np.ndarray:
    """Normalized stationary weights over occupancy patterns."""
    states = occupancy_states(params)
    L, p = params.L, params.p
    w = np.empty(len(states))
    for i, s in enumerate(states):
        occ = set(s)
        adj = sum(1 for site in s if (site + 1) % L in occ)
        w[i] = (1.0 - p) ** adj
    return w / w.sum()


# ---------------------------------------------------------------------------
# geometric last passage percolation cross-check


def glpp_joint_probability_mc(
    q: float,
    points: Iterable[tuple],
    samples: int,
    seed: int,
    batch: int = 100_000,
) -> ProbEstimate:
    """Monte Carlo estimate of P(∩ { G(m_i, n_i) <= t_i }) for geometric LPP.

    G(m, n) is the maximal sum of cell weights over up-right paths from (1, 1)
    to (m, n).  Weights are i.i.d. geometric on {1, 2, ...} with
    P(w = j) = (1 - q) q^(j-1); this support convention is calibrated against
    the particle-system identity x_k(t) >= a  <=>  G(k, a + k) <= t for the
    packed initial condition (see README).
    """
    pts = [(int(m), int(n), int(t)) for m, n, t in points]
    if not (0.0 < q < 1.0):
        raise ValidationError("need q in (0, 1)")
    if any(m < 1 or n < 1 for m, n, _ in pts):
        raise ValidationError("grid indices must be >= 1")
    M = max(m for m, _, _ in pts)
    Nn = max(n for _, n, _ in pts)
    n_batches = (samples + batch - 1) // batch
    streams = np.random.SeedSequence(seed).spawn(n_batches)
    hits = 0
    for b in range(n_batches):
        size = min(batch, samples - b * batch)
        rng = np.random.Generator(np.random.Philox(streams[b]))
        w = rng.geometric(1.0 - q, size=(size, M, Nn)).astype(np.int64)
        G = np.zeros((size, M + 1, Nn + 1), dtype=np.int64)
        for i in range(1, M + 1):
            for j in range(1, Nn + 1):
                G[:, i, j] = np.maximum(G[:, i - 1, j], G[:, i, j - 1]) + w[:, i - 1, j - 1]
        ok = np.ones(size, dtype=bool)
        for m, n, t in pts:
            ok &= G[:, m, n] <= t
        hits += int(ok.sum())
    phat = hits / samples
    stderr = math.sqrt(max(phat * (1.0 - phat), 0.0) / samples)
    return ProbEstimate(phat, stderr, samples)
