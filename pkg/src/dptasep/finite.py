"""Finite-time distribution formulas on the ring.

Everything here feeds off the spectral roots of q(w) for parameters z on
nested circles.  The integrands depend on z only through zL = z^L, so every
contour integral dz/(2 pi i z) is evaluated as d(zeta)/(2 pi i zeta) on a
circle in the zeta = z^L variable, which collapses the L-fold winding; a
numerical equivalence test for this substitution lives in the test suite.

Large rings push the raw factors far outside double range, so products over
roots and the observation-dependent weights are accumulated as sums of
logarithms and only exponentiated in combinations that are O(1); for the
Fredholm factor that combination is an exact diagonal similarity.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from itertools import product as iproduct

import numpy as np

from ._quad import circle_nodes
from .bethe import (
    BetheSpectrum,
    characteristic_matrix,
    flat_characteristic_matrix,
    flat_energy,
    global_energy,
    solve_spectrum,
)
from .errors import (
    BudgetExceeded,
    EnergyVanishes,
    PoleProximity,
    QuadratureDiverged,
    RootNearBoundary,
    SingularAssembly,
    ValidationError,
)
from .model import Configuration, ModelParams, ObservationSet

_SING_TOL = 1e-12


def root_weight(params: ModelParams, w) -> complex:
    """Rational weight attached to every root in the transition formula."""
    w = np.asarray(w, dtype=complex)
    L, N, p = params.L, params.N, params.p
    den = N + L * w + p * (L - N) * w * w
    if np.any(np.abs(den) < 1e-10):
        raise PoleProximity("weight evaluated at a root of its denominator")
    out = w * (w + 1.0) * (1.0 + p * w) / den
    return complex(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# circle spectra with warm-started solves


_circle_cache: dict = {}


def _circle_spectra(params: ModelParams, radius: float, M: int, classify: bool, phase: float = 0.0):
    key = (params.L, params.N, params.p, radius, M, classify, phase)
    hit = _circle_cache.get(key)
    if hit is not None:
        return hit
    nodes = circle_nodes(radius, M, phase)
    out = [None] * M
    half = _circle_cache.get((params.L, params.N, params.p, radius, M // 2, classify, phase / 2.0))
    if half is not None and M % 2 == 0 and phase == 0.0:
        for k in range(0, M, 2):
            out[k] = half[k // 2]
    prev = None
    for k in range(M):
        if out[k] is not None:
            prev = out[k]
            continue
        seeds = prev.roots if prev is not None else None
        try:
            out[k] = solve_spectrum(params, nodes[k], seeds=seeds, classify=classify)
        except ValidationError:
            out[k] = solve_spectrum(params, nodes[k], seeds=None, classify=classify)
        prev = out[k]
    _circle_cache[key] = out
    return out


# ---------------------------------------------------------------------------
# transition probability


def gap_prefactor(params: ModelParams, x: Configuration) -> float:
    out = 1.0
    pos = x.positions
    for i in range(len(pos)):
        prev = pos[i - 1] if i > 0 else pos[-1] + params.L
        if prev - pos[i] == 1:
            out *= 1.0 - params.p
    return out


def _transition_det(params: ModelParams, y, x, t: int, roots: np.ndarray) -> complex:
    """det over the full root set of the summed two-sided weight matrix."""
    N, p = params.N, params.p
    i = np.arange(1, N + 1)
    e1 = i[None, :] - i[:, None]                       # j - i
    xs = np.asarray(x, dtype=np.int64)[::-1]           # x_{N-i+1}, i = 1..N
    ys = np.asarray(y, dtype=np.int64)[::-1]
    e2 = -xs[:, None] + ys[None, :] + i[:, None] - i[None, :] - 1
    e3 = t + i[:, None] - i[None, :]
    w = roots[None, None, :]
    J = root_weight(params, roots)
    A = np.sum(w ** e1[:, :, None] * (1.0 + w) ** e2[:, :, None] * (1.0 + p * w) ** e3[:, :, None] * J, axis=2)
    return complex(np.linalg.det(A))


def transition_probability(
    params: ModelParams,
    y: Configuration,
    x: Configuration,
    t: int,
    radius: float | None = None,
    tol: float = 1e-11,
    start_nodes: int = 32,
    max_nodes: int = 1024,
) -> float:
    """Probability of going from y to x in t parallel steps.

    The contour value is exact once the node count passes the Laurent degree
    of the integrand in zeta, so doubling terminates quickly.
    """
    y.validate(params)
    x.validate(params)
    if t < 0:
        raise ValidationError("time must be >= 0")
    if radius is None:
        radius = 0.75 * params.r_c ** params.L
    pref = gap_prefactor(params, x)
    prev = None
    M = start_nodes
    while M <= max_nodes:
        specs = _circle_spectra(params, radius, M, classify=False)
        vals = [_transition_det(params, y.positions, x.positions, t, s.roots) for s in specs]
        val = complex(np.mean(vals))
        if prev is not None and abs(val - prev) <= tol * max(1.0, abs(val)):
            if abs(val.imag) > 1e-9 * max(1.0, abs(val)):
                raise QuadratureDiverged(f"imaginary residue {val.imag:.2e} in a probability")
            return min(max(pref * val.real, 0.0), 1.0)
        prev = val
        M *= 2
    raise QuadratureDiverged(f"transition quadrature not settled at {max_nodes} nodes")


def transition_probability_infinite(
    p: float,
    y: Configuration,
    x: Configuration,
    t: int,
    tol: float = 1e-12,
    start_nodes: int = 64,
    max_nodes: int = 4096,
) -> float:
    """Transition probability on the infinite lattice.

    Entries are single contour integrals around {0, -1} (the pole at -1/p
    stays outside); the surrounding determinant is N x N.
    """
    if y.mode != "infinite" or x.mode != "infinite":
        raise ValidationError("infinite-mode configurations required")
    N = y.n
    if x.n != N:
        raise ValidationError("configurations must have equal particle counts")
    center = -0.5
    R = 0.5 + 0.45 * min(1.0, 1.0 / p - 1.0)
    i = np.arange(1, N + 1)
    e1 = i[None, :] - i[:, None]
    xs = np.asarray(x.positions, dtype=np.int64)[::-1]
    ys = np.asarray(y.positions, dtype=np.int64)[::-1]
    e2 = -xs[:, None] + ys[None, :] + i[:, None] - i[None, :] - 1
    e3 = t + i[:, None] - i[None, :]
    prev = None
    M = start_nodes
    while M <= max_nodes:
        w = center + R * np.exp(2j * np.pi * np.arange(M) / M)
        dw = w - center  # node weight for dw/(2 pi i), averaged below
        F = w[None, None, :] ** e1[:, :, None] * (1.0 + w[None, None, :]) ** e2[:, :, None] \
            * (1.0 + p * w[None, None, :]) ** e3[:, :, None]
        A = np.mean(F * dw[None, None, :], axis=2)
        val = complex(np.linalg.det(A))
        if prev is not None and abs(val - prev) <= tol * max(1.0, abs(val)):
            pref = 1.0
            for idx in range(1, N):
                if x.positions[idx - 1] - x.positions[idx] == 1:
                    pref *= 1.0 - p
            if abs(val.imag) > 1e-9 * max(1.0, abs(val)):
                raise QuadratureDiverged("imaginary residue in a probability")
            return min(max(pref * val.real, 0.0), 1.0)
        prev = val
        M *= 2
    raise QuadratureDiverged("infinite transition quadrature did not settle")


# ---------------------------------------------------------------------------
# the two factors of the multi-point integrand


def _log_F(w: np.ndarray, kat: tuple, p: float) -> np.ndarray:
    """log of the observation weight w^k (1+w)^(-a-k) (1+pw)^(t-k)."""
    k, a, t = kat
    if k == 0 and a == 0 and t == 0:
        return np.zeros_like(w, dtype=complex)
    return k * np.log(w) - (a + k) * np.log(1.0 + w) + (t - k) * np.log(1.0 + p * w)


class _Node:
    """Per-(circle, node) precomputations for one classified spectrum."""

    def __init__(self, machine: "_Machine", ell: int, spec: BetheSpectrum):
        params, p = machine.params, machine.p
        L, N = params.L, params.N
        self.spec = spec
        self.ell = ell
        u, v = spec.left, spec.right
        self.u, self.v = u, v
        self.slog_mu = complex(np.sum(np.log(-u)))
        self.slog_v1 = complex(np.sum(np.log(v + 1.0)))
        self.slog_pv = complex(np.sum(np.log(1.0 + p * v)))
        self.self_delta = complex(np.sum(np.log(v[:, None] - u[None, :])))
        self.logH_left = np.sum(np.log(u[:, None] - v[None, :]), axis=1) - N * np.log(u)
        self.logH_right = np.sum(np.log(v[:, None] - u[None, :]), axis=1) - (L - N) * np.log(1.0 + v)
        self.J_left = root_weight(params, u)
        self.J_right = root_weight(params, v)
        lf_u = [_log_F(u, kat, p) for kat in machine.epar]
        lf_v = [_log_F(v, kat, p) for kat in machine.epar]
        self.sigma_left = lf_u[ell] - lf_u[ell - 1]
        self.sigma_right = lf_v[ell - 1] - lf_v[ell]
        if ell == 1:
            # The Toeplitz-to-Fredholm rewriting attaches one extra (1 + p w)
            # to the first observation weight; without it the determinant
            # evaluates the event one time step early (pinned against the
            # exact forward oracle).
            self.sigma_left = self.sigma_left + np.log(1.0 + p * u)
            self.sigma_right = self.sigma_right - np.log(1.0 + p * v)
        self.logE = [0.0 + 0.0j]
        for k, a, t in machine.epar[1:]:
            self.logE.append(-k * self.slog_mu - (a + k) * self.slog_v1 + (t - k) * self.slog_pv)
        self.energy = None
        self.chi = None
        if ell == 1:
            if machine.ic == "step":
                self.energy = 1.0 + 0.0j
                self.chi = np.ones((N, L - N), dtype=complex)
            elif machine.ic == "flat":
                self.energy = flat_energy(params, spec)
                self.chi = flat_characteristic_matrix(params, spec)
            else:
                self.energy = global_energy(machine.y, spec, p)
                scale = max(abs(self.energy), 0.0)
                if abs(self.energy) < 1e-12:
                    raise EnergyVanishes(f"energy {self.energy} vanished at zL={spec.zL}")
                self.chi = characteristic_matrix(machine.y, spec, p)

    def pts(self, side: str) -> np.ndarray:
        return self.u if side == "L" else self.v


class _Machine:
    """Shared caches for evaluating the integrand at many node tuples."""

    def __init__(self, params: ModelParams, y: Configuration | None, obs: ObservationSet, ic: str):
        self.params = params
        self.p = params.p
        self.y = y
        self.obs = obs
        self.m = obs.m
        self.epar = [(0, 0, 0)] + [(pt.k, pt.a, pt.t) for pt in obs.points]
        self.ic = ic
        self._nodes: dict = {}
        self._crossH: dict = {}
        self._crossD: dict = {}

    def node(self, ell: int, spec: BetheSpectrum) -> _Node:
        key = (ell, id(spec))
        nd = self._nodes.get(key)
        if nd is None:
            nd = _Node(self, ell, spec)
            self._nodes[key] = nd
        return nd

    def cross_H(self, nd_pts: _Node, side: str, nd_H: _Node | None) -> np.ndarray:
        """log H with the spectrum of nd_H evaluated at nd_pts' side points."""
        pts = nd_pts.pts(side)
        if nd_H is None:
            return np.zeros(len(pts))
        key = (id(nd_pts.spec), side, id(nd_H.spec))
        val = self._crossH.get(key)
        if val is None:
            L, N = self.params.L, self.params.N
            if side == "L":
                val = np.sum(np.log(pts[:, None] - nd_H.v[None, :]), axis=1) - N * np.log(pts)
            else:
                val = np.sum(np.log(pts[:, None] - nd_H.u[None, :]), axis=1) - (L - N) * np.log(1.0 + pts)
            self._crossH[key] = val
        return val

    def cross_delta(self, nd_a: _Node, nd_b: _Node) -> complex:
        """Sum of log(v_a - u_b) over right roots of a and left roots of b."""
        key = (id(nd_a.spec), id(nd_b.spec))
        val = self._crossD.get(key)
        if val is None:
            val = complex(np.sum(np.log(nd_a.v[:, None] - nd_b.u[None, :])))
            self._crossD[key] = val
        return val

    # -- scalar prefactor ---------------------------------------------------

    def log_prefactor(self, nodes: list) -> complex:
        L, N = self.params.L, self.params.N
        m = self.m
        zs = [nd.spec.zL for nd in nodes]
        lc = 0.0 + 0.0j
        for ell in range(1, m + 1):
            nd = nodes[ell - 1]
            lc += nd.logE[ell] - nd.logE[ell - 1]
            lc += N * nd.slog_mu + (L - N) * nd.slog_v1 - nd.self_delta
        for ell in range(2, m + 1):
            nd, ndm = nodes[ell - 1], nodes[ell - 2]
            lc += np.log(zs[ell - 2] / (zs[ell - 2] - zs[ell - 1]))
            lc += self.cross_delta(nd, ndm) - N * ndm.slog_mu - (L - N) * nd.slog_v1
        e1 = nodes[0].energy
        if abs(e1) < 1e-280:
            raise EnergyVanishes("energy underflowed at z1")
        return lc + np.log(e1)

    # -- Fredholm factor ----------------------------------------------------

    def fredholm_matrices(self, nodes: list) -> tuple:
        m = self.m
        zs = [0.0] + [nd.spec.zL for nd in nodes] + [0.0]  # 1-based, with z_0 = z_{m+1} = 0

        def side1(i):
            return "L" if i % 2 == 1 else "R"

        def side2(j):
            return "R" if j % 2 == 1 else "L"

        sizes1 = [len(nodes[i - 1].pts(side1(i))) for i in range(1, m + 1)]
        sizes2 = [len(nodes[j - 1].pts(side2(j))) for j in range(1, m + 1)]
        off1 = np.concatenate([[0], np.cumsum(sizes1)])
        off2 = np.concatenate([[0], np.cumsum(sizes2)])
        M1 = np.zeros((off1[-1], off2[-1]), dtype=complex)
        M2 = np.zeros((off2[-1], off1[-1]), dtype=complex)

        def nd_of(idx):
            return nodes[idx - 1] if 1 <= idx <= m else None

        def q_ratio(num_idx, den_idx):
            if num_idx < 1 or num_idx > m:
                return 1.0 + 0.0j
            return 1.0 - zs[num_idx] / zs[den_idx]

        for i in range(1, m + 1):
            ndi = nodes[i - 1]
            s1 = side1(i)
            w = ndi.pts(s1)
            sig_w = ndi.sigma_left if s1 == "L" else ndi.sigma_right
            J_w = ndi.J_left if s1 == "L" else ndi.J_right
            H_own_w = ndi.logH_left if s1 == "L" else ndi.logH_right
            a = i + 1 if i % 2 == 1 else i - 1        # H index on the w side in K1
            bp = i - 1 if i % 2 == 1 else i + 1       # H index on the w side in K2, and Q2's index
            Ha_w = self.cross_H(ndi, s1, nd_of(a))
            Hbp_w = self.cross_H(ndi, s1, nd_of(bp))
            q2 = q_ratio(bp, i)
            for j in range(1, m + 1):
                in_k1 = (j == i) or (i % 2 == 1 and j == i + 1) or (i % 2 == 0 and j == i - 1)
                in_k2 = (i == j) or (j % 2 == 1 and i == j - 1) or (j % 2 == 0 and i == j + 1)
                if not (in_k1 or in_k2):
                    continue
                ndj = nodes[j - 1]
                s2 = side2(j)
                wp = ndj.pts(s2)
                sig_wp = ndj.sigma_left if s2 == "L" else ndj.sigma_right
                diff = w[:, None] - wp[None, :]
                if np.min(np.abs(diff)) < _SING_TOL:
                    raise SingularAssembly("kernel points collide")
                if in_k1:
                    b = j + 1 if j % 2 == 1 else j - 1
                    Hb_wp = self.cross_H(ndj, s2, nd_of(b))
                    q1 = q_ratio(b, j)
                    expo = 0.5 * (sig_w[:, None] + sig_wp[None, :]) \
                        + 2.0 * H_own_w[:, None] - Ha_w[:, None] - Hb_wp[None, :]
                    blk = J_w[:, None] * np.exp(expo) / diff * q1
                    M1[off1[i - 1]:off1[i], off2[j - 1]:off2[j]] = blk
                if in_k2:
                    J_wp = ndj.J_left if s2 == "L" else ndj.J_right
                    H_own_wp = ndj.logH_left if s2 == "L" else ndj.logH_right
                    ap = j - 1 if j % 2 == 1 else j + 1
                    Hap_wp = self.cross_H(ndj, s2, nd_of(ap))
                    expo = 0.5 * (sig_wp[:, None] + sig_w[None, :]) \
                        + 2.0 * H_own_wp[:, None] - Hap_wp[:, None] - Hbp_w[None, :]
                    blk = J_wp[:, None] * np.exp(expo) / (-diff.T) * q2
                    if i == 1 and j == 1:
                        blk = blk * nodes[0].chi
                    M2[off2[j - 1]:off2[j], off1[i - 1]:off1[i]] = blk
        return M1, M2

    def fredholm(self, nodes: list) -> complex:
        M1, M2 = self.fredholm_matrices(nodes)
        n2 = M2.shape[0]
        return complex(np.linalg.det(np.eye(n2) - M2 @ M1))

    def integrand(self, nodes: list) -> complex:
        return cmath.exp(self.log_prefactor(nodes)) * self.fredholm(nodes)


def _check_nested(spectra: list, params: ModelParams):
    mods = [abs(s.zL) for s in spectra]
    if any(a <= b for a, b in zip(mods[1:], mods[:-1])):
        raise ValidationError("|zL| values must be strictly decreasing")
    if mods[0] >= params.r_c ** params.L:
        raise ValidationError("outermost |zL| must stay below the critical radius power")


def prefactor(params: ModelParams, y: Configuration | None, spectra: list, obs: ObservationSet, ic: str = "general") -> complex:
    """Scalar factor of the multi-point integrand at one tuple of spectra."""
    _check_nested(spectra, params)
    mach = _Machine(params, y, obs, ic)
    nodes = [mach.node(ell + 1, s) for ell, s in enumerate(spectra)]
    return cmath.exp(mach.log_prefactor(nodes))


def fredholm_factor(params: ModelParams, y: Configuration | None, spectra: list, obs: ObservationSet, ic: str = "general") -> complex:
    """Discrete Fredholm determinant of the multi-point integrand."""
    _check_nested(spectra, params)
    mach = _Machine(params, y, obs, ic)
    nodes = [mach.node(ell + 1, s) for ell, s in enumerate(spectra)]
    return mach.fredholm(nodes)


def fredholm_matrices(params: ModelParams, y: Configuration | None, spectra: list, obs: ObservationSet, ic: str = "general") -> tuple:
    """Kernel matrices (for structural tests)."""
    mach = _Machine(params, y, obs, ic)
    nodes = [mach.node(ell + 1, s) for ell, s in enumerate(spectra)]
    return mach.fredholm_matrices(nodes)


def toeplitz_factor(params: ModelParams, y: Configuration, spectra: list, obs: ObservationSet, budget: float = 1e7) -> complex:
    """Chain-determinant form of the same integrand (general initial data).

    The multiple root sums factor through matrix products along the chain of
    root sets, so the cost is m L^2 rather than L^m; the documented budget
    guard on L^m is kept for compatibility with the stated contract.
    """
    L, N, p = params.L, params.N, params.p
    m = obs.m
    if L ** m > budget:
        raise BudgetExceeded(f"L^m = {L ** m} exceeds budget {budget:.0e}")
    _check_nested(spectra, params)
    epar = [(0, 0, 0)] + [(pt.k, pt.a, pt.t) for pt in obs.points]
    zs = [s.zL for s in spectra]

    def G(ell, w):
        return root_weight(params, w) * np.exp(_log_F(w, epar[ell], p) - _log_F(w, epar[ell - 1], p))

    w1 = spectra[0].roots
    i = np.arange(1, N + 1)
    ys = np.asarray(y.positions, dtype=np.int64)[::-1]  # y_{N-i+1}
    U = w1[:, None] ** (i[None, :] - 1 - N) * (1.0 + p * w1[:, None]) ** (N - i[None, :] + 1) \
        * (1.0 + w1[:, None]) ** (ys[None, :] + N - i[None, :] + 1) * G(1, w1)[:, None]
    A = U
    for ell in range(2, m + 1):
        wl = spectra[ell - 1].roots
        wprev = spectra[ell - 2].roots
        C = G(ell, wl)[None, :] / (wl[None, :] - wprev[:, None])
        A = C.T @ A  # accumulate transposed chain: rows follow w_ell
    wm = spectra[m - 1].roots
    V = wm[:, None] ** (-np.arange(1, N + 1)[None, :])
    E = A.T @ V
    k = [pt.k for pt in obs.points]
    C_toe = (-1.0) ** ((N - k[-1]) * (N - 1)) * zs[0] ** (N - k[0])
    for ell in range(2, m + 1):
        C_toe *= zs[ell - 1] ** (k[ell - 2] - k[ell - 1]) * (zs[ell - 1] / zs[ell - 2] - 1.0) ** (N - 1)
    return complex(C_toe * np.linalg.det(E))


# ---------------------------------------------------------------------------
# batched tensor engine
#
# Every kernel block couples at most one adjacent pair of circles, so blocks
# can be precomputed for all node pairs, gathered per tuple, and the final
# determinants evaluated as one stacked LAPACK call.


def _side1(i: int) -> str:
    return "L" if i % 2 == 1 else "R"


def _side2(j: int) -> str:
    return "R" if j % 2 == 1 else "L"


class _TensorEngine:
    def __init__(self, mach: _Machine, circles: list):
        self.mach = mach
        self.circles = circles  # list (per level) of per-node _Node lists
        self.m = mach.m
        self.params = mach.params
        self._crossH: dict = {}
        L, N = self.params.L, self.params.N
        m = self.m
        self.M = [len(c) for c in circles]
        self.z = [np.array([nd.spec.zL for nd in c]) for c in circles]
        # stacked per-node data
        self.pts = {}
        self.sig = {}
        self.J = {}
        self.Hown = {}
        for l in range(m):
            c = circles[l]
            for side in ("L", "R"):
                self.pts[(l + 1, side)] = np.stack([nd.pts(side) for nd in c])
                self.sig[(l + 1, side)] = np.stack(
                    [nd.sigma_left if side == "L" else nd.sigma_right for nd in c])
                self.J[(l + 1, side)] = np.stack(
                    [nd.J_left if side == "L" else nd.J_right for nd in c])
                self.Hown[(l + 1, side)] = np.stack(
                    [nd.logH_left if side == "L" else nd.logH_right for nd in c])
        self.chi = np.stack([nd.chi for nd in circles[0]])
        # additive prefactor pieces
        self.cvec = []
        for l in range(m):
            ell = l + 1
            self.cvec.append(np.array([
                nd.logE[ell] - nd.logE[ell - 1] + N * nd.slog_mu + (L - N) * nd.slog_v1 - nd.self_delta
                for nd in circles[l]]))
        self.cvec[0] = self.cvec[0] + np.array([np.log(nd.energy) for nd in circles[0]])
        self.pairC = []
        for l in range(1, m):
            za, zb = self.z[l], self.z[l - 1]  # levels ell = l+1 and ell
            dvu = np.empty((self.M[l], self.M[l - 1]), dtype=complex)
            for ia, nda in enumerate(circles[l]):
                for ib, ndb in enumerate(circles[l - 1]):
                    dvu[ia, ib] = mach.cross_delta(nda, ndb)
            smu = np.array([nd.slog_mu for nd in circles[l - 1]])
            sv1 = np.array([nd.slog_v1 for nd in circles[l]])
            self.pairC.append(np.log(zb[None, :] / (zb[None, :] - za[:, None]))
                              + dvu - N * smu[None, :] - (L - N) * sv1[:, None])

    def cross_H_stack(self, ell_pts: int, side: str, ell_H: int):
        """(M_pts, M_H, npts) array of log H values; zeros when out of range."""
        if not (1 <= ell_H <= self.m):
            return None
        key = (ell_pts, side, ell_H)
        val = self._crossH.get(key)
        if val is None:
            L, N = self.params.L, self.params.N
            W = self.pts[(ell_pts, side)]
            if side == "L":
                R = np.stack([nd.v for nd in self.circles[ell_H - 1]])
                val = np.log(W[:, None, :, None] - R[None, :, None, :]).sum(-1) \
                    - N * np.log(W)[:, None, :]
            else:
                R = np.stack([nd.u for nd in self.circles[ell_H - 1]])
                val = np.log(W[:, None, :, None] - R[None, :, None, :]).sum(-1) \
                    - (L - N) * np.log(1.0 + W)[:, None, :]
            self._crossH[key] = val
        return val

    def _q_ratio_stack(self, num: int, den: int, dep: tuple):
        """1 - z_num / z_den broadcast over the dep axes (plus r, c axes)."""
        shape = [1] * (len(dep) + 2)
        if not (1 <= num <= self.m):
            return np.ones(shape, dtype=complex)
        zn, zd = self.z[num - 1], self.z[den - 1]
        an, ad = dep.index(num), dep.index(den)
        sn, sd = list(shape), list(shape)
        sn[an] = self.M[num - 1]
        sd[ad] = self.M[den - 1]
        return 1.0 - zn.reshape(sn) / zd.reshape(sd)

    def _per_node(self, arr, own: int, dep: tuple, pos: int):
        """Reshape an (M_own, npts) array onto (dep..., r, c) with pts on axis pos."""
        shape = [1] * (len(dep) + 2)
        shape[dep.index(own)] = arr.shape[0]
        shape[len(dep) + pos] = arr.shape[1]
        return arr.reshape(shape)

    def _cross(self, arr, own: int, other: int, dep: tuple, pos: int):
        """Reshape an (M_own, M_other, npts) array onto (dep..., r, c)."""
        out = np.moveaxis(arr, (0, 1), (dep.index(own), dep.index(other)))
        head = list(out.shape[: len(dep)])
        npts = out.shape[len(dep)]
        shape = head + ([npts, 1] if pos == 0 else [1, npts])
        return np.ascontiguousarray(out).reshape(shape)

    def k1_block(self, i: int, j: int):
        m = self.m
        s1, s2 = _side1(i), _side2(j)
        a = i + 1 if i % 2 == 1 else i - 1
        b = j + 1 if j % 2 == 1 else j - 1
        dep = tuple(sorted({d for d in (i, j, a, b) if 1 <= d <= m}))
        W = self.pts[(i, s1)]
        WP = self.pts[(j, s2)]
        expo = self._per_node(0.5 * self.sig[(i, s1)] + 2.0 * self.Hown[(i, s1)], i, dep, 0) \
            + self._per_node(0.5 * self.sig[(j, s2)], j, dep, 1)
        Ha = self.cross_H_stack(i, s1, a)
        if Ha is not None:
            expo = expo - self._cross(Ha, i, a, dep, 0)
        Hb = self.cross_H_stack(j, s2, b)
        if Hb is not None:
            expo = expo - self._cross(Hb, j, b, dep, 1)
        diff = self._per_node(W, i, dep, 0) - self._per_node(WP, j, dep, 1)
        if np.min(np.abs(diff)) < _SING_TOL:
            raise SingularAssembly("kernel points collide")
        q1 = self._q_ratio_stack(b, j, dep)
        blk = self._per_node(self.J[(i, s1)], i, dep, 0) * np.exp(expo) / diff * q1
        return np.broadcast_to(blk, tuple(self.M[d - 1] for d in dep) + (W.shape[1], WP.shape[1])), dep

    def k2_block(self, j: int, i: int):
        m = self.m
        s1, s2 = _side1(i), _side2(j)
        ap = j - 1 if j % 2 == 1 else j + 1
        bp = i - 1 if i % 2 == 1 else i + 1
        dep = tuple(sorted({d for d in (i, j, ap, bp) if 1 <= d <= m}))
        WP = self.pts[(j, s2)]
        W = self.pts[(i, s1)]
        expo = self._per_node(0.5 * self.sig[(j, s2)] + 2.0 * self.Hown[(j, s2)], j, dep, 0) \
            + self._per_node(0.5 * self.sig[(i, s1)], i, dep, 1)
        Hap = self.cross_H_stack(j, s2, ap)
        if Hap is not None:
            expo = expo - self._cross(Hap, j, ap, dep, 0)
        Hbp = self.cross_H_stack(i, s1, bp)
        if Hbp is not None:
            expo = expo - self._cross(Hbp, i, bp, dep, 1)
        diff = self._per_node(WP, j, dep, 0) - self._per_node(W, i, dep, 1)
        if np.min(np.abs(diff)) < _SING_TOL:
            raise SingularAssembly("kernel points collide")
        q2 = self._q_ratio_stack(bp, i, dep)
        blk = self._per_node(self.J[(j, s2)], j, dep, 0) * np.exp(expo) / diff * q2
        if i == 1 and j == 1:
            blk = blk * self.chi  # dep is (1,) here: the corner block sees no other circle
        return np.broadcast_to(blk, tuple(self.M[d - 1] for d in dep) + (WP.shape[1], W.shape[1])), dep

    def value(self, chunk: int = 32768) -> complex:
        m = self.m
        sizes1 = [self.pts[(i, _side1(i))].shape[1] for i in range(1, m + 1)]
        sizes2 = [self.pts[(j, _side2(j))].shape[1] for j in range(1, m + 1)]
        off1 = np.concatenate([[0], np.cumsum(sizes1)])
        off2 = np.concatenate([[0], np.cumsum(sizes2)])
        n1, n2 = off1[-1], off2[-1]
        blocks1, blocks2 = {}, {}
        for i in range(1, m + 1):
            for j in range(1, m + 1):
                if (j == i) or (i % 2 == 1 and j == i + 1) or (i % 2 == 0 and j == i - 1):
                    blocks1[(i, j)] = self.k1_block(i, j)
                if (i == j) or (j % 2 == 1 and i == j - 1) or (j % 2 == 0 and i == j + 1):
                    blocks2[(j, i)] = self.k2_block(j, i)
        T = int(np.prod(self.M))
        total = 0.0 + 0.0j
        eye = np.eye(n2, dtype=complex)
        M1 = np.zeros((min(chunk, T), n1, n2), dtype=complex)
        M2 = np.zeros((min(chunk, T), n2, n1), dtype=complex)
        for start in range(0, T, chunk):
            idx_flat = np.arange(start, min(start + chunk, T))
            IDX = np.stack(np.unravel_index(idx_flat, tuple(self.M)), axis=1)
            B = len(idx_flat)
            logC = np.zeros(B, dtype=complex)
            for l in range(m):
                logC += self.cvec[l][IDX[:, l]]
            for l in range(1, m):
                logC += self.pairC[l - 1][IDX[:, l], IDX[:, l - 1]]
            m1, m2 = M1[:B], M2[:B]
            for (i, j), (arr, dep) in blocks1.items():
                m1[:, off1[i - 1]:off1[i], off2[j - 1]:off2[j]] = arr[tuple(IDX[:, d - 1] for d in dep)]
            for (j, i), (arr, dep) in blocks2.items():
                m2[:, off2[j - 1]:off2[j], off1[i - 1]:off1[i]] = arr[tuple(IDX[:, d - 1] for d in dep)]
            K = eye[None, :, :] - np.einsum("brt,bts->brs", m2, m1)
            dets = np.linalg.det(K)
            total += np.sum(np.exp(logC) * dets)
        return total / T


# ---------------------------------------------------------------------------
# the multi-point joint distribution


@dataclass
class QuadratureSpec:
    """Node schedule for the nested-circle tensor quadrature (in zeta)."""

    nodes: int = 8
    radii: tuple | None = None
    tol: float = 1e-9
    max_nodes: int = 512

    def radii_for(self, params: ModelParams, m: int) -> tuple:
        if self.radii is not None:
            if len(self.radii) != m:
                raise ValidationError("need one radius per observation point")
            return tuple(self.radii)
        base = params.r_c ** params.L
        return tuple(base * 0.75 * 0.45 ** ell for ell in range(m))


def infer_ic(params: ModelParams, y: Configuration) -> str:
    if y.positions == tuple(-i for i in range(1, params.N + 1)):
        return "step"
    d, r = divmod(params.L, params.N)
    if r == 0 and y.positions == tuple(-i * d for i in range(1, params.N + 1)):
        return "flat"
    return "general"


def multipoint_cdf(
    params: ModelParams,
    y: Configuration,
    obs: ObservationSet,
    quad: QuadratureSpec | None = None,
    ic: str | None = None,
    return_ladder: bool = False,
):
    """P(every x_{k_i}(t_i) >= a_i) by tensor trapezoid quadrature in zeta.

    Observation indices are wrapped into 1..N first (x_{k+N} = x_k - L), node
    counts double per circle until the value settles, and a vanishing energy
    at a node triggers one half-step grid rotation before giving up.
    """
    y.validate(params)
    quad = quad or QuadratureSpec()
    obs = obs.reduced(params, "periodic", params.N)
    m = obs.m
    radii = quad.radii_for(params, m)
    if ic is None:
        ic = infer_ic(params, y)

    ladder = []
    history: list = []
    M = quad.nodes
    phase = 0.0
    while M <= quad.max_nodes:
        try:
            mach = _Machine(params, y, obs, ic)
            circles = [_circle_spectra(params, r, M, classify=True, phase=phase) for r in radii]
            node_lists = [[mach.node(ell + 1, s) for s in circles[ell]] for ell in range(m)]
            if m == 1:
                vals = [mach.integrand([nd]) for nd in node_lists[0]]
                val = complex(np.mean(vals))
            else:
                val = complex(_TensorEngine(mach, node_lists).value())
        except (EnergyVanishes, RootNearBoundary):
            if phase == 0.0:
                phase = 0.5
                continue
            raise
        ladder.append((M, val.real))
        history.append(val)
        scale = max(abs(val), 1e-2)
        done = False
        if len(history) >= 2:
            d2 = abs(history[-1] - history[-2])
            if d2 <= quad.tol * scale:
                done = True
            elif len(history) >= 3:
                # trapezoid error decays geometrically for this analytic
                # integrand; estimate the next-level error from the measured
                # contraction of the two latest doubling differences
                d1 = abs(history[-2] - history[-3])
                if d1 > 0 and d2 * (d2 / d1) <= quad.tol * scale:
                    done = True
        if done:
            if abs(val.imag) > 1e-8 * max(1.0, abs(val)):
                raise QuadratureDiverged(f"imaginary residue {val.imag:.2e}")
            out = min(max(val.real, 0.0), 1.0)
            return (out, ladder) if return_ladder else out
        M *= 2
    raise QuadratureDiverged(f"multi-point quadrature not settled at {quad.max_nodes} nodes")
