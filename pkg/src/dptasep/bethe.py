"""Spectral polynomial of the ring dynamics and initial-condition functionals.

For a spectral parameter given through zL = z^L, the polynomial

    q(w) = w^N (1 + w)^(L-N) - zL (1 + p w)^N

has L roots.  For |zL| < r_c^L they split into a left group (Re w < w_c,
L - N roots near -1) and a right group (Re w > w_c, N roots near 0).  The
solver evaluates q in product form (no monomial expansion, which would lose
all precision at large L), runs Aberth-Ehrlich simultaneous iteration seeded
by a continuation ladder in |zL|, Newton-polishes, and escalates individual
roots to extended precision if the double-precision residual is not tight.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import mpmath as mp
import numpy as np

from .errors import (
    ClassificationCountMismatch,
    EnergyVanishes,
    IllConditioned,
    NotFlatCompatible,
    RootNearBoundary,
    ValidationError,
)
from .model import Configuration, ModelParams

_RESIDUAL_TOL = 1e-10
_GUARD_BAND = 1e-8


def critical_constants(L: int, N: int, p: float) -> tuple:
    """(rho, nu, w_c, r_c) for the given ring size, particle count and hop rate."""
    if not (0 < N < L and 0.0 < p < 1.0):
        raise ValidationError("need 0 < N < L and 0 < p < 1")
    rho = N / L
    nu = math.sqrt(1.0 - 4.0 * p * rho * (1.0 - rho))
    w_c = -2.0 * rho / (1.0 + nu)
    r_c = (-w_c / (1.0 + p * w_c)) ** rho * (1.0 + w_c) ** (1.0 - rho)
    return rho, nu, w_c, r_c


@dataclass(frozen=True)
class BetheSpectrum:
    """All L roots for one zL value, split into left/right groups."""

    zL: complex
    roots: np.ndarray
    left: np.ndarray
    right: np.ndarray
    max_residual: float
    params: ModelParams


def _q_and_dq(w: np.ndarray, L: int, N: int, p: float, zL: complex):
    """q(w) and q'(w) in product form."""
    a = w ** N * (1.0 + w) ** (L - N)
    b = zL * (1.0 + p * w) ** N
    q = a - b
    dq = a * (N / w + (L - N) / (1.0 + w)) - b * (N * p / (1.0 + p * w))
    return q, dq


def _rel_residual(w: np.ndarray, L: int, N: int, p: float, zL: complex) -> np.ndarray:
    a = np.abs(w) ** N * np.abs(1.0 + w) ** (L - N)
    b = abs(zL) * np.abs(1.0 + p * w) ** N
    q, _ = _q_and_dq(w, L, N, p, zL)
    return np.abs(q) / (a + b + 1e-300)


def _aberth(w: np.ndarray, L: int, N: int, p: float, zL: complex, iters: int = 120) -> np.ndarray:
    w = w.astype(complex).copy()
    for _ in range(iters):
        q, dq = _q_and_dq(w, L, N, p, zL)
        newton = q / dq
        diff = w[:, None] - w[None, :]
        np.fill_diagonal(diff, 1.0)
        rep = (1.0 / diff).sum(axis=1) - 1.0  # remove the diagonal's 1/1 term
        denom = 1.0 - newton * rep
        step = newton / denom
        w -= step
        if np.max(np.abs(step)) < 1e-15 * (1.0 + np.max(np.abs(w))):
            break
    return w


def _seed_small(L: int, N: int, p: float, zL: complex) -> np.ndarray:
    """Seeds for small |zL|: N points near 0, L - N points near -1."""
    right = zL ** (1.0 / N) * np.exp(2j * np.pi * np.arange(N) / N)
    rad = (zL * (1.0 - p) ** N * (-1.0) ** N) ** (1.0 / (L - N))
    left = -1.0 + rad * np.exp(2j * np.pi * (np.arange(L - N) + 0.5) / (L - N))
    return np.concatenate([right, left])


def _seed_large(L: int, N: int, p: float, zL: complex) -> np.ndarray:
    """Seeds for large |zL|: L - N points far out, N points near -1/p."""
    far = (zL * p ** N) ** (1.0 / (L - N)) * np.exp(2j * np.pi * np.arange(L - N) / (L - N))
    c = (-1.0 / p) ** N * (1.0 - 1.0 / p) ** (L - N) / zL
    near = (-1.0 + c ** (1.0 / N) * np.exp(2j * np.pi * (np.arange(N) + 0.5) / N)) / p
    return np.concatenate([far, near])


def _solve_roots(L: int, N: int, p: float, zL: complex, seeds: np.ndarray | None) -> np.ndarray:
    """All roots of q; continuation ladder in |zL| when no seeds are supplied."""
    if seeds is not None:
        return _aberth(np.asarray(seeds), L, N, p, zL)
    target = abs(zL)
    phase = zL / target
    log_rc_L = L * math.log(critical_constants(L, N, p)[3])
    if math.log(target) < log_rc_L:
        anchor = min(target, math.exp(N * math.log(0.04)), math.exp((L - N) * math.log(0.04)))
        seed_fn = _seed_small
    else:
        anchor = max(target, math.exp((L - N) * math.log(8.0 * (1.0 + 1.0 / p))))
        seed_fn = _seed_large
    steps = max(1, int(abs(math.log(target) - math.log(anchor)) / 1.5) + 1)
    w = _aberth(seed_fn(L, N, p, phase * anchor), L, N, p, phase * anchor)
    for j in range(1, steps + 1):
        s = phase * math.exp(math.log(anchor) + (math.log(target) - math.log(anchor)) * j / steps)
        w = _aberth(w, L, N, p, s)
    return w


def _polish_mp(w: complex, L: int, N: int, p: float, zL: complex) -> complex:
    """A few Newton steps at 40 digits for roots the double pass left loose."""
    with mp.workdps(40):
        x = mp.mpc(w)
        z = mp.mpc(zL)
        for _ in range(6):
            a = x ** N * (1 + x) ** (L - N)
            b = z * (1 + p * x) ** N
            q = a - b
            dq = a * (N / x + (L - N) / (1 + x)) - b * (N * p / (1 + p * x))
            if dq == 0:
                break
            x -= q / dq
        return complex(x)


def solve_spectrum(
    params: ModelParams,
    zL: complex,
    seeds: np.ndarray | None = None,
    classify: bool = True,
    guard: float = _GUARD_BAND,
) -> BetheSpectrum:
    """Solve and classify all roots for one zL.

    With ``classify=True`` (the default) the roots must split cleanly into
    L - N left and N right ones; a root within ``guard`` of the separating
    line raises RootNearBoundary, a wrong split ClassificationCountMismatch.
    """
    L, N, p = params.L, params.N, params.p
    zL = complex(zL)
    if zL == 0:
        roots = np.concatenate([np.zeros(N, complex), -np.ones(L - N, complex)])
        return BetheSpectrum(zL, roots, -np.ones(L - N, complex), np.zeros(N, complex), 0.0, params)

    w = _solve_roots(L, N, p, zL, seeds)
    # Newton polish in double precision
    for _ in range(3):
        q, dq = _q_and_dq(w, L, N, p, zL)
        w = w - q / dq
    res = _rel_residual(w, L, N, p, zL)
    bad = np.nonzero(res > 1e-12)[0]
    if bad.size:
        for i in bad:
            w[i] = _polish_mp(w[i], L, N, p, zL)
        res = _rel_residual(w, L, N, p, zL)
    if res.max() > _RESIDUAL_TOL:
        raise ValidationError(f"root residual {res.max():.2e} exceeds {_RESIDUAL_TOL}")

    order = np.lexsort((w.imag, w.real))
    w = w[order]
    if not classify:
        return BetheSpectrum(zL, w, np.array([], complex), np.array([], complex), float(res.max()), params)

    w_c = params.w_c
    dist = w.real - w_c
    if np.min(np.abs(dist)) < guard:
        raise RootNearBoundary(f"root within {guard} of the classification line; perturb zL")
    left = w[dist < 0]
    right = w[dist > 0]
    if len(left) != L - N or len(right) != N:
        raise ClassificationCountMismatch(
            f"split ({len(left)}, {len(right)}) != ({L - N}, {N}); |zL| may exceed the critical radius"
        )
    return BetheSpectrum(zL, w, left, right, float(res.max()), params)


# ---------------------------------------------------------------------------
# initial-condition functionals


def partition_from_config(y: Configuration) -> np.ndarray:
    """Weakly decreasing integer vector (y_1 + 1, y_2 + 2, ..., y_N + N)."""
    pos = np.asarray(y.positions, dtype=np.int64)
    lam = pos + np.arange(1, len(pos) + 1)
    if np.any(np.diff(lam) > 0):
        raise ValidationError("partition entries must be weakly decreasing")
    return lam


def symmetric_function(ws, lam, p: float, cond_limit: float = 1e12) -> complex:
    """det[w_j^(N-i) (p w_j + 1)^(i-1) (w_j + 1)^lam_i] / det[w_j^(N-i)].

    Columns are rescaled by (1 + w_j)^lam_N before the determinants so that
    large partition entries neither overflow nor underflow; the removed factor
    is restored exactly through the log of the determinant ratio.
    """
    ws = np.asarray(ws, dtype=complex)
    N = len(ws)
    lam = np.asarray(lam, dtype=np.int64)
    if len(lam) != N:
        raise ValidationError("partition length must match the number of parameters")
    i = np.arange(1, N + 1)[:, None]
    vand = ws[None, :] ** (N - i)
    cond = np.linalg.cond(vand)
    if not np.isfinite(cond) or cond > cond_limit:
        raise IllConditioned(f"denominator condition estimate {cond:.2e} exceeds {cond_limit:.0e}")
    shift = int(lam[-1])
    num = vand * (p * ws[None, :] + 1.0) ** (i - 1) * (ws[None, :] + 1.0) ** (lam[:, None] - shift)
    sign_n, logdet_n = np.linalg.slogdet(num)
    sign_d, logdet_d = np.linalg.slogdet(vand)
    if sign_d == 0:
        raise IllConditioned("denominator determinant vanished")
    log_shift = shift * np.sum(np.log(ws + 1.0))
    return sign_n / sign_d * np.exp(logdet_n - logdet_d + log_shift)


def global_energy(y: Configuration, spectrum: BetheSpectrum, p: float) -> complex:
    """Initial-condition energy: the symmetric function on the right roots.

    Identically 1 for the packed (step) initial condition, for any zL.
    """
    lam = partition_from_config(y)
    if np.all(lam == 0):
        return 1.0 + 0.0j
    return symmetric_function(spectrum.right, lam, p)


def characteristic_function(
    y: Configuration,
    spectrum: BetheSpectrum,
    v: complex,
    u: complex,
    p: float,
    energy: complex | None = None,
) -> complex:
    """Ratio of energies after swapping right root v for left root u."""
    lam = partition_from_config(y)
    if np.all(lam == 0):
        return 1.0 + 0.0j
    if energy is None:
        energy = global_energy(y, spectrum, p)
    scale = float(np.mean(np.abs(spectrum.right + 1.0))) ** int(max(abs(lam.max()), abs(lam.min())))
    if abs(energy) < 1e-12 * max(scale, 1e-30):
        raise EnergyVanishes(f"energy {energy} too small for a characteristic ratio")
    right = np.asarray(spectrum.right, dtype=complex)
    idx = int(np.argmin(np.abs(right - v)))
    if abs(right[idx] - v) > 1e-8 * (1.0 + abs(v)):
        raise ValidationError("v is not a right root of this spectrum")
    swapped = right.copy()
    swapped[idx] = u
    return symmetric_function(swapped, lam, p) / energy


def characteristic_matrix(y: Configuration, spectrum: BetheSpectrum, p: float) -> np.ndarray:
    """chi(v, u) for all right roots v (rows) and left roots u (columns)."""
    lam = partition_from_config(y)
    nv, nu = len(spectrum.right), len(spectrum.left)
    if np.all(lam == 0):
        return np.ones((nv, nu), dtype=complex)
    energy = global_energy(y, spectrum, p)
    out = np.empty((nv, nu), dtype=complex)
    for i in range(nv):
        for j in range(nu):
            out[i, j] = characteristic_function(
                y, spectrum, spectrum.right[i], spectrum.left[j], p, energy=energy
            )
    return out


# ---------------------------------------------------------------------------
# closed forms for the evenly spaced (flat) initial condition


def _require_flat(params: ModelParams) -> int:
    d, r = divmod(params.L, params.N)
    if r != 0:
        raise NotFlatCompatible(f"L = {params.L} is not a multiple of N = {params.N}")
    return d


def flat_energy(params: ModelParams, spectrum: BetheSpectrum) -> complex:
    """Product formula for the energy of the flat profile (spacing d = L/N).

    All square roots are principal. The value matches the determinant route
    through global_energy.
    """
    d = _require_flat(params)
    L, N, p = params.L, params.N, params.p
    v = spectrum.right
    u = spectrum.left
    logs = (2.0 - d) * 0.5 * np.sum(np.log(v + 1.0))
    logs -= 0.5 * np.sum(np.log(p * (d - 1) * v ** 2 + d * v + 1.0))
    logs += 0.5 * np.sum(np.log(v[:, None] - u[None, :]))
    logs -= 0.5 * (N * np.sum(np.log(-u)) + (L - N) * np.sum(np.log(v + 1.0)))
    return np.exp(logs)


def flat_pairing_residual(params: ModelParams, u: complex, v: complex) -> float:
    """Relative deviation of g(u) = g(v) with g(w) = w (w+1)^(d-1) / (1 + p w)."""
    d = _require_flat(params)
    p = params.p
    gu = u * (u + 1.0) ** (d - 1) / (1.0 + p * u)
    gv = v * (v + 1.0) ** (d - 1) / (1.0 + p * v)
    return abs(gu - gv) / max(abs(gu), abs(gv), 1e-30)


def flat_characteristic(
    params: ModelParams,
    spectrum: BetheSpectrum,
    v: complex,
    u: complex,
    pair_tol: float = 1e-8,
) -> complex:
    """Closed form for the flat characteristic ratio.

    Nonzero only when the left root u lies in the level set of the right root
    v under g(w) = w (w+1)^(d-1) / (1 + p w); returns 0 otherwise.
    """
    _require_flat(params)
    if flat_pairing_residual(params, u, v) > pair_tol:
        return 0.0 + 0.0j
    L, N, p = params.L, params.N, params.p
    D = N + L * v + p * (L - N) * v ** 2
    inv_J = D / (v * (v + 1.0) * (1.0 + p * v))
    log_qL_v = np.sum(np.log(v - spectrum.left))
    log_qR_u = np.sum(np.log(u - spectrum.right))
    val = (
        inv_J
        * np.exp((L - N) * np.log(v + 1.0) + N * np.log(u) - log_qL_v - log_qR_u)
        * (1.0 + p * v)
        / (1.0 + p * u)
        * (u - v)
    )
    return complex(val)


def flat_characteristic_matrix(params: ModelParams, spectrum: BetheSpectrum) -> np.ndarray:
    out = np.empty((len(spectrum.right), len(spectrum.left)), dtype=complex)
    for i, v in enumerate(spectrum.right):
        for j, u in enumerate(spectrum.left):
            out[i, j] = flat_characteristic(params, spectrum, v, u)
    return out
