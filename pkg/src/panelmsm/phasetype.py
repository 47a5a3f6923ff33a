"""Moment-matched Erlang-Exp phase-type sojourn distributions.

A shape-scale family (Gamma or Weibull) is approximated by the unique
Coxian phase-type distribution of the "Erlang-Exp" form whose first three
moments match the target: a mixture of an Exponential(lam) (probability
1 - p) and an Erlang(n - 1, mu) + Exponential(lam) sum (probability p).
The matching parameters are closed-form functions of the mean and of the
second and third normalised moments n2 = m2/m1^2, n3 = m3/(m1*m2), valid
inside phase-count-dependent feasibility bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm as _sexpm
from scipy.optimize import brentq
from scipy.special import gammaln

from .errors import BoundsError

GAMMA = "gamma"
WEIBULL = "weibull"
FAMILIES = (GAMMA, WEIBULL)

#: Smallest supported Weibull shape.  Below roughly 0.05 the raw moments
#: of the unit-scale Weibull grow so large that the matching formulas lose
#: all precision (measured on this platform: ~4e-9 relative moment error
#: at shape 0.03, overflow to inf at 0.02, Gamma-function overflow below
#: 0.018), so the floor is drawn at 0.05.
WEIBULL_SHAPE_FLOOR = 0.05

#: Phase counts with verified feasibility bounds.
MIN_PHASES, MAX_PHASES = 2, 10

#: Relative tolerance for detecting the degenerate exponential target and
#: the n*(n3 - n2) == n2 special-case branch of the matching solution;
#: near-coincidence falls through to the general branches.
_SPECIAL_CASE_RTOL = 1e-10

#: |shape - 1| below this is treated as exactly exponential.
_EXPONENTIAL_SHAPE_TOL = 1e-9


@dataclass(frozen=True)
class NormalizedMoments:
    """Mean plus second and third normalised moments of a positive variate."""

    m1: float
    n2: float
    n3: float

    def __post_init__(self):
        if not self.m1 > 0:
            raise BoundsError(f"mean must be positive, got {self.m1}")
        if not self.n2 > 1:
            raise BoundsError(f"n2 must exceed 1, got {self.n2}")
        if not self.n3 > self.n2:
            raise BoundsError(f"n3 must exceed n2, got n2={self.n2}, n3={self.n3}")


@dataclass(frozen=True)
class ShapeScaleSpec:
    """A Gamma or Weibull target with its phase-type approximation order."""

    family: str
    shape: float
    scale: float
    nphase: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise BoundsError(f"unknown family {self.family!r}")
        if not self.scale > 0:
            raise BoundsError(f"scale must be positive, got {self.scale}")
        if not self.shape > 0:
            raise BoundsError(f"shape must be positive, got {self.shape}")


@dataclass(frozen=True)
class ErlangExpParams:
    """Mixture parameters: Exp(lam) w.p. 1-p, Erlang(n-1, mu)+Exp(lam) w.p. p."""

    n: int
    p: float
    lam: float
    mu: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise BoundsError(f"mixing probability outside [0,1]: {self.p}")
        if not self.lam > 0:
            raise BoundsError(f"lam must be positive, got {self.lam}")
        if self.n >= 2 and self.p > 0 and not self.mu > 0:
            raise BoundsError(f"mu must be positive, got {self.mu}")

    def raw_moments(self):
        """First three raw moments of the mixture, in closed form."""
        x1, x2, x3 = 1 / self.lam, 2 / self.lam**2, 6 / self.lam**3
        k = self.n - 1
        y1 = k / self.mu
        y2 = k * (k + 1) / self.mu**2
        y3 = k * (k + 1) * (k + 2) / self.mu**3
        p = self.p
        m1 = x1 + p * y1
        m2 = x2 + 2 * x1 * p * y1 + p * y2
        m3 = x3 + 3 * x2 * p * y1 + 3 * x1 * p * y2 + p * y3
        return m1, m2, m3


@dataclass(frozen=True)
class CoxianRates:
    """Per-phase progression and exit rates of a Coxian chain.

    ``prog[i]`` is the rate from phase i to phase i+1 (length n-1) and
    ``exit[i]`` the rate from phase i out of the chain (length n).
    """

    prog: tuple
    exit: tuple

    def __post_init__(self):
        n = len(self.exit)
        if len(self.prog) != n - 1:
            raise BoundsError("prog must have one fewer entry than exit")
        if any(r < 0 for r in self.prog) or any(r < 0 for r in self.exit):
            raise BoundsError("rates must be non-negative")
        for i in range(n - 1):
            if self.prog[i] + self.exit[i] <= 0:
                raise BoundsError(f"phase {i + 1} has zero total rate")
        if not self.exit[-1] > 0:
            raise BoundsError("final phase must have a positive exit rate")

    @property
    def n(self):
        return len(self.exit)

    def scaled(self, factor):
        """All rates multiplied by ``factor`` (time scaled by 1/factor)."""
        return CoxianRates(tuple(r * factor for r in self.prog),
                           tuple(r * factor for r in self.exit))

    def sub_intensity(self):
        """Sub-intensity matrix S over the phases (exit column dropped)."""
        n = self.n
        s = np.zeros((n, n))
        for i in range(n):
            tot = self.exit[i] + (self.prog[i] if i < n - 1 else 0.0)
            s[i, i] = -tot
            if i < n - 1:
                s[i, i + 1] = self.prog[i]
        return s


def normalized_moments(family, shape):
    """Mean and normalised moments of the unit-scale Gamma or Weibull.

    Gamma(shape a): m1 = a, n2 = (a+1)/a, n3 = (a+2)/a.
    Weibull(shape a): m1 = Gamma(1+1/a) with the Gamma-function ratio forms
    for n2 and n3, evaluated through log-Gamma to postpone overflow.

    Raises
    ------
    BoundsError
        for non-positive shapes, or Weibull shapes below
        ``WEIBULL_SHAPE_FLOOR`` where the moments are numerically unusable.
    """
    if not shape > 0:
        raise BoundsError(f"shape must be positive, got {shape}")
    if family == GAMMA:
        return NormalizedMoments(shape, (shape + 1.0) / shape, (shape + 2.0) / shape)
    if family == WEIBULL:
        if shape < WEIBULL_SHAPE_FLOOR:
            raise BoundsError(
                f"weibull shape {shape} below numeric floor {WEIBULL_SHAPE_FLOOR}")
        g1 = gammaln(1.0 + 1.0 / shape)
        g2 = gammaln(1.0 + 2.0 / shape)
        g3 = gammaln(1.0 + 3.0 / shape)
        m1 = math.exp(g1)
        n2 = math.exp(g2 - 2.0 * g1)
        n3 = math.exp(g3 - g1 - g2)
        if not (math.isfinite(m1) and math.isfinite(n2) and math.isfinite(n3)):
            raise BoundsError(f"weibull shape {shape}: moments overflow")
        return NormalizedMoments(m1, n2, n3)
    raise BoundsError(f"unknown family {family!r}")


def _n3_lower(n2, n):
    """Smallest representable n3 for an n-phase Erlang-Exp given n2."""
    if n2 < (n + 1.0) / n:
        return math.inf
    if n2 < (n + 4.0) / (n + 1.0):
        p = ((n + 1.0) * (n2 - 2.0)) / (3.0 * n2 * (n - 1.0)) * (
            (-2.0 * math.sqrt(n + 1.0))
            / math.sqrt(-3.0 * n * n2 + 4.0 * (n + 1.0)) - 1.0)
        # the radicand vanishes at the Erlang corner; clamp rounding noise
        rad = max(p * p + p * n * (n2 - 2.0) / (n - 1.0), 0.0)
        a = (n2 - 2.0) / (p * (1.0 - n2) + math.sqrt(rad))
        return ((3.0 + a) * (n - 1.0) + 2.0 * a) / ((n - 1.0) * (1.0 + a * p)) - (
            2.0 * a * (n + 1.0)) / (2.0 * (n - 1.0) + a * p * (n * a + 2.0 * n - 2.0))
    return (n + 1.0) / n * n2


def _n3_upper(n2, n):
    """Largest representable n3 for an n-phase Erlang-Exp given n2."""
    if n2 < (n + 1.0) / n:
        return -math.inf
    if n2 <= n / (n - 1.0):
        rad = max(1.0 + (n * (n2 - 2.0)) / (n - 1.0), 0.0)
        return (2.0 * (n - 2.0) * (n * n2 - n - 1.0) * math.sqrt(rad)
                + (n + 2.0) * (3.0 * n * n2 - 2.0 * n - 2.0)) / (n * n * n2)
    return math.inf


def moment_bounds_ok(n2, n3, nphase):
    """Whether an nphase Erlang-Exp distribution with these normalised
    moments exists.  Bounds are treated as open intervals, so boundary
    cases (e.g. a Gamma shape exactly equal to the phase count) report
    False and are reachable only as limits.
    """
    n = int(nphase)
    if not n2 > (n + 1.0) / n:
        return False
    return _n3_lower(n2, n) < n3 < _n3_upper(n2, n)


@lru_cache(maxsize=None)
def shape_upper_bound(family, nphase):
    """Largest target shape representable with ``nphase`` phases.

    Gamma: exactly ``nphase``.  Weibull: the shape at which the target's
    n3 crosses the lower feasibility bound, found by root bisection on a
    fixed bracketing interval per phase count (to 1e-6 absolute).
    """
    n = int(nphase)
    if not MIN_PHASES <= n <= MAX_PHASES:
        raise BoundsError(f"phase count {nphase} outside supported range "
                          f"{MIN_PHASES}..{MAX_PHASES}")
    if family == GAMMA:
        return float(n)
    if family != WEIBULL:
        raise BoundsError(f"unknown family {family!r}")
    brackets = {2: (1.001, 1.2), 3: (1.0, 1.7), 4: (1.0, 2.0), 5: (1.0, 2.3),
                6: (1.0, 2.4), 7: (1.0, 2.6), 8: (1.0, 2.8), 9: (1.0, 3.0),
                10: (1.0, 3.5)}
    lo, hi = brackets[n]

    def gap(shape):
        m = normalized_moments(WEIBULL, shape)
        return m.n3 - _n3_lower(m.n2, n)

    # at shape exactly 1 the gap can sit on the boundary (n=2); nudge inside
    return float(brentq(gap, lo + 1e-9, hi, xtol=1e-6))


def _candidate_solutions(m, n):
    """(a, b) intermediates of the matching solution; both general branches,
    or the simpler form on the n*(n3-n2) == n2 coincidence."""
    n2, n3 = m.n2, m.n3
    if abs(n * (n3 - n2) - n2) <= _SPECIAL_CASE_RTOL * abs(n2):
        a = ((2 * n2 - n3) * (3 * n2**2 - 4 * n3)
             * (-3 * n2**2 + 2 * n3 * (n2 - 2) + 4 * n3)
             / (n2**2 * n3 * (n2 - 2) * (n2 * n3 + 3 * n2 - 4 * n3)))
        b = (3 * n2**2 - 4 * n3) / (n2 * (n2 * n3 + 3 * n2 - 4 * n3))
        return [(a, b)]
    A = n * n2 * (12 * n * n2**2 + n * n2 * n3**2 - 14 * n * n2 * n3
                  - 15 * n * n2 + 16 * n * n3 + 12 * n2**2 - 8 * n2 * n3
                  - 24 * n2 + 16 * n3)
    B = math.sqrt(max(A, 0.0))
    C = n * n2 - n + n2 - 4
    D = -n * n3 + n + 4
    E = n * n2 - 2 * n + n2 - 2
    F = n * n2 - n * n3 + n2
    G = 8 * n * n2**2 * (n + 1) * (n2 - 2)
    out = []
    for z in (n2 * D - B, n2 * D + B):
        a = -(n - 1) * z * (2 * n2 * z * C - 8 * n2 * F * E + z * z) / (G * F**2)
        b = z / (2 * n2 * F)
        out.append((a, b))
    return out


def match_moments(m, nphase):
    """Erlang-Exp parameters matching the given moments with ``nphase`` phases.

    Evaluates the closed-form branch solutions, keeps those with a valid
    mixing probability 0 <= p <= 1 and positive intermediates, and of
    those returns the one whose implied moments agree best with the
    target (the branches are alternative roots of the same polynomial
    system; at most one reproduces the target).

    Raises
    ------
    BoundsError
        if the moments violate ``moment_bounds_ok`` or no branch yields a
        valid parameter set (the latter cannot happen for in-bounds input).
    """
    n = int(nphase)
    # degenerate exponential target: the general formulas divide by n2 - 2
    if (abs(m.n2 - 2.0) <= _SPECIAL_CASE_RTOL * 2.0
            and abs(m.n3 - 3.0) <= _SPECIAL_CASE_RTOL * 3.0):
        lam = 1.0 / m.m1
        return ErlangExpParams(n, 0.0, lam, (n - 1) * lam)
    if not moment_bounds_ok(m.n2, m.n3, n):
        raise BoundsError(
            f"moments (n2={m.n2}, n3={m.n3}) not representable with {n} phases")
    best = None
    for a, b in _candidate_solutions(m, n):
        if not (math.isfinite(a) and math.isfinite(b)) or a <= 0:
            continue
        p = (b - 1.0) / a
        if p < -1e-12 or p > 1.0 + 1e-12:
            continue
        p = min(max(p, 0.0), 1.0)
        lam = (p * a + 1.0) / m.m1
        mu = lam * (n - 1) / a
        if not (lam > 0 and mu > 0):
            continue
        cand = ErlangExpParams(n, p, lam, mu)
        c1, c2, c3 = cand.raw_moments()
        err = (abs(c1 - m.m1) / m.m1
               + abs(c2 / c1**2 - m.n2) / m.n2
               + abs(c3 / (c1 * c2) - m.n3) / m.n3)
        if best is None or err < best[0]:
            best = (err, cand)
    if best is None:
        raise BoundsError("no valid branch solution; moments are in bounds, "
                          "so this indicates a conditioning bug")
    return best[1]


def to_coxian(e):
    """Coxian chain realisation of an Erlang-Exp mixture.

    The Exp(lam) stage comes first: phase 1 progresses with rate p*lam and
    exits with rate (1-p)*lam; phases 2..n-1 progress with rate mu; phase n
    exits with rate mu.  Time to exit is Exp(lam) + Bernoulli(p)*Erlang(n-1,
    mu), distributionally equal to the mixture because the summands commute.
    """
    n = e.n
    prog = [e.p * e.lam] + [e.mu] * (n - 2)
    exit_ = [(1.0 - e.p) * e.lam] + [0.0] * (n - 2) + [e.mu]
    if n == 1:  # degenerate single phase: plain exponential
        prog, exit_ = [], [e.lam]
    return CoxianRates(tuple(prog), tuple(exit_))


def pt_cdf(rates, t):
    """P(T < t) for the Coxian chain entered at phase 1.

    Computed as 1 - alpha . exp(S t) . 1 with S the sub-intensity matrix.
    """
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    if t == 0:
        return 0.0
    s = rates.sub_intensity()
    surv = _sexpm(s * t)[0].sum()
    return float(min(max(1.0 - surv, 0.0), 1.0))


def pt_quantile(rates, q):
    """Quantile of the chain's exit-time distribution by bracketed
    root-finding on ``pt_cdf`` (relative tolerance 1e-8).

    The initial bracket is [0, mean + 20 sd], expanded geometrically when
    the tail is heavier; failure to bracket signals malformed rates.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must be inside (0, 1), got {q}")
    mean, var, _ = pt_moments(rates)
    hi = mean + 20.0 * math.sqrt(var)
    for _ in range(64):
        if pt_cdf(rates, hi) > q:
            break
        hi *= 2.0
    else:
        raise RuntimeError("quantile bracket expansion failed; malformed rates")
    return float(brentq(lambda t: pt_cdf(rates, t) - q, 0.0, hi,
                        xtol=1e-300, rtol=1e-8))


def pt_moments(rates):
    """(mean, variance, skewness) of the chain exit time.

    Uses E[T^k] = k! alpha (-S)^{-k} 1, evaluated by repeated linear solves.
    """
    s = rates.sub_intensity()
    ones = np.ones(rates.n)
    try:
        u1 = np.linalg.solve(-s, ones)
        u2 = np.linalg.solve(-s, u1)
        u3 = np.linalg.solve(-s, u2)
    except np.linalg.LinAlgError as exc:
        raise BoundsError("singular sub-intensity matrix (no exit rates)") from exc
    m1 = u1[0]
    m2 = 2.0 * u2[0]
    m3 = 6.0 * u3[0]
    var = m2 - m1 * m1
    skew = (m3 - 3 * m1 * var - m1**3) / var**1.5
    return float(m1), float(var), float(skew)


@lru_cache(maxsize=8192)
def shapescale_to_rates(s):
    """Coxian rates approximating the ``ShapeScaleSpec`` target.

    Matches the unit-scale target, then divides every rate by the scale.
    Shape exactly 1 (within 1e-9) short-circuits to the exponential
    solution instead of passing degenerate moments through the solver.
    Results are memoised (the spec is a frozen value type); during
    optimisation every covariate pattern reuses one matching solve.
    """
    ub = shape_upper_bound(s.family, s.nphase)
    if not s.shape < ub:
        raise BoundsError(
            f"{s.family} shape {s.shape} outside (0, {ub}) for {s.nphase} phases")
    if abs(s.shape - 1.0) < _EXPONENTIAL_SHAPE_TOL:
        # Gamma(1, b) and Weibull(1, b) are both Exp(1/b)
        e = ErlangExpParams(s.nphase, 0.0, 1.0, float(s.nphase - 1))
    else:
        e = match_moments(normalized_moments(s.family, s.shape), s.nphase)
    return to_coxian(e).scaled(1.0 / s.scale)
