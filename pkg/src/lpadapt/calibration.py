"""Critical values for the selection rule: analytic formula and MC search.

The analytic thresholds are

    z_k = (4/mu) { r (K-k) log u + log(K/alpha) - (p/4) log(1-4 mu)
                   - log(1 - u^{-r}) + cbar(p, r) },   mu in (0, 1/4),

which provably satisfy the moment conditions

    E_{0,Sigma} | (theta_k - theta_hat_k)^T B_k (theta_k - theta_hat_k) |^r
        <= alpha C(p, r),   k = 2..K,

with C(p,r) the r-th moment of chi^2_p.  The Monte-Carlo calibrator keeps
the same l-shape with one free offset, z_l(c) = c + 4 r (K-l) log(u) / mu0,
and bisects on the minimal offset c for which all empirical moment
conditions hold on a simulated pure-noise ensemble.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .exceptions import CalibrationFailedError, ParameterDomainError
from .local_model import Basis, LadderDesign, ScaleLadder

DEFAULT_MU = 0.125


def chi_square_moment(p: int, r: float) -> float:
    """r-th absolute moment of chi^2_p: 2^r Gamma(r + p/2) / Gamma(p/2)."""
    if p < 1:
        raise ParameterDomainError("p must be >= 1")
    if r <= 0:
        raise ParameterDomainError("r must be positive")
    return float(np.exp(r * math.log(2.0) + gammaln(r + p / 2.0) - gammaln(p / 2.0)))


def threshold_constant(p: int, r: float) -> float:
    """Additive constant in the analytic threshold formula.

    log{ 2^{2r} [Gamma(2r + p/2) Gamma(p/2)]^{1/2} / Gamma(r + p/2) },
    evaluated in log space.
    """
    return float(
        2.0 * r * math.log(2.0)
        + 0.5 * (gammaln(2.0 * r + p / 2.0) + gammaln(p / 2.0))
        - gammaln(r + p / 2.0)
    )


def _check_alpha_r(alpha: float, r: float):
    if not 0.0 < alpha <= 1.0:
        raise ParameterDomainError(f"alpha={alpha} outside (0, 1]")
    if r <= 0:
        raise ParameterDomainError(f"r={r} must be positive")


@dataclass(frozen=True)
class CriticalValues:
    """Thresholds z_1..z_{K-1} with the calibration metadata."""

    z: tuple[float, ...]
    method: str  # "theoretical" | "monte_carlo"
    alpha: float
    r: float
    p: int
    K: int
    mu: float | None = None
    seed: int | None = None
    mc_size: int | None = None

    def __post_init__(self):
        zv = np.asarray(self.z, dtype=float)
        if zv.size != self.K - 1:
            raise ParameterDomainError(f"expected {self.K - 1} thresholds, got {zv.size}")
        if zv.size and (not np.all(np.isfinite(zv)) or np.any(zv <= 0)):
            raise ParameterDomainError("thresholds must be finite and positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CriticalValues":
        obj = json.loads(text)
        fields = {k: obj[k] for k in ("z", "method", "alpha", "r", "p", "K", "mu", "seed", "mc_size") if k in obj}
        fields["z"] = tuple(float(v) for v in fields["z"])
        return cls(**fields)


def _cv_terms(p: int, r: float, K: int, alpha: float, u: float, mu: float) -> tuple[np.ndarray, float]:
    """Scale-dependent slopes (4/mu) r (K-l) log u and the shared offset term."""
    _check_alpha_r(alpha, r)
    if u <= 1.0:
        raise ParameterDomainError(f"growth bound u={u} must exceed 1")
    if not 0.0 < mu < 0.25:
        raise ParameterDomainError(f"mu={mu} outside (0, 1/4)")
    if K < 1:
        raise ParameterDomainError("K must be >= 1")
    base = (
        math.log(K / alpha)
        - (p / 4.0) * math.log1p(-4.0 * mu)
        - math.log1p(-(u ** (-r)))
        + threshold_constant(p, r)
    )
    ls = np.arange(1, K)
    return (4.0 / mu) * r * (K - ls) * math.log(u), (4.0 / mu) * base


def theoretical_cv(
    p: int,
    r: float,
    K: int,
    alpha: float,
    u: float,
    mu: float = DEFAULT_MU,
    optimize_mu: bool = False,
) -> CriticalValues:
    """Analytic thresholds; finite for any mu in (0, 1/4) and u > 1.

    With optimize_mu the first threshold z_1 is minimized over a mu grid
    and the minimizing mu is used for the whole vector.
    """

    def z_vec(m: float) -> np.ndarray:
        offsets, c0 = _cv_terms(p, r, K, alpha, u, m)
        return offsets + c0

    if optimize_mu:
        grid = np.arange(0.01, 0.25, 0.01)
        mu = float(min(grid, key=lambda m: z_vec(float(m))[0] if K > 1 else _cv_terms(p, r, K, alpha, u, float(m))[1]))
    zs = z_vec(mu)
    return CriticalValues(z=tuple(float(v) for v in zs), method="theoretical", alpha=alpha, r=r, p=p, K=K, mu=mu)


def replicate_noise(seed: int, replicate: int, n: int) -> np.ndarray:
    """Standard-normal draws for one replicate, seeded by (seed, replicate).

    Every stochastic loop in the package derives its noise this way, so
    results are bit-identical regardless of batching or scheduling.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate)]))
    return rng.standard_normal(n)


class SelectionEnsemble:
    """Per-scale fits and pairwise statistics for a batch of observation rows.

    Precomputes both quadratic-form tables for every pair l < m: the
    selection statistics (weighted by the smaller-scale B) and the
    moment-condition forms (weighted by the larger-scale B); selection under
    any thresholds is then a cheap sweep.
    """

    def __init__(self, ld: LadderDesign, Y: np.ndarray):
        if ld.K_eff < 1:
            raise CalibrationFailedError("no usable scale at the calibration point")
        self.ld = ld
        self.K = ld.K_eff
        self.p = ld.basis.p
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        self.mc = Y.shape[0]

        self.theta_tilde = ld.fit_stacked(Y)  # (mc, K, p)
        K = self.K
        self.T_small = np.full((K, K, self.mc), np.nan)  # B_l-weighted, selection statistics
        self.T_large = np.full((K, K, self.mc), np.nan)  # B_m-weighted, moment-condition forms
        for a in range(K):
            for b in range(a + 1, K):
                diff = self.theta_tilde[:, a, :] - self.theta_tilde[:, b, :]
                self.T_small[a, b] = np.maximum(np.einsum("ri,ij,rj->r", diff, ld.B_list[a], diff), 0.0)
                self.T_large[b, a] = np.maximum(np.einsum("ri,ij,rj->r", diff, ld.B_list[b], diff), 0.0)

    @classmethod
    def pure_noise(cls, ld: LadderDesign, mc_size: int, seed: int, theta: np.ndarray | None = None) -> "SelectionEnsemble":
        """Ensemble under the calibration measure N(Psi^T theta, Sigma_model).

        The mean shift is optional; by pivotality it changes no statistic,
        which tests exercise directly.
        """
        n = ld.points.shape[0]
        mean = np.zeros(n) if theta is None else ld.psi.T @ np.asarray(theta, dtype=float)
        Y = np.empty((int(mc_size), n))
        for j in range(int(mc_size)):
            Y[j] = mean + replicate_noise(seed, j, n) * ld.sigma_model
        return cls(ld, Y)

    def k_hat(self, z: np.ndarray) -> np.ndarray:
        """Selected index per replicate under thresholds z (length >= K-1)."""
        z = np.asarray(z, dtype=float)
        khat = np.full(self.mc, self.K, dtype=int)
        alive = np.ones(self.mc, dtype=bool)
        for m in range(2, self.K + 1):
            viol = np.zeros(self.mc, dtype=bool)
            for l in range(1, m):
                viol |= self.T_small[l - 1, m - 1] > z[l - 1]
            newly = alive & viol
            khat[newly] = m - 1
            alive &= ~viol
        return khat

    def gap_forms(self, z: np.ndarray) -> np.ndarray:
        """(K, mc) quadratic forms (theta_k - theta_hat_k)^T B_k (...); zero row for k=1."""
        khat = self.k_hat(z)
        vals = np.zeros((self.K, self.mc))
        for k in range(2, self.K + 1):
            mstep = np.minimum(k, khat)
            for m in range(1, k):
                idx = mstep == m
                if np.any(idx):
                    vals[k - 1, idx] = self.T_large[k - 1, m - 1, idx]
        return vals

    def pc_moments(self, z: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
        """Empirical moments E|gap|^r and their standard errors for k = 1..K."""
        powered = self.gap_forms(z) ** r
        mom = powered.mean(axis=1)
        se = powered.std(axis=1, ddof=1) / math.sqrt(self.mc)
        return mom, se


def mc_calibrate(
    basis: Basis,
    ladder: ScaleLadder,
    sigma_model,
    design_points,
    x,
    alpha: float,
    r: float,
    mc_size: int,
    seed: int,
    theta: np.ndarray | None = None,
    mu0: float = DEFAULT_MU,
    bisect_iters: int = 12,
) -> CriticalValues:
    """Minimal-offset thresholds satisfying the empirical moment conditions.

    The candidate family is z_l(c) = c + 4 r (K-l) log(u_hat) / mu0 with
    u_hat estimated from the realized information matrices, and c found by
    bisection against max_k E|gap_k|^r <= alpha C(p, r).  Raises
    CalibrationFailedError when even the analytic offset fails empirically
    (MC size too small or a misconfigured ladder).
    """
    _check_alpha_r(alpha, r)
    if mc_size < 1000:
        raise ParameterDomainError("mc_size must be >= 1000 for a usable calibration")
    ld = LadderDesign(basis, ladder, design_points, x, sigma_model)
    if ld.K_eff < 2:
        raise CalibrationFailedError(f"need at least 2 usable scales, got {ld.K_eff}")
    K, p = ld.K_eff, basis.p
    u0_hat, u_hat = ld.growth_bounds()
    if u0_hat <= 1.0:
        raise CalibrationFailedError(
            f"windows do not strictly grow (u0_hat={u0_hat:.4f}); refine the ladder"
        )

    ens = SelectionEnsemble.pure_noise(ld, mc_size, seed, theta=theta)
    target = alpha * chi_square_moment(p, r)
    offsets, c_analytic = _cv_terms(p, r, K, alpha, u_hat, mu0)

    def max_moment(c: float) -> float:
        mom, _ = ens.pc_moments(c + offsets, r)
        return float(mom[1:].max())

    # c = c_analytic reproduces the analytic thresholds exactly, so the
    # search result never exceeds them componentwise.
    if max_moment(c_analytic) > target:
        raise CalibrationFailedError(
            "analytic thresholds violate the empirical moment conditions; "
            "increase mc_size or check the ladder"
        )
    lo, hi = 0.0, c_analytic
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        if max_moment(mid) <= target:
            hi = mid
        else:
            lo = mid
    z = hi + offsets
    return CriticalValues(
        z=tuple(float(v) for v in z),
        method="monte_carlo",
        alpha=alpha,
        r=r,
        p=p,
        K=K,
        seed=seed,
        mc_size=mc_size,
    )


@dataclass
class PcEntry:
    k: int
    moment: float
    std_error: float
    bound: float
    passed: bool


@dataclass
class PcReport:
    """Independent check of the moment conditions for given thresholds."""

    entries: list[PcEntry]
    alpha: float
    r: float
    mc_size: int
    seed: int

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)


def validate_pc(
    cv: CriticalValues,
    basis: Basis,
    ladder: ScaleLadder,
    sigma_model,
    design_points,
    x,
    mc_size: int,
    seed: int,
    theta: np.ndarray | None = None,
) -> PcReport:
    """Estimate every moment condition with fresh noise and report pass/fail.

    An entry passes when moment <= alpha C(p,r) (1 + 3 rel_se) with
    rel_se = std_error / moment, so zero-moment rows pass trivially.
    """
    ld = LadderDesign(basis, ladder, design_points, x, sigma_model)
    K = ld.K_eff
    if len(cv.z) < K - 1:
        raise ParameterDomainError(f"thresholds cover {len(cv.z) + 1} scales, ladder has {K}")
    ens = SelectionEnsemble.pure_noise(ld, mc_size, seed, theta=theta)
    mom, se = ens.pc_moments(np.asarray(cv.z, dtype=float), cv.r)
    bound = cv.alpha * chi_square_moment(basis.p, cv.r)
    entries = []
    for k in range(2, K + 1):
        m, s = float(mom[k - 1]), float(se[k - 1])
        rel = s / m if m > 0 else 0.0
        entries.append(PcEntry(k=k, moment=m, std_error=s, bound=bound, passed=m <= bound * (1.0 + 3.0 * rel)))
    return PcReport(entries=entries, alpha=cv.alpha, r=cv.r, mc_size=mc_size, seed=seed)
