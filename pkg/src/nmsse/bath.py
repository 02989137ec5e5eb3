"""Bath description for open-system trajectories.

Covers the overdamped (Debye) spectral density, the finite-temperature
bath correlation function evaluated by quadrature, the single-exponential
kernel left over once the real part of the correlation function is moved
into the driving noise, and the paired complex Gaussian processes
(xi1, xi2*) that drive forward and backward trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SpectralDensity",
    "BathCorrelation",
    "ExpansionTerm",
    "NoiseScheme",
    "NoiseRealization",
    "thermal_occupation",
    "coth_half",
    "fit_expansion",
    "fit_exponential_series",
    "sample_noise",
    "sample_noise_at",
    "verify_noise_statistics",
    "NoiseStatsReport",
]

# Channel order used by NoiseScheme.coefficients / combine.
_CH_RE_CC, _CH_IM_CC, _CH_CHI1, _CH_CHI2 = 0, 1, 2, 3


def coth_half(beta: float, omega):
    """coth(beta*omega/2), stable for small and large arguments.

    Below beta*omega < 1e-3 the two-term Laurent series
    2/(beta*omega) + beta*omega/6 is used; above x > 20 the value is 1
    to double precision.
    """
    x = np.asarray(beta * omega, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-3
    big = x > 20.0
    mid = ~small & ~big
    xs = x[small]
    with np.errstate(divide="ignore"):
        out[small] = 2.0 / xs + xs / 6.0
    out[big] = 1.0
    xm = x[mid] / 2.0
    out[mid] = np.cosh(xm) / np.sinh(xm)
    if out.ndim == 0:
        return float(out)
    return out


def thermal_occupation(beta: float, omega):
    """Bose occupation 1/(exp(beta*omega) - 1)."""
    x = np.asarray(beta * omega, dtype=float)
    out = np.zeros_like(x)
    ok = x < 700.0  # exp overflow guard; occupation is 0 there anyway
    out[ok] = 1.0 / np.expm1(x[ok])
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class SpectralDensity:
    """Overdamped spectral density J(w) = eta * w * gamma / (w^2 + gamma^2).

    eta = 0 is allowed and means a decoupled bath.  The reorganization-energy
    form 2*lam*w*gamma/(w^2+gamma^2) is the same function with eta = 2*lam.
    """

    eta: float
    gamma: float

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("coupling strength eta must be >= 0")
        if self.gamma <= 0:
            raise ValueError("bath frequency gamma must be > 0")

    @classmethod
    def debye_drude(cls, eta: float, gamma: float) -> "SpectralDensity":
        return cls(eta=eta, gamma=gamma)

    @classmethod
    def from_reorganization(cls, lam: float, gamma: float) -> "SpectralDensity":
        """Construct from reorganization energy lam; eta = 2*lam."""
        return cls(eta=2.0 * lam, gamma=gamma)

    @property
    def reorganization(self) -> float:
        return self.eta / 2.0

    @property
    def slope_at_zero(self) -> float:
        """dJ/dw at w = 0, needed for the w -> 0 quadrature limit."""
        return self.eta / self.gamma

    def __call__(self, omega):
        w = np.asarray(omega, dtype=float)
        return self.eta * w * self.gamma / (w * w + self.gamma * self.gamma)

    def alpha_imag_exact(self, t):
        """Closed-form Im alpha(t) = -(eta*gamma/2) * exp(-gamma*|t|) * sign(t).

        Residue of the w-integral of -J(w) sin(wt)/pi at w = i*gamma.  At
        t = 0 the t -> 0+ limit is returned, which is the value the memory
        kernel continues from.
        """
        t = np.asarray(t, dtype=float)
        return -0.5 * self.eta * self.gamma * np.exp(-self.gamma * np.abs(t)) * np.sign(t + (t == 0))


def _default_cutoff(gamma: float, beta: float) -> float:
    return 20.0 * max(gamma, 1.0 / beta)


@dataclass
class BathCorrelation:
    """Finite-temperature bath correlation function by trapezoid quadrature.

    alpha(t) = int_0^inf dw J(w)/pi * (coth(beta*w/2) cos(wt) - i sin(wt)).

    The grid [0, omega_max] with n_omega panels must resolve both gamma and
    1/beta; the default cutoff 20*max(gamma, 1/beta) matches the one used by
    NoiseScheme so that the slowly decaying Drude tail is cut identically in
    quadrature targets and sampled noise.
    """

    sd: SpectralDensity
    beta: float
    omega_max: float = 0.0
    n_omega: int = 4000

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("inverse temperature beta must be > 0")
        if self.omega_max <= 0.0:
            self.omega_max = _default_cutoff(self.sd.gamma, self.beta)
        if self.n_omega < 16:
            raise ValueError("n_omega too small to resolve the integrand")
        self._w = np.linspace(0.0, self.omega_max, self.n_omega + 1)
        # trapezoid weights
        dw = self._w[1] - self._w[0]
        tw = np.full(self._w.shape, dw)
        tw[0] *= 0.5
        tw[-1] *= 0.5
        # real-part weight J(w) coth(beta w/2) / pi, with the analytic w->0 limit
        jw = self.sd(self._w)
        cw = np.empty_like(self._w)
        cw[1:] = coth_half(self.beta, self._w[1:])
        real_w = np.empty_like(self._w)
        real_w[1:] = jw[1:] * cw[1:] / np.pi
        real_w[0] = 2.0 * self.sd.slope_at_zero / (np.pi * self.beta)
        self._real_weights = real_w * tw
        self._imag_weights = -(jw / np.pi) * tw

    def tail_estimate(self) -> float:
        """Rough magnitude of the neglected real-part tail beyond omega_max.

        For the Drude form the integrand decays like eta*gamma/(pi*w); the
        estimate is its value at the cutoff times one decade of further width.
        """
        return abs(self.sd(self.omega_max)) * np.log(10.0) * self.omega_max / np.pi

    def _chunked(self, weights, trig, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty(t.shape)
        step = max(1, int(2e6 // (self._w.size + 1)))
        for i in range(0, t.size, step):
            block = trig(np.outer(t[i : i + step], self._w))
            out[i : i + step] = block @ weights
        return out

    def real(self, t):
        """Re alpha(t); even in t."""
        res = self._chunked(self._real_weights, np.cos, t)
        return res if np.ndim(t) else float(res[0])

    def imag(self, t):
        """Im alpha(t); odd in t."""
        res = self._chunked(self._imag_weights, np.sin, t)
        return res if np.ndim(t) else float(res[0])

    def __call__(self, t):
        return self.real(t) + 1j * self.imag(t)


@dataclass(frozen=True)
class ExpansionTerm:
    """One term d * exp(-nu * t) of the residual memory kernel."""

    d: complex
    nu: float


def fit_expansion(bc: BathCorrelation, n_terms: int = 1, t_span: float = 0.0):
    """Exponential expansion of the kernel left after the noise absorbs Re alpha.

    The residual kernel is alpha(t) - Re alpha(t) = i * Im alpha(t).  For the
    Drude form Im alpha(t) = -(eta*gamma/2) e^{-gamma t}, so exactly one term
    survives:
    d0 = -i*eta*gamma/2, nu0 = gamma.  Generic spectral densities fall back to
    a least-squares fit of the quadrature kernel.

    Returns (terms, residual) where residual is the max deviation from the
    closed-form kernel on [0, t_span], relative to |d0|.
    """
    sd = bc.sd
    if t_span <= 0.0:
        t_span = 10.0 / sd.gamma
    ts = np.linspace(0.0, t_span, 512)
    if sd.eta == 0.0:
        return [ExpansionTerm(0.0 + 0.0j, sd.gamma)], 0.0
    if isinstance(sd, SpectralDensity):
        d0 = -0.5j * sd.eta * sd.gamma
        terms = [ExpansionTerm(d0, sd.gamma)]
        target = 1j * sd.alpha_imag_exact(ts)
        model = d0 * np.exp(-sd.gamma * ts)
        residual = float(np.max(np.abs(target - model)) / abs(d0))
        return terms, residual
    # fallback: fit the quadrature kernel i*Im alpha(t)
    target = 1j * bc.imag(ts)
    ds, nus = fit_exponential_series(ts, target, n_terms)
    model = sum(d * np.exp(-nu * ts) for d, nu in zip(ds, nus))
    scale = max(np.max(np.abs(target)), 1e-300)
    residual = float(np.max(np.abs(target - model)) / scale)
    return [ExpansionTerm(d, nu) for d, nu in zip(ds, nus)], residual


def fit_exponential_series(ts, values, n_terms):
    """Greedy least-squares fit of values(ts) by sum_k d_k exp(-nu_k ts).

    Rates are scanned on a log grid spanning the sampled window and refined
    by golden-section search; amplitudes come from a linear solve.  Meant as
    a fallback for kernels without a closed form, not a high-accuracy Prony
    method.
    """
    ts = np.asarray(ts, dtype=float)
    vals = np.asarray(values, dtype=complex)
    t_max = ts[-1] if ts[-1] > 0 else 1.0
    nu_lo, nu_hi = 0.1 / t_max, 200.0 / t_max

    def solve_amp(nus):
        basis = np.exp(-np.outer(ts, nus))
        coef, *_ = np.linalg.lstsq(basis, vals, rcond=None)
        resid = vals - basis @ coef
        return coef, float(np.vdot(resid, resid).real)

    chosen: list[float] = []
    for _ in range(n_terms):
        grid = np.geomspace(nu_lo, nu_hi, 200)
        best_nu, best_cost = None, np.inf
        for nu in grid:
            _, cost = solve_amp(chosen + [nu])
            if cost < best_cost:
                best_nu, best_cost = nu, cost
        # golden-section refinement around the best grid point
        lo, hi = best_nu / 1.5, best_nu * 1.5
        phi = (np.sqrt(5.0) - 1.0) / 2.0
        for _ in range(40):
            m1 = hi - phi * (hi - lo)
            m2 = lo + phi * (hi - lo)
            _, c1 = solve_amp(chosen + [m1])
            _, c2 = solve_amp(chosen + [m2])
            if c1 < c2:
                hi = m2
            else:
                lo = m1
        chosen.append(0.5 * (lo + hi))
    coef, _ = solve_amp(chosen)
    return list(coef), chosen


@dataclass
class NoiseScheme:
    """Spectral sampler for the paired processes xi1(t) and xi2*(t).

    Six independent white noises mu^1..mu^6 on a frequency grid build one
    shared complex process chi_c plus two real processes chi_1, chi_2:

        xi1  = chi_c  + chi_1
        xi2* = chi_c* + chi_2

    The resulting covariances are <xi1 xi1> = <xi2* xi2*> = Re alpha(t-s) and
    <xi1 xi2*> = conj(alpha(t-s)); all means vanish.  The grid identifies the
    integration variable with frequency, absorbing sqrt(J(k)/pi * dk) into the
    mode weights; white noise is realized as unit normals scaled by
    1/sqrt(dk), so weights and draws combine to H_k = sqrt(J(k_k)/pi * dk).
    """

    sd: SpectralDensity
    beta: float
    k_max: float = 0.0
    n_k: int = 2000

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("inverse temperature beta must be > 0")
        if self.k_max <= 0.0:
            self.k_max = _default_cutoff(self.sd.gamma, self.beta)
        if self.n_k < 2:
            raise ValueError("need at least 2 frequency modes")
        dk = self.k_max / self.n_k
        # midpoint grid keeps the occupation finite at the lower edge
        self.k = (np.arange(self.n_k) + 0.5) * dk
        self.dk = dk
        g = thermal_occupation(self.beta, self.k)
        self._H = np.sqrt(self.sd(self.k) / np.pi * dk)
        self._a = np.sqrt((g + 1.0) / 2.0) + np.sqrt(g / 2.0)
        self._b = np.sqrt((g + 1.0) / 2.0) - np.sqrt(g / 2.0)
        self._c = np.sqrt(g + 1.0) - np.sqrt(g)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """The six unit-normal mode vectors for one realization, shape (6, n_k)."""
        return rng.standard_normal((6, self.n_k))

    def coefficients(self, mu: np.ndarray):
        """Cosine and sine mode weights for channels (Re chi_c, Im chi_c, chi_1, chi_2).

        Returns (cos_coefs, sin_coefs), each shaped (n_k, 4); the time series
        are cos_basis @ cos_coefs + sin_basis @ sin_coefs.
        """
        H, a, b, c = self._H, self._a, self._b, self._c
        cosc = np.empty((self.n_k, 4))
        sinc = np.empty((self.n_k, 4))
        cosc[:, _CH_RE_CC] = H * a * mu[0]
        sinc[:, _CH_RE_CC] = -H * a * mu[1]
        cosc[:, _CH_IM_CC] = H * b * mu[1]
        sinc[:, _CH_IM_CC] = H * b * mu[0]
        cosc[:, _CH_CHI1] = H * c * mu[2]
        sinc[:, _CH_CHI1] = H * c * mu[3]
        cosc[:, _CH_CHI2] = H * c * mu[4]
        sinc[:, _CH_CHI2] = H * c * mu[5]
        return cosc, sinc

    @staticmethod
    def combine(channels: np.ndarray):
        """Assemble (xi1, xi2*) from the four synthesized channels (..., 4)."""
        re_cc = channels[..., _CH_RE_CC]
        im_cc = channels[..., _CH_IM_CC]
        xi1 = re_cc + channels[..., _CH_CHI1] + 1j * im_cc
        xi2_star = re_cc + channels[..., _CH_CHI2] - 1j * im_cc
        return xi1, xi2_star

    def basis(self, times: np.ndarray):
        """Trig basis matrices cos(t_i k_j), sin(t_i k_j); shape (len(times), n_k)."""
        phases = np.outer(np.asarray(times, dtype=float), self.k)
        return np.cos(phases), np.sin(phases)

    def covariance_xi1(self, tau):
        """Exact covariance of the discrete process; Riemann-sum analog of Re alpha."""
        tau = np.asarray(tau, dtype=float)
        coth = self._a**2 + self._b**2  # equals 2 g + 1
        return np.cos(np.outer(np.atleast_1d(tau), self.k)) @ (self._H**2 * coth)


@dataclass
class NoiseRealization:
    """One sampled (xi1, xi2*) pair on a fixed time grid."""

    times: np.ndarray
    xi1: np.ndarray
    xi2_star: np.ndarray
    seed: int


def sample_noise_at(scheme: NoiseScheme, times, seed: int):
    """Evaluate one noise realization exactly at arbitrary times."""
    times = np.asarray(times, dtype=float)
    rng = np.random.default_rng(seed)
    mu = scheme.draw(rng)
    cosc, sinc = scheme.coefficients(mu)
    cb, sb = scheme.basis(times)
    channels = cb @ cosc + sb @ sinc
    return NoiseScheme.combine(channels)


def sample_noise(scheme: NoiseScheme, grid, seed: int) -> NoiseRealization:
    """Sample (xi1, xi2*) on grid.times(); same seed gives the same series."""
    times = grid.times()
    xi1, xi2_star = sample_noise_at(scheme, times, seed)
    return NoiseRealization(times=times, xi1=xi1, xi2_star=xi2_star, seed=seed)


_RELATION_NAMES = (
    "<xi1> = 0",
    "<xi2*> = 0",
    "<xi1 xi1> = Re a",
    "<xi2* xi2*> = Re a",
    "<xi1 xi2*> = conj(a)",
    "<xi2* xi1> = a",
)


@dataclass
class NoiseStatsReport:
    """z-scores of empirical noise moments against quadrature targets."""

    n_realizations: int
    pairs: list
    relations: tuple = _RELATION_NAMES
    z: np.ndarray = field(default=None, repr=False)  # (n_pairs, 6, 2) re/im

    def fraction_within(self, threshold: float = 3.0) -> float:
        return float(np.mean(np.abs(self.z) < threshold)) if self.z.size else 1.0

    @property
    def flagged(self) -> bool:
        """True when some moment relation is systematically off.

        Statistical noise puts ~0.3% of z-scores past 3; a quarter of one
        relation's scores exceeding 3 is not chance.
        """
        if self.z.size == 0:
            return False
        per_relation = np.mean(np.abs(self.z) >= 3.0, axis=(0, 2))
        return bool(np.any(per_relation >= 0.25))

    def lines(self):
        out = [
            f"noise moment check over {self.n_realizations} realizations, "
            f"{len(self.pairs)} (t, s) pairs"
        ]
        for r, name in enumerate(self.relations):
            zr = self.z[:, r, :]
            out.append(
                f"  {name:22s} max|z| = {np.max(np.abs(zr)):6.2f}  "
                f"within 3: {np.mean(np.abs(zr) < 3.0) * 100.0:5.1f}%"
            )
        out.append(f"  overall within 3 SE: {self.fraction_within() * 100.0:.1f}%")
        if self.flagged:
            out.append("  WARNING: systematic excess; scheme and targets disagree")
        return out


def _zscores(samples: np.ndarray, target: complex):
    n = samples.shape[0]
    zs = np.empty(2)
    for i, part in enumerate((samples.real, samples.imag)):
        mean = part.mean()
        tgt = target.real if i == 0 else target.imag
        se = part.std(ddof=1) / np.sqrt(n)
        if se == 0.0:
            zs[i] = 0.0 if mean == tgt else np.inf
        else:
            zs[i] = (mean - tgt) / se
    return zs


def verify_noise_statistics(realizations, bc: BathCorrelation, pairs=None) -> NoiseStatsReport:
    """Check sampled noise moments against the quadrature correlation function.

    realizations must share a time grid and contain at least 1000 members;
    pairs is a list of (i, j) time-index pairs, defaulting to a 5 x 5 spread
    over the grid.
    """
    if len(realizations) < 1000:
        raise ValueError("need at least 1000 realizations for stable standard errors")
    times = realizations[0].times
    xi1 = np.stack([r.xi1 for r in realizations])
    xi2s = np.stack([r.xi2_star for r in realizations])
    if pairs is None:
        idx = np.unique(np.linspace(0, len(times) - 1, 5).astype(int))
        pairs = [(int(i), int(j)) for i in idx for j in idx]
    if not pairs:
        return NoiseStatsReport(len(realizations), [], z=np.empty((0, 6, 2)))
    z = np.empty((len(pairs), 6, 2))
    for p, (i, j) in enumerate(pairs):
        tau = times[i] - times[j]
        ar = bc.real(tau)
        ai = bc.imag(tau)
        z[p, 0] = _zscores(xi1[:, i], 0.0j)
        z[p, 1] = _zscores(xi2s[:, i], 0.0j)
        z[p, 2] = _zscores(xi1[:, i] * xi1[:, j], ar + 0.0j)
        z[p, 3] = _zscores(xi2s[:, i] * xi2s[:, j], ar + 0.0j)
        z[p, 4] = _zscores(xi1[:, i] * xi2s[:, j], ar - 1j * ai)
        z[p, 5] = _zscores(xi2s[:, i] * xi1[:, j], ar + 1j * ai)
    return NoiseStatsReport(len(realizations), list(pairs), z=z)
