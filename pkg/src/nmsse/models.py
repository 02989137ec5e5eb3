"""Ready-to-run open-system setups.

A prepared model bundles the system Hamiltonian, one coupling operator and
noise sampler per bath, the fitted memory-kernel modes, and the initial
system state; the integrator only ever talks to this object.  Builders
cover the two standard cases: a spin-boson two-level system and a
Frenkel-exciton aggregate with an independent bath on every site.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .bath import BathCorrelation, NoiseScheme, SpectralDensity, fit_expansion
from .hierarchy import BathTerm, EffectiveHamiltonian, HierarchySpace

__all__ = [
    "CM1_TO_RADFS",
    "K_B_CM1",
    "PreparedModel",
    "prepare_model",
    "build_sbm",
    "build_fmo",
    "FMO_SITE_ENERGIES_CM1",
    "FMO_COUPLINGS_CM1",
    "pure_dephasing_coherence",
]

# one wavenumber in angular frequency per femtosecond: 2 * pi * c
CM1_TO_RADFS = 2.0 * np.pi * 2.99792458e-5
# Boltzmann constant in wavenumbers per kelvin
K_B_CM1 = 0.69503480

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)


@dataclass
class PreparedModel:
    """Everything the integrator needs, hashable for store manifests."""

    name: str
    h_s: np.ndarray
    f_ops: list
    spectral_densities: list
    beta: float
    n_max: int
    initial_state: np.ndarray
    hamiltonian: EffectiveHamiltonian
    noise_schemes: list
    fit_residuals: list
    _dense: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def d_s(self) -> int:
        return self.h_s.shape[0]

    def dense_parts(self):
        if self._dense is None:
            self._dense = self.hamiltonian.dense_parts()
        return self._dense

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_dense"] = None  # rebuilt on demand; keeps worker pickles lean
        return state

    def model_hash(self) -> str:
        """Digest of every ingredient that changes trajectories."""
        h = hashlib.sha256()
        h.update(self.name.encode())
        h.update(np.int64(self.d_s).tobytes())
        h.update(np.int64(self.n_max).tobytes())
        h.update(np.float64(self.beta).tobytes())
        h.update(np.ascontiguousarray(self.h_s, dtype=complex).tobytes())
        for f in self.f_ops:
            h.update(np.ascontiguousarray(f, dtype=complex).tobytes())
        h.update(np.ascontiguousarray(self.initial_state, dtype=complex).tobytes())
        for sd, scheme in zip(self.spectral_densities, self.noise_schemes):
            h.update(np.float64([sd.eta, sd.gamma, scheme.k_max]).tobytes())
            h.update(np.int64(scheme.n_k).tobytes())
        for term in self.hamiltonian.terms:
            h.update(np.int64(term.bath).tobytes())
            h.update(np.complex128(term.d).tobytes())
            h.update(np.float64(term.nu).tobytes())
        return h.hexdigest()


def prepare_model(
    name: str,
    h_s: np.ndarray,
    f_ops,
    spectral_densities,
    beta: float,
    n_max: int,
    initial_state: np.ndarray,
    n_exp_terms: int = 1,
    n_k: int = 2000,
    k_max: float = 0.0,
) -> PreparedModel:
    """Fit each bath's residual memory kernel and assemble the hierarchy."""
    h_s = np.asarray(h_s, dtype=complex)
    f_ops = [np.asarray(f, dtype=complex) for f in f_ops]
    if len(f_ops) != len(spectral_densities):
        raise ValueError("one coupling operator per bath is required")

    psi0 = np.asarray(initial_state, dtype=complex)
    norm = np.linalg.norm(psi0)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError("initial state must be normalizable")
    psi0 = psi0 / norm

    terms = []
    residuals = []
    schemes = []
    for b, sd in enumerate(spectral_densities):
        bc = BathCorrelation(sd, beta)
        fitted, residual = fit_expansion(bc, n_terms=n_exp_terms)
        terms.extend(BathTerm(bath=b, d=t.d, nu=t.nu) for t in fitted)
        residuals.append(residual)
        schemes.append(NoiseScheme(sd, beta, k_max=k_max, n_k=n_k))

    space = HierarchySpace(n_modes=len(terms), n_max=n_max)
    ham = EffectiveHamiltonian(h_s=h_s, f_ops=f_ops, terms=terms, space=space)
    return PreparedModel(
        name=name,
        h_s=h_s,
        f_ops=f_ops,
        spectral_densities=list(spectral_densities),
        beta=beta,
        n_max=n_max,
        initial_state=psi0,
        hamiltonian=ham,
        noise_schemes=schemes,
        fit_residuals=residuals,
    )


_SBM_STATES = {
    "up": np.array([1.0, 0.0], dtype=complex),
    "down": np.array([0.0, 1.0], dtype=complex),
    "plus": np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0),
}


def build_sbm(
    epsilon: float,
    v: float,
    eta: float,
    gamma: float,
    beta: float,
    n_max: int,
    initial: str = "plus",
    n_k: int = 2000,
    k_max: float = 0.0,
) -> PreparedModel:
    """Two-level system, bias epsilon and tunneling v, bath on sigma_z."""
    if initial not in _SBM_STATES:
        raise ValueError(f"initial must be one of {sorted(_SBM_STATES)}")
    h_s = epsilon * SIGMA_Z + v * SIGMA_X
    return prepare_model(
        name=f"sbm(eps={epsilon},v={v})",
        h_s=h_s,
        f_ops=[SIGMA_Z],
        spectral_densities=[SpectralDensity(eta=eta, gamma=gamma)],
        beta=beta,
        n_max=n_max,
        initial_state=_SBM_STATES[initial],
        n_k=n_k,
        k_max=k_max,
    )


# Seven-site FMO antenna-complex exciton Hamiltonian (Adolphs/Renger
# parameter set for Chlorobaculum tepidum), all entries in 1/cm.
FMO_SITE_ENERGIES_CM1 = np.array(
    [12410.0, 12530.0, 12210.0, 12320.0, 12480.0, 12630.0, 12440.0]
)
FMO_COUPLINGS_CM1 = np.array(
    [
        [0.0, -87.7, 5.5, -5.9, 6.7, -13.7, -9.9],
        [-87.7, 0.0, 30.8, 8.2, 0.7, 11.8, 4.3],
        [5.5, 30.8, 0.0, -53.5, -2.2, -9.6, 6.0],
        [-5.9, 8.2, -53.5, 0.0, -70.7, -17.0, -63.3],
        [6.7, 0.7, -2.2, -70.7, 0.0, 81.1, -1.3],
        [-13.7, 11.8, -9.6, -17.0, 81.1, 0.0, 39.7],
        [-9.9, 4.3, 6.0, -63.3, -1.3, 39.7, 0.0],
    ]
)


def build_fmo(
    temperature_k: float,
    n_max: int = 1,
    reorganization_cm: float = 35.0,
    bath_rate_per_fs: float = 0.02,
    initial_site: int = 1,
    n_sites: int = 7,
    n_k: int = 2000,
    k_max: float = 0.0,
) -> PreparedModel:
    """Frenkel aggregate with an independent overdamped bath on each site.

    Works in rad/fs and fs; wavenumber inputs are converted on entry.  The
    lowest site energy is subtracted, which shifts only the global phase.
    Restricting n_sites keeps a front corner of the full aggregate, handy
    for cheap two- or three-site runs with the same parameter flavor.
    """
    if not 1 <= n_sites <= 7:
        raise ValueError("n_sites must be within 1..7")
    if not 1 <= initial_site <= n_sites:
        raise ValueError(f"initial_site must be within 1..{n_sites}")
    if temperature_k <= 0:
        raise ValueError("temperature must be positive")

    energies = FMO_SITE_ENERGIES_CM1[:n_sites]
    h_cm = np.diag(energies - energies.min()) + FMO_COUPLINGS_CM1[:n_sites, :n_sites]
    h_s = h_cm * CM1_TO_RADFS

    beta = 1.0 / (K_B_CM1 * temperature_k * CM1_TO_RADFS)
    sd = SpectralDensity.from_reorganization(
        lam=reorganization_cm * CM1_TO_RADFS, gamma=bath_rate_per_fs
    )

    f_ops = []
    for site in range(n_sites):
        proj = np.zeros((n_sites, n_sites), dtype=complex)
        proj[site, site] = 1.0
        f_ops.append(proj)

    psi0 = np.zeros(n_sites, dtype=complex)
    psi0[initial_site - 1] = 1.0

    return prepare_model(
        name=f"fmo{n_sites}(T={temperature_k}K)",
        h_s=h_s,
        f_ops=f_ops,
        spectral_densities=[sd] * n_sites,
        beta=beta,
        n_max=n_max,
        initial_state=psi0,
        n_k=n_k,
        k_max=k_max,
    )


def pure_dephasing_coherence(
    bc: BathCorrelation, epsilon: float, times: np.ndarray, rho12_0: complex = 0.5
) -> np.ndarray:
    """Exact off-diagonal element when tunneling vanishes and f = sigma_z.

    rho_12(t) = rho_12(0) * exp(-2i*epsilon*t) * exp(-Gamma(t)) with
    Gamma(t) = 4 * int_0^t (t - s) Re alpha(s) ds; the imaginary kernel
    part only shifts bath energies and drops out of this element.  The
    double integral is rewritten as t*A(t) - B(t) with A, B cumulative
    integrals of Re alpha and s*Re alpha.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("need a 1-d grid with at least two points")
    if times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("grid must start at 0 and increase")

    # refine so the quadrature error stays well under ensemble noise
    fine = np.linspace(0.0, times[-1], max(4 * times.size, 2000))
    alpha_r = bc.real(fine)
    a_cum = _cumtrapz(alpha_r, fine)
    b_cum = _cumtrapz(fine * alpha_r, fine)
    gamma_fine = 4.0 * (fine * a_cum - b_cum)
    gamma = np.interp(times, fine, gamma_fine)
    return rho12_0 * np.exp(-2j * epsilon * times) * np.exp(-gamma)


def _cumtrapz(values: np.ndarray, xs: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    np.cumsum(0.5 * (values[1:] + values[:-1]) * np.diff(xs), out=out[1:])
    return out
