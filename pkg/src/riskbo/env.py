"""Distributions of the environmental variable Z.

Two kinds are supported: a finite set of atoms with probability masses, and an
independent per-axis truncated Gaussian on a box. Both are immutable and take
an explicit ``numpy.random.Generator`` for sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

DISCRETE = "discrete"
CONTINUOUS = "continuous"

ATOM_TOL = 1e-12


class EnvError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EnvDistribution:
    """Environmental distribution, either discrete atoms or a truncated Gaussian.

    Build instances through :meth:`discrete` / :meth:`truncated_gaussian` (or the
    module-level factories) so the invariants are checked.
    """

    kind: str
    atoms: np.ndarray | None = None
    masses: np.ndarray | None = None
    mean: np.ndarray | None = None
    sd: np.ndarray | None = None
    half_width: float | None = None
    low: np.ndarray | None = None
    high: np.ndarray | None = None
    _log_norm: float = field(default=0.0, repr=False)

    @classmethod
    def discrete(cls, atoms, masses) -> "EnvDistribution":
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        if atoms.shape[0] == 1 and np.ndim(masses) == 1 and len(masses) > 1:
            atoms = atoms.T
        masses = np.asarray(masses, dtype=float).ravel()
        if atoms.shape[0] < 1:
            raise EnvError("a discrete distribution needs at least one atom")
        if atoms.shape[0] != masses.shape[0]:
            raise EnvError(f"{atoms.shape[0]} atoms but {masses.shape[0]} masses")
        if not np.all(np.isfinite(atoms)):
            raise EnvError("atoms must be finite")
        if np.any(masses <= 0):
            raise EnvError("masses must be strictly positive")
        if abs(masses.sum() - 1.0) > 1e-12:
            raise EnvError(f"masses sum to {masses.sum():.15g}, expected 1")
        if atoms.shape[0] > 1:
            order = np.lexsort(atoms.T[::-1])
            gaps = np.abs(np.diff(atoms[order], axis=0)).max(axis=1)
            if np.any(gaps <= ATOM_TOL):
                raise EnvError("atoms must be pairwise distinct")
        atoms.setflags(write=False)
        masses.setflags(write=False)
        low, high = atoms.min(axis=0), atoms.max(axis=0)
        return cls(kind=DISCRETE, atoms=atoms, masses=masses, low=low, high=high)

    @classmethod
    def truncated_gaussian(cls, mean, sd, half_width=2.0, box=None) -> "EnvDistribution":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        sd = np.broadcast_to(np.asarray(sd, dtype=float), mean.shape).copy()
        if np.any(sd <= 0) or half_width <= 0:
            raise EnvError("sd and half_width must be positive")
        low = mean - half_width * sd
        high = mean + half_width * sd
        if box is not None:
            blo, bhi = (np.broadcast_to(np.asarray(b, dtype=float), mean.shape) for b in box)
            low, high = np.maximum(low, blo), np.minimum(high, bhi)
        if np.any(low >= high):
            raise EnvError("truncation box and declared box do not overlap")
        a, b = (low - mean) / sd, (high - mean) / sd
        log_norm = float(np.sum(np.log(stats.norm.cdf(b) - stats.norm.cdf(a)) + np.log(sd)))
        return cls(
            kind=CONTINUOUS,
            mean=mean,
            sd=sd,
            half_width=float(half_width),
            low=low,
            high=high,
            _log_norm=log_norm,
        )

    @property
    def is_discrete(self) -> bool:
        return self.kind == DISCRETE

    @property
    def d_z(self) -> int:
        return int(self.low.shape[0])

    @property
    def n_atoms(self) -> int:
        if not self.is_discrete:
            raise EnvError("continuous distribution has no atoms")
        return int(self.atoms.shape[0])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` samples as an ``(n, d_z)`` array."""
        if n < 1:
            raise EnvError("n must be >= 1")
        if self.is_discrete:
            idx = rng.choice(self.n_atoms, size=n, p=self.masses)
            return self.atoms[idx].copy()
        out = np.empty((n, self.d_z))
        for j in range(self.d_z):
            out[:, j] = _rejection_axis(
                n, self.mean[j], self.sd[j], self.low[j], self.high[j], rng
            )
        return out

    def pdf(self, z) -> np.ndarray:
        """Mass (discrete) or density (continuous) at each row of ``z``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self.is_discrete:
            diff = np.abs(z[:, None, :] - self.atoms[None, :, :]).max(axis=2)
            hit = diff <= ATOM_TOL
            return (hit * self.masses[None, :]).sum(axis=1)
        inside = np.all((z >= self.low) & (z <= self.high), axis=1)
        u = (z - self.mean) / self.sd
        logp = -0.5 * np.sum(u**2, axis=1) - 0.5 * self.d_z * np.log(2 * np.pi) - self._log_norm
        return np.where(inside, np.exp(logp), 0.0)

    def grad_log_pdf(self, z) -> np.ndarray:
        """Gradient of the log density (continuous only); zero outside the support."""
        if self.is_discrete:
            raise EnvError("log-density gradient needs a continuous distribution")
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return -(z - self.mean) / self.sd**2

    def mode(self) -> np.ndarray:
        if self.is_discrete:
            return self.atoms[int(np.argmax(self.masses))].copy()
        return np.clip(self.mean, self.low, self.high)

    def atom_index(self, z) -> int:
        """Index of the atom equal to ``z`` within tolerance, or -1."""
        d = np.abs(self.atoms - np.asarray(z, dtype=float)).max(axis=1)
        i = int(np.argmin(d))
        return i if d[i] <= ATOM_TOL else -1


def _rejection_axis(n, mean, sd, low, high, rng):
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        draw = rng.normal(mean, sd, size=int(need * 1.2) + 8)
        draw = draw[(draw >= low) & (draw <= high)][:need]
        out[filled : filled + draw.size] = draw
        filled += draw.size
    return out


def _grid_axis(n_per_axis: int) -> np.ndarray:
    if n_per_axis == 1:
        return np.array([0.5])
    return np.linspace(0.0, 1.0, n_per_axis)


def make_discrete_grid(d_z: int, n_per_axis: int, weight_rule: str = "uniform") -> EnvDistribution:
    """Equi-spaced grid on ``[0, 1]^d_z`` (endpoints included) with masses.

    ``weight_rule="gaussian-bump"`` gives mass proportional to
    ``exp(-sum((z - 0.5)**2) / 0.1**2)``.
    """
    if d_z < 1 or n_per_axis < 1:
        raise EnvError("d_z and n_per_axis must be >= 1")
    axis = _grid_axis(n_per_axis)
    mesh = np.meshgrid(*([axis] * d_z), indexing="ij")
    atoms = np.stack([m.ravel() for m in mesh], axis=1)
    if weight_rule == "uniform":
        w = np.ones(atoms.shape[0])
    elif weight_rule == "gaussian-bump":
        w = np.exp(-np.sum((atoms - 0.5) ** 2, axis=1) / 0.1**2)
    else:
        raise EnvError(f"unknown weight_rule {weight_rule!r}")
    total = w.sum()
    if not total > 0:
        raise EnvError("grid weights sum to zero")
    masses = w / total
    # renormalise once more so the sum is 1 to the last bit where possible
    masses = masses / masses.sum()
    return EnvDistribution.discrete(atoms, masses)


def make_truncated_gaussian(
    d_z: int, mean: float = 0.5, sd: float = 0.125, half_width: float = 2.0
) -> EnvDistribution:
    """Independent truncated normal per axis; defaults give support ``[0.25, 0.75]^d_z``."""
    if d_z < 1:
        raise EnvError("d_z must be >= 1")
    return EnvDistribution.truncated_gaussian(
        np.full(d_z, mean), np.full(d_z, sd), half_width, box=(np.zeros(d_z), np.ones(d_z))
    )


def sample(dist: EnvDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    return dist.sample(n, rng)


def mass_or_density(dist: EnvDistribution, z) -> float:
    return float(dist.pdf(np.atleast_2d(z))[0])
