"""Synthetic momentum matrices for the desk-scale studies.

Real training momenta show a sharp peak near zero with heavy tails and a
fast-decaying dominant spectrum. The generator mimics that: a rank-k core
built from heavy-tailed factor directions with a geometric spectrum, plus
an i.i.d. tail-distributed noise floor, normalized to unit Frobenius norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..matkit import as_matrix, orth

TAIL_GAUSSIAN = "gaussian"
TAIL_LAPLACE = "laplace"
TAIL_STUDENT_T = "student_t"

_TAILS = (TAIL_GAUSSIAN, TAIL_LAPLACE, TAIL_STUDENT_T)


@dataclass(frozen=True)
class SyntheticMomentumSpec:
    """Recipe for one synthetic momentum matrix.

    ``tail_param`` is the Laplace scale b, the Student-t degrees of freedom,
    or the Gaussian standard deviation, depending on ``tail``.
    ``noise_level`` is the Frobenius mass of the noise floor relative to the
    low-rank core.
    """

    shape: tuple[int, int] = (256, 256)
    dominant_rank: int = 16
    spectrum_decay: float = 0.7
    tail: str = TAIL_LAPLACE
    tail_param: float = 0.05
    noise_level: float = 0.5
    seed: int = 0

    def __post_init__(self):
        m, n = self.shape
        if self.dominant_rank < 1 or self.dominant_rank > min(m, n):
            raise ValueError("dominant_rank must lie in [1, min(shape)]")
        if not 0 < self.spectrum_decay < 1:
            raise ValueError("spectrum_decay must lie in (0, 1)")
        if self.tail not in _TAILS:
            raise ValueError(f"unknown tail {self.tail!r}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


def _tail_noise(rng: np.random.Generator, spec: SyntheticMomentumSpec) -> np.ndarray:
    if spec.tail == TAIL_LAPLACE:
        return rng.laplace(scale=spec.tail_param, size=spec.shape)
    if spec.tail == TAIL_STUDENT_T:
        return rng.standard_t(df=spec.tail_param, size=spec.shape)
    return rng.normal(scale=spec.tail_param, size=spec.shape)


def generate_momentum(spec: SyntheticMomentumSpec, seed: int | None = None) -> np.ndarray:
    """Draw one unit-Frobenius-norm momentum matrix from the recipe."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 91])
    m, n = spec.shape
    r = spec.dominant_rank
    # Laplace factor entries keep the core's element distribution peaked,
    # the way checkpoint momenta look; QR only mildly gaussianizes them.
    u, _ = orth(rng.laplace(size=(m, r)), rng)
    v, _ = orth(rng.laplace(size=(n, r)), rng)
    sig = spec.spectrum_decay ** np.arange(r)
    core = (u * sig) @ v.T
    out = core
    if spec.noise_level > 0:
        noise = _tail_noise(rng, spec)
        nn = float(np.sqrt((noise * noise).sum()))
        if nn > 0:
            cn = float(np.sqrt((core * core).sum()))
            out = core + noise * (spec.noise_level * cn / nn)
    out = as_matrix(out)
    return out / float(np.sqrt((out * out).sum()))
