"""Benchmark problems: closed-form solutions and trapping potentials."""

import numpy as np

from .fem import ScalarField

__all__ = [
    "exact_soliton",
    "soliton_initial",
    "potential_library",
]


def _coords_1d(points):
    points = np.asarray(points, dtype=float)
    if points.ndim and points.shape[-1] == 1:
        return points[..., 0]
    return points


class _Soliton:
    """u(x, t) for the focusing cubic equation i u_t = -u_xx - 2|u|^2 u.

    A time-periodic bound state of two standing solitons; u(0, 0) = -216/37.
    Callable on point arrays with a trailing singleton space axis or on bare
    coordinate arrays; `gradient` returns the analytic x-derivative with a
    trailing axis of size 1.  All exponentials are rescaled by exp(-6|x|)
    (cancelling between numerator and denominator) so the evaluation never
    overflows.
    """

    period = np.pi / 2.0

    def _parts(self, points, t):
        x = _coords_1d(points)
        s = np.exp(-6.0 * np.abs(x))
        e = lambda c: np.exp(c * x - 6.0 * np.abs(x))
        p1 = np.exp(4j * t)
        p2 = np.exp(16j * t)
        num = 8.0 * p1 * (9.0 * e(-4.0) + 16.0 * e(4.0)) - 32.0 * p2 * (
            4.0 * e(-2.0) + 9.0 * e(2.0)
        )
        den = (
            -128.0 * np.cos(12.0 * t) * s
            + 4.0 * e(-6.0)
            + 16.0 * e(6.0)
            + 81.0 * e(-2.0)
            + 64.0 * e(2.0)
        )
        return num, den, x

    def __call__(self, points, t=0.0):
        num, den, _ = self._parts(points, t)
        # den is real: divide componentwise so each part rounds once
        return num.real / den + 1j * (num.imag / den)

    def gradient(self, points, t=0.0):
        num, den, x = self._parts(points, t)
        e = lambda c: np.exp(c * x - 6.0 * np.abs(x))
        p1 = np.exp(4j * t)
        p2 = np.exp(16j * t)
        dnum = 8.0 * p1 * (-36.0 * e(-4.0) + 64.0 * e(4.0)) - 32.0 * p2 * (
            -8.0 * e(-2.0) + 18.0 * e(2.0)
        )
        dden = (
            -24.0 * e(-6.0) + 96.0 * e(6.0) - 162.0 * e(-2.0) + 128.0 * e(2.0)
        )
        # every part carries the same exp(-6|x|) scaling, which cancels in
        # (num' den - num den') / den^2
        du = (dnum * den - num * dden) / den**2
        return du[..., None]


exact_soliton = _Soliton()


def soliton_initial(points):
    """Initial value of the soliton benchmark (the stated t = 0 form).

    Implemented in real arithmetic, independently of the general formula,
    with the same overflow-safe exp(-6|x|) rescaling.
    """
    x = _coords_1d(points)
    s = np.exp(-6.0 * np.abs(x))
    e = lambda c: np.exp(c * x - 6.0 * np.abs(x))
    num = 8.0 * (9.0 * e(-4.0) + 16.0 * e(4.0)) - 32.0 * (
        4.0 * e(-2.0) + 9.0 * e(2.0)
    )
    den = (
        -128.0 * s + 4.0 * e(-6.0) + 16.0 * e(6.0) + 81.0 * e(-2.0) + 64.0 * e(2.0)
    )
    return num / den


def _double_well(points):
    points = np.asarray(points, dtype=float)
    r2 = (points**2).sum(axis=-1)
    wells = np.exp(-0.5 * points**2).sum(axis=-1)
    return 0.5 * r2 + 4.0 * wells


def _harmonic(points):
    points = np.asarray(points, dtype=float)
    return 0.5 * (points**2).sum(axis=-1)


def _indicator_first_positive(points):
    points = np.asarray(points, dtype=float)
    return 0.5 * (points**2).sum(axis=-1) + (points[..., 0] >= 0.0)


def _lattice(points):
    """Checkerboard of unit cells: 2 on cells with odd index sum, else 0."""
    points = np.asarray(points, dtype=float)
    return 2.0 * (np.floor(points).sum(axis=-1).astype(np.int64) % 2)


_POTENTIALS = {
    "harmonic": (_harmonic, "smooth"),
    "double_well": (_double_well, "smooth"),
    "discontinuous": (_indicator_first_positive, "discontinuous"),
    "lattice": (_lattice, "discontinuous"),
}


def potential_library(name):
    """Named trapping potentials as labeled scalar fields."""
    try:
        fn, tag = _POTENTIALS[name]
    except KeyError:
        raise KeyError(
            f"unknown potential {name!r}; available: {sorted(_POTENTIALS)}"
        ) from None
    return ScalarField(fn, smoothness_tag=tag, label=name)
