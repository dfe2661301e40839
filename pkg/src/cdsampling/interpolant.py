"""Conditional interpolants and the closed-form quantities of their paths.

A conditional interpolant is a family of diffeomorphisms ``F_t`` anchored at
a reference point ``z`` with ``F_1 = id`` and ``F_t -> z`` as ``t -> 0``.
Pushing the target through ``F_t`` gives a path of densities whose log
density, score and transport velocity are all available in closed form.
"""

from __future__ import annotations

import numpy as np

from .targets import Target

__all__ = ["T_MIN", "SingularTimeError", "Interpolant", "LinearInterpolant", "ConditionalPath"]

#: Smallest admissible time; velocities blow up as ``1/t``.
T_MIN = 1e-4


class SingularTimeError(ValueError):
    """Raised when an operation needs ``F_t`` to be invertible but ``t < T_MIN``."""


def _check_time(t: float) -> float:
    t = float(t)
    if not (T_MIN <= t <= 1.0):
        raise SingularTimeError(f"time {t} outside [{T_MIN}, 1]; the interpolant is singular near 0")
    return t


class Interpolant:
    """Interface for conditional interpolants ``F_t(x)`` anchored at ``z``.

    Subclasses provide the map, its inverse, its time derivative, the Jacobian
    and ``log|det J|``.  The conditional score is then available through
    :meth:`general_score` for any interpolant.
    """

    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)

    def forward(self, t, x):
        raise NotImplementedError

    def inverse(self, t, y):
        raise NotImplementedError

    def time_derivative(self, t, x):
        """``d/dt F_t(x)`` at a fixed pre-image ``x``."""
        raise NotImplementedError

    def jacobian(self, t, x):
        raise NotImplementedError

    def log_abs_det_jacobian(self, t, x):
        raise NotImplementedError

    def grad_log_abs_det_jacobian(self, t, y):
        """Gradient w.r.t. the *output* ``y`` of ``log|det J(F^{-1}(y))|``."""
        raise NotImplementedError

    def velocity(self, t, y):
        """``u_t(y) = dF_t/dt`` evaluated at the pre-image of ``y``."""
        return self.time_derivative(t, self.inverse(t, y))

    def general_score(self, t, y, target_score):
        """Score of the pushforward density given the target score at ``F^{-1}(y)``.

        ``J^{-T} grad log pi(F^{-1}(y)) - grad_y log|det J(F^{-1}(y))|``.
        """
        x = self.inverse(t, y)
        jac = self.jacobian(t, x)
        first = np.linalg.solve(np.swapaxes(jac, -1, -2), target_score[..., None])[..., 0]
        return first - self.grad_log_abs_det_jacobian(t, y)


class LinearInterpolant(Interpolant):
    """``F_t(x) = (1 - t) z + t x``.  ``z`` may be ``(D,)`` or a per-chain ``(C, D)``."""

    def forward(self, t, x):
        t = float(t)
        return (1.0 - t) * self.z + t * np.asarray(x, dtype=float)

    def inverse(self, t, y):
        t = _check_time(t)
        return (np.asarray(y, dtype=float) - (1.0 - t) * self.z) / t

    def time_derivative(self, t, x):
        return np.asarray(x, dtype=float) - self.z

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        dim = x.shape[-1]
        return np.broadcast_to(float(t) * np.eye(dim), x.shape[:-1] + (dim, dim))

    def log_abs_det_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], x.shape[-1] * np.log(float(t)))

    def grad_log_abs_det_jacobian(self, t, y):
        return np.zeros_like(np.asarray(y, dtype=float))

    def velocity(self, t, y):
        t = _check_time(t)
        return (np.asarray(y, dtype=float) - self.z) / t


class ConditionalPath:
    """Path of conditional densities ``pi_{t|z}`` induced by an interpolant.

    Each density/score method consumes exactly one target evaluation per
    point.  Values are unnormalized: they inherit the target's missing
    normalizing constant.
    """

    def __init__(self, interpolant: Interpolant, target: Target):
        self.interpolant = interpolant
        self.target = target

    @property
    def z(self):
        return self.interpolant.z

    @property
    def dim(self) -> int:
        return self.target.dim

    def log_density(self, t, x):
        t = _check_time(t)
        pre = self.interpolant.inverse(t, x)
        return self.target.log_density(pre) - self.interpolant.log_abs_det_jacobian(t, pre)

    def score(self, t, x):
        t = _check_time(t)
        return self.target.score(self.interpolant.inverse(t, x)) / t

    def value_and_score(self, t, x):
        """Fused ``(log pi_{t|z}(x), grad log pi_{t|z}(x))``; one evaluation."""
        t = _check_time(t)
        pre = self.interpolant.inverse(t, x)
        lp, g = self.target.value_and_score(pre)
        return lp - self.interpolant.log_abs_det_jacobian(t, pre), g / t

    def velocity(self, t, x):
        return self.interpolant.velocity(t, x)

    def drift(self, t, x, sigma_t: float, score=None):
        """SDE drift ``u_t + sigma_t^2 / 2 * grad log pi_{t|z}``.

        Pass a precomputed conditional ``score`` to avoid a new evaluation.
        """
        t = _check_time(t)
        if sigma_t < 0:
            raise ValueError("sigma_t must be non-negative")
        if score is None:
            score = self.score(t, x)
        return self.velocity(t, x) + 0.5 * sigma_t**2 * score

    def time_score(self, t, x, target_score_at_preimage):
        """``d/dt log pi_{t|z}(x)`` for the linear map, from the target score at ``F^{-1}(x)``.

        Equals ``-(x - z) . grad log pi(F^{-1}(x)) / t^2 - D / t``.
        """
        t = _check_time(t)
        x = np.asarray(x, dtype=float)
        return -np.sum((x - self.z) * target_score_at_preimage, axis=-1) / t**2 - x.shape[-1] / t
