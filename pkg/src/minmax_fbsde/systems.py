"""Control-affine stochastic systems and quadratic task costs.

Dynamics have the form

    dx = f(x) dt + G u dt + Sigma dw,      G = Sigma @ Gamma_u  (exactly)

with constant actuation G, constant diffusion Sigma, and constant noise-to-
control map Gamma_u for every system shipped here. Drift functions are
written against the dual-mode expression helpers and operate on column
batches (n, M), so the same code runs taped and tape-free.

Angle coordinates are wrapped to (-pi, pi] around the target for cost and
success evaluation only, never inside integration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import scipy.linalg

from . import autodiff as ad

TWO_PI = 2.0 * np.pi

# noise presets: multiplier applied to each system's unit noise pattern
NOISE_PRESETS = {"low": 0.1, "high": 0.8}


def resolve_noise_scale(noise) -> float:
    if isinstance(noise, str):
        try:
            return NOISE_PRESETS[noise]
        except KeyError:
            raise ValueError(
                f"unknown noise preset {noise!r}; use one of {sorted(NOISE_PRESETS)} or a number"
            ) from None
    scale = float(noise)
    if scale < 0:
        raise ValueError(f"noise scale must be nonnegative, got {scale}")
    return scale


@dataclass
class SystemModel:
    """A task: dynamics, noise layout, goal state, and success tolerances.

    ``success_tol`` is a per-dimension tolerance on the terminal deviation
    from ``target``; unconstrained dimensions carry ``inf``.
    """

    name: str
    n: int
    p: int
    m: int
    drift: Callable  # drift(X, t) on (n, M) columns, dual-mode
    actuation: np.ndarray  # G, (n, p)
    sigma: np.ndarray  # (n, m)
    gamma_u: np.ndarray  # (m, p)
    target: np.ndarray  # (n,)
    x0: np.ndarray  # (n,)
    state_labels: tuple[str, ...]
    success_tol: np.ndarray  # (n,)
    angle_dims: tuple[int, ...] = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actuation = np.asarray(self.actuation, dtype=np.float64).reshape(self.n, self.p)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(self.n, self.m)
        self.gamma_u = np.asarray(self.gamma_u, dtype=np.float64).reshape(self.m, self.p)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(self.n)
        self.x0 = np.asarray(self.x0, dtype=np.float64).reshape(self.n)
        self.success_tol = np.asarray(self.success_tol, dtype=np.float64).reshape(self.n)
        residual = np.max(np.abs(self.actuation - self.sigma @ self.gamma_u))
        if residual > 1e-10:
            raise ValueError(
                f"{self.name}: actuation is not sigma @ gamma_u (residual {residual:.3e})"
            )

    def eval_dynamics(self, x, t: float = 0.0):
        """(f, G, Sigma, Gamma_u) at a single state; all finite or ValueError."""
        x = np.asarray(x, dtype=np.float64).reshape(self.n)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{self.name}: non-finite state {x}")
        f = np.asarray(self.drift(x.reshape(self.n, 1), t)).reshape(self.n, 1)
        out = (f, self.actuation, self.sigma, self.gamma_u)
        for part in out:
            if not np.all(np.isfinite(part)):
                raise ValueError(f"{self.name}: non-finite dynamics term at {x}")
        return out


def wrap_angle(delta):
    """Wrap a plain array of angle deviations to (-pi, pi]."""
    return delta - TWO_PI * np.ceil((delta - np.pi) / TWO_PI)


def deviation_from(X, target: np.ndarray, angle_dims: tuple[int, ...]):
    """X minus target, with angle rows shifted by whole periods.

    The per-column period shift is computed from current values and treated
    as a constant, which is exact for the cost (it is periodic) and gives the
    almost-everywhere derivative.
    """
    vals = X.value if isinstance(X, ad.Var) else np.asarray(X)
    n, cols = vals.shape
    offsets = np.repeat(np.asarray(target, dtype=np.float64).reshape(n, 1), cols, axis=1)
    for j in angle_dims:
        raw = vals[j] - target[j]
        offsets[j] += raw - wrap_angle(raw)
    return ad.sub(X, offsets)


@dataclass
class CostSpec:
    """Quadratic running/terminal penalties plus game parameters.

    running cost  q(x) = 0.5 * sum_j rw[j] * dev_j(x)^2
    terminal cost g(x) = 0.5 * sum_j tw[j] * dev_j(x)^2
    control price R_u (positive definite), adversary temperature epsilon > 0,
    terminal-matching weight beta in [0, 1], parameter decay lambda >= 0.
    """

    running_weights: np.ndarray
    terminal_weights: np.ndarray
    target: np.ndarray
    r_u: np.ndarray
    epsilon: float
    beta: float = 0.8
    weight_decay: float = 1e-4
    angle_dims: tuple[int, ...] = ()

    def __post_init__(self):
        self.running_weights = np.asarray(self.running_weights, dtype=np.float64).ravel()
        self.terminal_weights = np.asarray(self.terminal_weights, dtype=np.float64).ravel()
        self.target = np.asarray(self.target, dtype=np.float64).ravel()
        r = np.asarray(self.r_u, dtype=np.float64)
        if r.ndim == 0:
            r = r.reshape(1, 1)
        elif r.ndim == 1:
            r = np.diag(r)
        self.r_u = r
        self.angle_dims = tuple(int(j) for j in self.angle_dims)
        if np.any(self.running_weights < 0) or np.any(self.terminal_weights < 0):
            raise ValueError("cost weights must be nonnegative")
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")
        if self.r_u.ndim != 2 or self.r_u.shape[0] != self.r_u.shape[1]:
            raise ValueError(f"R_u must be square, got shape {self.r_u.shape}")
        if not np.allclose(self.r_u, self.r_u.T, atol=1e-12):
            raise ValueError("R_u must be symmetric positive definite")
        try:
            self._r_chol = scipy.linalg.cho_factor(self.r_u)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise ValueError("R_u must be symmetric positive definite") from exc

    @property
    def r_u_cholesky(self):
        return self._r_chol

    def solve_r(self, rhs: np.ndarray) -> np.ndarray:
        """R_u^{-1} @ rhs via the cached factorization (no explicit inverse)."""
        return scipy.linalg.cho_solve(self._r_chol, rhs)

    def _quad(self, X, weights: np.ndarray):
        dev = deviation_from(X, self.target, self.angle_dims)
        w_row = weights.reshape(1, -1)
        return ad.smul(ad.matmul(w_row, ad.mul(dev, dev)), 0.5)

    def running_expr(self, X, t: float = 0.0):
        """Batched running cost, (1, M) from (n, M); dual-mode."""
        return self._quad(X, self.running_weights)

    def terminal_expr(self, X):
        """Batched terminal cost, (1, M) from (n, M); dual-mode."""
        return self._quad(X, self.terminal_weights)

    def running_cost(self, x, t: float = 0.0) -> float:
        out = self.running_expr(np.asarray(x, dtype=np.float64).reshape(-1, 1), t)
        return float(np.asarray(out)[0, 0])

    def terminal_cost(self, x) -> float:
        out = self.terminal_expr(np.asarray(x, dtype=np.float64).reshape(-1, 1))
        return float(np.asarray(out)[0, 0])


def eval_running_cost(costs: CostSpec, x, t: float = 0.0) -> float:
    return costs.running_cost(x, t)


def eval_terminal_cost(costs: CostSpec, x) -> float:
    return costs.terminal_cost(x)


# ---------------------------------------------------------------------------
# pendulum


def pendulum(
    noise: Any = "low",
    mass: float = 1.0,
    length: float = 1.0,
    damping: float = 0.1,
    gravity: float = 9.81,
) -> SystemModel:
    """Torque-actuated pendulum, state (theta, theta_dot), theta = 0 hanging down.

    theta_ddot = (u - damping * theta_dot - mass * gravity * length * sin(theta))
                 / (mass * length^2)

    The swing-up goal is the upright state (pi, 0). Noise enters the
    angular-acceleration channel only.
    """
    scale = resolve_noise_scale(noise)
    inertia = mass * length * length
    grav_coeff = mass * gravity * length

    def drift(X, t=0.0):
        theta = ad.rows(X, 0, 1)
        omega = ad.rows(X, 1, 2)
        acc = (omega * (-damping) + ad.sin(theta) * (-grav_coeff)) * (1.0 / inertia)
        return ad.vstack((omega, acc))

    g_mat = np.array([[0.0], [1.0 / inertia]])
    sigma = np.array([[0.0], [scale / inertia]])
    gamma = np.array([[1.0 / scale]]) if scale > 0 else np.array([[0.0]])
    if scale == 0:
        # degenerate noiseless variant used by deterministic tests
        sigma = np.zeros((2, 1))
        g_mat = np.zeros((2, 1))

    return SystemModel(
        name="pendulum",
        n=2,
        p=1,
        m=1,
        drift=drift,
        actuation=g_mat,
        sigma=sigma,
        gamma_u=gamma,
        target=np.array([np.pi, 0.0]),
        x0=np.array([0.0, 0.0]),
        state_labels=("theta", "theta_dot"),
        success_tol=np.array([0.2, 1.0]),
        angle_dims=(0,),
        params={
            "mass": mass,
            "length": length,
            "damping": damping,
            "gravity": gravity,
            "noise_scale": scale,
        },
    )


# ---------------------------------------------------------------------------
# quadcopter


def quadcopter(
    noise: Any = "low",
    mass: float = 0.5,
    arm: float = 0.17,
    jx: float = 4.85e-3,
    jy: float = 4.85e-3,
    jz: float = 8.81e-3,
    gravity: float = 9.81,
) -> SystemModel:
    """Twelve-state rigid-body quadcopter in a north-east-down frame.

    State: position (pn, pe, pd), attitude (phi, theta, psi), body-frame
    velocity (u, v, w), body rates (pr, qr, rr). Attitude kinematics use the
    near-hover identification of Euler-angle rates with body rates. Controls
    are the collective-thrust and three-torque combinations expressed in
    normalized units: vertical specific force above hover (thrust / mass)
    and body angular accelerations (torque / inertia). Physical rotor forces
    are a constant diagonal reparameterization of these inputs (mass and the
    inertia moments), absorbed into the control price; the hover thrust is
    folded into the drift so zero control holds the trim exactly.

    The reach target is 1 m forward, 1 m right and 1 m up: (1, 1, -1) in NED
    position coordinates. Noise enters the four actuated acceleration
    channels (w_dot, p_dot, q_dot, r_dot).
    """
    scale = resolve_noise_scale(noise)

    def drift(X, t=0.0):
        phi = ad.rows(X, 3, 4)
        th = ad.rows(X, 4, 5)
        psi = ad.rows(X, 5, 6)
        u = ad.rows(X, 6, 7)
        v = ad.rows(X, 7, 8)
        w = ad.rows(X, 8, 9)
        pr = ad.rows(X, 9, 10)
        qr = ad.rows(X, 10, 11)
        rr = ad.rows(X, 11, 12)

        sphi, cphi = ad.sin(phi), ad.cos(phi)
        sth, cth = ad.sin(th), ad.cos(th)
        spsi, cpsi = ad.sin(psi), ad.cos(psi)

        # inertial position rates: R(phi, theta, psi) @ body velocity
        pn_dot = ad.add(
            ad.mul(ad.mul(cth, cpsi), u),
            ad.add(
                ad.mul(ad.sub(ad.mul(ad.mul(sphi, sth), cpsi), ad.mul(cphi, spsi)), v),
                ad.mul(ad.add(ad.mul(ad.mul(cphi, sth), cpsi), ad.mul(sphi, spsi)), w),
            ),
        )
        pe_dot = ad.add(
            ad.mul(ad.mul(cth, spsi), u),
            ad.add(
                ad.mul(ad.add(ad.mul(ad.mul(sphi, sth), spsi), ad.mul(cphi, cpsi)), v),
                ad.mul(ad.sub(ad.mul(ad.mul(cphi, sth), spsi), ad.mul(sphi, cpsi)), w),
            ),
        )
        pd_dot = ad.add(
            ad.mul(ad.smul(sth, -1.0), u),
            ad.add(ad.mul(ad.mul(sphi, cth), v), ad.mul(ad.mul(cphi, cth), w)),
        )

        # body-frame accelerations; hover thrust cancels gravity at trim
        u_dot = ad.sub(ad.sub(ad.mul(rr, v), ad.mul(qr, w)), ad.smul(sth, gravity))
        v_dot = ad.add(ad.sub(ad.mul(pr, w), ad.mul(rr, u)), ad.smul(ad.mul(cth, sphi), gravity))
        w_dot = ad.add(
            ad.sub(ad.mul(qr, u), ad.mul(pr, v)),
            ad.smul(ad.sub(ad.mul(cth, cphi), _one_like(u)), gravity),
        )

        p_dot = ad.smul(ad.mul(qr, rr), (jy - jz) / jx)
        q_dot = ad.smul(ad.mul(pr, rr), (jz - jx) / jy)
        r_dot = ad.smul(ad.mul(pr, qr), (jx - jy) / jz)

        return ad.vstack(
            (pn_dot, pe_dot, pd_dot, pr, qr, rr, u_dot, v_dot, w_dot, p_dot, q_dot, r_dot)
        )

    g_mat = np.zeros((12, 4))
    g_mat[8, 0] = -1.0  # specific force acts along -z_body (up)
    g_mat[9, 1] = 1.0
    g_mat[10, 2] = 1.0
    g_mat[11, 3] = 1.0

    sigma = np.zeros((12, 4))
    gamma = np.zeros((4, 4))
    if scale > 0:
        for k, row in enumerate((8, 9, 10, 11)):
            sigma[row, k] = scale
            gamma[k, k] = g_mat[row, k] / scale

    target = np.zeros(12)
    target[0], target[1], target[2] = 1.0, 1.0, -1.0

    tol = np.full(12, np.inf)
    tol[0] = tol[1] = tol[2] = 0.25

    return SystemModel(
        name="quadcopter",
        n=12,
        p=4,
        m=4,
        drift=drift,
        actuation=g_mat if scale > 0 else np.zeros((12, 4)),
        sigma=sigma,
        gamma_u=gamma,
        target=target,
        x0=np.zeros(12),
        state_labels=(
            "pn", "pe", "pd", "phi", "theta", "psi",
            "u", "v", "w", "p", "q", "r",
        ),
        success_tol=tol,
        angle_dims=(3, 4, 5),
        params={
            "mass": mass,
            "arm": arm,
            "jx": jx,
            "jy": jy,
            "jz": jz,
            "gravity": gravity,
            "noise_scale": scale,
        },
    )


def _one_like(x):
    """Constant ones with the shape of a (1, M) row; dual-mode."""
    if isinstance(x, ad.Var):
        return x.tape.constant(np.ones(x.shape))
    return np.ones(np.asarray(x).shape)


# ---------------------------------------------------------------------------
# linear-quadratic benchmark system (double integrator)


def lq_double_integrator(noise: Any = 0.2) -> SystemModel:
    """Stochastic double integrator: position/velocity, force input.

    x_dot = v, v_dot = u + noise; the closed-form value function of the
    quadratic problem built on top of this system is the solver's oracle.
    """
    scale = resolve_noise_scale(noise)
    a_mat = np.array([[0.0, 1.0], [0.0, 0.0]])

    def drift(X, t=0.0):
        return ad.matmul(a_mat, X)

    g_mat = np.array([[0.0], [1.0]])
    sigma = np.array([[0.0], [scale]])
    gamma = np.array([[1.0 / scale]]) if scale > 0 else np.array([[0.0]])
    if scale == 0:
        g_mat = np.zeros((2, 1))

    return SystemModel(
        name="lq",
        n=2,
        p=1,
        m=1,
        drift=drift,
        actuation=g_mat,
        sigma=sigma,
        gamma_u=gamma,
        target=np.zeros(2),
        x0=np.array([1.0, 0.0]),
        state_labels=("position", "velocity"),
        success_tol=np.array([0.25, 0.5]),
        angle_dims=(),
        params={"noise_scale": scale},
    )


SYSTEM_FACTORIES = {
    "pendulum": pendulum,
    "quadcopter": quadcopter,
    "lq": lq_double_integrator,
}


def make_system(name: str, noise: Any = "low", physics: dict | None = None) -> SystemModel:
    try:
        factory = SYSTEM_FACTORIES[name]
    except KeyError:
        raise ValueError(
            f"unknown system {name!r}; available: {sorted(SYSTEM_FACTORIES)}"
        ) from None
    return factory(noise=noise, **(physics or {}))
