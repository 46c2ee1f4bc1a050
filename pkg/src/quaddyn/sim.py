"""Synthetic quadrotor flights for desk-scale experiments.

Rigid-body dynamics integrated with RK4 at 1 kHz, a first-order rotor
lag, linear drag and an optional slowly varying external force.  Motor
speeds come from a geometric (SE(3)) tracking controller following one
of a few reference curves.  Samples are recorded at 100 Hz.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np

from . import quat
from .data import Trajectory

REFERENCE_KINDS = ("hover", "ellipse", "lemniscate", "parabola", "line")

# reference sensor-noise standard deviations, same keys as SimConfig.noise_sigma
NOISE_PROFILE = {"p": 0.002, "v": 0.01, "w": 0.01, "q": 0.002, "u": 20.0}


class SimulationDivergedError(RuntimeError):
    pass


@dataclass
class SimConfig:
    mass: float = 1.0  # kg
    inertia: tuple = (0.01, 0.01, 0.02)  # kg m^2, body principal axes
    arm_length: float = 0.17  # m
    k_thrust: float = 1.7e-8  # N / rpm^2
    k_torque: float = 2.7e-10  # N m / rpm^2
    drag: float = 0.1  # N / (m/s)
    gravity: float = 9.81  # m/s^2
    motor_tau: float = 0.02  # s, rotor speed time constant
    max_rpm: float = 20000.0
    kx: float = 9.0
    kv: float = 4.8
    k_att: float = 144.0  # attitude gain per unit inertia, 1/s^2
    k_rate: float = 19.0  # rate gain per unit inertia, 1/s
    reference: str = "ellipse"
    speed_scale: float = 1.0
    disturbance_sigma: float = 0.0  # N, stationary std of the external force
    disturbance_tau: float = 1.0  # s
    # per-channel std of recorded-state noise: p [m], v [m/s], w [rad/s],
    # q [rad, small rotation], u [rpm]
    noise_sigma: dict = field(default_factory=dict)
    sim_rate: float = 1000.0
    record_rate: float = 100.0

    def __post_init__(self):
        positive = ("mass", "arm_length", "k_thrust", "k_torque", "gravity", "max_rpm",
                    "sim_rate", "record_rate", "speed_scale")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.inertia) <= 0:
            raise ValueError("inertia must be positive")
        if self.drag < 0 or self.motor_tau < 0:
            raise ValueError("drag and motor_tau must be non-negative")
        if self.reference not in REFERENCE_KINDS:
            raise ValueError(f"unknown reference {self.reference!r}; expected {REFERENCE_KINDS}")

    @property
    def hover_rpm(self):
        return np.sqrt(self.mass * self.gravity / (4.0 * self.k_thrust))


def _geometry(cfg):
    """Rotor positions (X layout), spin directions and the allocation matrix."""
    angles = np.deg2rad([45.0, 135.0, 225.0, 315.0])
    xy = cfg.arm_length * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    spin = np.array([1.0, -1.0, 1.0, -1.0])
    c = cfg.k_torque / cfg.k_thrust
    alloc = np.stack([np.ones(4), xy[:, 1], -xy[:, 0], spin * c])
    return alloc


class Reference:
    """Smooth reference curve with analytic velocity and acceleration."""

    AMPLITUDE = {"ellipse": (2.5, 1.5), "lemniscate": (3.0, 2.0), "parabola": (2.5, 0.2),
                 "line": (3.0, 0.0), "hover": (0.0, 0.0)}
    RATE = {"ellipse": 0.8, "lemniscate": 0.6, "parabola": 0.7, "line": 0.6, "hover": 0.0}

    def __init__(self, kind, speed_scale=1.0, height=2.0, heading=0.0, amplitude=None, rate=None):
        self.kind = kind
        self.a, self.b = amplitude or self.AMPLITUDE[kind]
        self.rate = (rate if rate is not None else self.RATE[kind]) * speed_scale
        self.height = height
        self.cos_h, self.sin_h = math.cos(heading), math.sin(heading)

    def __call__(self, t):
        a, b, w = self.a, self.b, self.rate
        st, ct = math.sin(w * t), math.cos(w * t)
        if self.kind == "ellipse":
            p = [a * ct, b * st, 0.0]
            v = [-a * w * st, b * w * ct, 0.0]
            acc = [-a * w * w * ct, -b * w * w * st, 0.0]
        elif self.kind == "lemniscate":
            s2, c2 = math.sin(2 * w * t), math.cos(2 * w * t)
            p = [a * st, 0.5 * b * s2, 0.0]
            v = [a * w * ct, b * w * c2, 0.0]
            acc = [-a * w * w * st, -2 * b * w * w * s2, 0.0]
        elif self.kind == "parabola":
            x, dx, ddx = a * st, a * w * ct, -a * w * w * st
            p = [x, 0.0, b * x * x]
            v = [dx, 0.0, 2 * b * x * dx]
            acc = [ddx, 0.0, 2 * b * (dx * dx + x * ddx)]
        elif self.kind == "line":
            p = [a * st, 0.0, 0.0]
            v = [a * w * ct, 0.0, 0.0]
            acc = [-a * w * w * st, 0.0, 0.0]
        else:
            p, v, acc = [0.0] * 3, [0.0] * 3, [0.0] * 3
        c, s = self.cos_h, self.sin_h

        def rot(u):
            return [c * u[0] - s * u[1], s * u[0] + c * u[1], u[2]]

        p = rot(p)
        p[2] += self.height
        return p, rot(v), rot(acc)

    def mean_speed(self, n=20000):
        """Mean speed over one period by trapezoidal quadrature."""
        if self.rate == 0:
            return 0.0
        period = 2 * np.pi / self.rate
        ts = np.linspace(0.0, period, n)
        speeds = np.array([math.hypot(*self(t)[1]) for t in ts])
        return float(np.trapezoid(speeds, ts) / period)


def _hat_inv(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


class GeometricController:
    """SE(3) tracking controller returning commanded rotor speeds (rpm)."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.alloc_inv = np.linalg.inv(_geometry(cfg)).tolist()
        self.f_max = cfg.k_thrust * cfg.max_rpm**2

    def __call__(self, x, ref_p, ref_v, ref_a, yaw=0.0):
        cfg = self.cfg
        m, g = cfg.mass, cfg.gravity
        qw, qx, qy, qz = x[6], x[7], x[8], x[9]
        R = [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ]
        force = [
            -cfg.kx * (x[i] - ref_p[i]) - cfg.kv * (x[3 + i] - ref_v[i]) + m * ref_a[i]
            for i in range(3)
        ]
        force[2] += m * g
        thrust = force[0] * R[0][2] + force[1] * R[1][2] + force[2] * R[2][2]
        nf = math.sqrt(force[0] ** 2 + force[1] ** 2 + force[2] ** 2)
        b3 = [c / nf for c in force]
        b1c = [math.cos(yaw), math.sin(yaw), 0.0]
        b2 = _cross(b3, b1c)
        n2 = math.sqrt(b2[0] ** 2 + b2[1] ** 2 + b2[2] ** 2)
        b2 = [c / n2 for c in b2]
        b1 = _cross(b2, b3)
        Rd = [[b1[i], b2[i], b3[i]] for i in range(3)]
        # E = Rd^T R - R^T Rd is skew; e_R = vee(E) / 2
        def dot_cols(A, i, B, j):
            return A[0][i] * B[0][j] + A[1][i] * B[1][j] + A[2][i] * B[2][j]
        e_R = [
            0.5 * (dot_cols(Rd, 2, R, 1) - dot_cols(R, 2, Rd, 1)),
            0.5 * (dot_cols(Rd, 0, R, 2) - dot_cols(R, 0, Rd, 2)),
            0.5 * (dot_cols(Rd, 1, R, 0) - dot_cols(R, 1, Rd, 0)),
        ]
        J = cfg.inertia
        w = x[10:13]
        Jw = [J[i] * w[i] for i in range(3)]
        gyro = _cross(w, Jw)
        moment = [-cfg.k_att * J[i] * e_R[i] - cfg.k_rate * Jw[i] + gyro[i] for i in range(3)]
        wrench = [thrust] + moment
        out = []
        for row in self.alloc_inv:
            f = row[0] * wrench[0] + row[1] * wrench[1] + row[2] * wrench[2] + row[3] * wrench[3]
            f = min(max(f, 0.0), self.f_max)
            out.append(math.sqrt(f / cfg.k_thrust))
        return out


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def derivative(x, cmd, cfg: SimConfig, ext_force=None):
    """Time derivative of ``[p, v, q, w, rotor_rpm]`` (17,) under ``cmd``."""
    return np.array(_Dynamics(cfg).derivative(list(x), list(cmd), ext_force))


class _Dynamics:
    """Scalar-math right-hand side; numpy call overhead dominates at 17 states."""

    def __init__(self, cfg: SimConfig):
        self.alloc = _geometry(cfg).tolist()
        self.kf = cfg.k_thrust
        self.m = cfg.mass
        self.g = cfg.gravity
        self.drag = cfg.drag
        self.J = [float(j) for j in cfg.inertia]
        self.tau = cfg.motor_tau

    def derivative(self, x, cmd, ext=None):
        vx, vy, vz = x[3], x[4], x[5]
        qw, qx, qy, qz = x[6], x[7], x[8], x[9]
        wx, wy, wz = x[10], x[11], x[12]
        kf = self.kf
        f = [kf * r * r for r in x[13:17]]
        a0, a1, a2, a3 = self.alloc
        thrust = f[0] + f[1] + f[2] + f[3]
        mx = a1[0] * f[0] + a1[1] * f[1] + a1[2] * f[2] + a1[3] * f[3]
        my = a2[0] * f[0] + a2[1] * f[1] + a2[2] * f[2] + a2[3] * f[3]
        mz = a3[0] * f[0] + a3[1] * f[1] + a3[2] * f[2] + a3[3] * f[3]
        # third column of the rotation matrix
        r02 = 2 * (qx * qz + qy * qw)
        r12 = 2 * (qy * qz - qx * qw)
        r22 = 1 - 2 * (qx * qx + qy * qy)
        m, c = self.m, self.drag / self.m
        ax = r02 * thrust / m - c * vx
        ay = r12 * thrust / m - c * vy
        az = r22 * thrust / m - self.g - c * vz
        if ext is not None:
            ax += ext[0] / m
            ay += ext[1] / m
            az += ext[2] / m
        jx, jy, jz = self.J
        dwx = (mx - (wy * jz * wz - wz * jy * wy)) / jx
        dwy = (my - (wz * jx * wx - wx * jz * wz)) / jy
        dwz = (mz - (wx * jy * wy - wy * jx * wx)) / jz
        dqw = 0.5 * (-qx * wx - qy * wy - qz * wz)
        dqx = 0.5 * (qw * wx + qy * wz - qz * wy)
        dqy = 0.5 * (qw * wy - qx * wz + qz * wx)
        dqz = 0.5 * (qw * wz + qx * wy - qy * wx)
        if self.tau > 0:
            drot = [(cmd[i] - x[13 + i]) / self.tau for i in range(4)]
        else:
            drot = [0.0, 0.0, 0.0, 0.0]
        return [vx, vy, vz, ax, ay, az, dqw, dqx, dqy, dqz, dwx, dwy, dwz] + drot

    def rk4(self, x, cmd, dt, ext=None):
        if self.tau == 0:
            x = x[:13] + list(cmd)
        k1 = self.derivative(x, cmd, ext)
        k2 = self.derivative([a + 0.5 * dt * b for a, b in zip(x, k1)], cmd, ext)
        k3 = self.derivative([a + 0.5 * dt * b for a, b in zip(x, k2)], cmd, ext)
        k4 = self.derivative([a + dt * b for a, b in zip(x, k3)], cmd, ext)
        out = [a + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
               for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4)]
        n = math.sqrt(out[6] ** 2 + out[7] ** 2 + out[8] ** 2 + out[9] ** 2)
        out[6:10] = [c / n for c in out[6:10]]
        return out


def rk4_step(x, cmd, dt, cfg: SimConfig, ext_force=None):
    """One RK4 step with ``cmd`` held; the quaternion is renormalized."""
    ext = None if ext_force is None else list(ext_force)
    return np.array(_Dynamics(cfg).rk4(list(map(float, x)), list(map(float, cmd)), dt, ext))


def mechanical_energy(x, cfg: SimConfig):
    v, w = x[3:6], x[10:13]
    J = np.asarray(cfg.inertia)
    return 0.5 * cfg.mass * v @ v + cfg.mass * cfg.gravity * x[2] + 0.5 * w @ (J * w)


def simulate(cfg: SimConfig, duration, seed=0, reference: Reference | None = None, name=None):
    """Fly the reference for ``duration`` seconds.

    Returns the recorded trajectory; when noise is configured the noisy
    recording is returned and the clean one is kept as ``.truth``.
    """
    if duration < 1.0:
        raise ValueError("duration must be >= 1 s")
    rng = np.random.default_rng(seed)
    if reference is None:
        heading = rng.uniform(-np.pi, np.pi) if cfg.reference != "hover" else 0.0
        reference = Reference(cfg.reference, cfg.speed_scale, heading=heading)
    ctrl = GeometricController(cfg)
    dt = 1.0 / cfg.sim_rate
    sub = int(round(cfg.sim_rate / cfg.record_rate))
    n_rec = int(round(duration * cfg.record_rate))

    p0, v0, _ = reference(0.0)
    x = np.concatenate([p0, v0, quat.IDENTITY, np.zeros(3), np.full(4, cfg.hover_rpm)]).tolist()
    dyn = _Dynamics(cfg)
    ext = np.zeros(3)
    decay = np.exp(-dt / cfg.disturbance_tau) if cfg.disturbance_sigma > 0 else 0.0
    kick = cfg.disturbance_sigma * np.sqrt(1.0 - decay**2)

    rec = np.empty((n_rec, 17))
    for k in range(n_rec * sub):
        t = k * dt
        cmd = ctrl(x, *reference(t))
        if k % sub == 0:
            rec[k // sub] = x
        if cfg.disturbance_sigma > 0:
            ext = decay * ext + kick * rng.standard_normal(3)
        x = dyn.rk4(x, cmd, dt, ext.tolist() if cfg.disturbance_sigma > 0 else None)
        speed = math.sqrt(x[3] ** 2 + x[4] ** 2 + x[5] ** 2)
        if not math.isfinite(speed) or speed > 50.0:
            raise SimulationDivergedError(f"simulation diverged at t={t:.3f} s")

    t_rec = np.arange(n_rec) / cfg.record_rate
    clean = Trajectory(
        t=t_rec, p=rec[:, 0:3].copy(), v=rec[:, 3:6].copy(),
        q=quat.make_continuous(rec[:, 6:10]), w=rec[:, 10:13].copy(),
        u=rec[:, 13:17].copy(), name=name or f"{reference.kind}_{seed}",
    )
    sigma = {k: float(s) for k, s in cfg.noise_sigma.items() if s}
    if not sigma:
        return clean
    noisy = Trajectory(
        t=clean.t.copy(),
        p=clean.p + sigma.get("p", 0.0) * rng.standard_normal(clean.p.shape),
        v=clean.v + sigma.get("v", 0.0) * rng.standard_normal(clean.v.shape),
        q=clean.q,
        w=clean.w + sigma.get("w", 0.0) * rng.standard_normal(clean.w.shape),
        u=clean.u + sigma.get("u", 0.0) * rng.standard_normal(clean.u.shape),
        name=clean.name,
        truth=clean,
    )
    if sigma.get("q"):
        kick_q = quat.exp_map(sigma["q"] * rng.standard_normal((n_rec, 3)))
        noisy.q = quat.make_continuous(quat.compose(kick_q, clean.q))
    return noisy


def make_dataset(n, duration, seed, kinds=("ellipse", "lemniscate", "parabola", "line"),
                 speed_range=(0.8, 1.6), **overrides):
    """``n`` trajectories cycling through ``kinds`` with seeded speed scales."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        scale = float(rng.uniform(*speed_range))
        cfg = SimConfig(reference=kind, speed_scale=scale, **overrides)
        sub_seed = int(rng.integers(2**31))
        out.append(simulate(cfg, duration, seed=sub_seed, name=f"{kind}_{i:03d}"))
    return out
