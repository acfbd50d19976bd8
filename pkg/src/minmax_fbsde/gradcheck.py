"""Gradient audits: every reverse-mode derivative in the package is compared
against central finite differences at random points. The audit covers the
primitive operations, one recurrent cell step, and a full multi-step rollout
including the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fbsde
from .autodiff import Tape, finite_difference_check
from .fbsde import HorizonGrid
from .neural import init_net, lstm_stack_forward
from .systems import lq_double_integrator, pendulum
from .training import ParamStore, init_store, TrainConfig


@dataclass
class AuditRow:
    name: str
    points: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)


def _scalarize(tape: Tape, var: ad.Var) -> ad.Var:
    """Contract any node to (1,1) with a fixed random weighting so the
    finite-difference probe exercises every output entry."""
    rng = np.random.default_rng(12345)
    w = rng.normal(size=var.shape)
    return ad.total(ad.mul(var, tape.constant(w)))


def _audit_unary(op_name: str, fn, shape=(3, 4), points: int = 100, seed: int = 0,
                 tol: float = 1e-4, low: float = -2.0, high: float = 2.0) -> AuditRow:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        x0 = rng.uniform(low, high, size=shape)

        def f(vec):
            tape = Tape()
            x = tape.leaf(vec.reshape(shape))
            out = _scalarize(tape, fn(x))
            (g,) = tape.backward(out, [x])
            return float(out.value[0, 0]), g.ravel()

        worst = max(worst, finite_difference_check(f, x0.ravel()))
    return AuditRow(op_name, points, worst, tol)


def _audit_binary(op_name: str, fn, shape_a, shape_b, points: int = 100, seed: int = 1,
                  tol: float = 1e-4) -> AuditRow:
    rng = np.random.default_rng(seed)
    size_a = int(np.prod(shape_a))
    worst = 0.0
    for _ in range(points):
        vec0 = rng.uniform(-2.0, 2.0, size=size_a + int(np.prod(shape_b)))

        def f(vec):
            tape = Tape()
            a = tape.leaf(vec[:size_a].reshape(shape_a))
            b = tape.leaf(vec[size_a:].reshape(shape_b))
            out = _scalarize(tape, fn(a, b))
            ga, gb = tape.backward(out, [a, b])
            return float(out.value[0, 0]), np.concatenate([ga.ravel(), gb.ravel()])

        worst = max(worst, finite_difference_check(f, vec0))
    return AuditRow(op_name, points, worst, tol)


def audit_primitives(points: int = 100) -> list[AuditRow]:
    rows = [
        _audit_binary("matrix-multiply", ad.matmul, (3, 4), (4, 5)),
        _audit_binary("add", ad.add, (3, 4), (3, 4)),
        _audit_binary("subtract", ad.sub, (3, 4), (3, 4)),
        _audit_binary("element-multiply", ad.mul, (3, 4), (3, 4)),
        _audit_unary("scalar-multiply", lambda x: ad.smul(x, -1.7)),
        _audit_unary("tanh", ad.tanh),
        _audit_unary("sigmoid", ad.sigmoid),
        _audit_unary("sin", ad.sin),
        _audit_unary("cos", ad.cos),
        _audit_unary("sum", ad.total),
        _audit_unary("sum-of-squares", ad.sumsq),
        _audit_unary("slice-rows", lambda x: ad.rows(x, 1, 3), shape=(4, 3)),
    ]

    def stack3(a, b):
        return ad.vstack([a, b, a])

    rows.append(_audit_binary("concat-rows", stack3, (2, 3), (3, 3)))
    for row in rows:
        row.points = points
    return rows


def audit_lstm_step(hidden: int = 5, input_dim: int = 3, batch: int = 4,
                    seed: int = 3, tol: float = 1e-4) -> AuditRow:
    """One forward pass of the two-layer recurrent cell with every weight,
    input and carry state perturbed."""
    rng = np.random.default_rng(seed)
    net0 = init_net(input_dim, hidden, 2, rng)
    named = net0.named_arrays()
    sizes = [arr.size for _, arr in named]
    shapes = [arr.shape for _, arr in named]
    x_size = input_dim * batch
    total_size = sum(sizes) + x_size

    def f(vec):
        tape = Tape()
        offset = 0
        leaves = []
        arrays = []
        for size, shape in zip(sizes, shapes):
            leaf = tape.leaf(vec[offset:offset + size].reshape(shape))
            leaves.append(leaf)
            arrays.append(leaf)
            offset += size
        x = tape.leaf(vec[offset:offset + x_size].reshape(input_dim, batch))
        leaves.append(x)
        net = type(net0)(
            layer1=type(net0.layer1)(W=arrays[0], U=arrays[1], b=arrays[2]),
            layer2=type(net0.layer2)(W=arrays[3], U=arrays[4], b=arrays[5]),
            out_w=arrays[6], out_b=arrays[7],
        )
        out, _ = lstm_stack_forward(net, x)
        scal = _scalarize(tape, out)
        grads = tape.backward(scal, leaves)
        return float(scal.value[0, 0]), np.concatenate([g.ravel() for g in grads])

    point = rng.uniform(-0.8, 0.8, size=total_size)
    err = finite_difference_check(f, point)
    return AuditRow("lstm-step", 1, err, tol)


def audit_rollout(steps: int = 5, batch: int = 2, seed: int = 11,
                  tol: float = 1e-4, system: str = "pendulum") -> AuditRow:
    """Full solver pass: multi-step importance-sampled rollout plus training
    loss, differentiated with respect to every trainable parameter."""
    from .systems import CostSpec

    if system == "pendulum":
        sys = pendulum(noise="low")
        running = np.array([1.0, 0.1])
        terminal = np.array([10.0, 1.0])
    else:
        sys = lq_double_integrator()
        running = np.array([1.0, 0.1])
        terminal = np.array([10.0, 1.0])
    costs = CostSpec(
        running_weights=running,
        terminal_weights=terminal,
        target=sys.target,
        r_u=np.array([[0.5]]),
        epsilon=1.0,
        beta=0.8,
        weight_decay=1e-4,
        angle_dims=sys.angle_dims,
    )

    grid = HorizonGrid(0.0, steps * 0.02, steps)
    cfg = TrainConfig(iterations=1, batch_size=batch, grid=grid, seed=seed, hidden_size=4)
    store = init_store(sys, cfg)
    noise = fbsde.sample_noise(seed, fbsde.PURPOSE_TRAIN, 0, batch, steps, sys.m)

    named = store.named_parameters()
    sizes = [arr.size for _, arr in named]
    shapes = [arr.shape for _, arr in named]

    from .neural import LstmLayerParams, NetParams

    def f(vec):
        offset = 0
        arrays = {}
        for (name, _), size, shape in zip(named, sizes, shapes):
            arrays[name] = vec[offset:offset + size].reshape(shape)
            offset += size
        probe = ParamStore(
            net=NetParams(
                layer1=LstmLayerParams(arrays["lstm1.W"], arrays["lstm1.U"], arrays["lstm1.b"]),
                layer2=LstmLayerParams(arrays["lstm2.W"], arrays["lstm2.U"], arrays["lstm2.b"]),
                out_w=arrays["out.W"], out_b=arrays["out.b"],
            ),
            y0=arrays["psi.y0"].copy(), z0=arrays["psi.z0"].copy(), adam=store.adam,
        )

        tape = Tape()
        lifted, leaves = probe.lift(tape)
        batch_out = fbsde.rollout_batch(
            lifted, sys, costs, grid, batch, seed,
            mode="minmax", noise=noise, tape=tape,
        )
        theta_vars = [leaves[name] for name in leaves if not name.startswith("psi.")]
        loss = fbsde.training_loss_expr(
            batch_out.handles.y_star, batch_out.handles.y_terminal,
            theta_vars, costs.beta, costs.weight_decay, batch,
        )
        order = [leaves[name] for name, _ in named]
        grads = tape.backward(loss, order)
        return float(loss.value[0, 0]), np.concatenate([g.ravel() for g in grads])

    point = np.concatenate([arr.ravel() for _, arr in named])
    err = finite_difference_check(f, point, step=1e-5)
    return AuditRow(f"rollout-loss-{system}", 1, err, tol)


def run_all(points: int = 100) -> list[AuditRow]:
    rows = audit_primitives(points)
    rows.append(audit_lstm_step())
    rows.append(audit_rollout())
    return rows


def format_report(rows: list[AuditRow]) -> str:
    lines = ["gradient audit (reverse mode vs central differences)"]
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        lines.append(f"  {row.name:<22s} max |err| = {row.max_error:.3e}  [{status}]")
    worst = max(row.max_error for row in rows)
    lines.append(f"worst case {worst:.3e}")
    return "\n".join(lines)
