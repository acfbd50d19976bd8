"""Training loop: taped rollouts, Adam on network weights and the trainable
initial value/gradient pair, checkpointing, and a deterministic loss history.

All stochasticity flows through counter-based streams keyed by the run seed,
so a (config, seed) pair reproduces every draw bit for bit regardless of
batch chunking.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import fbsde, neural
from .autodiff import Tape
from .fbsde import HorizonGrid, RolloutBatch
from .systems import CostSpec, SystemModel

CHECKPOINT_SCHEMA = "minmax-fbsde.checkpoint.v1"
LOSS_SCHEMA = "minmax-fbsde.loss-history.v1"

THETA_NAMES = (
    "lstm1.W", "lstm1.U", "lstm1.b",
    "lstm2.W", "lstm2.U", "lstm2.b",
    "out.W", "out.b",
)


class TrainingDiverged(RuntimeError):
    """More than the tolerated fraction of samples went non-finite."""


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int
    grid: HorizonGrid
    mode: str = "minmax"
    seed: int = 0
    hidden_size: int = 16
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    checkpoint_every: int = 500
    clip_norm: float | None = None
    forget_bias: float = 1.0
    workers: int = 1
    divergence_tolerance: float = 0.1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.grid.steps < 1:
            raise ValueError("training needs at least one time step")
        if self.mode not in ("minmax", "baseline"):
            raise ValueError(f"mode must be 'minmax' or 'baseline', got {self.mode!r}")


@dataclass
class ParamStore:
    """Trainable state: network weights plus the initial (y0, z0) pair."""

    net: neural.NetParams
    y0: np.ndarray  # (1, 1)
    z0: np.ndarray  # (m, 1)
    adam: neural.AdamState

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return self.net.named_arrays() + [("psi.y0", self.y0), ("psi.z0", self.z0)]

    def theta_norm_sq(self) -> float:
        return float(sum(np.sum(a * a) for _, a in self.net.named_arrays()))

    def lift(self, tape: Tape):
        """Mirror every parameter as a leaf Var. Returns (params-view, leaves)."""
        leaves = {name: tape.leaf(arr) for name, arr in self.named_parameters()}
        net_vars = neural.NetParams(
            layer1=neural.LstmLayerParams(
                leaves["lstm1.W"], leaves["lstm1.U"], leaves["lstm1.b"]
            ),
            layer2=neural.LstmLayerParams(
                leaves["lstm2.W"], leaves["lstm2.U"], leaves["lstm2.b"]
            ),
            out_w=leaves["out.W"],
            out_b=leaves["out.b"],
        )
        return _LiftedParams(net=net_vars, y0=leaves["psi.y0"], z0=leaves["psi.z0"]), leaves


@dataclass
class _LiftedParams:
    net: neural.NetParams
    y0: ad.Var
    z0: ad.Var


def init_store(sys: SystemModel, cfg: TrainConfig) -> ParamStore:
    """Seeded initialization; parameter draws use their own substream."""
    ss = np.random.SeedSequence(entropy=int(cfg.seed), spawn_key=(9, 0, 0))
    rng = np.random.Generator(np.random.Philox(ss))
    net = neural.init_net(sys.n, cfg.hidden_size, sys.m, rng, forget_bias=cfg.forget_bias)
    y0 = np.zeros((1, 1))
    z0 = np.zeros((sys.m, 1))
    store = ParamStore(net=net, y0=y0, z0=z0, adam=None)
    store.adam = neural.AdamState.for_params(
        store.named_parameters(),
        lr=cfg.learning_rate,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_epsilon,
    )
    return store


@dataclass
class StepResult:
    loss: float
    batch: RolloutBatch
    grads: dict
    diverged: int
    mean_terminal_cost: float


def _taped_pass(store, sys, costs, grid, noise, mode):
    """One taped rollout over a (possibly reduced) noise block."""
    tape = Tape()
    lifted, leaves = store.lift(tape)
    batch = fbsde.rollout_batch(
        lifted, sys, costs, grid, noise.shape[2], seed=0,
        mode=mode, tape=tape, noise=noise,
    )
    return tape, leaves, batch


def training_step(
    store: ParamStore,
    sys: SystemModel,
    costs: CostSpec,
    grid: HorizonGrid,
    batch_size: int,
    seed: int,
    iteration: int,
    mode: str,
    workers: int = 1,
    divergence_tolerance: float = 0.1,
) -> StepResult:
    """Build the taped rollout, backpropagate the loss, return gradients.

    Samples that go non-finite are dropped and the tape is rebuilt on the
    survivors (their noise streams are untouched by the exclusion); more than
    ``divergence_tolerance`` dead samples aborts the run.
    """
    noise = fbsde.sample_noise(seed, fbsde.PURPOSE_TRAIN, iteration, batch_size, grid.steps, sys.m)
    beta, weight_decay = costs.beta, costs.weight_decay

    if workers > 1:
        return _training_step_chunked(
            store, sys, costs, grid, noise, mode, workers, divergence_tolerance, iteration
        )

    tape, leaves, batch = _taped_pass(store, sys, costs, grid, noise, mode)
    diverged = batch.diverged
    if diverged:
        if diverged > divergence_tolerance * batch_size:
            raise TrainingDiverged(
                f"iteration {iteration}: {diverged}/{batch_size} samples diverged"
            )
        keep = batch.alive
        tape, leaves, reduced = _taped_pass(
            store, sys, costs, grid, noise[:, :, keep], mode
        )
        full_alive = batch.alive.copy()
        batch = reduced
        batch.alive = np.ones(batch.batch_size, dtype=bool)
        dead_total = int(np.sum(~full_alive))
    else:
        dead_total = 0

    handles = batch.handles
    theta_vars = [leaves[name] for name in THETA_NAMES]
    loss_var = fbsde.training_loss_expr(
        handles.y_star, handles.y_terminal, theta_vars, beta, weight_decay, batch.batch_size
    )
    loss = float(np.asarray(loss_var.value).reshape(-1)[0])
    if not math.isfinite(loss):
        raise TrainingDiverged(f"iteration {iteration}: non-finite loss {loss!r}")

    names = list(leaves)
    grad_list = tape.backward(loss_var, [leaves[k] for k in names])
    grads = dict(zip(names, grad_list))
    mean_tc = float(np.mean(batch.terminal_targets))
    return StepResult(loss=loss, batch=batch, grads=grads, diverged=dead_total, mean_terminal_cost=mean_tc)


def _training_step_chunked(store, sys, costs, grid, noise, mode, workers, divergence_tolerance, iteration):
    """Column-chunked variant: same math, per-chunk tapes merged in order."""
    from concurrent.futures import ThreadPoolExecutor

    batch_size = noise.shape[2]
    beta, weight_decay = costs.beta, costs.weight_decay
    n_chunks = min(workers, batch_size)
    bounds = np.linspace(0, batch_size, n_chunks + 1).astype(int)
    spans = [(bounds[i], bounds[i + 1]) for i in range(n_chunks) if bounds[i] < bounds[i + 1]]

    def survey(span):
        lo, hi = span
        tape, leaves, batch = _taped_pass(store, sys, costs, grid, noise[:, :, lo:hi], mode)
        return tape, leaves, batch, (lo, hi)

    with ThreadPoolExecutor(max_workers=len(spans)) as pool:
        passes = list(pool.map(survey, spans))

    dead_total = sum(p[2].diverged for p in passes)
    if dead_total > divergence_tolerance * batch_size:
        raise TrainingDiverged(
            f"iteration {iteration}: {dead_total}/{batch_size} samples diverged"
        )
    if dead_total:
        def rebuild(item):
            tape, leaves, batch, span = item
            if not batch.diverged:
                return item
            lo, hi = span
            keep = batch.alive
            sub_noise = noise[:, :, lo:hi][:, :, keep]
            tape2, leaves2, batch2 = _taped_pass(store, sys, costs, grid, sub_noise, mode)
            return tape2, leaves2, batch2, span

        with ThreadPoolExecutor(max_workers=len(passes)) as pool:
            passes = list(pool.map(rebuild, passes))

    m_valid = sum(int(np.sum(p[2].alive)) for p in passes)
    if m_valid == 0:
        raise TrainingDiverged(f"iteration {iteration}: every sample diverged")

    # per-chunk unnormalized data terms; scale and regularize afterwards
    def backprop(item):
        tape, leaves, batch, _ = item
        handles = batch.handles
        resid = ad.sumsq(ad.sub(handles.y_star, handles.y_terminal))
        pressure = ad.sumsq(handles.y_star)
        chunk_obj = ad.add(ad.smul(resid, beta), ad.smul(pressure, 1.0 - beta))
        names = list(leaves)
        grad_list = tape.backward(chunk_obj, [leaves[k] for k in names])
        return float(np.asarray(chunk_obj.value).reshape(-1)[0]), dict(zip(names, grad_list)), batch

    with ThreadPoolExecutor(max_workers=len(passes)) as pool:
        results = list(pool.map(backprop, passes))

    total = 0.0
    grads: dict[str, np.ndarray] = {}
    tc_sum = 0.0
    for chunk_val, chunk_grads, batch in results:
        total += chunk_val
        tc_sum += float(np.sum(batch.terminal_targets))
        for name, g in chunk_grads.items():
            grads[name] = g if name not in grads else grads[name] + g
    for name in grads:
        grads[name] = grads[name] / m_valid
    for name, arr in store.net.named_arrays():
        grads[name] = grads[name] + 2.0 * weight_decay * arr
    loss = total / m_valid + weight_decay * store.theta_norm_sq()
    if not math.isfinite(loss):
        raise TrainingDiverged(f"iteration {iteration}: non-finite loss {loss!r}")

    merged = results[0][2] if len(results) == 1 else None
    mean_tc = tc_sum / m_valid
    return StepResult(loss=loss, batch=merged, grads=grads, diverged=dead_total, mean_terminal_cost=mean_tc)


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > clip_norm > 0:
        factor = clip_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


@dataclass
class HistoryRow:
    iteration: int
    loss: float
    mean_terminal_cost: float
    diverged: int


def history_to_csv(history: list[HistoryRow]) -> str:
    lines = [f"# schema {LOSS_SCHEMA}", "iteration,loss,mean_terminal_cost,diverged"]
    for row in history:
        lines.append(f"{row.iteration},{row.loss!r},{row.mean_terminal_cost!r},{row.diverged}")
    return "\n".join(lines) + "\n"


def train(
    sys: SystemModel,
    costs: CostSpec,
    cfg: TrainConfig,
    out_dir: str | None = None,
    config_hash: str = "",
    progress: Callable[[HistoryRow], None] | None = None,
    store: ParamStore | None = None,
) -> tuple[ParamStore, list[HistoryRow]]:
    """Run the full optimization. Writes checkpoints and the loss history
    under ``out_dir`` when given; on divergence the last checkpoint survives.
    """
    if store is None:
        store = init_store(sys, cfg)
    history: list[HistoryRow] = []
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def flush():
        if out_dir:
            with open(os.path.join(out_dir, "loss_history.csv"), "w") as fh:
                fh.write(history_to_csv(history))

    try:
        for k in range(cfg.iterations):
            result = training_step(
                store, sys, costs, cfg.grid, cfg.batch_size, cfg.seed, k, cfg.mode,
                workers=cfg.workers, divergence_tolerance=cfg.divergence_tolerance,
            )
            if cfg.clip_norm:
                clip_gradients(result.grads, cfg.clip_norm)
            neural.adam_step(store.adam, store.named_parameters(), result.grads)
            row = HistoryRow(k, result.loss, result.mean_terminal_cost, result.diverged)
            history.append(row)
            if progress is not None:
                progress(row)
            if ckpt_path and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(store, ckpt_path, seed=cfg.seed, config_hash=config_hash)
    except (TrainingDiverged, neural.NonFiniteGradient):
        flush()
        raise
    if ckpt_path:
        save_checkpoint(store, ckpt_path, seed=cfg.seed, config_hash=config_hash)
    flush()
    return store, history


# ---------------------------------------------------------------------------
# checkpoints: one-line JSON manifest + flat little-endian float64 stream


def _checkpoint_entries(store: ParamStore) -> list[tuple[str, np.ndarray]]:
    named = store.named_parameters()
    entries = list(named)
    entries += [(f"adam.m.{name}", store.adam.m[name]) for name, _ in named]
    entries += [(f"adam.v.{name}", store.adam.v[name]) for name, _ in named]
    return entries


def save_checkpoint(store: ParamStore, path: str, seed: int = 0, config_hash: str = "") -> None:
    entries = _checkpoint_entries(store)
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "config_hash": config_hash,
        "seed": int(seed),
        "adam": {
            "t": store.adam.t,
            "lr": store.adam.lr,
            "beta1": store.adam.beta1,
            "beta2": store.adam.beta2,
            "eps": store.adam.eps,
        },
        "entries": [
            {"name": name, "rows": int(a.shape[0]), "cols": int(a.shape[1])}
            for name, a in entries
        ],
    }
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in entries)
    blob = json.dumps(manifest, sort_keys=True).encode() + b"\n" + payload
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str) -> tuple[ParamStore, dict]:
    """Rebuild a ParamStore (parameters and optimizer moments) from disk."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    head, sep, payload = blob.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(head.decode())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed manifest: {exc}") from exc
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"{path}: schema {manifest.get('schema')!r}, expected {CHECKPOINT_SCHEMA!r}"
        )
    expected = sum(e["rows"] * e["cols"] for e in manifest["entries"]) * 8
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}"
        )
    arrays = {}
    offset = 0
    for e in manifest["entries"]:
        count = e["rows"] * e["cols"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[e["name"]] = arr.reshape(e["rows"], e["cols"]).astype(np.float64)
        offset += count * 8

    def grab(name):
        try:
            return arrays[name]
        except KeyError:
            raise CheckpointError(f"{path}: manifest lacks entry {name!r}") from None

    net = neural.NetParams(
        layer1=neural.LstmLayerParams(grab("lstm1.W"), grab("lstm1.U"), grab("lstm1.b")),
        layer2=neural.LstmLayerParams(grab("lstm2.W"), grab("lstm2.U"), grab("lstm2.b")),
        out_w=grab("out.W"),
        out_b=grab("out.b"),
    )
    store = ParamStore(net=net, y0=grab("psi.y0"), z0=grab("psi.z0"), adam=None)
    meta = manifest["adam"]
    adam = neural.AdamState(
        lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
        t=int(meta["t"]), m={}, v={},
    )
    for name, _ in store.named_parameters():
        adam.m[name] = grab(f"adam.m.{name}")
        adam.v[name] = grab(f"adam.v.{name}")
    store.adam = adam
    return store, manifest


def expected_shapes(sys: SystemModel, hidden_size: int) -> dict[str, tuple[int, int]]:
    h, n, m = hidden_size, sys.n, sys.m
    return {
        "lstm1.W": (4 * h, n), "lstm1.U": (4 * h, h), "lstm1.b": (4 * h, 1),
        "lstm2.W": (4 * h, h), "lstm2.U": (4 * h, h), "lstm2.b": (4 * h, 1),
        "out.W": (m, h), "out.b": (m, 1),
        "psi.y0": (1, 1), "psi.z0": (m, 1),
    }


def validate_checkpoint(manifest: dict, shapes: dict[str, tuple[int, int]], config_hash: str | None = None) -> None:
    """Reject a checkpoint whose shapes or config hash do not match."""
    listed = {e["name"]: (e["rows"], e["cols"]) for e in manifest["entries"]}
    for name, shape in shapes.items():
        if name not in listed:
            raise CheckpointError(f"manifest lacks entry {name!r}")
        if listed[name] != shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {listed[name]}, expected {shape}"
            )
    if config_hash is not None and manifest.get("config_hash") not in ("", config_hash):
        raise CheckpointError(
            f"config hash mismatch: checkpoint {manifest.get('config_hash')!r}, "
            f"expected {config_hash!r}"
        )


def config_fingerprint(payload: dict) -> str:
    """Short stable hash of the model-defining configuration subset."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
