"""Federated training loop with central Gaussian DP.

One central iteration samples a cohort of eligible devices, runs full-batch
local SGD on each, clips every device's parameter delta to an L2 bound, sums
the clipped deltas in ascending device-id order, adds Gaussian noise with
standard deviation ``sigma * C`` to the sum, divides by the cohort size and
hands the negated result to the server optimizer as a pseudo-gradient.

Randomness comes only from named streams: ``(master_seed, "cohort", t)`` for
cohort sampling and ``(master_seed, "dp-noise", t)`` for the noise, so a run
is a pure function of its configuration and seed.
"""
from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from appsel_pfl import kernels, model
from appsel_pfl.accountant import MechanismSpec, PrivacyBudget, PrivacyLedger, calibrate_sigma
from appsel_pfl.model import Batch, Thresholds
from appsel_pfl.nn import AdamWState, ModelParams, SgdState, adamw_step, sgd_step
from appsel_pfl.seeding import rng_for
from appsel_pfl.synth import OS_VERSIONS, OS_WEIGHTS, TrainingRecord, to_batch

log = logging.getLogger(__name__)


class CohortUnderflowError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, iteration: int, history: list[dict] | None = None,
                 state: ServerState | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.history = history or []
        self.state = state


@dataclass(frozen=True)
class TaskFilter:
    """Device metadata predicate; ``None`` accepts any value."""
    os_versions: frozenset[str] | None = None
    asset_versions: frozenset[str] | None = None

    def matches(self, os_version: str, asset_version: str) -> bool:
        if self.os_versions is not None and os_version not in self.os_versions:
            return False
        if self.asset_versions is not None and asset_version not in self.asset_versions:
            return False
        return True


ANY_DEVICE = TaskFilter()


@dataclass(frozen=True)
class DeviceShard:
    device_id: int
    indices: np.ndarray
    os_version: str
    asset_version: str

    @property
    def n_records(self) -> int:
        return int(self.indices.size)

    def eligible(self, task_filter: TaskFilter = ANY_DEVICE) -> bool:
        return self.n_records >= 1 and task_filter.matches(self.os_version, self.asset_version)


@dataclass
class FederatedPopulation:
    """Records pooled in one padded batch, split across simulated devices."""
    batch: Batch
    shards: list[DeviceShard]
    records: Sequence[TrainingRecord] = ()

    def eligible(self, task_filter: TaskFilter = ANY_DEVICE) -> list[DeviceShard]:
        return [s for s in self.shards if s.eligible(task_filter)]


@dataclass(frozen=True)
class ClientUpdate:
    device_id: int
    delta: np.ndarray
    local_loss: float
    sample_count: int


@dataclass(frozen=True)
class TrainingConfig:
    devices_per_iteration: int = 250
    central_iterations: int = 500
    local_epochs: int = 3
    local_learning_rate: float = 0.01
    central_learning_rate: float = 0.0005
    clipping_bound: float = 0.1
    epsilon: float = 2.0
    delta_dp: float = 1e-6
    freeze_policy: str = "none"
    master_seed: int = 0
    # None calibrates sigma from (epsilon, delta_dp); 0 disables noise
    noise_multiplier: float | None = None
    server_optimizer: str = "adamw"
    weight_decay: float = 0.01
    eval_every: int = 10
    confidence_weight: float = model.CONFIDENCE_WEIGHT

    def __post_init__(self):
        for name in ("devices_per_iteration", "local_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.central_iterations < 0:
            raise ValueError("central_iterations must be nonnegative")
        if self.local_learning_rate < 0:
            raise ValueError("local_learning_rate must be nonnegative")
        if not self.central_learning_rate > 0:
            raise ValueError("central_learning_rate must be positive")
        if not self.clipping_bound > 0:
            raise ValueError("clipping_bound must be positive")
        if self.freeze_policy not in model.FREEZE_POLICIES:
            raise ValueError(f"freeze_policy must be one of {model.FREEZE_POLICIES}")
        if self.server_optimizer not in ("adamw", "sgd"):
            raise ValueError("server_optimizer must be 'adamw' or 'sgd'")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be nonnegative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        PrivacyBudget(self.epsilon, self.delta_dp)


@dataclass
class ServerState:
    params: ModelParams
    optimizer: AdamWState | SgdState
    iteration: int = 0
    ledger: PrivacyLedger | None = None
    sigma: float = 0.0
    seeds: dict = field(default_factory=dict)

    def epsilon_spent(self) -> float:
        if self.ledger is None:
            return 0.0 if self.sigma == 0 and self.iteration == 0 else math.inf
        return self.ledger.epsilon()


# -- population -------------------------------------------------------------

def partition_population(records: Sequence[TrainingRecord], mean_points_per_user: float,
                         seed: int, mode: str = "poisson") -> FederatedPopulation:
    """Deal records out to devices; shard sizes are Poisson(mean) in the default mode.

    ``mode="exact"`` gives every device exactly ``mean_points_per_user`` records
    (which must then be an integer). Empty shards are kept; they are ineligible.
    """
    if len(records) == 0:
        raise ValueError("cannot partition an empty dataset")
    if not mean_points_per_user > 0:
        raise ValueError("mean_points_per_user must be positive")
    rng = rng_for(seed, "partition")
    order = rng.permutation(len(records))
    sizes = []
    if mode == "exact":
        k = int(mean_points_per_user)
        if k != mean_points_per_user:
            raise ValueError("exact mode needs an integer mean")
        sizes = [k] * (len(records) // k)
        if len(records) % k:
            sizes.append(len(records) % k)
    elif mode == "poisson":
        total = 0
        while total < len(records):
            s = int(rng.poisson(mean_points_per_user))
            s = min(s, len(records) - total)
            sizes.append(s)
            total += s
    else:
        raise ValueError(f"unknown partition mode {mode!r}")

    meta_rng = rng_for(seed, "device-meta")
    shards, pos = [], 0
    for dev, s in enumerate(sizes):
        idx = np.sort(order[pos:pos + s])
        pos += s
        if s:
            first = records[int(idx[0])]
            os_v, asset = first.os_version, first.asset_version
        else:
            os_v = OS_VERSIONS[meta_rng.choice(len(OS_VERSIONS), p=OS_WEIGHTS)]
            asset = records[0].asset_version
        shards.append(DeviceShard(dev, idx, os_v, asset))
    return FederatedPopulation(to_batch(records), shards, records)


def sample_cohort(shards: Sequence[DeviceShard], size: int, iteration: int, master_seed: int,
                  task_filter: TaskFilter = ANY_DEVICE) -> list[int]:
    """Uniform sample without replacement of eligible device ids, ascending."""
    if size < 1:
        raise ValueError("cohort size must be positive")
    eligible = np.array([s.device_id for s in shards if s.eligible(task_filter)], dtype=np.int64)
    if size > eligible.size:
        raise CohortUnderflowError(
            f"cohort of {size} requested but only {eligible.size} devices are eligible")
    rng = rng_for(master_seed, "cohort", iteration)
    return sorted(int(d) for d in rng.choice(eligible, size=size, replace=False))


# -- client side ------------------------------------------------------------

def _cohort_arrays(pop: FederatedPopulation, shards: Sequence[DeviceShard]):
    idx = np.concatenate([s.indices for s in shards])
    offsets = np.zeros(len(shards) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([s.n_records for s in shards])
    b = pop.batch
    return (np.ascontiguousarray(b.X[idx]), np.ascontiguousarray(b.ncand[idx]),
            np.ascontiguousarray(b.labels[idx]), offsets)


def train_cohort(params: ModelParams, pop: FederatedPopulation, shards: Sequence[DeviceShard],
                 llr: float, local_epochs: int,
                 confidence_weight: float = model.CONFIDENCE_WEIGHT) -> list[ClientUpdate]:
    """Unclipped updates for several devices; the global params are not modified."""
    for s in shards:
        if s.n_records < 1:
            raise ValueError(f"device {s.device_id} has no records")
    F, D, H = model.model_dims(params)
    X, ncand, labels, offsets = _cohort_arrays(pop, shards)
    mask = params.trainable_mask()
    deltas, losses = kernels.local_train_cohort(
        params.flat, mask.astype(np.uint8), X, ncand, labels, offsets, F, D, H,
        float(llr), int(local_epochs), float(confidence_weight))
    return [ClientUpdate(s.device_id, deltas[i, mask], float(losses[i]), s.n_records)
            for i, s in enumerate(shards)]


def local_train(params: ModelParams, pop: FederatedPopulation, shard: DeviceShard, llr: float,
                local_epochs: int, confidence_weight: float = model.CONFIDENCE_WEIGHT) -> ClientUpdate:
    if shard.n_records < 1:
        raise ValueError(f"device {shard.device_id} has no records")
    return train_cohort(params, pop, [shard], llr, local_epochs, confidence_weight)[0]


def clip_deltas(deltas: np.ndarray, bound: float) -> np.ndarray:
    """Row-wise ``delta * min(1, bound / ||delta||)``."""
    if not np.all(np.isfinite(deltas)):
        raise FloatingPointError("cannot clip non-finite deltas")
    if math.isinf(bound):
        return deltas.copy()
    norms = np.sqrt(np.einsum("ij,ij->i", deltas, deltas))
    with np.errstate(over="ignore"):
        factor = np.minimum(1.0, bound / np.maximum(norms, np.finfo(float).tiny))
    out = deltas * factor[:, None]
    # rounding can leave the product a hair above the bound
    over = np.sqrt(np.einsum("ij,ij->i", out, out)) > bound
    if np.any(over):
        out[over] *= np.nextafter(1.0, 0.0)
    return out


def clip_update(update: ClientUpdate, bound: float) -> ClientUpdate:
    return replace(update, delta=clip_deltas(update.delta[None, :], bound)[0])


def aggregate(updates: Sequence[ClientUpdate], bound: float, sigma: float, cohort_size: int,
              iteration: int, master_seed: int) -> np.ndarray:
    """Noisy pseudo-gradient ``-(sum of deltas + N(0, (sigma*C)^2)) / n``."""
    if not updates:
        raise ValueError("no updates to aggregate")
    if cohort_size != len(updates):
        raise ValueError(f"cohort size {cohort_size} != {len(updates)} updates")
    ordered = sorted(updates, key=lambda u: u.device_id)
    return _noisy_mean(np.stack([u.delta for u in ordered]), bound, sigma, iteration, master_seed)


def _noisy_mean(deltas: np.ndarray, bound: float, sigma: float, iteration: int,
                master_seed: int) -> np.ndarray:
    total = np.zeros(deltas.shape[1])
    for row in deltas:
        total += row
    if sigma > 0:
        if math.isinf(bound):
            raise ValueError("noise needs a finite clipping bound")
        rng = rng_for(master_seed, "dp-noise", iteration)
        total = total + rng.normal(0.0, sigma * bound, size=total.shape)
    return -total / deltas.shape[0]


# -- server side ------------------------------------------------------------

def make_optimizer(config: TrainingConfig) -> AdamWState | SgdState:
    if config.server_optimizer == "sgd":
        return SgdState(config.central_learning_rate)
    return AdamWState(config.central_learning_rate, weight_decay=config.weight_decay)


def server_step(state: ServerState, pseudo_gradient: np.ndarray) -> ServerState:
    """Apply one optimizer step to the unfrozen parameters; mutates and returns ``state``."""
    mask = state.params.trainable_mask()
    if pseudo_gradient.shape != (int(mask.sum()),):
        raise ValueError(f"pseudo-gradient has shape {pseudo_gradient.shape}, "
                         f"expected ({int(mask.sum())},)")
    if not np.all(np.isfinite(pseudo_gradient)):
        raise DivergenceError("non-finite pseudo-gradient", state.iteration + 1)
    full = np.zeros(state.params.size)
    full[mask] = pseudo_gradient
    if isinstance(state.optimizer, SgdState):
        new = sgd_step(state.params, full, state.optimizer)
    else:
        new = adamw_step(state.params, full, state.optimizer)
    if not np.all(np.isfinite(new.flat)):
        raise DivergenceError("parameters became non-finite", state.iteration + 1)
    state.params = new
    state.iteration += 1
    if state.ledger is not None:
        state.ledger.record()
    return state


def sampling_rate(config: TrainingConfig, pop: FederatedPopulation,
                  task_filter: TaskFilter = ANY_DEVICE) -> float:
    n_eligible = len(pop.eligible(task_filter))
    if n_eligible == 0:
        raise CohortUnderflowError("no eligible devices")
    return min(1.0, config.devices_per_iteration / n_eligible)


def resolve_sigma(config: TrainingConfig, q: float) -> float:
    if config.noise_multiplier is not None:
        return float(config.noise_multiplier)
    if config.central_iterations == 0:
        return 0.0
    return calibrate_sigma(PrivacyBudget(config.epsilon, config.delta_dp), q,
                           config.central_iterations)


def init_state(config: TrainingConfig, initial: ModelParams, q: float) -> ServerState:
    params = model.apply_freeze(initial, config.freeze_policy)
    sigma = resolve_sigma(config, q)
    ledger = None
    if sigma > 0:
        ledger = PrivacyLedger(MechanismSpec(sigma, q, config.central_iterations), config.delta_dp)
    return ServerState(params, make_optimizer(config), 0, ledger, sigma,
                       {"master_seed": config.master_seed})


def run_training(config: TrainingConfig, pop: FederatedPopulation, validation: Batch | None,
                 initial: ModelParams, thresholds: Thresholds = Thresholds(),
                 task_filter: TaskFilter = ANY_DEVICE, state: ServerState | None = None,
                 on_eval: Callable[[dict], None] | None = None,
                 clock: Callable[[], float] | None = None) -> tuple[list[dict], ServerState]:
    """Run central iterations until ``config.central_iterations`` is reached.

    Passing ``state`` resumes a run. Every ``eval_every`` iterations (and at the
    last one) a metrics row is appended to the history and passed to ``on_eval``.
    ``clock`` returns milliseconds for the ``wall_ms`` field; without it the
    field is None so histories stay byte-reproducible.
    """
    q = sampling_rate(config, pop, task_filter)
    if state is None:
        state = init_state(config, initial, q)
    eligible = pop.eligible(task_filter)
    by_id = {s.device_id: s for s in eligible}
    mask = state.params.trainable_mask()
    history: list[dict] = []
    window: list[float] = []
    t0 = clock() if clock else None

    while state.iteration < config.central_iterations:
        it = state.iteration + 1
        ids = sample_cohort(eligible, config.devices_per_iteration, it, config.master_seed)
        shards = [by_id[i] for i in ids]
        F, D, H = model.model_dims(state.params)
        X, ncand, labels, offsets = _cohort_arrays(pop, shards)
        deltas, losses = kernels.local_train_cohort(
            state.params.flat, mask.astype(np.uint8), X, ncand, labels, offsets, F, D, H,
            config.local_learning_rate, config.local_epochs, config.confidence_weight)
        if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(deltas))):
            raise DivergenceError(f"local training diverged at iteration {it}", it, history, state)
        window.append(float(losses.mean()))
        clipped = clip_deltas(np.ascontiguousarray(deltas[:, mask]), config.clipping_bound)
        pseudo = _noisy_mean(clipped, config.clipping_bound, state.sigma, it, config.master_seed)
        try:
            server_step(state, pseudo)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), it, history, state) from None

        if it % config.eval_every == 0 or it == config.central_iterations:
            row = {"iteration": it, "train_loss": float(np.mean(window))}
            window = []
            if validation is not None:
                ev = model.evaluate(state.params, validation, thresholds, config.confidence_weight)
                if not math.isfinite(ev["loss"]):
                    raise DivergenceError(f"validation loss non-finite at iteration {it}",
                                          it, history, state)
                row.update(val_accuracy=ev["accuracy"], cder=ev["cder"],
                           disambiguation_rate=ev["disambiguation_rate"])
            row["epsilon_spent"] = state.epsilon_spent()
            row["wall_ms"] = None if clock is None else round(clock() - t0, 3)
            history.append(row)
            if on_eval is not None:
                on_eval(row)
    return history, state


def wall_clock_ms() -> float:
    return time.perf_counter() * 1000.0


# -- centralized baseline ---------------------------------------------------

@dataclass(frozen=True)
class CentralConfig:
    learning_rate: float = 0.003
    batch_size: int = 64
    max_epochs: int = 20
    patience: int = 3
    weight_decay: float = 0.0
    freeze_policy: str = "none"
    seed: int = 0
    confidence_weight: float = model.CONFIDENCE_WEIGHT


def train_central(config: CentralConfig, train: Batch, validation: Batch,
                  initial: ModelParams, thresholds: Thresholds = Thresholds()):
    """Minibatch AdamW with early stopping on validation loss; returns (params, history)."""
    params = model.apply_freeze(initial, config.freeze_policy)
    opt = AdamWState(config.learning_rate, weight_decay=config.weight_decay)
    rng = rng_for(config.seed, "central-shuffle")
    best, best_loss, stale, history = params, math.inf, 0, []
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), config.batch_size):
            sub = train.subset(perm[start:start + config.batch_size])
            loss, grad = model.batch_loss_grad(params, sub, config.confidence_weight)
            if not math.isfinite(loss):
                raise DivergenceError(f"central training diverged in epoch {epoch}", epoch, history)
            losses.append(loss)
            params = adamw_step(params, grad, opt)
        ev = model.evaluate(params, validation, thresholds, config.confidence_weight)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": ev["loss"], "val_accuracy": ev["accuracy"],
                        "cder": ev["cder"], "disambiguation_rate": ev["disambiguation_rate"]})
        if ev["loss"] < best_loss - 1e-6:
            best, best_loss, stale = params, ev["loss"], 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, history


def train_central_sgd(params: ModelParams, train: Batch, learning_rate: float, steps: int,
                      confidence_weight: float = model.CONFIDENCE_WEIGHT) -> list[ModelParams]:
    """Full-batch SGD trajectory; the reference for the federated equivalence check."""
    traj = [params]
    state = SgdState(learning_rate)
    for _ in range(steps):
        _, grad = model.batch_loss_grad(params, train, confidence_weight)
        params = sgd_step(params, grad, state)
        traj.append(params)
    return traj


def config_dict(config) -> dict:
    return asdict(config)
