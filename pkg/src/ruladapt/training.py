"""Deterministic optimization loop over paired source/target mini-batches.

Each run owns three rng streams derived from its seed (parameter init,
shuffling, smoothness noise), so a (config, seed) pair fully determines the
trajectory.  Checkpoints capture parameters, Adam moments, the mid-epoch
batch plan and all rng states; restoring reproduces the next step bitwise
in float64.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .data import DomainDataset, stack_windows
from .evaluation import MetricsReport, evaluate_target, export_latents, predict_scaled, rmse
from .losses import (
    DomainDiscriminator,
    KernelSpec,
    LossParts,
    LossWeights,
    composite_loss,
    coral_loss,
    dann_loss,
    latent_mmd,
    recon_loss,
    rul_mse,
    smooth_loss,
)
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .serialization import config_hash as _hash_dict

VARIANTS = ("lamanet", "no_da", "mmd", "coral", "dann")

DEFAULT_SEEDS = (1, 123074, 2457)


class TrainingAbort(RuntimeError):
    """Raised when the loss goes non-finite; carries the per-term dump."""

    def __init__(self, message: str, terms: dict):
        super().__init__(f"{message}; per-term losses: {terms}")
        self.terms = terms


def variant_weights(variant: str, *, gamma_noise: float = 0.1, da_start: int = 200) -> LossWeights:
    """Loss-weight column for each variant (the full model uses 0.35/0.2/0.35,
    the single-term baselines use discrepancy weight 0.2)."""
    if variant == "lamanet":
        return LossWeights(0.35, 0.2, 0.35, gamma_noise, da_start)
    if variant in ("mmd", "coral"):
        return LossWeights(0.2, 0.0, 0.0, gamma_noise, da_start)
    if variant in ("dann", "no_da"):
        return LossWeights(0.0, 0.0, 0.0, gamma_noise, da_start)
    raise ValueError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class RunConfig:
    source_subset: str = "FD002"
    target_subset: str = "FD001"
    variant: str = "lamanet"
    window: int = 40
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    lr_gamma: float = 0.95
    lr_decay_start: int = 100
    rc: float = 125.0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    val_seed: int = 42
    val_fraction: float = 0.1
    feature_mask: tuple[int, ...] | None = None
    dann_weight: float = 0.2
    dann_hidden: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size % 2 or self.batch_size < 2:
            raise ValueError("batch_size must be even and positive")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 1 and lr positive")
        if self.model.window != self.window:
            raise ValueError(
                f"model window {self.model.window} != run window {self.window}"
            )
        expected_f = len(self.feature_mask) if self.feature_mask else None
        if expected_f is not None and self.model.n_features != expected_f:
            raise ValueError(
                f"model n_features {self.model.n_features} != mask width {expected_f}"
            )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        out["feature_mask"] = list(self.feature_mask) if self.feature_mask else None
        return out

    @property
    def hash(self) -> str:
        return _hash_dict(self.to_dict())


def make_run_config(source: str, target: str, variant: str = "lamanet", **overrides) -> RunConfig:
    """RunConfig with the variant's weight column filled in unless overridden."""
    gamma = overrides.pop("gamma_noise", 0.1)
    da_start = overrides.pop("da_start", 200)
    weights = overrides.pop("weights", variant_weights(variant, gamma_noise=gamma, da_start=da_start))
    return RunConfig(
        source_subset=source, target_subset=target, variant=variant,
        weights=weights, **overrides,
    )


def _dataclass_from_dict(cls, payload: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return cls(**payload)


def run_config_from_dict(payload: dict) -> RunConfig:
    """Build a RunConfig from plain data, rejecting unknown keys at every level."""
    payload = dict(payload)
    for key, cls in (("weights", LossWeights), ("model", ModelConfig), ("kernel", KernelSpec)):
        if key in payload and isinstance(payload[key], dict):
            payload[key] = _dataclass_from_dict(cls, payload[key])
    if "seeds" in payload and payload["seeds"] is not None:
        payload["seeds"] = tuple(payload["seeds"])
    if "feature_mask" in payload and payload["feature_mask"] is not None:
        payload["feature_mask"] = tuple(payload["feature_mask"])
    return _dataclass_from_dict(RunConfig, payload)


# ---------------------------------------------------------------------------
# schedule and optimizer

def lr_schedule(
    iteration: int, base_lr: float, gamma: float, decay_start: int, steps_per_epoch: int
) -> float:
    """Constant before `decay_start` iterations; afterwards decayed by gamma
    once per epoch boundary crossed since the decay-start iteration."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be positive")
    if iteration < decay_start:
        return base_lr
    exponent = iteration // steps_per_epoch - decay_start // steps_per_epoch
    return base_lr * gamma ** max(0, exponent)


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8); parameters whose
    gradient is absent are updated with g = 0, which leaves untouched
    parameters exactly in place while their moments stay zero."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g if p.grad is not None else 0.0)
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            p.data = p.data - lr * update


# ---------------------------------------------------------------------------
# batching

def epoch_plan(n_source: int, n_target: int, half: int, rng: np.random.Generator):
    """Index orders for one epoch: the larger pool is permuted, the smaller is
    permuted then resampled with replacement up to the larger pool's size."""
    if n_source < 1 or n_target < 1:
        raise ValueError("both training pools must be non-empty")
    n_max = max(n_source, n_target)

    def order(n: int) -> np.ndarray:
        perm = rng.permutation(n)
        if n < n_max:
            return np.concatenate([perm, rng.choice(n, size=n_max - n, replace=True)])
        return perm

    return order(n_source), order(n_target)


def steps_per_epoch(n_source: int, n_target: int, batch: int) -> int:
    return math.ceil(max(n_source, n_target) / (batch // 2))


def make_batches(
    source: DomainDataset, target: DomainDataset, batch: int, rng: np.random.Generator
) -> Iterator[tuple[list, list]]:
    """One epoch of paired half-batches of window samples (labels only on the
    source side)."""
    if batch % 2:
        raise ValueError(f"batch size must be even, got {batch}")
    half = batch // 2
    src_order, tgt_order = epoch_plan(
        len(source.train_windows), len(target.train_windows), half, rng
    )
    for start in range(0, len(src_order), half):
        src_idx = src_order[start : start + half]
        tgt_idx = tgt_order[start : start + half]
        yield (
            [source.train_windows[i] for i in src_idx],
            [target.train_windows[i] for i in tgt_idx],
        )


# ---------------------------------------------------------------------------
# training state

@dataclass
class TrainState:
    config: RunConfig
    seed: int
    model: Model
    discriminator: DomainDiscriminator | None
    adam: Adam
    rng_shuffle: np.random.Generator
    rng_noise: np.random.Generator
    iteration: int = 0
    epoch: int = 0
    step_in_epoch: int = 0
    src_order: np.ndarray | None = None
    tgt_order: np.ndarray | None = None
    steps_per_epoch: int = 1
    history: list[dict] = field(default_factory=list)

    def trainable(self) -> dict[str, Tensor]:
        params = dict(self.model.params)
        if self.discriminator is not None:
            params.update(self.discriminator.params)
        return params


def init_state(config: RunConfig, seed: int) -> TrainState:
    streams = np.random.SeedSequence(seed).spawn(3)
    rng_init = np.random.default_rng(streams[0])
    model = Model(config.model, rng_init)
    discriminator = (
        DomainDiscriminator(config.model.bottleneck, config.dann_hidden, rng_init)
        if config.variant == "dann"
        else None
    )
    state = TrainState(
        config=config,
        seed=seed,
        model=model,
        discriminator=discriminator,
        adam=None,  # set below once the full trainable set exists
        rng_shuffle=np.random.default_rng(streams[1]),
        rng_noise=np.random.default_rng(streams[2]),
    )
    state.adam = Adam(state.trainable())
    return state


def train_step(state: TrainState, src_X, src_y, tgt_X) -> dict:
    """One optimization step over a paired batch; returns the logged record."""
    config = state.config
    params = state.trainable()
    for p in params.values():
        p.grad = None

    xs, ys, xt = Tensor(src_X), Tensor(src_y), Tensor(tgt_X)
    bundle_s = state.model.forward(xs)
    bundle_t = state.model.forward(xt)  # shared weights: same function, target stream

    parts = LossParts(rul=rul_mse(bundle_s.y_hat, ys))
    variant = config.variant
    if variant in ("lamanet", "mmd"):
        parts.discrepancy = lambda: latent_mmd(
            bundle_s.c, bundle_t.c, bundle_s.o, bundle_t.o, config.kernel
        )
    elif variant == "coral":
        parts.discrepancy = lambda: coral_loss(bundle_s.o, bundle_t.o)
    if variant == "lamanet":
        parts.recon = lambda: recon_loss(
            xs, state.model.reconstruct(bundle_s.c, xs[:, :, 0]),
            xt, state.model.reconstruct(bundle_t.c, xt[:, :, 0]),
        )
        parts.smooth = lambda: ad.add(
            smooth_loss(bundle_s.c, state.model.predict_from_bottleneck,
                        config.weights.gamma_noise, state.rng_noise),
            smooth_loss(bundle_t.c, state.model.predict_from_bottleneck,
                        config.weights.gamma_noise, state.rng_noise),
        )
    if variant == "dann":
        parts.adversarial = lambda: dann_loss(
            bundle_s.c, bundle_t.c, state.discriminator, config.dann_weight
        )

    loss = composite_loss(parts, config.weights, state.iteration)
    total = float(loss.data)
    if not math.isfinite(total):
        raise TrainingAbort(
            f"non-finite loss at iteration {state.iteration}", parts.terms
        )
    backward(loss)
    lr = lr_schedule(
        state.iteration, config.lr, config.lr_gamma, config.lr_decay_start,
        state.steps_per_epoch,
    )
    state.adam.step(params, lr)
    state.iteration += 1
    record = {
        "iteration": state.iteration,
        "epoch": state.epoch,
        "lr": lr,
        "total": total,
        **parts.terms,
    }
    state.history.append(record)
    return record


LOG_COLUMNS = (
    "iteration", "epoch", "lr", "total", "rul",
    "discrepancy", "recon", "smooth", "adversarial", "val_rmse",
)


class RunLogWriter:
    """Append-only CSV log; one row per iteration plus epoch-end rows with
    the source validation RMSE."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        self._writer.writeheader()

    def write(self, record: dict) -> None:
        self._writer.writerow(record)

    def close(self) -> None:
        self._fh.close()


def source_val_rmse(state: TrainState, source: DomainDataset) -> float:
    """Monitoring metric (cycles) over the source validation engines."""
    windows = source.val_windows
    if not windows:
        return float("nan")
    pred = predict_scaled(state.model, windows) * state.config.rc
    truth = np.array([w.rul_scaled for w in windows]) * state.config.rc
    return rmse(pred, truth)


def train(
    state: TrainState,
    source: DomainDataset,
    target: DomainDataset,
    *,
    max_iterations: int | None = None,
    log_writer: RunLogWriter | None = None,
    epoch_callback: Callable[[TrainState, float], None] | None = None,
) -> TrainState:
    """Run the epoch budget (or until `max_iterations`); resumable mid-epoch."""
    config = state.config
    half = config.batch_size // 2
    state.steps_per_epoch = steps_per_epoch(
        len(source.train_windows), len(target.train_windows), config.batch_size
    )
    while state.epoch < config.epochs:
        if state.src_order is None:
            state.src_order, state.tgt_order = epoch_plan(
                len(source.train_windows), len(target.train_windows), half,
                state.rng_shuffle,
            )
        while state.step_in_epoch < state.steps_per_epoch:
            if max_iterations is not None and state.iteration >= max_iterations:
                return state
            start = state.step_in_epoch * half
            src_idx = state.src_order[start : start + half]
            tgt_idx = state.tgt_order[start : start + half]
            src_X, src_y = stack_windows(source.train_windows, src_idx)
            tgt_X, _ = stack_windows(target.train_windows, tgt_idx)
            record = train_step(state, src_X, src_y, tgt_X)
            state.step_in_epoch += 1
            if log_writer is not None:
                log_writer.write(record)
        val = source_val_rmse(state, source)
        if log_writer is not None:
            log_writer.write({"iteration": state.iteration, "epoch": state.epoch, "val_rmse": val})
        if epoch_callback is not None:
            epoch_callback(state, val)
        state.epoch += 1
        state.step_in_epoch = 0
        state.src_order = None
        state.tgt_order = None
    return state


# ---------------------------------------------------------------------------
# checkpointing (bitwise-resumable)

def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _restore_rng(state_dict: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state_dict
    return gen


def save_train_checkpoint(path, state: TrainState) -> str:
    extra_arrays = {}
    if state.src_order is not None:  # mid-epoch: persist the batch plan
        extra_arrays["plan_src"] = state.src_order.astype(np.int64)
        extra_arrays["plan_tgt"] = state.tgt_order.astype(np.int64)
    return save_checkpoint(
        path,
        params=state.trainable(),
        adam_m=state.adam.m,
        adam_v=state.adam.v,
        adam_t=state.adam.t,
        iteration=state.iteration,
        config_hash=state.config.hash,
        rng_states={
            "shuffle": _rng_state(state.rng_shuffle),
            "noise": _rng_state(state.rng_noise),
        },
        extra_arrays=extra_arrays,
        extra_meta={
            "epoch": state.epoch,
            "step_in_epoch": state.step_in_epoch,
            "steps_per_epoch": state.steps_per_epoch,
            "seed": state.seed,
        },
    )


def load_train_checkpoint(path, config: RunConfig) -> TrainState:
    params_arrays, adam_m, adam_v, extras, meta = load_checkpoint(
        path, expected_config_hash=config.hash
    )
    state = init_state(config, int(meta["seed"]))
    state.model.load_state(
        {k: v for k, v in params_arrays.items() if not k.startswith("disc.")}
    )
    if state.discriminator is not None:
        for name, p in state.discriminator.params.items():
            p.data = params_arrays[name].copy()
            p.grad = None
    state.adam.m = {k: v.copy() for k, v in adam_m.items()}
    state.adam.v = {k: v.copy() for k, v in adam_v.items()}
    state.adam.t = int(meta["adam_t"])
    state.iteration = int(meta["iteration"])
    state.epoch = int(meta["epoch"])
    state.step_in_epoch = int(meta["step_in_epoch"])
    state.steps_per_epoch = int(meta["steps_per_epoch"])
    state.rng_shuffle = _restore_rng(meta["rng_states"]["shuffle"])
    state.rng_noise = _restore_rng(meta["rng_states"]["noise"])
    if "plan_src" in extras:
        state.src_order = extras["plan_src"]
        state.tgt_order = extras["plan_tgt"]
    return state


# ---------------------------------------------------------------------------
# experiment orchestration

RUN_FILES = ("report.json", "metrics.csv", "checkpoint.bin", "train_log.csv")


def run_single_seed(
    config: RunConfig,
    seed: int,
    source: DomainDataset,
    target: DomainDataset,
    *,
    run_dir: Path | None = None,
    max_iterations: int | None = None,
    write_latents: bool = True,
) -> dict:
    """Train one seed to completion and evaluate on the target test set."""
    state = init_state(config, seed)
    log_writer = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_writer = RunLogWriter(run_dir / "train_log.csv")
    try:
        train(
            state, source, target,
            max_iterations=max_iterations, log_writer=log_writer,
        )
    finally:
        if log_writer is not None:
            log_writer.close()
    target_rmse, target_score = evaluate_target(state.model, target, config.rc)
    val = source_val_rmse(state, source)
    if run_dir is not None:
        save_train_checkpoint(run_dir / "checkpoint.bin", state)
        with open(run_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "rmse", "score", "val_rmse"])
            writer.writerow([seed, target_rmse, target_score, val])
        if write_latents:
            export_latents(state.model, [source, target], "C", run_dir / "latents_C.csv")
            export_latents(state.model, [source, target], "O", run_dir / "latents_O.csv")
    return {
        "seed": seed,
        "rmse": target_rmse,
        "score": target_score,
        "val_rmse": val,
        "state": state,
    }


def run_experiment(
    config: RunConfig,
    source: DomainDataset,
    target: DomainDataset,
    *,
    out_dir=None,
    seeds: tuple[int, ...] | None = None,
    max_iterations: int | None = None,
    write_latents: bool = True,
    progress: Callable[[str], None] | None = None,
) -> MetricsReport:
    """Train every seed, evaluate on the target test set, aggregate.

    A seed run that aborts (non-finite loss) is recorded as a failure and the
    remaining seeds still run.  Artifacts are written per seed under
    out_dir/<seed>/ when out_dir is given.
    """
    seeds = tuple(seeds if seeds is not None else config.seeds)
    report = MetricsReport(
        source=config.source_subset,
        target=config.target_subset,
        variant=config.variant,
        seeds=seeds,
        n_test_engines=len(target.test_windows),
    )
    rows = []
    for seed in seeds:
        run_dir = Path(out_dir) / str(seed) if out_dir is not None else None
        try:
            result = run_single_seed(
                config, seed, source, target,
                run_dir=run_dir, max_iterations=max_iterations,
                write_latents=write_latents,
            )
        except TrainingAbort as exc:
            report.failures.append(f"seed {seed}: {exc}")
            continue
        report.rmse_per_seed.append(result["rmse"])
        report.score_per_seed.append(result["score"])
        report.val_rmse_per_seed.append(result["val_rmse"])
        rows.append((seed, result["rmse"], result["score"], result["val_rmse"]))
        if run_dir is not None:
            with open(run_dir / "report.json", "w") as fh:
                json.dump(
                    {
                        "config_hash": config.hash,
                        "config": config.to_dict(),
                        "seed": seed,
                        "rmse": result["rmse"],
                        "score": result["score"] if math.isfinite(result["score"]) else "inf",
                        "val_rmse": result["val_rmse"],
                    },
                    fh, indent=2, sort_keys=True,
                )
        if progress is not None:
            progress(
                f"{config.source_subset}->{config.target_subset} {config.variant} "
                f"seed {seed}: rmse {result['rmse']:.2f}"
            )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "report.json", "w") as fh:
            json.dump(
                report.to_dict() | {"config_hash": config.hash, "config": config.to_dict()},
                fh, indent=2, sort_keys=True,
            )
        with open(Path(out_dir) / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "rmse", "score", "val_rmse"])
            writer.writerows(rows)
    return report
