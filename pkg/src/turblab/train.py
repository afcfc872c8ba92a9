"""Single-step forecasting objective, Adam, and the training loop.

The model learns the map from one normalized vorticity frame to the
next. Training minimizes mean squared error over all consecutive frame
pairs of the train split; validation loss on the frozen val split picks
the retained checkpoint. Everything is seeded, so two runs on one
machine produce byte-identical logs and checkpoints.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DatasetManifest, load_split_frames, normalize, pair_batches
from .model import Forecaster, ModelConfig, config_to_lines, save_checkpoint

GRAD_CLIP_NORM = 1.0

LR_SCHEDULES = ("constant", "cosine")

DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingAbort(RuntimeError):
    """Non-finite loss; `step` records where training stopped."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.001
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 42
    lr_schedule: str = "constant"
    checkpoint_every: int = 0
    dtype: str = "float64"


def validate_train_config(c: TrainConfig) -> None:
    if c.epochs < 0:
        raise ValueError("epochs must be non-negative")
    if c.batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if not c.learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    if not (0 <= c.betas[0] < 1 and 0 <= c.betas[1] < 1):
        raise ValueError(f"betas {c.betas} must lie in [0, 1)")
    if c.eps <= 0:
        raise ValueError("eps must be positive")
    if c.lr_schedule not in LR_SCHEDULES:
        raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
    if c.checkpoint_every < 0:
        raise ValueError("checkpoint_every must be non-negative")
    if c.dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")


def train_config_to_lines(c: TrainConfig) -> list:
    return [
        f"train.epochs={c.epochs}",
        f"train.batch_size={c.batch_size}",
        f"train.learning_rate={c.learning_rate!r}",
        "train.betas=" + ",".join(repr(b) for b in c.betas),
        f"train.eps={c.eps!r}",
        f"train.seed={c.seed}",
        f"train.lr_schedule={c.lr_schedule}",
        f"train.checkpoint_every={c.checkpoint_every}",
        f"train.dtype={c.dtype}",
    ]


TRAIN_KEYS = {line.split("=")[0] for line in train_config_to_lines(TrainConfig())}


def train_config_from_kv(kv: dict) -> TrainConfig:
    """Build a TrainConfig from dotted key=value strings; unknown
    train.* keys are rejected."""
    unknown = {k for k in kv if k.startswith("train.")} - TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    base = TrainConfig()
    get = lambda key, cast, dflt: cast(kv[key]) if key in kv else dflt
    betas = get("train.betas",
                lambda s: tuple(float(v) for v in s.split(",")), base.betas)
    c = TrainConfig(
        epochs=get("train.epochs", int, base.epochs),
        batch_size=get("train.batch_size", int, base.batch_size),
        learning_rate=get("train.learning_rate", float, base.learning_rate),
        betas=betas,
        eps=get("train.eps", float, base.eps),
        seed=get("train.seed", int, base.seed),
        lr_schedule=get("train.lr_schedule", str, base.lr_schedule),
        checkpoint_every=get("train.checkpoint_every", int, base.checkpoint_every),
        dtype=get("train.dtype", str, base.dtype),
    )
    validate_train_config(c)
    return c


# --- loss ------------------------------------------------------------------

def mse_loss(pred: T.Tensor, target: T.Tensor) -> T.Tensor:
    """Mean squared difference over all elements (shapes must match)."""
    pred, target = T._as_tensor(pred), T._as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise T.ShapeError(
            f"loss shapes {pred.data.shape} vs {target.data.shape}")
    d = T.sub(pred, target)
    return T.mean_all(T.mul(d, d))


# --- optimizer -------------------------------------------------------------

def init_adam_state(params: dict) -> dict:
    """Zeroed first/second moment buffers matching the parameter table."""
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, t: int,
              config: TrainConfig, lr=None) -> tuple:
    """One bias-corrected Adam update, in place; t counts from 1.

    `lr` overrides config.learning_rate so schedules can feed a
    per-step rate through the same update rule.
    """
    if t < 1:
        raise ValueError("step counter t starts at 1")
    if lr is None:
        lr = config.learning_rate
    b1, b2 = config.betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    m, v = state["m"], state["v"]
    for k, p in params.items():
        g = grads[k]
        mk, vk = m[k], v[k]
        mk *= b1
        mk += (1.0 - b1) * g
        vk *= b2
        vk += (1.0 - b2) * (g * g)
        p -= (lr / c1) * mk / (np.sqrt(vk / c2) + config.eps)
    return params, state


def clip_gradients(grads: dict, max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale the whole gradient set so its global L2 norm is at most
    max_norm; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def schedule_lr(config: TrainConfig, t: int, total_steps: int) -> float:
    """Learning rate for optimizer step t of total_steps (both 1-based)."""
    if config.lr_schedule == "constant":
        return config.learning_rate
    # cosine: full rate on the first step, decaying toward zero
    frac = (t - 1) / max(1, total_steps)
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * frac))


# --- logging ---------------------------------------------------------------

LOG_HEADER = "step,epoch,split,loss"


@dataclass
class TrainLog:
    """Loss history: one row per optimizer step plus per-epoch summary
    rows ("train_epoch" mean and frozen "val" loss)."""
    rows: list = field(default_factory=list)
    config_lines: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def add(self, step: int, epoch: int, split: str, loss: float) -> None:
        if self.rows and step < self.rows[-1][0]:
            raise ValueError("step counter went backwards")
        if not math.isfinite(loss):
            raise ValueError(f"non-finite loss at step {step}")
        self.rows.append((step, epoch, split, float(loss)))

    def to_csv(self) -> str:
        lines = [LOG_HEADER]
        for step, epoch, split, loss in self.rows:
            lines.append(f"{step},{epoch},{split},{loss!r}")
        return "\n".join(lines) + "\n"

    def losses(self, split: str) -> list:
        return [r[3] for r in self.rows if r[2] == split]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def load_train_log(path) -> TrainLog:
    log = TrainLog()
    with open(path) as fh:
        header = fh.readline().strip()
        if header != LOG_HEADER:
            raise ValueError(f"unexpected log header {header!r}")
        for line in fh:
            step, epoch, split, loss = line.strip().split(",")
            log.rows.append((int(step), int(epoch), split, float(loss)))
    return log


# --- training loop ---------------------------------------------------------

@dataclass
class TrainResult:
    best_path: str
    final_path: str
    best_val: float
    final_val: float
    steps: int


def _forward_loss_sse(model, params_t, xs, ys):
    """Squared-error sum and element count outside any graph."""
    pred = model.forward(params_t, T.Tensor(xs))
    d = pred.data - ys
    return float(np.dot(d.ravel(), d.ravel())), d.size


def evaluate_split_loss(model, params: dict, m: DatasetManifest, split: str,
                        batch_size: int, dtype=np.float64) -> float:
    """Mean squared error over every consecutive pair of a split, with
    parameters frozen."""
    stacks = [normalize(m, s).astype(dtype) for s in load_split_frames(m, split)]
    params_t = {k: T.Tensor(v) for k, v in params.items()}
    sse = 0.0
    count = 0
    for xs, ys in pair_batches(stacks, batch_size):
        s, c = _forward_loss_sse(model, params_t, xs, ys)
        sse += s
        count += c
    return sse / count


def train(model_config: ModelConfig, train_config: TrainConfig,
          manifest: DatasetManifest, out_dir) -> tuple:
    """Fit a Forecaster on the manifest's train split.

    Writes best.ckpt (lowest validation loss), final.ckpt (last step),
    optional periodic epoch checkpoints, and train_log.csv under
    out_dir. Returns (TrainResult, TrainLog).

    Model initialization follows model_config.seed; train_config.seed
    drives batch shuffling only. Raises TrainingAbort if a loss turns
    non-finite; the log rows up to the offending step are flushed to
    disk first.
    """
    validate_train_config(train_config)
    if not manifest.split("train"):
        raise ValueError("manifest has no train split")
    if not manifest.split("val"):
        raise ValueError("manifest has no val split")
    os.makedirs(out_dir, exist_ok=True)
    dtype = DTYPES[train_config.dtype]

    model = Forecaster(model_config, manifest.n)
    params = {k: v.astype(dtype)
              for k, v in model.init_params().items()}
    state = init_adam_state(params)

    train_stacks = [normalize(manifest, s).astype(dtype)
                    for s in load_split_frames(manifest, "train")]
    pairs = sum(s.shape[0] - 1 for s in train_stacks)
    steps_per_epoch = -(-pairs // train_config.batch_size)
    total_steps = steps_per_epoch * train_config.epochs

    log = TrainLog(config_lines=config_to_lines(model_config)
                   + train_config_to_lines(train_config))
    extra_base = {"norm.mean": manifest.mean, "norm.std": manifest.std}

    t0 = time.perf_counter()
    best_val = math.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_step = 0
    step = 0
    val_batch = 2 * train_config.batch_size

    def flush():
        log.wall_seconds = time.perf_counter() - t0
        log.save(os.path.join(out_dir, "train_log.csv"))

    for epoch in range(1, train_config.epochs + 1):
        shuffle_seed = train_config.seed * 100003 + epoch
        epoch_sse = 0.0
        epoch_count = 0
        for xs, ys in pair_batches(train_stacks, train_config.batch_size,
                                   shuffle_seed):
            step += 1
            with T.Graph() as graph:
                params_t = {k: T.Tensor(v, requires_grad=True)
                            for k, v in params.items()}
                loss = mse_loss(model.forward(params_t, T.Tensor(xs)),
                                T.Tensor(ys))
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    flush()
                    raise TrainingAbort(
                        step, f"non-finite training loss at step {step}")
                graph.backward(loss)
            grads = {k: params_t[k].grad for k in params}
            clip_gradients(grads)
            adam_step(params, grads, state, step, train_config,
                      lr=schedule_lr(train_config, step, total_steps))
            log.add(step, epoch, "train", loss_val)
            epoch_sse += loss_val * xs.size
            epoch_count += xs.size

        log.add(step, epoch, "train_epoch", epoch_sse / epoch_count)
        val_loss = evaluate_split_loss(model, params, manifest, "val",
                                       val_batch, dtype)
        if not math.isfinite(val_loss):
            flush()
            raise TrainingAbort(step, f"non-finite validation loss at step {step}")
        log.add(step, epoch, "val", val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
            best_step = step
        if (train_config.checkpoint_every
                and epoch % train_config.checkpoint_every == 0):
            save_checkpoint(os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt"),
                            model, params,
                            dict(extra_base, val_loss=val_loss,
                                 step=float(step)))

    final_val = (log.losses("val")[-1] if train_config.epochs > 0
                 else evaluate_split_loss(model, params, manifest, "val",
                                          val_batch, dtype))
    if not math.isfinite(best_val):
        best_val = final_val
        best_params = params
        best_step = step

    best_path = os.path.join(out_dir, "best.ckpt")
    final_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(best_path, model, best_params,
                    dict(extra_base, val_loss=best_val, step=float(best_step)))
    save_checkpoint(final_path, model, params,
                    dict(extra_base, val_loss=final_val, step=float(step)))
    flush()
    return (TrainResult(best_path=best_path, final_path=final_path,
                        best_val=best_val, final_val=final_val, steps=step),
            log)
