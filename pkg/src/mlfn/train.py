"""Identity-classification training: optimizers, augmentation, the loop.

Every per-iteration random draw (batch sampling, flip mask, photometric
wobble, jitter shifts) comes from its own generator seeded by (run seed,
stream id, iteration), so the trajectory is a pure function of (seed,
config, dataset) and training can resume from a checkpoint mid-run and land
on bit-identical parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DivergenceError, ShapeError
from .model import MLFNModel, load_checkpoint, save_checkpoint

OPTIMIZERS = ("adam", "sgd_nesterov")
SCHEDULES = ("constant", "step")

_SAMPLE_STREAM = 0
_FLIP_STREAM = 1
_PHOTOMETRIC_STREAM = 2
_JITTER_STREAM = 3


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 64
    lr: float = 0.00035
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    flip: bool = True
    photometric: float = 0.0
    jitter: int = 0
    eval_every: int = 100
    schedule: str = "constant"
    decay_factor: float = 0.1
    decay_every: int = 0
    early_stop_acc: float | None = None
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractError("iterations must be at least 1")
        if self.batch_size < 2:
            raise ContractError("batch size must be at least 2 "
                                "(batch norm trains on batch statistics)")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"schedule must be one of {SCHEDULES}")
        if self.lr <= 0.0:
            raise ContractError("learning rate must be positive")
        if self.eval_every < 1:
            raise ContractError("eval_every must be at least 1")
        if self.weight_decay < 0.0:
            raise ContractError("weight decay cannot be negative")
        if self.photometric < 0.0:
            raise ContractError("photometric strength cannot be negative")
        if self.jitter < 0:
            raise ContractError("jitter shift cannot be negative")


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    """Moment buffers and step counter; learning rate comes from the
    schedule at call time."""

    kind: str
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optimizer(kind: str, params: dict) -> OptimizerState:
    if kind not in OPTIMIZERS:
        raise ContractError(f"optimizer must be one of {OPTIMIZERS}")
    state = OptimizerState(kind=kind)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        state.m[name] = np.zeros_like(p.value)
        if kind == "adam":
            state.v[name] = np.zeros_like(p.value)
    return state


def _check_buffer(name: str, buf: np.ndarray, p) -> None:
    if buf.shape != p.value.shape:
        raise ShapeError(f"optimizer buffer for {name!r} has shape {buf.shape}, "
                         f"parameter has {p.value.shape}")


def adam_step(params: dict, state: OptimizerState, *, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam update in place; gradients are left untouched."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.value
        m, v = state.m[name], state.v[name]
        _check_buffer(name, m, p)
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.value[...] -= lr * mhat / (np.sqrt(vhat) + eps)


def sgd_nesterov_step(params: dict, state: OptimizerState, *, lr: float,
                      momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """Nesterov-momentum SGD: buf = mu*buf + g; p -= lr*(g + mu*buf)."""
    state.t += 1
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.value
        buf = state.m[name]
        _check_buffer(name, buf, p)
        buf[...] = momentum * buf + g
        p.value[...] -= lr * (g + momentum * buf)


def optimizer_tensors(state: OptimizerState) -> dict:
    """Flatten optimizer state to named tensors for checkpointing."""
    out = {"opt.t": np.asarray(float(state.t), np.float32)}
    for name, buf in state.m.items():
        out[f"opt.m.{name}"] = buf
    for name, buf in state.v.items():
        out[f"opt.v.{name}"] = buf
    return out


def restore_optimizer(state: OptimizerState, extras: dict, dtype) -> None:
    state.t = int(float(extras["opt.t"]))
    for prefix, bufs in (("opt.m.", state.m), ("opt.v.", state.v)):
        for name, buf in bufs.items():
            key = prefix + name
            if key not in extras:
                raise ContractError(f"checkpoint lacks optimizer tensor {key!r}")
            if extras[key].shape != buf.shape:
                raise ShapeError(f"optimizer tensor {key!r} shape mismatch")
            buf[...] = extras[key].astype(dtype)


# ---------------------------------------------------------------------------
# augmentation


def augment_flip(batch: np.ndarray, rng: np.random.Generator,
                 p: float = 0.5) -> np.ndarray:
    """Mirror each image left-right independently with probability ``p``."""
    out = batch.copy()
    mask = rng.random(batch.shape[0]) < p
    out[mask] = out[mask][..., ::-1]
    return out


def augment_photometric(batch: np.ndarray, rng: np.random.Generator,
                        strength: float = 1.0) -> np.ndarray:
    """Per-image brightness/contrast wobble plus pixel noise.

    At strength 1 the draws roughly cover the range of lighting
    variation between camera views, which is exactly the invariance the
    matcher needs at test time.  Strength 0 returns the batch untouched
    (and burns no random draws, keeping stream replay simple).
    """
    if strength == 0.0:
        return batch
    n = batch.shape[0]
    brightness = rng.uniform(-0.12, 0.12, size=n) * strength
    contrast = 1.0 + rng.uniform(-0.15, 0.15, size=n) * strength
    sigma = rng.uniform(0.0, 0.05, size=n) * strength
    shape = (n,) + (1,) * (batch.ndim - 1)
    out = (batch - 0.5) * contrast.reshape(shape).astype(batch.dtype) + 0.5
    out += brightness.reshape(shape).astype(batch.dtype)
    out += rng.normal(0.0, 1.0, batch.shape).astype(batch.dtype) \
        * sigma.reshape(shape).astype(batch.dtype)
    return np.clip(out, 0.0, 1.0, out=out)


def augment_jitter(batch: np.ndarray, rng: np.random.Generator,
                   max_shift: int = 2) -> np.ndarray:
    """Shift each image by up to ``max_shift`` pixels per axis, edge
    padded.  ``max_shift`` 0 is the identity and draws nothing."""
    if max_shift == 0:
        return batch
    n = batch.shape[0]
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    h, w = batch.shape[2], batch.shape[3]
    pad = max_shift
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    mode="edge")
    out = np.empty_like(batch)
    for row in range(n):
        dy, dx = int(shifts[row, 0]), int(shifts[row, 1])
        out[row] = padded[row, :, pad - dy:pad - dy + h,
                          pad - dx:pad - dx + w]
    return out


# ---------------------------------------------------------------------------
# stepping


class DivergenceGuard:
    """Aborts a run whose loss stays above factor x initial for too long."""

    def __init__(self, initial: float, factor: float = 10.0, patience: int = 50):
        self.initial = initial
        self.factor = factor
        self.patience = patience
        self.bad = 0

    def update(self, loss: float) -> None:
        if loss > self.factor * self.initial:
            self.bad += 1
            if self.bad >= self.patience:
                raise DivergenceError(
                    f"loss {loss:.4g} stayed above {self.factor:g}x the initial "
                    f"loss {self.initial:.4g} for {self.bad} consecutive steps")
        else:
            self.bad = 0


def train_step(model: MLFNModel, images, labels, state: OptimizerState,
               cfg: TrainConfig, lr: float) -> float:
    """One forward/backward/update cycle; returns the batch loss.

    Gradients are zeroed before backward and again after the update, so the
    optimizer always consumes exactly this step's gradients.
    """
    tape = ad.Tape()
    res = model.forward(tape, images, training=True)
    loss = ad.softmax_cross_entropy(tape, res.logits,
                                    np.asarray(labels, np.int64))
    lval = float(loss.value)
    if not np.isfinite(lval):
        raise DivergenceError(
            f"non-finite loss {lval} (lr {lr:g}, batch {images.shape[0]}); "
            "dumping: logits range "
            f"[{np.nanmin(res.logits.value):.3g}, {np.nanmax(res.logits.value):.3g}]")
    model.zero_grads()
    ad.backward(tape, loss)
    if state.kind == "adam":
        adam_step(model.params, state, lr=lr, beta1=cfg.beta1, beta2=cfg.beta2,
                  eps=cfg.eps, weight_decay=cfg.weight_decay)
    else:
        sgd_nesterov_step(model.params, state, lr=lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    model.zero_grads()
    return lval


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Learning rate for a 1-based iteration index."""
    if cfg.schedule == "constant" or cfg.decay_every <= 0:
        return cfg.lr
    return cfg.lr * cfg.decay_factor ** ((iteration - 1) // cfg.decay_every)


def classification_accuracy(model: MLFNModel, images, labels,
                            chunk: int = 128) -> float:
    """Eval-mode top-1 accuracy over a whole array of images."""
    labels = np.asarray(labels)
    hits = 0
    for lo in range(0, len(images), chunk):
        res = model.forward(ad.Tape(), images[lo:lo + chunk], training=False)
        hits += int((res.logits.value.argmax(axis=1) == labels[lo:lo + chunk]).sum())
    return hits / len(images)


# ---------------------------------------------------------------------------
# the loop


def run_training(model: MLFNModel, images, labels, cfg: TrainConfig, *,
                 log_path=None, ckpt_path=None, resume: bool = False,
                 progress=None) -> list:
    """Train ``model`` on (images, labels); returns the logged rows.

    Rows are dicts with keys iteration/loss/lr/train_acc, appended at every
    ``eval_every`` mark and at the final iteration; ``log_path`` additionally
    writes them as CSV. ``ckpt_path`` receives a checkpoint at the end (and
    every ``checkpoint_every`` iterations if configured) carrying optimizer
    state and the iteration counter, which ``resume=True`` picks back up.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, np.int64)
    n = images.shape[0]
    if n < 1 or labels.shape != (n,):
        raise ContractError("images and labels must be parallel, non-empty")
    if labels.min() < 0 or labels.max() >= model.config.n_classes:
        raise ContractError(
            f"labels must lie in [0, {model.config.n_classes})")

    state = init_optimizer(cfg.optimizer, model.params)
    start = 0
    if resume:
        if ckpt_path is None:
            raise ContractError("resume needs a checkpoint path")
        extras = load_checkpoint(ckpt_path, model)
        start = int(float(extras["iteration"]))
        restore_optimizer(state, extras, model.config.np_dtype)

    def save(iteration: int) -> None:
        extra = {"iteration": np.asarray(float(iteration), np.float32)}
        extra.update(optimizer_tensors(state))
        save_checkpoint(ckpt_path, model, extra=extra)

    rows: list[dict] = []
    guard: DivergenceGuard | None = None
    last = start
    for t in range(start + 1, cfg.iterations + 1):
        last = t
        lr = lr_at(cfg, t)
        sample_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _SAMPLE_STREAM, t]))
        idx = sample_rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        batch = images[idx]
        if cfg.flip:
            flip_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, _FLIP_STREAM, t]))
            batch = augment_flip(batch, flip_rng)
        if cfg.photometric > 0.0:
            photo_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, _PHOTOMETRIC_STREAM, t]))
            batch = augment_photometric(batch, photo_rng, cfg.photometric)
        if cfg.jitter > 0:
            jitter_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, _JITTER_STREAM, t]))
            batch = augment_jitter(batch, jitter_rng, cfg.jitter)
        loss = train_step(model, batch, labels[idx], state, cfg, lr)

        if guard is None:
            guard = DivergenceGuard(loss, cfg.divergence_factor,
                                    cfg.divergence_patience)
        else:
            guard.update(loss)

        stop = False
        if t % cfg.eval_every == 0 or t == cfg.iterations:
            acc = classification_accuracy(model, images, labels)
            rows.append({"iteration": t, "loss": loss, "lr": lr,
                         "train_acc": acc})
            if progress is not None:
                progress(rows[-1])
            if cfg.early_stop_acc is not None and acc >= cfg.early_stop_acc:
                stop = True
        if ckpt_path is not None and cfg.checkpoint_every \
                and t % cfg.checkpoint_every == 0:
            save(t)
        if stop:
            break

    if ckpt_path is not None:
        save(last)
    if log_path is not None:
        write_loss_log(log_path, rows)
    return rows


def write_loss_log(path, rows: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "lr", "train_acc"])
        for r in rows:
            writer.writerow([r["iteration"], repr(float(r["loss"])),
                             repr(float(r["lr"])), repr(float(r["train_acc"]))])
