"""Soft Dice objective, Adam, and the early-stopping training loop."""
import math
from dataclasses import dataclass

import numpy as np

from .augment import augment_rotate
from .checkpoint import Checkpoint
from .data import StandardScale, apply_standardisation, fit_standard_scale
from .model import forward, init_params
from .numerics import Tensor, make_node

DICE_EPS = 1e-5
INPUT_SCALE = 0.01  # standardised intensities live in [0, 100]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_steps: int = 500
    patience: int = 10
    eval_every: int = 20
    batch_size: int = 1
    seed: int = 0
    augment: bool = True
    standardize: bool = True
    target_score: float = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.patience < 1 or self.eval_every < 1 or self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("patience, eval_every, batch_size and max_steps must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def one_hot(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((labels.shape[0], n_classes) + labels.shape[1:])
    np.put_along_axis(onehot, labels[:, None].astype(np.int64), 1.0, axis=1)
    return onehot


def soft_dice_per_class(probs, labels, eps=DICE_EPS):
    """(2 sum p g + eps) / (sum p^2 + sum g^2 + eps) per class, summed over batch and voxels."""
    probs = np.asarray(probs)
    g = one_hot(labels, probs.shape[1])
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = (probs * g).sum(axis=axes)
    denom = (probs * probs).sum(axis=axes) + g.sum(axis=axes)
    return (2.0 * inter + eps) / (denom + eps)


def soft_dice_loss(probs, labels, eps=DICE_EPS):
    """1 - mean over classes of the soft Dice score; ``probs`` is (B, C, ...)."""
    p = probs.data
    g = one_hot(labels, p.shape[1])
    axes = (0,) + tuple(range(2, p.ndim))
    inter = (p * g).sum(axis=axes)
    denom = (p * p).sum(axis=axes) + g.sum(axis=axes) + eps
    num = 2.0 * inter + eps
    dice = num / denom
    C = p.shape[1]
    shape = (1, C) + (1,) * (p.ndim - 2)

    def grad(cot):
        # d dice_c / d p_c = (2 g denom - num 2 p) / denom^2
        dd = (2.0 * g * denom.reshape(shape) - 2.0 * p * num.reshape(shape)) / (denom ** 2).reshape(shape)
        return (-float(cot) / C * dd,)

    return make_node("soft_dice_loss", 1.0 - dice.mean(), (probs,), grad)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state, config, t):
    """One bias-corrected Adam update; returns new (params, state) without mutating inputs."""
    if t <= state.t:
        raise ValueError(f"step index must increase, got {t} after {state.t}")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_p[name] = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(new_m, new_v, t)


def prepare_image(image, scale):
    """Network input from a raw (n, D, H, W) image and optional per-modality landmarks."""
    if scale is None:
        return np.asarray(image, dtype=np.float64)
    return np.stack(
        [apply_standardisation(ch, StandardScale(lm)) for ch, lm in zip(image, scale)]
    ) * INPUT_SCALE


def fit_scales(samples):
    n = samples[0].n_modalities
    return np.stack([fit_standard_scale(samples, m).landmarks for m in range(n)])


def predict_proba(arch, params, images, batch_size=1):
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(arch, params, np.stack(images[i:i + batch_size])).data)
    return np.concatenate(out)


def validation_score(arch, params, images, labels):
    """Mean soft Dice over all classes (one minus the training objective), pooled over the set."""
    probs = predict_proba(arch, params, images)
    return float(soft_dice_per_class(probs, np.stack(labels)).mean())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list  # (step, loss, val_dice or None)
    stopped_early: bool

    def log_lines(self):
        return [format_log_line(*row) for row in self.log]


def format_log_line(step, loss, val):
    return f"{step}\t{loss!r}\t{'-' if val is None else repr(val)}"


def label_frequencies(samples, n_classes):
    """Class frequencies over ``samples`` with one pseudo-count per class."""
    counts = np.ones(n_classes)
    for s in samples:
        counts += np.bincount(s.labels.ravel(), minlength=n_classes)[:n_classes]
    return counts / counts.sum()


def train(arch, train_set, val_set, config, on_step=None, params=None):
    """Minimise soft Dice with Adam; keep the parameters with the best validation score."""
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    n_mod = {s.n_modalities for s in list(train_set) + list(val_set)}
    if n_mod != {arch.n_modalities}:
        raise ValueError(f"samples have {sorted(n_mod)} modalities, architecture expects {arch.n_modalities}")

    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(arch, rng, class_prior=label_frequencies(train_set, arch.n_classes))
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    scale = fit_scales(list(train_set)) if config.standardize else None
    val_images = [prepare_image(s.image, scale) for s in val_set]
    val_labels = [s.labels for s in val_set]
    state = AdamState.zeros_like(params)

    best = -math.inf
    best_snapshot = None
    bad_evals = 0
    log = []
    order = []
    stopped_early = False
    for step in range(1, config.max_steps + 1):
        batch = []
        while len(batch) < config.batch_size:
            if not order:
                order = list(rng.permutation(len(train_set)))
            batch.append(train_set[order.pop(0)])
        if config.augment:
            batch = [augment_rotate(s, rng) for s in batch]
        x = np.stack([prepare_image(s.image, scale) for s in batch])
        y = np.stack([s.labels for s in batch])

        tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        loss = soft_dice_loss(forward(arch, tensors, x), y)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise TrainingDiverged(step, loss_value)
        loss.backward()
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in tensors.items()}
        del tensors, loss
        params, state = adam_step(params, grads, state, config, step)

        val = None
        if step % config.eval_every == 0 or step == config.max_steps:
            val = validation_score(arch, params, val_images, val_labels)
            if not math.isfinite(val):
                raise TrainingDiverged(step, val)
            if val > best:
                best = val
                best_snapshot = (step, dict(params), dict(state.m), dict(state.v))
                bad_evals = 0
            else:
                bad_evals += 1
        log.append((step, loss_value, val))
        if on_step is not None:
            on_step(step, loss_value, val)
        if val is not None and (
            bad_evals >= config.patience or (config.target_score is not None and val >= config.target_score)
        ):
            stopped_early = step < config.max_steps
            break

    step, p, m, v = best_snapshot
    ckpt = Checkpoint(arch, step, p, m, v, best, scale)
    return TrainResult(ckpt, log, stopped_early)
