"""Objective, optimizer, schedule, batch composition and augmentation.

Training minimizes mean cross-entropy over identity labels plus an L2
penalty on the classifier projection, with classic momentum SGD.  The
learning rate starts at 0.01 and drops by 10x, floored at 0.001, whenever
the windowed mean loss stops improving.  Batches are built from randomly
drawn same-identity and different-identity pairs; the pairs only shape the
sampling, the loss itself is plain identity classification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import imageops
from .network import BRANCH_ORDER, DirectionalModel, with_classes

# A decay fires when the windowed mean loss improves by less than 1%.
CONVERGENCE_RTOL = 0.01


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient goes non-finite; carries the step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 128  # half from same-identity pairs, half from cross-identity pairs
    alpha: float = 0.005  # classifier L2 weight (0.001 suits larger id sets)
    momentum: float = 0.9
    lr_initial: float = 0.01
    lr_min: float = 0.001
    lr_decay_factor: float = 0.1
    convergence_window: int = 200
    rotation_deg: float = 3.0
    mirror_prob: float = 0.5
    init_std: float = 0.01
    seed: int = 0

    def validate(self):
        if self.lr_min > self.lr_initial:
            raise ValueError("lr_min must be <= lr_initial")
        if self.batch_size < 4 or self.batch_size % 4:
            raise ValueError("batch_size must be a positive multiple of 4")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        return self


def softmax_l2_loss(logits, labels, W, alpha):
    """Mean cross-entropy plus (alpha/2)*||W||^2.

    Returns (loss, d loss/d logits, d penalty/d W).  The gradient w.r.t.
    the logits is (softmax - onehot) / K, which sums to zero over classes
    for every sample.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    k, c = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    data = -logp[np.arange(k), labels].mean()
    grad_logits = np.exp(logp)
    grad_logits[np.arange(k), labels] -= 1.0
    grad_logits /= k
    if W is None:
        return data, grad_logits, None
    return data + 0.5 * alpha * float((W * W).sum()), grad_logits, alpha * W


class MomentumSGD:
    """Classic momentum: v <- mu*v - lr*g; p <- p + v."""

    def __init__(self, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, named_params, named_grads):
        grads = dict(named_grads)
        for name, p in named_params:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {name}")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            v *= self.momentum
            v -= self.lr * g
            p += v


class ConvergenceSchedule:
    """Decays lr by `factor` when the mean loss over the last window is
    within 1% of the window before it; never goes below lr_min."""

    def __init__(self, lr_initial, lr_min, factor=0.1, window=200):
        self.lr = lr_initial
        self.lr_min = lr_min
        self.factor = factor
        self.window = window
        self._history = []

    def update(self, loss) -> float:
        self._history.append(float(loss))
        w = self.window
        if len(self._history) >= 2 * w:
            prev = float(np.mean(self._history[-2 * w : -w]))
            curr = float(np.mean(self._history[-w:]))
            if prev - curr < CONVERGENCE_RTOL * abs(prev):
                self.lr = max(self.lr * self.factor, self.lr_min)
                self._history.clear()
        return self.lr


@dataclass
class TrainingSet:
    """In-memory training data: images, integer labels, identity bookkeeping."""

    images: np.ndarray  # (m, s, s, 3) in [0, 1]
    labels: np.ndarray  # (m,) int indices into class_ids
    class_ids: list  # sorted unique vehicle ids
    class_indices: dict = field(default_factory=dict)  # label -> [row indices]

    def __post_init__(self):
        if not self.class_indices:
            for i, lab in enumerate(self.labels):
                self.class_indices.setdefault(int(lab), []).append(i)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)


def sample_batch(class_indices: dict, rng, batch_size: int = 128) -> np.ndarray:
    """Row indices for one batch: batch_size/4 same-identity pairs followed
    by batch_size/4 different-identity pairs (two images each)."""
    if batch_size < 4 or batch_size % 4:
        raise ValueError("batch_size must be a positive multiple of 4")
    classes = sorted(class_indices)
    if len(classes) < 2:
        raise ValueError("need at least two identities to form negative pairs")
    rich = [c for c in classes if len(class_indices[c]) >= 2]
    if not rich:
        raise ValueError("need an identity with at least two images to form positive pairs")
    n_pairs = batch_size // 4
    idx = []
    for _ in range(n_pairs):
        c = rich[rng.integers(len(rich))]
        pick = rng.choice(len(class_indices[c]), size=2, replace=False)
        idx += [class_indices[c][pick[0]], class_indices[c][pick[1]]]
    for _ in range(n_pairs):
        ca, cb = rng.choice(len(classes), size=2, replace=False)
        for c in (classes[ca], classes[cb]):
            rows = class_indices[c]
            idx.append(rows[rng.integers(len(rows))])
    return np.asarray(idx)


def augment(image: np.ndarray, rng, config: TrainConfig) -> np.ndarray:
    """Horizontal mirror with probability 1/2, then a uniform random rotation
    in [-rotation_deg, +rotation_deg] about the center (bilinear, edges
    replicated).  Both random draws always happen, keeping the stream aligned."""
    do_mirror = rng.random() < config.mirror_prob
    theta = rng.uniform(-config.rotation_deg, config.rotation_deg)
    if do_mirror:
        image = imageops.mirror(image)
    return imageops.rotate(image, theta)


def augment_batch(images: np.ndarray, rng, config: TrainConfig) -> np.ndarray:
    return np.stack([augment(img, rng, config) for img in images])


def train_branch(net, data: TrainingSet, config: TrainConfig, rng_sample, rng_aug):
    """SGD loop for one branch network; returns [(step, lr, loss), ...]."""
    opt = MomentumSGD(config.lr_initial, config.momentum)
    sched = ConvergenceSchedule(
        config.lr_initial, config.lr_min, config.lr_decay_factor, config.convergence_window
    )
    trace = []
    for step in range(1, config.steps + 1):
        rows = sample_batch(data.class_indices, rng_sample, config.batch_size)
        x = augment_batch(data.images[rows], rng_aug, config)
        y = data.labels[rows]
        logits = net.forward_logits(x, train=True)
        if not np.all(np.isfinite(logits)):
            raise DivergenceError(f"non-finite logits at step {step}", step=step)
        loss, grad_logits, grad_reg = softmax_l2_loss(logits, y, net.classifier, config.alpha)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss diverged at step {step}", step=step)
        net.backward_logits(grad_logits)
        net.g_classifier += grad_reg
        try:
            opt.step(net.named_params(), net.named_grads())
        except DivergenceError as err:
            raise DivergenceError(f"{err} at step {step}", step=step) from None
        trace.append((step, opt.lr, float(loss)))
        opt.lr = sched.update(loss)
    return trace


def train_model(data: TrainingSet, net_config, config: TrainConfig):
    """Train one branch network per enabled direction, independently.

    Weight init draws from N(0, init_std^2); batch-norm scale/shift start
    at identity and biases at zero.  Every RNG stream is derived from
    (seed, branch, purpose), so a fixed seed reproduces the run bit-exactly
    at a fixed thread count.

    Returns (DirectionalModel, {branch: trace}).
    """
    config.validate()
    net_config = with_classes(net_config, data.n_classes)
    model = DirectionalModel.build(net_config, seed=config.seed, init_std=config.init_std)
    traces = {}
    for b in BRANCH_ORDER:
        if b not in model.branches:
            continue
        idx = BRANCH_ORDER.index(b)
        rng_sample = np.random.default_rng([config.seed, idx, 1])
        rng_aug = np.random.default_rng([config.seed, idx, 2])
        traces[b] = train_branch(model.branches[b], data, config, rng_sample, rng_aug)
    return model, traces
