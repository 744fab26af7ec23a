"""Training: cross-entropy, the halved dual-head distillation loss, the
hard-decision teacher (live model or a serialized logits cache), AdamW
with a cosine schedule, the epoch loop, and the finite-difference
gradient checker.

The distillation target is the teacher's hard label (argmax of its
logits, ties to the lowest index); no soft targets or temperature are
involved. The global objective averages the classification and
distillation cross-entropies:

    L_global = (CE(y_hat, y) + CE(y_d_hat, y_teacher)) / 2

and because each head reads its own stream, the distillation term sends
exactly zero gradient into the classification head and vice versa.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, TrainingError
from .model import Param, SpikingTransformer
from .numeric import DTYPE, Rng, Tensor, finite_diff_grad

_CACHE_MAGIC = b"SBLC\x01\x00"


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, target: int) -> float:
    """-log softmax(logits)[target] with max subtraction, in float64."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= int(target) < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[int(target)])


def batch_cross_entropy(logits: Tensor, targets: Tensor) -> tuple[float, Tensor]:
    """Mean cross-entropy over a batch and its gradient wrt the logits."""
    logits64 = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    B, C = logits64.shape
    if targets.min() < 0 or targets.max() >= C:
        raise IndexError(f"target out of range for {C} classes")
    z = logits64 - logits64.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(B), targets].mean())
    grad = np.exp(logp)
    grad[np.arange(B), targets] -= 1.0
    return loss, (grad / B).astype(logits.dtype if logits.dtype.kind == "f" else DTYPE)


@dataclass(frozen=True)
class TeacherOutput:
    """Teacher logits and the derived hard decisions (argmax, lowest
    index on ties)."""

    logits: Tensor
    hard_label: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> "TeacherOutput":
        logits = np.atleast_2d(np.asarray(logits))
        return cls(logits=logits, hard_label=logits.argmax(axis=1))


@dataclass(frozen=True)
class LossReport:
    ce_class: float
    ce_distill: float
    global_loss: float


def global_loss(y_hat: Tensor, y: Tensor, y_d_hat: Tensor, teacher: TeacherOutput) -> LossReport:
    """The halved sum of classification CE and hard-label distillation CE."""
    y_hat = np.atleast_2d(y_hat)
    y_d_hat = np.atleast_2d(y_d_hat)
    if y_hat.shape[1] != y_d_hat.shape[1] or y_hat.shape[1] != teacher.logits.shape[1]:
        raise ConfigError("class counts disagree between heads and teacher")
    ce_c, _ = batch_cross_entropy(y_hat, np.atleast_1d(y))
    ce_d, _ = batch_cross_entropy(y_d_hat, teacher.hard_label)
    return LossReport(ce_class=ce_c, ce_distill=ce_d, global_loss=(ce_c + ce_d) / 2.0)


# ---------------------------------------------------------------------------
# teacher sources


def dataset_hash(x: Tensor, y: Tensor) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(x, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<i8").tobytes())
    return int.from_bytes(h.digest(), "little")


class TeacherLogitsCache:
    """Sample-id-keyed teacher logits, so distillation can run without the
    teacher model in memory."""

    def __init__(self, logits: Tensor, data_hash: int):
        self.logits = np.asarray(logits, dtype=DTYPE)
        self.data_hash = data_hash

    @property
    def num_samples(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def predict(self, ids: Tensor) -> TeacherOutput:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= self.num_samples:
            raise DataError("sample id outside the cached range")
        return TeacherOutput.from_logits(self.logits[ids])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_CACHE_MAGIC)
            fh.write(struct.pack("<IIQ", self.num_samples, self.num_classes, self.data_hash))
            for sid in range(self.num_samples):
                fh.write(struct.pack("<I", sid))
                fh.write(self.logits[sid].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "TeacherLogitsCache":
        with open(path, "rb") as fh:
            magic = fh.read(len(_CACHE_MAGIC))
            if magic != _CACHE_MAGIC:
                raise DataError(f"bad logits-cache magic: {magic!r}")
            n, c, data_hash = struct.unpack("<IIQ", fh.read(16))
            logits = np.empty((n, c), dtype=DTYPE)
            for i in range(n):
                (sid,) = struct.unpack("<I", fh.read(4))
                if sid != i:
                    raise DataError(f"logits cache out of order: expected id {i}, got {sid}")
                logits[i] = np.frombuffer(fh.read(4 * c), dtype="<f4")
        return cls(logits, data_hash)


def build_logits_cache(teacher: SpikingTransformer, x: Tensor, y: Tensor,
                       batch_size: int = 128) -> TeacherLogitsCache:
    n = x.shape[0]
    logits = np.empty((n, teacher.cfg.num_classes), dtype=DTYPE)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        out, _ = teacher.forward(x[start:stop], training=False)
        logits[start:stop] = out
    return TeacherLogitsCache(logits, dataset_hash(x, y))


def teacher_predict(teacher, batch_x: Tensor, ids: Tensor | None = None) -> TeacherOutput:
    """Hard decisions from a live teacher model or a logits cache.

    A cache requires sample ids; a live model ignores them.
    """
    if isinstance(teacher, TeacherLogitsCache):
        if ids is None:
            raise DataError("logits cache lookup needs sample ids")
        return teacher.predict(ids)
    logits, _ = teacher.forward(batch_x, training=False)
    return TeacherOutput.from_logits(logits)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay applies only to matrix-shaped parameters; one-dimensional
    parameters (biases, BN affine) and the lambda scales are exempt.
    Parameters flagged positive-only are clipped to a small floor after
    each step.
    """

    def __init__(self, named_params: list[tuple[str, Param]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, positivity_floor: float = 1e-4):
        self.entries = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.positivity_floor = positivity_floor
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for _, p in self.entries]
        self.v = [np.zeros_like(p.value) for _, p in self.entries]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - b1 ** t
        bias2 = 1.0 - b2 ** t
        for i, (name, p) in enumerate(self.entries):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            upd = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and p.value.ndim >= 2:
                upd = upd + self.weight_decay * p.value
            p.value -= (lr * upd).astype(DTYPE)
            if p.positive:
                np.maximum(p.value, self.positivity_floor, out=p.value)
            p.bump()


class CosineSchedule:
    """lr(t) = min_lr + (base - min_lr) * (1 + cos(pi * t / total)) / 2."""

    def __init__(self, base_lr: float, total_steps: int, min_lr: float = 0.0):
        self.base_lr = base_lr
        self.total_steps = max(1, total_steps)
        self.min_lr = min_lr

    def lr_at(self, step: int) -> float:
        frac = min(1.0, step / self.total_steps)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * frac))


def clip_global_norm(named_params, max_norm: float) -> float:
    total = 0.0
    for _, p in named_params:
        total += float((p.grad.astype(np.float64) ** 2).sum())
    total = math.sqrt(total)
    if max_norm > 0 and total > max_norm:
        scale = DTYPE(max_norm / (total + 1e-12))
        for _, p in named_params:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochMetrics:
    epoch: int
    ce_class: float
    ce_distill: float
    global_loss: float
    accuracy: float


def train_epoch(model: SpikingTransformer, data: tuple[Tensor, Tensor],
                teacher, optimizer: AdamW, rng: Rng, batch_size: int = 64,
                clip_norm: float = 5.0, schedule: CosineSchedule | None = None,
                epoch: int = 0) -> EpochMetrics:
    """One pass over shuffled data with the CIE objective.

    With a teacher and a distillation head the loss is the halved CE sum;
    otherwise plain classification CE. A non-finite loss aborts with the
    batch index in the message.
    """
    x, y = data
    n = x.shape[0]
    distill = teacher is not None and model.head_dist is not None
    order = rng.child(1000 + epoch).permutation(n)
    sum_c = sum_d = 0.0
    correct = 0
    batches = 0
    for bi, start in enumerate(range(0, n, batch_size)):
        idx = order[start:start + batch_size]
        xb, yb = x[idx], y[idx]
        model.zero_grads()
        logits, dist_logits = model.forward(xb, training=True)
        ce_c, g_logits = batch_cross_entropy(logits, yb)
        if distill:
            t_out = teacher_predict(teacher, xb, ids=idx)
            ce_d, g_dist = batch_cross_entropy(dist_logits, t_out.hard_label)
            loss = (ce_c + ce_d) / 2.0
            g_logits = 0.5 * g_logits
            g_dist = 0.5 * g_dist
        else:
            ce_d = 0.0
            g_dist = None
            loss = ce_c
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} in batch {bi} of epoch {epoch}")
        model.backward(g_logits.astype(DTYPE), None if g_dist is None else g_dist.astype(DTYPE))
        clip_global_norm(optimizer.entries, clip_norm)
        lr = schedule.lr_at(optimizer.step_count) if schedule else None
        optimizer.step(lr)
        sum_c += ce_c
        sum_d += ce_d
        correct += int((logits.argmax(axis=1) == yb).sum())
        batches += 1
    mean_c = sum_c / batches
    mean_d = sum_d / batches
    return EpochMetrics(
        epoch=epoch, ce_class=mean_c, ce_distill=mean_d,
        global_loss=(mean_c + mean_d) / 2.0 if distill else mean_c,
        accuracy=correct / n,
    )


def evaluate_accuracy(model: SpikingTransformer, x: Tensor, y: Tensor,
                      batch_size: int = 128) -> float:
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        stop = min(start + batch_size, x.shape[0])
        logits, _ = model.forward(x[start:stop], training=False)
        correct += int((logits.argmax(axis=1) == y[start:stop]).sum())
    return correct / x.shape[0]


def train_model(model: SpikingTransformer, train_data, epochs: int, rng: Rng,
                teacher=None, lr: float = 3e-3, weight_decay: float = 0.0,
                batch_size: int = 64, clip_norm: float = 5.0,
                cosine: bool = True, min_lr_frac: float = 0.01,
                on_epoch=None) -> list[EpochMetrics]:
    """Fit a model; returns the per-epoch metric history."""
    x, y = train_data
    opt = AdamW(model.named_params(), lr=lr, weight_decay=weight_decay)
    steps_per_epoch = max(1, (x.shape[0] + batch_size - 1) // batch_size)
    schedule = CosineSchedule(lr, epochs * steps_per_epoch, lr * min_lr_frac) if cosine else None
    history = []
    for epoch in range(epochs):
        em = train_epoch(model, (x, y), teacher, opt, rng, batch_size=batch_size,
                         clip_norm=clip_norm, schedule=schedule, epoch=epoch)
        history.append(em)
        if on_epoch is not None:
            on_epoch(model, em)
    return history


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, backward_fn, named_params: list[tuple[str, Param]],
               h: float = 1e-4) -> float:
    """Compare analytic parameter gradients against central differences.

    `loss_fn()` evaluates the fragment's scalar loss from current param
    values; `backward_fn()` runs forward+backward, leaving gradients on
    the params, and returns the loss. The result is the worst elementwise
    |analytic - fd| scaled by the largest finite-difference magnitude
    (with a floor of 1), across every parameter.
    """
    for _, p in named_params:
        p.zero_grad()
    backward_fn()
    analytic = [p.grad.copy() for _, p in named_params]
    worst = 0.0
    for (name, p), ag in zip(named_params, analytic):
        def f(v, _p=p):
            _p.value = v
            return loss_fn()
        original = p.value
        fd = finite_diff_grad(f, original.copy(), h=h)
        p.value = original
        scale = max(1.0, float(np.abs(fd).max()))
        err = float(np.abs(ag - fd).max()) / scale
        worst = max(worst, err)
    return worst
