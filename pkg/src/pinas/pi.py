"""Cross-path consistency training primitives.

One step routes four views of a batch through two uniformly sampled paths:
the student embeds views 1 and 2 on paths i and j, the slow-moving teacher
embeds views 3 and 4 on the same two paths. The loss pulls each student
embedding toward the teacher embedding from the *other* path and pushes it
from a FIFO container of past teacher embeddings; the teacher then takes an
EMA step toward the student and both teacher embeddings join the container.

With negatives enabled the per-sample term is a softmax cross-entropy over
{positive, container rows}; with them disabled only the consistency part
-<z, zt>/tau remains, which is exactly the form that collapses to constant
embeddings and motivates the container.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .data.augment import AugmentPolicy, apply_policy, four_views
from .errors import ConfigError, ContractError
from .layers import BnMode
from .optim import SgdState, sgd_step, zero_grads
from .space import ArchEncoding, sample_uniform
from .supernet import PathContext, Supernet
from .tape import Tensor

NORM_TOL = 1e-3


@dataclass
class AblationFlags:
    cross_path: bool = True
    mean_teacher: bool = True
    downsample_sharing: bool = True
    nontrivial: bool = True  # use container negatives
    supervised_spos_mode: bool = False

    def __post_init__(self):
        if self.supervised_spos_mode and (self.cross_path or self.mean_teacher or self.nontrivial):
            raise ConfigError("supervised mode excludes the contrastive machinery")


@dataclass
class TeacherState:
    net: Supernet
    lam: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"EMA weight {self.lam} outside [0, 1]")


@dataclass
class LossBreakdown:
    total: float
    con_term: float
    add_term: float
    node: Tensor | None = None  # differentiable graph output
    path_i: str | None = None
    path_j: str | None = None
    collapse: float | None = None


class FeatureQueue:
    """Fixed-capacity FIFO ring of unit-norm feature rows."""

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0 or dim <= 0:
            raise ConfigError(f"queue needs positive capacity/dim, got {capacity}x{dim}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=np.float32)
        self.head = 0  # next write position
        self.filled = 0

    def enqueue(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ContractError(f"enqueue: rows shape {rows.shape}, queue dim {self.dim}")
        if len(rows) == 0:
            return
        norms = np.linalg.norm(rows, axis=1)
        off = np.abs(norms - 1.0)
        if off.max() > NORM_TOL:
            raise ContractError(f"enqueue: row norm {norms[off.argmax()]:.6f} not unit")
        if len(rows) > self.capacity:
            rows = rows[-self.capacity :]
        pos = (self.head + np.arange(len(rows))) % self.capacity
        self.buffer[pos] = rows
        self.head = int((self.head + len(rows)) % self.capacity)
        self.filled = min(self.filled + len(rows), self.capacity)

    def ordered(self) -> np.ndarray:
        """Current rows, oldest first."""
        if self.filled < self.capacity:
            return self.buffer[: self.filled].copy()
        return np.concatenate([self.buffer[self.head :], self.buffer[: self.head]])

    def state(self) -> dict[str, np.ndarray]:
        return {
            "buffer": self.buffer.copy(),
            "meta": np.array([self.head, self.filled, self.capacity, self.dim], dtype=np.int64),
        }

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "FeatureQueue":
        head, filled, capacity, dim = (int(v) for v in state["meta"])
        q = cls(capacity, dim)
        q.buffer[...] = state["buffer"]
        q.head, q.filled = head, filled
        return q


def _check_unit_rows(name: str, arr: np.ndarray) -> None:
    if arr.ndim != 2:
        raise ContractError(f"{name}: expected (B, D) embeddings, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    off = np.abs(norms - 1.0)
    if len(arr) and off.max() > NORM_TOL:
        raise ContractError(f"{name}: row {off.argmax()} has norm {norms[off.argmax()]:.6f}")


def cross_path_loss(
    z_i: Tensor,
    z_j: Tensor,
    zt_i: np.ndarray,
    zt_j: np.ndarray,
    queue: "FeatureQueue | np.ndarray | None",
    temperature: float,
    use_negatives: bool = True,
) -> LossBreakdown:
    """Cross-path contrastive consistency loss.

    Positive pairs are (z_i, zt_j) and (z_j, zt_i); teacher embeddings and
    container rows are constants. With `use_negatives` the per-term form is
    -log softmax over {positive, negatives}; without it only the consistency
    part -mean(<z, zt>)/tau remains (the add term is 0).
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    zt_i = np.asarray(zt_i, dtype=z_i.data.dtype)
    zt_j = np.asarray(zt_j, dtype=z_i.data.dtype)
    negatives = np.zeros((0, z_i.data.shape[1]), dtype=z_i.data.dtype)
    if use_negatives and queue is not None:
        negatives = queue.ordered() if isinstance(queue, FeatureQueue) else np.asarray(queue)
        negatives = negatives.astype(z_i.data.dtype, copy=False)
    _check_unit_rows("z_i", z_i.data)
    _check_unit_rows("z_j", z_j.data)
    _check_unit_rows("zt_i", zt_i)
    _check_unit_rows("zt_j", zt_j)
    _check_unit_rows("queue", negatives)

    inv_t = 1.0 / temperature
    p1 = tape.scale(tape.rowwise_dot(z_i, zt_j), inv_t)  # (B, 1)
    p2 = tape.scale(tape.rowwise_dot(z_j, zt_i), inv_t)
    con = tape.scale(tape.mean_all(tape.add(p1, p2)), -1.0)

    if not use_negatives:
        total = con
        bd = LossBreakdown(
            total=float(total.data), con_term=float(con.data), add_term=0.0, node=total
        )
        return bd

    def lse(p, z):
        if len(negatives) == 0:
            return tape.logsumexp_rows(p)
        logits = tape.scale(tape.matmul_nt(z, negatives), inv_t)
        return tape.logsumexp_rows(tape.concat_cols([p, logits]))

    add_t = tape.mean_all(tape.add(lse(p1, z_i), lse(p2, z_j)))
    total = tape.add(con, add_t)
    return LossBreakdown(
        total=float(total.data),
        con_term=float(con.data),
        add_term=float(add_t.data),
        node=total,
    )


def ema_update(teacher: TeacherState, student: Supernet) -> None:
    """W' <- lam * W' + (1 - lam) * W for every parameter and BN buffer."""
    lam = teacher.lam
    t_params, s_params = teacher.net.params(), student.params()
    t_bufs, s_bufs = teacher.net.buffers(), student.buffers()
    for (t_map, s_map, kind) in ((t_params, s_params, "param"), (t_bufs, s_bufs, "buffer")):
        for name in t_map:
            if name not in s_map:
                raise ContractError(f"ema_update: student missing {kind} '{name}'")
        for name in s_map:
            if name not in t_map:
                raise ContractError(f"ema_update: teacher missing {kind} '{name}'")
    for name, t in t_params.items():
        s = s_params[name]
        if t.data.shape != s.data.shape:
            raise ContractError(f"ema_update: shape mismatch at '{name}'")
        t.data[...] = lam * t.data + (1.0 - lam) * s.data
    for name, tb in t_bufs.items():
        sb = s_bufs[name]
        if tb.shape != sb.shape:
            raise ContractError(f"ema_update: shape mismatch at buffer '{name}'")
        tb[...] = lam * tb + (1.0 - lam) * sb


def enqueue(queue: FeatureQueue, teacher_embeddings: np.ndarray) -> FeatureQueue:
    queue.enqueue(teacher_embeddings)
    return queue


def collapse_metric(embeddings: np.ndarray) -> float:
    """Mean across dimensions of the across-batch std of the embeddings."""
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2 or len(embeddings) < 2:
        raise ContractError(f"collapse_metric needs >=2 rows, got shape {embeddings.shape}")
    return float(embeddings.std(axis=0).mean())


def collapse_threshold(dim: int, factor: float = 0.1) -> float:
    return factor / float(np.sqrt(dim))


def _train_ctx(arch: ArchEncoding, train: bool = True) -> PathContext:
    return PathContext(arch=arch, bn_mode=BnMode.BATCH_STATS, train_flag=train)


def pi_train_step(
    student: Supernet,
    teacher: TeacherState,
    queue: FeatureQueue,
    batch: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
    flags: AblationFlags,
    policy: AugmentPolicy,
    sgd_state: SgdState,
    temperature: float = 0.2,
) -> LossBreakdown:
    """One training step; mutates student (SGD), teacher (EMA), and queue.

    Default flags: sample paths i and j, embed four views (student on views
    1/2, teacher on 3/4, same two paths), apply the cross-path loss, step the
    student, EMA the teacher, enqueue both teacher embeddings. The flag
    variants swap pieces out; supervised mode reduces to uniform-single-path
    cross-entropy and leaves teacher and queue untouched.
    """
    images, labels = batch
    space = student.space
    arch_i = sample_uniform(space, rng)
    arch_j = sample_uniform(space, rng)
    params = student.params()
    zero_grads(params)

    if flags.supervised_spos_mode:
        v1 = np.stack([apply_policy(img, policy, rng) for img in images])
        logits = student.forward_path(v1, _train_ctx(arch_i), head="classify")
        loss = tape.softmax_cross_entropy(logits, np.asarray(labels))
        loss.backward()
        sgd_step({n: t for n, t in params.items() if t.grad is not None}, sgd_state)
        return LossBreakdown(
            total=float(loss.data),
            con_term=0.0,
            add_term=0.0,
            node=loss,
            path_i=str(arch_i),
            path_j=None,
            collapse=None,
        )

    views = [four_views(img, policy, rng) for img in images]
    v = [np.stack([quad[k] for quad in views]) for k in range(4)]

    z_i = student.forward_path(v[0], _train_ctx(arch_i), head="project")
    z_j = student.forward_path(v[1], _train_ctx(arch_j), head="project")
    teacher_net = teacher.net if flags.mean_teacher else student
    with tape.no_grad():
        zt_i = teacher_net.forward_path(v[2], _train_ctx(arch_i, train=False), head="project").data
        zt_j = teacher_net.forward_path(v[3], _train_ctx(arch_j, train=False), head="project").data

    if flags.cross_path:
        bd = cross_path_loss(z_i, z_j, zt_i, zt_j, queue, temperature, flags.nontrivial)
    else:
        # same-path consistency: the loss pairs (z_i, last arg) and (z_j, third
        # arg), so swapping the teacher args yields (z_i, zt_i), (z_j, zt_j)
        bd = cross_path_loss(z_i, z_j, zt_j, zt_i, queue, temperature, flags.nontrivial)

    bd.node.backward()
    sgd_step({n: t for n, t in params.items() if t.grad is not None}, sgd_state)
    if flags.mean_teacher:
        ema_update(teacher, student)
    queue.enqueue(np.concatenate([zt_i, zt_j]))

    bd.path_i = str(arch_i)
    bd.path_j = str(arch_j)
    bd.collapse = collapse_metric(np.concatenate([z_i.data, z_j.data]))
    return bd
