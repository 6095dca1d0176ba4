"""Cross-path loss, EMA teacher, feature queue, and one-step training checks.

The loss is verified against an independent numpy/scipy oracle; the full
training step against a from-scratch replay on cloned networks.
"""

import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from pinas import tape
from pinas.data.augment import AugmentPolicy, four_views
from pinas.errors import ConfigError, ContractError
from pinas.optim import SgdState
from pinas.pi import (
    AblationFlags, FeatureQueue, TeacherState, collapse_metric,
    collapse_threshold, cross_path_loss, ema_update, pi_train_step,
)
from pinas.space import toy_chain_space
from pinas.supernet import Supernet, SupernetConfig
from pinas.seeding import stream

from conftest import fd_check


def unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)


def oracle_loss(z_i, z_j, zt_i, zt_j, negatives, tau, use_negatives):
    """Straight-line float64 recomputation of the loss decomposition."""
    z_i, z_j = z_i.astype(np.float64), z_j.astype(np.float64)
    zt_i, zt_j = zt_i.astype(np.float64), zt_j.astype(np.float64)
    p1 = (z_i * zt_j).sum(axis=1) / tau
    p2 = (z_j * zt_i).sum(axis=1) / tau
    con = -np.mean(p1 + p2)
    if not use_negatives:
        return con, 0.0, con
    rows = []
    for p, z in ((p1, z_i), (p2, z_j)):
        if len(negatives):
            logits = np.concatenate([p[:, None], z @ negatives.T.astype(np.float64) / tau], axis=1)
        else:
            logits = p[:, None]
        rows.append(logsumexp(logits, axis=1))
    add = np.mean(rows[0] + rows[1])
    return con, add, con + add


# --------------------------------------------------------------------- loss


@pytest.mark.parametrize("use_negatives", [True, False])
@pytest.mark.parametrize("nq", [0, 1, 7])
def test_loss_matches_oracle(rng, use_negatives, nq):
    b, d, tau = 5, 8, 0.2
    z_i, z_j = unit_rows(rng, b, d), unit_rows(rng, b, d)
    zt_i, zt_j = unit_rows(rng, b, d), unit_rows(rng, b, d)
    q = FeatureQueue(capacity=16, dim=d)
    q.enqueue(unit_rows(rng, nq, d))
    bd = cross_path_loss(
        tape.constant(z_i), tape.constant(z_j), zt_i, zt_j, q, tau, use_negatives
    )
    con, add, total = oracle_loss(z_i, z_j, zt_i, zt_j, q.ordered(), tau, use_negatives)
    assert bd.con_term == pytest.approx(con, abs=1e-6)
    assert bd.add_term == pytest.approx(add, abs=1e-6)
    assert bd.total == pytest.approx(total, abs=1e-6)


def test_loss_two_ln_two_closed_form():
    # orthogonal positives and one orthogonal negative at tau=1:
    # both per-view terms are logsumexp([0, 0]) = ln 2, consistency is 0
    e = np.eye(4, dtype=np.float32)
    bd = cross_path_loss(
        tape.constant(e[:1]), tape.constant(e[:1]), e[1:2], e[1:2], e[2:3], 1.0, True
    )
    assert bd.con_term == pytest.approx(0.0, abs=1e-7)
    assert bd.total == pytest.approx(2.0 * np.log(2.0), abs=1e-6)


def test_loss_empty_queue_with_negatives_is_zero(rng):
    # logsumexp over the lone positive equals the positive: add cancels con
    z_i, z_j = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6)
    zt_i, zt_j = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6)
    q = FeatureQueue(capacity=8, dim=6)
    bd = cross_path_loss(tape.constant(z_i), tape.constant(z_j), zt_i, zt_j, q, 0.2, True)
    assert bd.total == pytest.approx(0.0, abs=1e-6)
    assert bd.add_term == pytest.approx(-bd.con_term, abs=1e-6)


def test_loss_without_negatives_is_consistency_only(rng):
    z_i, z_j = unit_rows(rng, 3, 5), unit_rows(rng, 3, 5)
    zt = unit_rows(rng, 3, 5)
    bd = cross_path_loss(tape.constant(z_i), tape.constant(z_j), zt, zt, None, 0.5, False)
    assert bd.add_term == 0.0
    assert bd.total == bd.con_term


def test_loss_rejects_bad_inputs(rng):
    good = unit_rows(rng, 2, 4)
    bad = good * 2.0
    with pytest.raises(ContractError, match="z_i"):
        cross_path_loss(tape.constant(bad), tape.constant(good), good, good, None, 0.2)
    with pytest.raises(ContractError, match="zt_i"):
        cross_path_loss(tape.constant(good), tape.constant(good), bad, good, None, 0.2)
    with pytest.raises(ConfigError, match="temperature"):
        cross_path_loss(tape.constant(good), tape.constant(good), good, good, None, 0.0)


def test_loss_gradient_through_normalization(rng):
    # differentiate through the row normalization feeding the loss
    w_i = tape.parameter(rng.normal(size=(3, 6)) + 0.1)
    w_j = tape.parameter(rng.normal(size=(3, 6)) + 0.1)
    zt_i, zt_j = unit_rows(rng, 3, 6), unit_rows(rng, 3, 6)
    q = unit_rows(rng, 5, 6)

    def loss():
        z_i = tape.l2_normalize_rows(w_i)
        z_j = tape.l2_normalize_rows(w_j)
        return cross_path_loss(z_i, z_j, zt_i, zt_j, q, 0.3, True).node

    fd_check(loss, [w_i, w_j])


def test_teacher_side_gets_no_gradient(rng):
    z = tape.parameter(unit_rows(rng, 2, 4).astype(np.float64))
    zt = unit_rows(rng, 2, 4)
    bd = cross_path_loss(z, z, zt, zt, unit_rows(rng, 3, 4), 0.2, True)
    bd.node.backward()
    assert z.grad is not None  # student side flows; teacher side is ndarray


# ---------------------------------------------------------------------- ema


def _tiny_net(seed=0):
    return Supernet(toy_chain_space(), SupernetConfig(width=8, embed_dim=16), seed)


def test_ema_lambda_zero_copies_student():
    student, teacher = _tiny_net(0), TeacherState(_tiny_net(1), lam=0.0)
    ema_update(teacher, student)
    assert teacher.net.to_store().checksum() == student.to_store().checksum()


def test_ema_lambda_one_freezes_teacher():
    student, teacher = _tiny_net(0), TeacherState(_tiny_net(1), lam=1.0)
    ref = teacher.net.to_store().checksum()
    ema_update(teacher, student)
    assert teacher.net.to_store().checksum() == ref


def test_ema_closed_form_on_params_and_buffers():
    student, teacher = _tiny_net(0), TeacherState(_tiny_net(1), lam=0.999)
    t0 = {k: t.data.copy() for k, t in teacher.net.params().items()}
    b0 = {k: b.copy() for k, b in teacher.net.buffers().items()}
    ema_update(teacher, student)
    for k, t in teacher.net.params().items():
        np.testing.assert_allclose(
            t.data, 0.999 * t0[k] + 0.001 * student.params()[k].data, rtol=1e-6
        )
    for k, b in teacher.net.buffers().items():
        np.testing.assert_allclose(
            b, 0.999 * b0[k] + 0.001 * student.buffers()[k], rtol=1e-6
        )


def test_ema_rejects_structural_mismatch():
    from pinas.space import ArchEncoding
    from pinas.supernet import build_subnet

    student = _tiny_net(0)
    fixed = build_subnet(toy_chain_space(), ArchEncoding((0, 0), "chain_toy"),
                         SupernetConfig(width=8, embed_dim=16), 1)
    with pytest.raises(ContractError, match="missing"):
        ema_update(TeacherState(fixed), student)


def test_ema_lambda_range_validated():
    with pytest.raises(ConfigError, match="EMA"):
        TeacherState(_tiny_net(0), lam=1.5)


# -------------------------------------------------------------------- queue


def test_queue_fifo_wraparound(rng):
    q = FeatureQueue(capacity=4, dim=3)
    r = unit_rows(rng, 6, 3)
    q.enqueue(r[:3])
    np.testing.assert_array_equal(q.ordered(), r[:3])
    q.enqueue(r[3:5])  # wraps: oldest row r[0] evicted
    np.testing.assert_array_equal(q.ordered(), r[1:5])
    assert q.filled == 4 and q.head == 1


def test_queue_oversized_batch_keeps_newest(rng):
    q = FeatureQueue(capacity=3, dim=2)
    r = unit_rows(rng, 5, 2)
    q.enqueue(r)
    np.testing.assert_array_equal(q.ordered(), r[-3:])


def test_queue_rejects_nonunit_and_misshapen(rng):
    q = FeatureQueue(capacity=4, dim=3)
    with pytest.raises(ContractError, match="not unit"):
        q.enqueue(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(ContractError, match="queue dim"):
        q.enqueue(unit_rows(rng, 2, 5))
    with pytest.raises(ConfigError):
        FeatureQueue(capacity=0, dim=3)


def test_queue_empty_enqueue_noop(rng):
    q = FeatureQueue(capacity=4, dim=3)
    q.enqueue(np.zeros((0, 3), dtype=np.float32))
    assert q.filled == 0 and len(q.ordered()) == 0


def test_queue_state_round_trip(rng):
    q = FeatureQueue(capacity=4, dim=3)
    q.enqueue(unit_rows(rng, 6, 3))
    back = FeatureQueue.from_state(q.state())
    np.testing.assert_array_equal(back.ordered(), q.ordered())
    assert (back.head, back.filled, back.capacity) == (q.head, q.filled, q.capacity)


@settings(max_examples=40, deadline=None)
@given(
    capacity=st.integers(1, 8),
    batches=st.lists(st.integers(0, 10), min_size=1, max_size=12),
    seed=st.integers(0, 1000),
)
def test_queue_matches_deque_reference(capacity, batches, seed):
    rng = np.random.default_rng(seed)
    q = FeatureQueue(capacity=capacity, dim=2)
    ref: collections.deque = collections.deque(maxlen=capacity)
    for n in batches:
        rows = unit_rows(rng, n, 2)
        q.enqueue(rows)
        ref.extend(rows)
        np.testing.assert_array_equal(q.ordered(), np.array(ref).reshape(-1, 2))


# ----------------------------------------------------------------- collapse


def test_collapse_metric_oracle(rng):
    emb = rng.normal(size=(10, 6))
    assert collapse_metric(emb) == pytest.approx(emb.std(axis=0).mean())
    assert collapse_metric(np.tile(rng.normal(size=(1, 6)), (5, 1))) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError, match=">=2"):
        collapse_metric(rng.normal(size=(1, 6)))


def test_collapse_threshold_scaling():
    assert collapse_threshold(64) == pytest.approx(0.1 / 8.0)
    assert collapse_threshold(16, factor=0.4) == pytest.approx(0.1)


# ----------------------------------------------------------------- one step


def _step_setup(seed=0):
    student = _tiny_net(seed)
    teacher = TeacherState(student.clone(), lam=0.99)
    queue = FeatureQueue(capacity=32, dim=16)
    policy = AugmentPolicy(seed=seed)
    rng = stream(seed, "test/step")
    images = stream(seed, "test/data").uniform(size=(4, 2, 16, 16)).astype(np.float32)
    labels = np.array([0, 1, 2, 3], dtype=np.int64)
    return student, teacher, queue, policy, rng, images, labels


def test_train_step_matches_replay_oracle():
    """Replay the step's forward computation on clones and match the breakdown."""
    from pinas.space import sample_uniform
    from pinas.supernet import PathContext
    from pinas.layers import BnMode

    student, teacher, queue, policy, rng, images, labels = _step_setup(3)
    s_clone, t_clone = student.clone(), teacher.net.clone()
    rng_replay = stream(3, "test/step")
    flags = AblationFlags()
    bd = pi_train_step(
        student, teacher, queue, (images, labels), rng, flags, policy,
        SgdState(lr=0.05), temperature=0.2,
    )

    arch_i = sample_uniform(s_clone.space, rng_replay)
    arch_j = sample_uniform(s_clone.space, rng_replay)
    views = [four_views(img, policy, rng_replay) for img in images]
    v = [np.stack([quad[k] for quad in views]) for k in range(4)]
    ctx = lambda a, tr: PathContext(arch=a, bn_mode=BnMode.BATCH_STATS, train_flag=tr)
    z_i = s_clone.forward_path(v[0], ctx(arch_i, True)).data
    z_j = s_clone.forward_path(v[1], ctx(arch_j, True)).data
    with tape.no_grad():
        zt_i = t_clone.forward_path(v[2], ctx(arch_i, False)).data
        zt_j = t_clone.forward_path(v[3], ctx(arch_j, False)).data

    con, add, total = oracle_loss(z_i, z_j, zt_i, zt_j, np.zeros((0, 16)), 0.2, True)
    assert bd.path_i == str(arch_i) and bd.path_j == str(arch_j)
    assert bd.con_term == pytest.approx(con, abs=1e-5)
    assert bd.add_term == pytest.approx(add, abs=1e-5)
    assert bd.total == pytest.approx(total, abs=1e-5)
    assert bd.collapse == pytest.approx(
        collapse_metric(np.concatenate([z_i, z_j])), abs=1e-6
    )
    # queue got both teacher embeddings, in order
    np.testing.assert_allclose(queue.ordered(), np.concatenate([zt_i, zt_j]), atol=1e-6)


def test_train_step_mutates_student_and_teacher():
    student, teacher, queue, policy, rng, images, labels = _step_setup(1)
    # an empty queue makes the first step's loss identically zero, so seed
    # some negatives to get a real gradient
    queue.enqueue(unit_rows(stream(1, "test/neg"), 8, 16))
    s_ref = student.to_store().checksum()
    t_ref = teacher.net.to_store().checksum()
    pi_train_step(student, teacher, queue, (images, labels), rng, AblationFlags(),
                  policy, SgdState(lr=0.05))
    assert student.to_store().checksum() != s_ref
    assert teacher.net.to_store().checksum() != t_ref
    assert queue.filled == 16  # 8 seeded + 2 views x 4 images


def test_train_step_deterministic():
    outs = []
    for _ in range(2):
        student, teacher, queue, policy, rng, images, labels = _step_setup(5)
        bd = pi_train_step(student, teacher, queue, (images, labels), rng,
                           AblationFlags(), policy, SgdState(lr=0.05))
        outs.append((bd.total, bd.con_term, bd.add_term, bd.path_i, bd.path_j,
                     student.to_store().checksum()))
    assert outs[0] == outs[1]


def test_supervised_mode_leaves_teacher_and_queue_alone():
    student, teacher, queue, policy, rng, images, labels = _step_setup(2)
    t_ref = teacher.net.to_store().checksum()
    flags = AblationFlags(cross_path=False, mean_teacher=False, nontrivial=False,
                          supervised_spos_mode=True)
    bd = pi_train_step(student, teacher, queue, (images, labels), rng, flags,
                       policy, SgdState(lr=0.05))
    assert teacher.net.to_store().checksum() == t_ref
    assert queue.filled == 0
    assert bd.path_j is None and bd.collapse is None
    assert bd.con_term == 0.0 and bd.add_term == 0.0
    assert bd.total > 0.0  # cross-entropy on 8 classes


def test_frozen_teacher_mode_keeps_teacher_fixed():
    student, teacher, queue, policy, rng, images, labels = _step_setup(4)
    t_ref = teacher.net.to_store().checksum()
    flags = AblationFlags(mean_teacher=False)
    pi_train_step(student, teacher, queue, (images, labels), rng, flags,
                  policy, SgdState(lr=0.05))
    assert teacher.net.to_store().checksum() == t_ref


def test_flags_supervised_mode_is_exclusive():
    with pytest.raises(ConfigError, match="supervised"):
        AblationFlags(supervised_spos_mode=True)


def test_same_path_pairing_differs_from_cross_path():
    base = _step_setup(9)
    res = {}
    for cross in (True, False):
        student, teacher, queue, policy, rng, images, labels = _step_setup(9)
        # teacher must differ from student or both pairings coincide
        for t in teacher.net.params().values():
            t.data += 0.05
        bd = pi_train_step(student, teacher, queue, (images, labels), rng,
                           AblationFlags(cross_path=cross), policy, SgdState(lr=0.05))
        res[cross] = (bd.con_term, bd.path_i, bd.path_j)
    assert res[True][1:] == res[False][1:]  # same sampled paths
    assert res[True][0] != res[False][0]  # different positive pairing
