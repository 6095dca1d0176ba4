"""Architecture search over the trained supernet, from-scratch oracles,
rank correlation, benchmark-table lookup, and op-substitution sensitivity.

Candidate evaluation recalibrates BN statistics for the path, then scores
the frozen backbone + linear head on held-out data. Ground truth comes from
either from-scratch training of the extracted subnet (`train_oracle`) or a
supplied name -> accuracy benchmark table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape
from .data.augment import AugmentPolicy, apply_policy, epoch_order
from .errors import ConfigError, ContractError, NumericError
from .layers import BnMode
from .linear_eval import eval_linear
from .optim import SgdState, cosine_lr, sgd_step, zero_grads
from .seeding import step_stream, stream
from .space import (
    ArchEncoding,
    Space,
    arch_id,
    enumerate_space,
    mutate,
    parse_arch,
    render_arch,
    sample_uniform,
    space_size,
)
from .supernet import PathContext, Supernet, SupernetConfig, build_subnet, recalibrate_bn
from .tape import Tensor

RECORD_VERSION = 1


@dataclass
class TrialRecord:
    arch: str  # compact choice string, e.g. "1-0-2"
    space_id: str
    est_acc: float
    oracle_acc: float | None = None
    source: str = "trained_oracle"  # or "benchmark_table"
    seed: int = 0
    eval_index: int = 0  # logical evaluation order within the producing stage

    def __post_init__(self):
        if not 0.0 <= self.est_acc <= 1.0:
            raise ContractError(f"est_acc {self.est_acc} outside [0,1]")
        if self.oracle_acc is not None and not 0.0 <= self.oracle_acc <= 1.0:
            raise ContractError(f"oracle_acc {self.oracle_acc} outside [0,1]")
        if self.source not in ("trained_oracle", "benchmark_table"):
            raise ConfigError(f"unknown record source '{self.source}'")

    def to_line(self) -> str:
        obj = {
            "v": RECORD_VERSION,
            "arch": self.arch,
            "space_id": self.space_id,
            "est_acc": self.est_acc,
            "oracle_acc": self.oracle_acc,
            "source": self.source,
            "seed": self.seed,
            "eval_index": self.eval_index,
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "TrialRecord":
        obj = json.loads(line)
        if obj.get("v") != RECORD_VERSION:
            raise ConfigError(f"trial record version {obj.get('v')} unsupported")
        obj.pop("v")
        return cls(**obj)


class BenchmarkTable:
    """arch string -> ground-truth accuracy in [0,1].

    Text format: optional '#' comment lines, then one `<arch>\\t<accuracy>`
    per line. Keys are the compact choice notation ("1-0-2") or the nested
    cell notation; both are accepted at lookup time given the space.
    """

    def __init__(self, mapping: dict[str, float]):
        for k, v in mapping.items():
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"benchmark accuracy for '{k}' is {v}, expected [0,1]")
        self.mapping = dict(mapping)

    def lookup(self, arch: ArchEncoding | str, space: Space | None = None) -> float:
        keys = []
        if isinstance(arch, ArchEncoding):
            keys.append(str(arch))
            if space is not None:
                keys.append(render_arch(arch, space))
        else:
            keys.append(arch)
            if space is not None:
                parsed = parse_arch(arch, space)
                keys += [str(parsed), render_arch(parsed, space)]
        for key in keys:
            if key in self.mapping:
                return self.mapping[key]
        raise ContractError(f"benchmark table has no entry for arch '{keys[0]}'")

    def __len__(self) -> int:
        return len(self.mapping)

    def to_text(self) -> str:
        lines = ["# pinas benchmark table v1"]
        lines += [f"{k}\t{v!r}" for k, v in sorted(self.mapping.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BenchmarkTable":
        mapping = {}
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.rsplit(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"benchmark table line {ln}: expected '<arch>\\t<acc>'")
            try:
                mapping[parts[0].strip()] = float(parts[1])
            except ValueError as exc:
                raise ConfigError(f"benchmark table line {ln}: {exc}") from exc
        return cls(mapping)

    @classmethod
    def load(cls, path: str | Path) -> "BenchmarkTable":
        return cls.from_text(Path(path).read_text())


# ---- candidate evaluation ---------------------------------------------------


def evaluate_candidates(
    supernet: Supernet,
    head,
    archs: list[ArchEncoding],
    calib_batches: list[np.ndarray],
    val_images: np.ndarray,
    val_labels: np.ndarray,
    seed: int = 0,
    batch_size: int = 256,
) -> list[TrialRecord]:
    """Recalibrate + evaluate each arch; records sorted by est_acc descending.

    eval_index preserves input order, so re-serialization is deterministic;
    ties in est_acc break by architecture id for a stable sort.
    """
    records = []
    for k, arch in enumerate(archs):
        overlay = recalibrate_bn(supernet, arch, calib_batches)
        acc = eval_linear(
            supernet, head, arch, val_images, val_labels,
            calibrated=True, bn_overlay=overlay, batch_size=batch_size,
        )
        records.append(
            TrialRecord(
                arch=str(arch), space_id=arch.space_id, est_acc=acc, seed=seed, eval_index=k
            )
        )
    order = sorted(
        range(len(records)),
        key=lambda i: (-records[i].est_acc, arch_id(archs[i], supernet.space)),
    )
    return [records[i] for i in order]


def evolutionary_search(
    supernet: Supernet,
    head,
    space: Space,
    budget: int,
    rng: np.random.Generator,
    calib_batches: list[np.ndarray],
    val_images: np.ndarray,
    val_labels: np.ndarray,
    population: int = 16,
    tournament: int = 4,
    mutation_k: int = 1,
    seed: int = 0,
) -> tuple[TrialRecord, list[TrialRecord]]:
    """Tournament evolutionary search; at most `budget` distinct evaluations.

    When the budget covers the whole space the search degenerates to
    exhaustive enumeration. Returns (best record, full trial log).
    """
    size = space_size(space)
    if budget >= size:
        archs = list(enumerate_space(space))
        records = evaluate_candidates(
            supernet, head, archs, calib_batches, val_images, val_labels, seed=seed
        )
        return records[0], records

    if budget < population:
        raise ConfigError(
            f"budget {budget} below population {population}; shrink the population"
        )

    seen: dict[tuple, TrialRecord] = {}
    log: list[TrialRecord] = []

    def evaluate(arch: ArchEncoding) -> TrialRecord:
        overlay = recalibrate_bn(supernet, arch, calib_batches)
        acc = eval_linear(
            supernet, head, arch, val_images, val_labels, calibrated=True, bn_overlay=overlay
        )
        rec = TrialRecord(
            arch=str(arch), space_id=arch.space_id, est_acc=acc, seed=seed, eval_index=len(log)
        )
        seen[arch.choices] = rec
        log.append(rec)
        return rec

    pop: list[ArchEncoding] = []
    attempts = 0
    while len(pop) < population and len(log) < budget and attempts < 100 * population:
        arch = sample_uniform(space, rng)
        attempts += 1
        if arch.choices in seen:
            continue
        evaluate(arch)
        pop.append(arch)

    attempts = 0
    while len(log) < budget and attempts < 100 * budget:
        attempts += 1
        contenders = [pop[int(i)] for i in rng.choice(len(pop), size=min(tournament, len(pop)), replace=False)]
        parent = max(contenders, key=lambda a: seen[a.choices].est_acc)
        child = mutate(parent, space, rng, k=mutation_k)
        if child.choices in seen:
            continue
        evaluate(child)
        pop.append(child)
        pop.pop(0)  # age out the oldest member

    best = max(log, key=lambda r: r.est_acc)
    return best, log


# ---- ground truth ------------------------------------------------------------


@dataclass
class OracleConfig:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5


def train_oracle(
    space: Space,
    arch: ArchEncoding,
    net_cfg: SupernetConfig,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    cfg: OracleConfig,
    seed: int,
) -> float:
    """From-scratch supervised training of the standalone subnet.

    Fixed recipe (cosine LR, crop+flip, tracked BN); returns held-out top-1
    accuracy. Fully deterministic in (arch, seed).
    """
    net = build_subnet(space, arch, net_cfg, seed=int(seed))
    params = net.params()
    sgd = SgdState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    policy = AugmentPolicy(
        ops=("random_resize_crop", "horizontal_flip"),
        crop_scale=cfg.crop_scale,
        flip_prob=cfg.flip_prob,
        seed=seed,
    )
    n = len(train_images)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(n // bs, 1)
    total_steps = cfg.epochs * steps_per_epoch
    ctx = PathContext(arch, BnMode.TRACKED, True)
    step = 0
    for epoch in range(cfg.epochs):
        order = epoch_order(n, seed, epoch)
        for b in range(steps_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            rng = step_stream(seed, "oracle/aug", step)
            x = np.stack([apply_policy(train_images[i], policy, rng) for i in idx])
            y = train_labels[idx]
            sgd.lr = cosine_lr(step, total_steps, cfg.lr)
            logits = net.forward_path(x, ctx, head="classify")
            loss = tape.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                raise NumericError(f"oracle training diverged at step {step}")
            zero_grads(params)
            loss.backward()
            sgd_step({k: t for k, t in params.items() if t.grad is not None}, sgd)
            step += 1
    ectx = PathContext(arch, BnMode.TRACKED, False)
    correct = 0
    with tape.no_grad():
        for start in range(0, len(test_images), 256):
            x = test_images[start : start + 256]
            logits = net.forward_path(x, ectx, head="classify")
            correct += int((logits.data.argmax(axis=1) == test_labels[start : start + 256]).sum())
    return correct / len(test_images)


# ---- rank correlation ---------------------------------------------------------


def kendall_tau(xs, ys) -> float:
    """Tie-corrected rank correlation (tau-b).

    tau_b = (concordant - discordant) / sqrt((n0 - t_x) * (n0 - t_y)) with
    n0 = n(n-1)/2 and t_* the within-tie pair counts.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ContractError(f"kendall_tau: shapes {xs.shape} vs {ys.shape}")
    n = len(xs)
    if n < 2:
        raise ContractError(f"kendall_tau needs >=2 items, got {n}")
    sx = np.sign(xs[:, None] - xs[None, :])
    sy = np.sign(ys[:, None] - ys[None, :])
    iu = np.triu_indices(n, k=1)
    prod = sx[iu] * sy[iu]
    concordant = int((prod > 0).sum())
    discordant = int((prod < 0).sum())
    n0 = n * (n - 1) // 2
    tx = int((sx[iu] == 0).sum())
    ty = int((sy[iu] == 0).sum())
    if n0 == tx or n0 == ty:
        raise NumericError("kendall_tau undefined: one input is all ties")
    return (concordant - discordant) / float(np.sqrt((n0 - tx) * (n0 - ty)))


def ranking_report(records: list[TrialRecord], arch_filter=None, space: Space | None = None) -> dict:
    """tau over records holding both accuracies, plus scatter pairs."""
    kept = []
    for rec in records:
        if rec.oracle_acc is None:
            raise ContractError(f"record for arch '{rec.arch}' missing oracle_acc")
        if arch_filter is not None:
            if space is None:
                raise ConfigError("ranking_report: arch_filter needs the space")
            if not arch_filter(parse_arch(rec.arch, space)):
                continue
        kept.append(rec)
    if len(kept) < 2:
        raise ContractError(f"ranking_report: {len(kept)} records after filtering, need >=2")
    tau = kendall_tau([r.est_acc for r in kept], [r.oracle_acc for r in kept])
    return {
        "tau": tau,
        "n": len(kept),
        "pairs": [(r.arch, r.est_acc, r.oracle_acc) for r in kept],
    }


def select_ranking_set(
    sorted_records: list[TrialRecord],
    space: Space,
    top_k: int = 5,
    random_k: int = 8,
    seed: int = 0,
) -> list[ArchEncoding]:
    """Top-k searched archs plus seeded random draws from the remainder.

    When the whole space is no larger than top_k + random_k, the set is just
    every architecture, in id order.
    """
    total = top_k + random_k
    if space_size(space) <= total:
        return list(enumerate_space(space))
    top = [parse_arch(r.arch, space) for r in sorted_records[:top_k]]
    taken = {a.choices for a in top}
    pool = [a for a in enumerate_space(space) if a.choices not in taken]
    rng = stream(seed, "ranking_set")
    picks = rng.choice(len(pool), size=min(random_k, len(pool)), replace=False)
    return top + [pool[int(i)] for i in sorted(picks)]


# ---- sensitivity --------------------------------------------------------------


def _op_index(space: Space, op) -> int:
    if isinstance(op, str) and hasattr(space, "op_set"):
        if op not in space.op_set:
            raise ConfigError(f"op '{op}' not in space op set {space.op_set}")
        return space.op_set.index(op)
    return int(op)


def skip_sensitivity(
    records: list[TrialRecord],
    table: BenchmarkTable,
    space: Space,
    op_from,
    op_to="skip_connect",
) -> list[dict]:
    """Paired accuracy changes from substituting one op for another.

    For every record's architecture and every site holding `op_from`, swap in
    `op_to` and emit {arch, site, sub_arch, d_est, d_actual}: estimated change
    from the records and ground-truth change from the table. The estimate map
    must cover every substituted architecture.
    """
    src = _op_index(space, op_from)
    dst = _op_index(space, op_to)
    est = {r.arch: r.est_acc for r in records}
    pairs = []
    for rec in records:
        arch = parse_arch(rec.arch, space)
        for site, choice in enumerate(arch.choices):
            if choice != src:
                continue
            sub = list(arch.choices)
            sub[site] = dst
            sub_arch = ArchEncoding(choices=tuple(sub), space_id=arch.space_id)
            key = str(sub_arch)
            if key not in est:
                raise ContractError(f"no supernet estimate for substituted arch '{key}'")
            d_est = est[key] - rec.est_acc
            d_actual = table.lookup(sub_arch, space) - table.lookup(arch, space)
            pairs.append(
                {
                    "arch": rec.arch,
                    "site": site,
                    "sub_arch": key,
                    "d_est": d_est,
                    "d_actual": d_actual,
                }
            )
    return pairs


def threshold_query(pairs: list[dict], threshold: float = 0.01) -> list[dict]:
    """Substitutions whose estimated accuracy change is below the threshold."""
    return [p for p in pairs if abs(p["d_est"]) < threshold]
