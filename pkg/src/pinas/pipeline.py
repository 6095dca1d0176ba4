"""End-to-end pipeline stages over a run directory.

Stage order: train-supernet -> linear-eval -> search -> oracle -> rank, with
diagnose available once the supernet exists. Every stage reads the frozen
config snapshot, derives its randomness from per-component streams of the
master seed, and appends artifacts + manifest hashes, so a stage re-run on
the same directory reproduces its outputs byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, load_cifar10, make_splits, synthetic_blobs
from .data.augment import ALL_OPS, AugmentPolicy
from .diagnostics import default_probe_paths, feature_shift_matrix, parameter_drift
from .errors import CollapseError, ConfigError, ContractError, StateError
from .linear_eval import LinearEvalConfig, make_head, train_linear
from .optim import SgdState, cosine_lr
from .pi import (
    AblationFlags,
    FeatureQueue,
    TeacherState,
    collapse_threshold,
    pi_train_step,
)
from .rundir import RunDirectory
from .search import (
    BenchmarkTable,
    OracleConfig,
    TrialRecord,
    evaluate_candidates,
    evolutionary_search,
    ranking_report,
    select_ranking_set,
    skip_sensitivity,
    threshold_query,
    train_oracle,
)
from .seeding import step_stream, stream
from .space import CellSpace, ChainSpace, Space, op_filter, parse_arch, toy_chain_space
from .store import ParameterStore
from .supernet import Supernet, SupernetConfig

CHECKPOINT = "supernet/checkpoint.pnstore"
METRICS = "supernet/metrics.jsonl"


# ---- builders ----------------------------------------------------------------


def flags_from_cfg(cfg: RunConfig) -> AblationFlags:
    return AblationFlags(**cfg.section("ablation"))


def build_space(cfg: RunConfig) -> Space:
    name = cfg.get("run.space")
    shared = cfg.get("ablation.downsample_sharing")
    if name == "chain_toy":
        return dataclasses.replace(toy_chain_space(), downsample_shared=shared)
    if name == "chain":
        return ChainSpace(downsample_shared=shared)
    if name == "cell":
        return CellSpace()
    raise ConfigError(f"unknown space '{name}' (chain_toy | chain | cell)")


def build_dataset(cfg: RunConfig) -> tuple[Dataset, np.ndarray, np.ndarray, np.ndarray]:
    kind = cfg.get("run.dataset")
    if kind == "synthetic":
        ds = synthetic_blobs(
            num_classes=cfg.get("data.num_classes"),
            per_class=cfg.get("data.per_class"),
            hw=cfg.get("data.image_hw"),
            channels=cfg.get("data.channels"),
            blob_sigma=cfg.get("data.blob_sigma"),
            noise=cfg.get("data.noise"),
            seed=cfg.get("run.seed"),
        )
    elif kind == "cifar10":
        path = cfg.get("run.data_path")
        if not path:
            raise ConfigError("run.data_path required for cifar10")
        ds = load_cifar10(path)
    else:
        raise ConfigError(f"unknown dataset '{kind}' (synthetic | cifar10)")
    train, val, calib = make_splits(
        ds, cfg.get("data.per_class_val"), cfg.get("data.per_class_calib"), cfg.get("run.seed")
    )
    return ds, train, val, calib


def build_policy(cfg: RunConfig, ops=None) -> AugmentPolicy:
    a = cfg.section("augment")
    return AugmentPolicy(
        ops=ops if ops is not None else ALL_OPS,
        crop_scale=(a["crop_scale_min"], a["crop_scale_max"]),
        flip_prob=a["flip_prob"],
        jitter_prob=a["jitter_prob"],
        jitter_strength=a["jitter_strength"],
        drop_prob=a["drop_prob"],
        blur_prob=a["blur_prob"],
        blur_sigma=(a["blur_sigma_min"], a["blur_sigma_max"]),
        seed=cfg.get("run.seed"),
    )


def build_net_cfg(cfg: RunConfig, ds: Dataset) -> SupernetConfig:
    return SupernetConfig(
        in_channels=ds.images.shape[1],
        width=cfg.get("supernet.width"),
        embed_dim=cfg.get("supernet.embed_dim"),
        num_classes=ds.num_classes,
        cells_per_stage=cfg.get("supernet.cells_per_stage"),
        bn_eps=cfg.get("supernet.bn_eps"),
        bn_momentum=cfg.get("supernet.bn_momentum"),
    )


def _drift_layer(cfg: RunConfig, student: Supernet) -> str:
    name = cfg.get("train.drift_layer")
    return name if name in student.params() else "stem.conv.weight"


# ---- checkpointing -----------------------------------------------------------


def _save_checkpoint(
    rundir: RunDirectory,
    student: Supernet,
    teacher: TeacherState,
    queue: FeatureQueue,
    sgd: SgdState,
    step: int,
    drift: dict[str, np.ndarray],
) -> None:
    store = ParameterStore()
    entries: dict[str, np.ndarray] = {}
    for name, arr in student.to_store().items():
        entries[f"student/{name}"] = arr
    for name, arr in teacher.net.to_store().items():
        entries[f"teacher/{name}"] = arr
    for name, arr in sgd.velocity.items():
        entries[f"velocity/{name}"] = arr
    for name, arr in queue.state().items():
        entries[f"queue/{name}"] = arr
    for name, arr in drift.items():
        entries[f"drift/{name}"] = arr
    entries["meta/step"] = np.array([step], dtype=np.int64)
    for name in sorted(entries):
        store.set(name, entries[name])
    store.save(rundir.path / CHECKPOINT)


def _load_checkpoint(rundir: RunDirectory, student: Supernet, teacher: TeacherState):
    store = ParameterStore.load(rundir.path / CHECKPOINT)
    s_store, t_store = ParameterStore(), ParameterStore()
    queue_state: dict[str, np.ndarray] = {}
    velocity: dict[str, np.ndarray] = {}
    drift: dict[str, np.ndarray] = {}
    step = 0
    for name, arr in store.items():
        scope, _, rest = name.partition("/")
        if scope == "student":
            s_store.set(rest, arr)
        elif scope == "teacher":
            t_store.set(rest, arr)
        elif scope == "velocity":
            velocity[rest] = arr.copy()
        elif scope == "queue":
            queue_state[rest] = arr
        elif scope == "drift":
            drift[rest] = arr.copy()
        elif name == "meta/step":
            step = int(arr[0])
    student.load_store(s_store)
    teacher.net.load_store(t_store)
    queue = FeatureQueue.from_state(queue_state)
    return queue, velocity, drift, step


def load_student(rundir: RunDirectory, frozen: bool = True) -> tuple[Supernet, RunConfig, Dataset, np.ndarray, np.ndarray, np.ndarray]:
    """Rebuild the trained student from the supernet checkpoint."""
    cfg = rundir.config()
    ds, train_idx, val_idx, calib_idx = build_dataset(cfg)
    space = build_space(cfg)
    student = Supernet(space, build_net_cfg(cfg, ds), cfg.get("run.seed"))
    store = ParameterStore.load(rundir.path / CHECKPOINT)
    s_store = ParameterStore()
    for name, arr in store.items():
        scope, _, rest = name.partition("/")
        if scope == "student":
            s_store.set(rest, arr)
    student.load_store(s_store)
    if frozen:
        student.freeze()
    return student, cfg, ds, train_idx, val_idx, calib_idx


# ---- stages ------------------------------------------------------------------


def stage_train_supernet(rundir: RunDirectory, resume: bool = False) -> dict:
    cfg = rundir.config()
    seed = cfg.get("run.seed")
    flags = flags_from_cfg(cfg)
    ds, train_idx, _, _ = build_dataset(cfg)
    space = build_space(cfg)
    net_cfg = build_net_cfg(cfg, ds)
    policy = build_policy(cfg)
    student = Supernet(space, net_cfg, seed)
    teacher = TeacherState(student.clone(frozen=True), lam=cfg.get("train.ema"))
    queue = FeatureQueue(cfg.get("train.queue_capacity"), net_cfg.embed_dim)
    sgd = SgdState(
        lr=cfg.get("train.lr"),
        momentum=cfg.get("train.momentum"),
        weight_decay=cfg.get("train.weight_decay"),
    )
    drift: dict[str, np.ndarray] = {}
    start = 0
    ckpt = rundir.path / CHECKPOINT
    if resume:
        if not ckpt.exists():
            raise StateError(f"{rundir.path}: nothing to resume; no checkpoint found")
        queue, sgd.velocity, drift, start = _load_checkpoint(rundir, student, teacher)

    metrics_path = rundir.path / METRICS
    if metrics_path.exists():
        kept = [
            line
            for line in metrics_path.read_text().splitlines()
            if line and json.loads(line)["step"] < start
        ]
        metrics_path.write_text("".join(l + "\n" for l in kept))

    total = cfg.get("train.steps")
    if start >= total and ckpt.exists():
        rundir.mark_done("supernet")
        return {"steps": start, "resumed": True}
    base_lr = cfg.get("train.lr")
    threshold = collapse_threshold(net_cfg.embed_dim, cfg.get("train.collapse_factor"))
    drift_every = cfg.get("train.drift_every")
    ckpt_every = cfg.get("train.checkpoint_every")
    layer = _drift_layer(cfg, student)
    images = ds.images[train_idx]
    labels = ds.labels[train_idx]
    bs = min(cfg.get("train.batch_size"), len(images))
    last = {}

    for step in range(start, total):
        if step % drift_every == 0:
            drift[f"student/{step}"] = student.params()[layer].data.copy()
            drift[f"teacher/{step}"] = teacher.net.params()[layer].data.copy()
        sgd.lr = cosine_lr(step, total, base_lr) if cfg.get("train.cosine") else base_lr
        idx = step_stream(seed, "supernet/batch", step).choice(len(images), size=bs, replace=False)
        rng = step_stream(seed, "supernet/step", step)
        bd = pi_train_step(
            student, teacher, queue, (images[idx], labels[idx]), rng, flags, policy, sgd,
            temperature=cfg.get("train.temperature"),
        )
        last = {
            "step": step,
            "lr": sgd.lr,
            "loss_total": bd.total,
            "loss_con": bd.con_term,
            "loss_add": bd.add_term,
            "collapse_metric": bd.collapse,
            "path_i": bd.path_i,
            "path_j": bd.path_j,
        }
        rundir.append_jsonl(METRICS, last)
        collapsed = bd.collapse is not None and bd.collapse < threshold
        if collapsed or (step + 1) % ckpt_every == 0 or step + 1 == total:
            _save_checkpoint(rundir, student, teacher, queue, sgd, step + 1, drift)
        if collapsed and cfg.get("train.abort_on_collapse"):
            rundir.write_text(
                "supernet/summary.json",
                json.dumps(
                    {"collapsed": True, "step": step, "collapse_metric": bd.collapse},
                    sort_keys=True,
                )
                + "\n",
            )
            rundir.update_manifest()
            raise CollapseError(step, bd.collapse, threshold)

    drift[f"student/{total}"] = student.params()[layer].data.copy()
    drift[f"teacher/{total}"] = teacher.net.params()[layer].data.copy()
    _save_checkpoint(rundir, student, teacher, queue, sgd, total, drift)
    rundir.write_text(
        "supernet/summary.json",
        json.dumps({"collapsed": False, "steps": total, **last}, sort_keys=True) + "\n",
    )
    rundir.mark_done("supernet")
    return {"steps": total, "final": last, "collapsed": False}


def stage_linear(rundir: RunDirectory) -> dict:
    rundir.require_stage("supernet")
    student, cfg, ds, train_idx, _, _ = load_student(rundir, frozen=True)
    seed = cfg.get("run.seed")
    head = make_head(cfg.get("supernet.width"), ds.num_classes, seed)
    lcfg = LinearEvalConfig(
        epochs=cfg.get("linear.epochs"),
        lr=cfg.get("linear.lr"),
        momentum=cfg.get("linear.momentum"),
        weight_decay=cfg.get("linear.weight_decay"),
        batch_size=cfg.get("linear.batch_size"),
        crop_scale=(cfg.get("augment.crop_scale_min"), cfg.get("augment.crop_scale_max")),
        flip_prob=cfg.get("augment.flip_prob"),
    )
    log_path = rundir.path / "linear/log.jsonl"
    if log_path.exists():
        log_path.unlink()
    train_linear(
        student,
        head,
        ds.images[train_idx],
        ds.labels[train_idx],
        lcfg,
        seed,
        log_fn=lambda obj: rundir.append_jsonl("linear/log.jsonl", obj),
    )
    store = ParameterStore()
    for name, t in head.params().items():
        store.set(f"linear_head.{name}", t.data)
    store.save(rundir.path / "linear/head.pnstore")
    rundir.mark_done("linear")
    return {"epochs": lcfg.epochs}


def load_head(rundir: RunDirectory, cfg: RunConfig, num_classes: int):
    head = make_head(cfg.get("supernet.width"), num_classes, cfg.get("run.seed"))
    store = ParameterStore.load(rundir.path / "linear/head.pnstore")
    for name, t in head.params().items():
        t.data[...] = store.get(f"linear_head.{name}")
        t.requires_grad = True
        t.frozen = False
    return head


def _calib_batches(cfg: RunConfig, ds: Dataset, calib_idx: np.ndarray) -> list[np.ndarray]:
    images = ds.images[calib_idx]
    k = max(cfg.get("search.calib_batches"), 1)
    if len(images) == 0:
        raise ConfigError("empty calibration split; raise data.per_class_calib")
    return [b for b in np.array_split(images, k) if len(b)]


def stage_search(rundir: RunDirectory, budget: int | None = None) -> dict:
    rundir.require_stage("linear")
    student, cfg, ds, _, val_idx, calib_idx = load_student(rundir, frozen=True)
    head = load_head(rundir, cfg, ds.num_classes)
    space = student.space
    seed = cfg.get("run.seed")
    budget = cfg.get("search.budget") if budget is None else budget
    calib = _calib_batches(cfg, ds, calib_idx)
    val_x, val_y = ds.images[val_idx], ds.labels[val_idx]
    eval_bs = cfg.get("search.eval_batch")

    rng = stream(seed, "search/evolution")
    best, log = evolutionary_search(
        student, head, space, budget, rng, calib, val_x, val_y,
        population=cfg.get("search.population"),
        tournament=cfg.get("search.tournament"),
        mutation_k=cfg.get("search.mutation_k"),
        seed=seed,
    )
    ranking = select_ranking_set(
        sorted(log, key=lambda r: (-r.est_acc, r.arch)),
        space,
        top_k=cfg.get("search.top_k"),
        random_k=cfg.get("search.random_k"),
        seed=seed,
    )
    have = {r.arch for r in log}
    missing = [a for a in ranking if str(a) not in have]
    if missing:
        extra = evaluate_candidates(
            student, head, missing, calib, val_x, val_y, seed=seed, batch_size=eval_bs
        )
        for k, rec in enumerate(extra):
            rec.eval_index = len(log) + k
        log = log + extra

    trials_path = rundir.path / "search/trials.jsonl"
    if trials_path.exists():
        trials_path.unlink()
    for rec in log:
        rundir.append_jsonl("search/trials.jsonl", json.loads(rec.to_line()))
    rundir.write_text(
        "search/best.json",
        json.dumps({"arch": best.arch, "est_acc": best.est_acc}, sort_keys=True) + "\n",
    )
    rundir.write_text(
        "search/ranking_set.json", json.dumps([str(a) for a in ranking]) + "\n"
    )
    rundir.mark_done("search")
    return {"best": best.arch, "est_acc": best.est_acc, "evaluations": len(log)}


def read_trials(rundir: RunDirectory) -> list[TrialRecord]:
    path = rundir.path / "search/trials.jsonl"
    if not path.exists():
        return []
    return [TrialRecord.from_line(line) for line in path.read_text().splitlines() if line]


def stage_oracle(rundir: RunDirectory, archs: list[str] | None = None) -> dict:
    rundir.require_stage("search")
    cfg = rundir.config()
    ds, train_idx, val_idx, _ = build_dataset(cfg)
    space = build_space(cfg)
    net_cfg = build_net_cfg(cfg, ds)
    seed = cfg.get("run.seed")
    ocfg = OracleConfig(
        epochs=cfg.get("oracle.epochs"),
        lr=cfg.get("oracle.lr"),
        batch_size=cfg.get("oracle.batch_size"),
        momentum=cfg.get("oracle.momentum"),
        weight_decay=cfg.get("oracle.weight_decay"),
        crop_scale=(cfg.get("augment.crop_scale_min"), cfg.get("augment.crop_scale_max")),
        flip_prob=cfg.get("augment.flip_prob"),
    )
    if archs is None:
        archs = json.loads((rundir.path / "search/ranking_set.json").read_text())
    records_path = rundir.path / "oracle/records.jsonl"
    if records_path.exists():
        records_path.unlink()
    results = {}
    for arch_str in archs:
        arch = parse_arch(arch_str, space)
        acc = train_oracle(
            space, arch, net_cfg,
            ds.images[train_idx], ds.labels[train_idx],
            ds.images[val_idx], ds.labels[val_idx],
            ocfg, seed,
        )
        results[str(arch)] = acc
        rundir.append_jsonl(
            "oracle/records.jsonl",
            {
                "arch": str(arch),
                "space_id": space.space_id,
                "oracle_acc": acc,
                "seed": seed,
                "epochs": ocfg.epochs,
                "lr": ocfg.lr,
                "batch_size": ocfg.batch_size,
            },
        )
    rundir.mark_done("oracle")
    return results


def stage_rank(
    rundir: RunDirectory,
    benchmark: BenchmarkTable | None = None,
    exclude_ops: tuple[str, ...] = (),
    skip_from: str | None = None,
    skip_to: str = "skip_connect",
) -> dict:
    rundir.require_stage("search")
    cfg = rundir.config()
    space = build_space(cfg)
    trials = read_trials(rundir)
    est = {r.arch: r for r in trials}

    if benchmark is None:
        rundir.require_stage("oracle")
        oracle = {
            obj["arch"]: obj["oracle_acc"] for obj in rundir.read_jsonl("oracle/records.jsonl")
        }
        merged = []
        for arch_str, acc in oracle.items():
            if arch_str not in est:
                raise ContractError(f"oracle record for unevaluated arch '{arch_str}'")
            r = est[arch_str]
            merged.append(
                TrialRecord(
                    arch=r.arch, space_id=r.space_id, est_acc=r.est_acc,
                    oracle_acc=acc, source="trained_oracle", seed=r.seed,
                    eval_index=r.eval_index,
                )
            )
    else:
        merged = [
            TrialRecord(
                arch=r.arch, space_id=r.space_id, est_acc=r.est_acc,
                oracle_acc=benchmark.lookup(r.arch, space), source="benchmark_table",
                seed=r.seed, eval_index=r.eval_index,
            )
            for r in trials
        ]

    arch_filter = None
    if exclude_ops:
        if not isinstance(space, CellSpace):
            raise ConfigError("op exclusion filters apply to cell spaces only")
        arch_filter = op_filter(space, tuple(exclude_ops))
    report = ranking_report(merged, arch_filter=arch_filter, space=space if arch_filter else None)

    out = {"tau": report["tau"], "n": report["n"], "source": merged[0].source}
    scatter = ["# arch\test_acc\toracle_acc"]
    scatter += [f"{a}\t{e!r}\t{o!r}" for a, e, o in report["pairs"]]
    rundir.write_text("rank/scatter.tsv", "\n".join(scatter) + "\n")

    records_path = rundir.path / "rank/records.jsonl"
    if records_path.exists():
        records_path.unlink()
    for rec in merged:
        rundir.append_jsonl("rank/records.jsonl", json.loads(rec.to_line()))

    if skip_from is not None:
        if benchmark is None:
            raise ConfigError("skip sensitivity needs a benchmark table")
        pairs = skip_sensitivity(merged, benchmark, space, skip_from, skip_to)
        below = threshold_query(pairs, 0.01)
        lines = ["# arch\tsite\tsub_arch\td_est\td_actual"]
        lines += [
            f"{p['arch']}\t{p['site']}\t{p['sub_arch']}\t{p['d_est']!r}\t{p['d_actual']!r}"
            for p in pairs
        ]
        rundir.write_text("rank/sensitivity.tsv", "\n".join(lines) + "\n")
        out["sensitivity_pairs"] = len(pairs)
        out["sensitivity_below_0.01"] = len(below)

    rundir.write_text("rank/report.json", json.dumps(out, sort_keys=True) + "\n")
    rundir.mark_done("rank")
    return out


def stage_diagnose(rundir: RunDirectory) -> dict:
    rundir.require_stage("supernet")
    cfg = rundir.config()
    ds, train_idx, _, _ = build_dataset(cfg)
    space = build_space(cfg)
    net_cfg = build_net_cfg(cfg, ds)
    seed = cfg.get("run.seed")
    student = Supernet(space, net_cfg, seed)
    teacher = TeacherState(student.clone(), lam=cfg.get("train.ema"))
    _, _, drift, _ = _load_checkpoint(rundir, student, teacher)
    student.freeze()

    n_probe = min(cfg.get("diag.probe_batch"), len(train_idx))
    probe_idx = stream(seed, "diag/probe").choice(train_idx, size=n_probe, replace=False)
    probe = ds.images[probe_idx]
    paths = default_probe_paths(space)
    sim = feature_shift_matrix(student, paths, probe, head="project")
    rundir.write_text("diagnostics/similarity.tsv", sim.to_text())
    feat_sim = feature_shift_matrix(student, paths, probe, head="features")
    rundir.write_text("diagnostics/feature_similarity.tsv", feat_sim.to_text())

    def series(prefix: str):
        snaps = sorted(
            (int(k.split("/")[1]), arr)
            for k, arr in drift.items()
            if k.startswith(prefix + "/")
        )
        return parameter_drift(snaps, layer=_drift_layer(cfg, student), bins=cfg.get("diag.bins"))

    out = {
        "off_diag_mean": sim.off_diag_mean,
        "feature_off_diag_mean": feat_sim.off_diag_mean,
        "paths": sim.paths,
    }
    if sum(k.startswith("student/") for k in drift) >= 2:
        s_series = series("student")
        t_series = series("teacher")
        rundir.write_text(
            "diagnostics/drift.tsv",
            "# student\n" + s_series.to_text() + "# teacher\n" + t_series.to_text(),
        )
        out["student_drift_mean"] = float(np.mean(s_series.distances))
        out["teacher_drift_mean"] = float(np.mean(t_series.distances))
    rundir.write_text("diagnostics/report.json", json.dumps(out, sort_keys=True) + "\n")
    rundir.mark_done("diagnostics")
    return out


def run_pipeline(cfg: RunConfig, run_path: str | Path, resume: bool = False) -> dict:
    """train-supernet -> linear-eval -> search -> oracle -> rank on one directory."""
    rundir = RunDirectory(run_path)
    rundir.initialize(cfg)
    with rundir.lock():
        stage_train_supernet(rundir, resume=resume)
        stage_linear(rundir)
        stage_search(rundir)
        stage_oracle(rundir)
        return stage_rank(rundir)
