"""Trainer modes and ablation sweeps.

Each mode is the full pipeline with one training ingredient toggled; the
config diff between a mode run and the base run touches only `ablation.*`
keys, so any outcome difference is attributable to that toggle. Embedding
collapse during an ablation is a recorded outcome, not a harness failure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .config import RunConfig
from .errors import CollapseError, ContractError
from .pi import AblationFlags
from .pipeline import (
    stage_linear,
    stage_oracle,
    stage_rank,
    stage_search,
    stage_train_supernet,
)
from .rundir import RunDirectory


class TrainerMode(str, Enum):
    PI_NAS = "pi_nas"
    SPOS = "spos"
    S_PI_MODEL = "s_pi_model"
    NO_CROSS_PATH = "no_cross_path"
    NO_DOWNSAMPLE_SHARING = "no_downsample_sharing"
    NO_NEGATIVES = "no_negatives"


# (cross_path, mean_teacher, downsample_sharing, nontrivial, supervised_spos_mode)
_MODE_FLAGS: dict[TrainerMode, tuple[bool, bool, bool, bool, bool]] = {
    TrainerMode.PI_NAS: (True, True, True, True, False),
    TrainerMode.SPOS: (False, False, True, False, True),
    TrainerMode.S_PI_MODEL: (True, False, True, True, False),
    TrainerMode.NO_CROSS_PATH: (False, True, True, True, False),
    TrainerMode.NO_DOWNSAMPLE_SHARING: (True, True, False, True, False),
    TrainerMode.NO_NEGATIVES: (True, True, True, False, False),
}

_ABLATION_KEYS = (
    "ablation.cross_path",
    "ablation.mean_teacher",
    "ablation.downsample_sharing",
    "ablation.nontrivial",
    "ablation.supervised_spos_mode",
)


def mode_flags(mode: TrainerMode | str) -> AblationFlags:
    mode = TrainerMode(mode)
    cp, mt, ds, nt, sup = _MODE_FLAGS[mode]
    return AblationFlags(
        cross_path=cp,
        mean_teacher=mt,
        downsample_sharing=ds,
        nontrivial=nt,
        supervised_spos_mode=sup,
    )


def apply_mode(base: RunConfig, mode: TrainerMode | str) -> RunConfig:
    """Base config with only the ablation flags switched to the mode's preset."""
    flags = mode_flags(mode)
    cfg = base.copy()
    cfg.set("ablation.cross_path", flags.cross_path)
    cfg.set("ablation.mean_teacher", flags.mean_teacher)
    cfg.set("ablation.downsample_sharing", flags.downsample_sharing)
    cfg.set("ablation.nontrivial", flags.nontrivial)
    cfg.set("ablation.supervised_spos_mode", flags.supervised_spos_mode)
    stray = [k for k in cfg.diff(base) if k not in _ABLATION_KEYS]
    if stray:
        raise ContractError(f"mode preset leaked into non-ablation keys: {stray}")
    return cfg


@dataclass
class ModeOutcome:
    mode: str
    run_dir: str
    tau: float | None
    collapsed: bool
    collapse_step: int | None = None

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "run_dir": self.run_dir,
            "tau": self.tau,
            "collapsed": self.collapsed,
            "collapse_step": self.collapse_step,
        }


def run_mode(
    mode: TrainerMode | str,
    base_cfg: RunConfig,
    run_path: str | Path,
    resume: bool = False,
) -> ModeOutcome:
    """Full pipeline under one trainer mode; collapse becomes an outcome."""
    mode = TrainerMode(mode)
    cfg = apply_mode(base_cfg, mode)
    rundir = RunDirectory(run_path)
    rundir.initialize(cfg)
    with rundir.lock():
        try:
            stage_train_supernet(rundir, resume=resume)
        except CollapseError as exc:
            return ModeOutcome(
                mode=mode.value, run_dir=str(rundir.path), tau=None,
                collapsed=True, collapse_step=exc.step,
            )
        stage_linear(rundir)
        stage_search(rundir)
        stage_oracle(rundir)
        report = stage_rank(rundir)
    return ModeOutcome(
        mode=mode.value, run_dir=str(rundir.path), tau=report["tau"], collapsed=False
    )


def run_sweep(
    base_cfg: RunConfig,
    out_root: str | Path,
    modes: tuple[TrainerMode, ...] = tuple(TrainerMode),
) -> list[ModeOutcome]:
    """One run directory per mode under `out_root`, plus a summary manifest."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    outcomes = []
    for mode in modes:
        outcomes.append(run_mode(mode, base_cfg, out_root / TrainerMode(mode).value))
    lines = [json.dumps(o.to_json(), sort_keys=True) for o in outcomes]
    (out_root / "sweep.jsonl").write_text("".join(l + "\n" for l in lines))
    width = max(len(o.mode) for o in outcomes)
    rows = ["# mode, kendall tau, outcome"]
    for o in outcomes:
        result = f"collapsed@{o.collapse_step}" if o.collapsed else f"tau={o.tau:+.3f}"
        rows.append(f"{o.mode:<{width}}  {result}")
    (out_root / "sweep.txt").write_text("\n".join(rows) + "\n")
    return outcomes
