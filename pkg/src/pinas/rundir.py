"""Run-directory layout, stage markers, manifest, and the writer lock.

Layout under one run directory:

    config.cfg            frozen config snapshot
    manifest.json         {relative path: sha256} for every artifact
    lock                  present while a writing command runs
    supernet/             checkpoint.pnstore, metrics.jsonl
    linear/               head.pnstore, log.jsonl
    search/               trials.jsonl, best.json
    oracle/               records.jsonl
    rank/                 report.json, scatter.tsv
    diagnostics/          similarity.tsv, drift.tsv

A stage is complete when its `.done` marker exists; commands that need a
prior stage raise an error naming the command to run.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

from .config import RunConfig
from .errors import ConfigError, StateError

STAGES = ("supernet", "linear", "search", "oracle", "rank", "diagnostics")

_PREREQ_CMD = {
    "supernet": "train-supernet",
    "linear": "linear-eval",
    "search": "search",
    "oracle": "oracle",
    "rank": "rank",
    "diagnostics": "diagnose",
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDirectory:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    # ---- lifecycle ---------------------------------------------------------

    def initialize(self, config: RunConfig) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        cfg_path = self.path / "config.cfg"
        if cfg_path.exists():
            existing = RunConfig.from_text(cfg_path.read_text())
            if existing != config:
                raise ConfigError(
                    f"{self.path}: existing config.cfg differs from the requested config "
                    f"(keys: {existing.diff(config)}); use a fresh run directory"
                )
        else:
            cfg_path.write_text(config.to_text())
        for stage in STAGES:
            (self.path / stage).mkdir(exist_ok=True)

    def config(self) -> RunConfig:
        cfg_path = self.path / "config.cfg"
        if not cfg_path.exists():
            raise StateError(f"{self.path}: no config.cfg; run `pinas train-supernet` first")
        return RunConfig.from_text(cfg_path.read_text())

    @contextmanager
    def lock(self):
        if not (self.path / "config.cfg").exists():
            raise StateError(
                f"{self.path}: not an initialized run directory; "
                f"run `pinas train-supernet --run {self.path}` first"
            )
        lock_path = self.path / "lock"
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StateError(
                f"{self.path}: lock held by pid {lock_path.read_text().strip() or '?'}; "
                f"remove the lock file if that process is gone"
            ) from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock_path.unlink(missing_ok=True)

    # ---- stages ------------------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage '{stage}'")
        return self.path / stage

    def stage_done(self, stage: str) -> bool:
        return (self.stage_dir(stage) / ".done").exists()

    def mark_done(self, stage: str) -> None:
        (self.stage_dir(stage) / ".done").write_text("done\n")
        self.update_manifest()

    def clear_done(self, stage: str) -> None:
        (self.stage_dir(stage) / ".done").unlink(missing_ok=True)

    def require_stage(self, stage: str) -> None:
        if not self.stage_done(stage):
            raise StateError(
                f"{self.path}: stage '{stage}' not complete; "
                f"run `pinas {_PREREQ_CMD[stage]} --run {self.path}` first"
            )

    # ---- artifacts ---------------------------------------------------------

    def append_jsonl(self, rel: str, obj: dict) -> None:
        path = self.path / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as f:
            f.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")

    def read_jsonl(self, rel: str) -> list[dict]:
        path = self.path / rel
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line]

    def write_text(self, rel: str, text: str) -> None:
        path = self.path / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)

    def update_manifest(self) -> None:
        entries = {}
        for p in sorted(self.path.rglob("*")):
            if p.is_dir() or p.name in ("manifest.json", "lock"):
                continue
            entries[str(p.relative_to(self.path))] = _sha256(p)
        (self.path / "manifest.json").write_text(
            json.dumps(entries, indent=2, sort_keys=True) + "\n"
        )

    def manifest(self) -> dict:
        path = self.path / "manifest.json"
        if not path.exists():
            return {}
        return json.loads(path.read_text())

    def verify_manifest(self) -> list[str]:
        """Paths whose current hash differs from the manifest (or are missing)."""
        bad = []
        for rel, digest in self.manifest().items():
            p = self.path / rel
            if not p.exists() or _sha256(p) != digest:
                bad.append(rel)
        return bad
