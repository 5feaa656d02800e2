"""Run persistence: manifests, checkpoint registry, and result file layout.

Layout under one store root:

    runs/<run_id>/manifest          human-readable JSON, atomically replaced
    runs/<run_id>/ckpt_<tokens>.bin versioned binary checkpoints
    runs/<run_id>/log.csv           full training log
    results/<experiment>/*.csv      measurement outputs

Manifests embed the resolved experiment config, so a completed run directory
is self-sufficient for re-deriving every CSV the run produced.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .engine import Checkpoint, save_checkpoint
from .errors import CheckpointNotFound, RunConflict

MANIFEST_VERSION = 1
STATUSES = ("running", "complete", "failed")


@dataclass
class RunManifest:
    run_id: str
    config_fingerprint: str
    seed: int
    task_summary: dict
    schedule_summary: dict
    config: dict = field(default_factory=dict)
    checkpoints: dict[int, str] = field(default_factory=dict)  # tokens -> relative path
    status: str = "running"
    manifest_version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        payload = {
            "manifest_version": self.manifest_version,
            "run_id": self.run_id,
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "status": self.status,
            "task": self.task_summary,
            "schedule": self.schedule_summary,
            "config": self.config,
            "checkpoints": [[tokens, self.checkpoints[tokens]] for tokens in sorted(self.checkpoints)],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        payload = json.loads(text)
        return cls(
            run_id=payload["run_id"],
            config_fingerprint=payload["config_fingerprint"],
            seed=payload["seed"],
            task_summary=payload["task"],
            schedule_summary=payload["schedule"],
            config=payload.get("config", {}),
            checkpoints={int(tokens): path for tokens, path in payload["checkpoints"]},
            status=payload["status"],
            manifest_version=payload["manifest_version"],
        )


class RunStore:
    """One experiment directory tree; a single writer per run, any readers."""

    def __init__(self, root):
        self.root = Path(root)

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def manifest_path(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "manifest"

    def results_dir(self, experiment: str) -> Path:
        return self.root / "results" / experiment

    def register_run(
        self,
        run_id: str,
        config_fingerprint: str,
        seed: int,
        task_summary: dict,
        schedule_summary: dict,
        config: dict | None = None,
    ) -> RunManifest:
        path = self.manifest_path(run_id)
        if path.exists():
            raise RunConflict(f"run {run_id!r} already registered at {path}")
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(
            run_id=run_id,
            config_fingerprint=config_fingerprint,
            seed=seed,
            task_summary=task_summary,
            schedule_summary=schedule_summary,
            config=config or {},
        )
        self.save_manifest(manifest)
        return manifest

    def save_manifest(self, manifest: RunManifest) -> None:
        # Write-then-rename so readers never observe a half-written manifest
        # and a crash leaves the previous state intact.
        path = self.manifest_path(manifest.run_id)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(manifest.to_json(), encoding="utf-8")
        os.replace(tmp, path)

    def load_manifest(self, run_id: str) -> RunManifest:
        return RunManifest.from_json(self.manifest_path(run_id).read_text(encoding="utf-8"))

    def add_checkpoint(self, manifest: RunManifest, tokens: int, checkpoint: Checkpoint) -> Path:
        """Save a checkpoint file and register it under its token position."""
        name = f"ckpt_{tokens}.bin"
        path = self.run_dir(manifest.run_id) / name
        save_checkpoint(checkpoint, path)
        self.record_checkpoint(manifest, tokens, name)
        return path

    def record_checkpoint(self, manifest: RunManifest, tokens: int, rel_path: str) -> None:
        if manifest.checkpoints and tokens <= max(manifest.checkpoints):
            raise ValueError(
                f"checkpoint positions must be recorded in increasing order; "
                f"got {tokens} after {max(manifest.checkpoints)}"
            )
        manifest.checkpoints[tokens] = rel_path
        self.save_manifest(manifest)

    def find_checkpoint(self, manifest: RunManifest, tokens: int) -> Path:
        if tokens not in manifest.checkpoints:
            raise CheckpointNotFound(tokens, manifest.checkpoints.keys())
        return self.run_dir(manifest.run_id) / manifest.checkpoints[tokens]

    def set_status(self, manifest: RunManifest, status: str) -> None:
        if status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}")
        manifest.status = status
        self.save_manifest(manifest)
