"""Run directories: one lock per invocation, checksummed outputs and a
write-once manifest."""
import json
import logging
import os
import time
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from landau.errors import ArtifactError
from landau.models import FileRecord, RunManifest
from landau.services.utils import sha256_file, software_version, utc_now

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"


class RunStore:
    """Owns one run directory for the duration of a command.

    Use as a context manager: the lock is taken on entry, and on exit the
    manifest is written with status ok, or failed plus the error message when
    the body raised (the exception still propagates).
    """

    def __init__(self, root: str, command: str, config: Dict[str, str], seed: int):
        self.root = root
        self.command = command
        self.config = config
        self.seed = seed
        self.summary: Dict[str, Any] = {}
        self._files: Dict[str, bool] = {}
        self._started = 0.0
        self._locked = False
        self._manifest: Optional[RunManifest] = None

    def __enter__(self) -> "RunStore":
        self.open()
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc is None:
            self.finish()
        else:
            self.finish(status="failed", failure=f"{type(exc).__name__}: {exc}")
        return False

    def open(self) -> None:
        try:
            os.makedirs(self.root, exist_ok=True)
        except OSError as e:
            raise ArtifactError(f"cannot create run directory {self.root}: {e}") from e
        if os.path.exists(os.path.join(self.root, MANIFEST_NAME)):
            raise ArtifactError(f"{self.root} already holds a finished run")
        try:
            fd = os.open(os.path.join(self.root, LOCK_NAME), os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise ArtifactError(f"{self.root} is locked by another invocation") from e
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._locked = True
        self._started = time.perf_counter()
        logger.info("run directory %s (%s)", self.root, self.command)

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def record(self, name: str, deterministic: bool = True) -> str:
        """Register an output file for the manifest inventory."""
        if not os.path.isfile(self.path(name)):
            raise ArtifactError(f"cannot record missing output {self.path(name)}")
        self._files[name] = deterministic
        return self.path(name)

    def finish(self, status: str = "ok", failure: Optional[str] = None) -> RunManifest:
        if self._manifest is not None:
            raise ArtifactError(f"manifest for {self.root} was already written")
        files: List[FileRecord] = []
        for name in sorted(self._files):
            full = self.path(name)
            if not os.path.isfile(full):
                continue
            files.append(FileRecord(
                path=name, sha256=sha256_file(full), bytes=os.path.getsize(full),
                deterministic=self._files[name],
            ))
        manifest = RunManifest(
            command=self.command, config=self.config, seed=self.seed, version=software_version(),
            created=utc_now().isoformat(), wall_time=time.perf_counter() - self._started,
            status=status, failure=failure, files=files, summary=self.summary,
        )
        target = self.path(MANIFEST_NAME)
        try:
            fd = os.open(target, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            with os.fdopen(fd, "w") as f:
                f.write(manifest.model_dump_json(indent=2))
        except OSError as e:
            raise ArtifactError(f"cannot write manifest {target}: {e}") from e
        finally:
            self._release()
        self._manifest = manifest
        if status == "failed":
            logger.error("run %s failed: %s", self.root, failure)
        return manifest

    def _release(self) -> None:
        if self._locked:
            try:
                os.remove(self.path(LOCK_NAME))
            except FileNotFoundError:
                pass
            self._locked = False


def read_manifest(run_dir: str) -> RunManifest:
    target = os.path.join(run_dir, MANIFEST_NAME)
    try:
        with open(target) as f:
            return RunManifest.model_validate(json.load(f))
    except FileNotFoundError as e:
        raise ArtifactError(f"no manifest at {target}") from e
    except (OSError, ValueError, ValidationError) as e:
        raise ArtifactError(f"corrupt manifest {target}: {e}") from e


def verify_manifest(run_dir: str) -> List[str]:
    """Problems found re-checking every listed file; empty when all match."""
    manifest = read_manifest(run_dir)
    problems = []
    for record in manifest.files:
        full = os.path.join(run_dir, record.path)
        if not os.path.isfile(full):
            problems.append(f"{record.path}: missing")
        elif sha256_file(full) != record.sha256:
            problems.append(f"{record.path}: checksum mismatch")
    return problems


def list_runs(root: str) -> List[str]:
    if not os.path.isdir(root):
        return []
    return sorted(
        name for name in os.listdir(root)
        if os.path.isfile(os.path.join(root, name, MANIFEST_NAME))
    )
