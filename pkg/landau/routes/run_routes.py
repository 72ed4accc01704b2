import os
import re

from fastapi import APIRouter, Depends, HTTPException, Request

from landau.errors import ArtifactError
from landau.models import RunManifest
from landau.services.metrics import read_metrics_csv
from landau.services.pipeline import HISTORY_FILE, METRICS_FILE
from landau.services.trainer import TrainingHistory
from landau.storage import list_runs, read_manifest

router = APIRouter(prefix="/api/runs", tags=["runs"])

_RUN_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


def get_runs_dir(request: Request) -> str:
    return request.app.state.runs_dir


def run_dir(name: str, runs_dir: str = Depends(get_runs_dir)) -> str:
    if not _RUN_NAME.match(name) or ".." in name:
        raise HTTPException(status_code=400, detail=f"Invalid run name: {name}")
    path = os.path.join(runs_dir, name)
    if not os.path.isdir(path):
        raise HTTPException(status_code=404, detail=f"Run not found: {name}")
    return path


@router.get("")
async def get_runs(runs_dir: str = Depends(get_runs_dir)):
    runs = []
    for name in list_runs(runs_dir):
        try:
            manifest = read_manifest(os.path.join(runs_dir, name))
        except ArtifactError:
            runs.append({"name": name, "status": "corrupt", "command": None, "created": None})
            continue
        runs.append({"name": name, "status": manifest.status, "command": manifest.command, "created": manifest.created})
    return runs


@router.get("/{name}/manifest", response_model=RunManifest)
async def get_manifest(path: str = Depends(run_dir)):
    return read_manifest(path)


@router.get("/{name}/metrics")
async def get_metrics(path: str = Depends(run_dir)):
    target = os.path.join(path, METRICS_FILE)
    if not os.path.isfile(target):
        raise HTTPException(status_code=404, detail="Run has no metrics; run `landau evaluate` first")
    return [record.model_dump() for record in read_metrics_csv(target)]


@router.get("/{name}/history")
async def get_history(path: str = Depends(run_dir)):
    target = os.path.join(path, HISTORY_FILE)
    if not os.path.isfile(target):
        raise HTTPException(status_code=404, detail="Run has no training history")
    return [record.model_dump() for record in TrainingHistory.from_csv(target).records]
