"""Shared plumbing for the acceptance suite: cached artifacts + reporting.

Heavy artifacts (the desk-scale training run, the ablation grid) are built
through the CLI in subprocesses and cached under artifacts/acceptance keyed
by their configuration, so re-running the suite is cheap. Delete the cache
directory to force a rebuild.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
CACHE = Path(os.environ.get("CNERF_ACCEPTANCE_CACHE", REPO / "artifacts" / "acceptance"))

RESULTS: list = []  # (criterion, passed, detail) pushed by tests


def record(criterion: str, passed: bool, detail: str) -> None:
    RESULTS.append((criterion, bool(passed), detail))


def check(criterion: str, passed: bool, detail: str) -> None:
    record(criterion, passed, detail)
    assert passed, f"{criterion}: {detail}"


def run_cli(args, timeout=4 * 3600):
    env = dict(os.environ)
    env.setdefault("OPENBLAS_NUM_THREADS", "1")
    env.setdefault("OMP_NUM_THREADS", "1")
    proc = subprocess.run([sys.executable, "-m", "cnerf.cli", *map(str, args)],
                          capture_output=True, text=True, timeout=timeout, env=env)
    if proc.returncode != 0:
        raise RuntimeError(f"CLI failed ({proc.returncode}): {args}\n"
                           f"stdout: {proc.stdout[-2000:]}\nstderr: {proc.stderr[-2000:]}")
    return proc


def start_cli(args):
    env = dict(os.environ)
    env.setdefault("OPENBLAS_NUM_THREADS", "1")
    env.setdefault("OMP_NUM_THREADS", "1")
    return subprocess.Popen([sys.executable, "-m", "cnerf.cli", *map(str, args)],
                            stdout=subprocess.DEVNULL, stderr=subprocess.PIPE,
                            text=True, env=env)


def cached_artifact(name: str, config: dict, builder):
    """Build-once artifact directory keyed by its config JSON."""
    target = CACHE / name
    stamp = target / "config.json"
    desired = json.dumps(config, sort_keys=True)
    if stamp.exists() and stamp.read_text() == desired:
        return target
    target.mkdir(parents=True, exist_ok=True)
    started = time.time()
    builder(target)
    (target / "build_seconds.json").write_text(
        json.dumps({"seconds": time.time() - started}))
    stamp.write_text(desired)
    return target


def build_seconds(path: Path) -> float:
    f = path / "build_seconds.json"
    return json.loads(f.read_text())["seconds"] if f.exists() else float("nan")
