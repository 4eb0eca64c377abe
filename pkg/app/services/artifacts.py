"""
Run outputs: metrics and trace CSVs, the run.json manifest, binary
parameter checkpoints and dataset exports.

metrics.csv is a pure function of the config and seed: no timestamps,
floats written with ``repr``.
"""
import csv
import hashlib
import json
import logging
import platform
import struct
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import scipy

from app.core.config import settings
from app.core.errors import CheckpointError
from app.core.numeric import ParamVector
from app.schemas.config import RunConfig
from app.schemas.metrics import SweepRow, TargetReport
from app.schemas.run import RunManifest, RunStatusEnum
from app.services.domains import DomainSpec, LabeledSet, UnlabeledSet
from app.services.encoder import EncoderDims
from app.services.orchestrator import GlobalModelState

logger = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "run_id", "global_update", "episode", "split", "all", "old", "new",
    "k_used", "strategy", "weight", "sign_conflict", "update_l1",
]
TRACE_COLUMNS = [
    "global_update", "episode", "epoch", "step", "lr", "total", "sup", "unsup", "ce", "adv", "margin",
]
SWEEP_COLUMNS = [
    "label", "value", "seed", "target", "all", "old", "new", "k_used",
    "mean_sign_conflict", "mean_weight_diff_l1",
]

CHECKPOINT_MAGIC = b"PVEC"
CHECKPOINT_VERSION = 1


def make_run_id(cfg: RunConfig, command: str) -> str:
    payload = json.dumps({"command": command, "config": cfg.model_dump(mode="json")}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _cell(row.get(c)) for c in columns})


def metrics_rows(run_id: str, state: GlobalModelState, report: Optional[TargetReport]) -> List[Dict]:
    rows = []
    for update in state.history:
        for episode in update.episodes:
            valid = episode.valid
            rows.append({
                "run_id": run_id,
                "global_update": update.global_index,
                "episode": episode.episode_index,
                "split": "aborted" if episode.aborted else "valid",
                "all": valid.all if valid else None,
                "old": valid.old if valid else None,
                "new": valid.new if valid else None,
                "k_used": valid.k_used if valid else None,
                "strategy": update.strategy,
                "weight": episode.weight,
            })
        rows.append({
            "run_id": run_id,
            "global_update": update.global_index,
            "split": "merge",
            "strategy": update.strategy,
            "sign_conflict": update.sign_conflict,
            "update_l1": update.weight_diff_l1,
        })
    if report is not None:
        strategy = state.history[-1].strategy if state.history else None
        for target in report.per_domain:
            m = target.metrics
            rows.append({
                "run_id": run_id,
                "global_update": state.global_index,
                "split": f"target:{target.domain_id}",
                "all": m.all, "old": m.old, "new": m.new, "k_used": m.k_used,
                "strategy": strategy,
            })
        rows.append({
            "run_id": run_id,
            "global_update": state.global_index,
            "split": "target:mean",
            "all": report.mean_all, "old": report.mean_old, "new": report.mean_new,
            "strategy": strategy,
        })
    return rows


def write_metrics_csv(path: Path, run_id: str, state: GlobalModelState, report: Optional[TargetReport]) -> None:
    _write_csv(path, METRICS_COLUMNS, metrics_rows(run_id, state, report))


def write_trace_csv(path: Path, state: GlobalModelState) -> None:
    rows = (
        {"global_update": g, "episode": e, **step._asdict()}
        for g, e, step in state.step_traces
    )
    _write_csv(path, TRACE_COLUMNS, rows)


def write_sweep_csv(path: Path, rows: Sequence[SweepRow]) -> None:
    flat = []
    for row in rows:
        base = {
            "label": row.label, "value": row.value, "seed": row.seed,
            "mean_sign_conflict": row.mean_sign_conflict,
            "mean_weight_diff_l1": row.mean_weight_diff_l1,
        }
        for target in row.target.per_domain:
            m = target.metrics
            flat.append({**base, "target": target.domain_id, "all": m.all, "old": m.old, "new": m.new,
                         "k_used": m.k_used})
        flat.append({**base, "target": "mean", "all": row.target.mean_all, "old": row.target.mean_old,
                     "new": row.target.mean_new})
    _write_csv(path, SWEEP_COLUMNS, flat)


def versions() -> Dict[str, str]:
    return {
        "package": settings.VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def build_manifest(
    run_id: str,
    command: str,
    cfg: RunConfig,
    state: GlobalModelState,
    report: Optional[TargetReport],
    started_at: datetime,
    wall_clock_seconds: float,
    checkpoints: Sequence[str] = (),
    status: RunStatusEnum = RunStatusEnum.COMPLETED,
    error: Optional[str] = None,
) -> RunManifest:
    return RunManifest(
        run_id=run_id,
        command=command,
        seed=cfg.training.seed,
        strategy=cfg.training.effective_strategy.value,
        status=status,
        config=cfg.model_dump(mode="json"),
        versions=versions(),
        started_at=started_at,
        wall_clock_seconds=wall_clock_seconds,
        history=state.history,
        target=report,
        checkpoints=list(checkpoints),
        error=error,
    )


def write_manifest(path: Path, manifest: RunManifest) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def read_manifest(path: Path) -> RunManifest:
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))


def save_checkpoint(path: Union[str, Path], vector: ParamVector, dims: Optional[Sequence[int]] = None) -> Path:
    """
    Header: magic, version, layout id, dims, value count; then the values as
    little-endian float64.
    """
    if dims is None:
        try:
            dims = tuple(EncoderDims.from_layout_id(vector.layout_id))
        except ValueError:
            dims = (len(vector),)
    layout = vector.layout_id.encode("utf-8")
    header = CHECKPOINT_MAGIC + struct.pack("<HH", CHECKPOINT_VERSION, len(layout)) + layout
    header += struct.pack("<H", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    header += struct.pack("<Q", len(vector))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + vector.values.astype("<f8").tobytes())
    return path


def load_checkpoint(path: Union[str, Path]) -> ParamVector:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        if blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a parameter checkpoint")
        version, layout_len = struct.unpack_from("<HH", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 8
        layout_id = blob[offset:offset + layout_len].decode("utf-8")
        offset += layout_len
        (n_dims,) = struct.unpack_from("<H", blob, offset)
        offset += 2 + 4 * n_dims
        (count,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}")
    data = blob[offset:]
    if len(data) != 8 * count:
        raise CheckpointError(f"{path} holds {len(data)} data bytes, expected {8 * count}")
    return ParamVector(np.frombuffer(data, dtype="<f8").astype(np.float64), layout_id)


def checkpoint_name(global_index: int) -> str:
    return f"global-{global_index:03d}.pvec"


def export_dataset(path: Union[str, Path], samples: Union[LabeledSet, UnlabeledSet]) -> Path:
    labels = samples.labels if isinstance(samples, LabeledSet) else samples.hidden_labels
    dim = samples.features.shape[1]
    rows = (
        {"domain_id": d, "hidden_label": int(y), **{f"f{i}": float(v) for i, v in enumerate(x)}}
        for x, y, d in zip(samples.features, labels, samples.domain_ids)
    )
    path = Path(path)
    _write_csv(path, ["domain_id", "hidden_label"] + [f"f{i}" for i in range(dim)], rows)
    return path


def load_dataset(path: Union[str, Path]) -> UnlabeledSet:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        feature_cols = [c for c in reader.fieldnames or [] if c.startswith("f")]
        domain_ids, labels, features = [], [], []
        for row in reader:
            domain_ids.append(row["domain_id"])
            labels.append(int(row["hidden_label"]))
            features.append([float(row[c]) for c in feature_cols])
    return UnlabeledSet(np.array(features, dtype=np.float64), np.array(domain_ids, dtype=object), np.array(labels))


def describe_domain(domain: DomainSpec) -> Dict:
    return {
        "domain_id": domain.domain_id,
        "role": domain.role.value,
        "rotation_angle": domain.rotation_angle,
        "scale_factors": domain.scale_factors.tolist(),
        "shift": domain.shift.tolist(),
        "noise_sigma": domain.noise_sigma,
    }


def write_run_outputs(
    out_dir: Union[str, Path],
    run_id: str,
    command: str,
    cfg: RunConfig,
    state: GlobalModelState,
    report: Optional[TargetReport],
    started_at: datetime,
    wall_clock_seconds: float,
    status: RunStatusEnum = RunStatusEnum.COMPLETED,
    error: Optional[str] = None,
) -> RunManifest:
    """metrics.csv, trace.csv, one checkpoint per global update and run.json."""
    out_dir = Path(out_dir)
    write_metrics_csv(out_dir / "metrics.csv", run_id, state, report)
    write_trace_csv(out_dir / "trace.csv", state)
    checkpoints = []
    for g, params in enumerate(state.snapshots):
        name = checkpoint_name(g)
        save_checkpoint(out_dir / "checkpoints" / name, params)
        checkpoints.append(f"checkpoints/{name}")
    manifest = build_manifest(
        run_id, command, cfg, state, report, started_at, wall_clock_seconds, checkpoints, status, error
    )
    write_manifest(out_dir / "run.json", manifest)
    logger.info(f"Wrote run {run_id} artifacts to {out_dir}")
    return manifest
