# run_service.py
from datetime import datetime
from typing import Dict, List, Optional

from sqlmodel import select

from .db import ExperimentRun, Phase, RunStatus, SweepPoint


class RunService:
    """Simple data-access layer for experiment runs and sweep points."""

    def __init__(self, session_factory):
        # session_factory: () -> Session
        self._session_factory = session_factory

    # --- read helpers ---
    def list_runs(self, command: Optional[str] = None, status: Optional[RunStatus] = None) -> List[Dict]:
        with self._session_factory() as s:
            q = select(ExperimentRun).order_by(ExperimentRun.id.asc())
            if command:
                q = q.where(ExperimentRun.command == command)
            if status:
                q = q.where(ExperimentRun.status == status)
            return [
                {
                    "id": r.id,
                    "command": r.command,
                    "phase": r.phase.value,
                    "seed": r.seed,
                    "status": r.status.value,
                    "checkpoint_path": r.checkpoint_path,
                    "metrics": dict(r.metrics or {}),
                }
                for r in s.exec(q).all()
            ]

    def cached_pretext(self, config_hash: str) -> Optional[str]:
        """Checkpoint of the latest completed pre-text run with this config hash."""
        with self._session_factory() as s:
            run = s.exec(
                select(ExperimentRun)
                .where(
                    ExperimentRun.phase == Phase.PRETEXT,
                    ExperimentRun.config_hash == config_hash,
                    ExperimentRun.status == RunStatus.COMPLETED,
                )
                .order_by(ExperimentRun.id.desc())
            ).first()
            return run.checkpoint_path if run and run.checkpoint_path else None

    def sweep_points(self, sweep_id: str) -> List[Dict]:
        with self._session_factory() as s:
            rows = s.exec(select(SweepPoint).where(SweepPoint.sweep_id == sweep_id).order_by(SweepPoint.id.asc())).all()
            return [
                {"axis": p.axis, "value": p.value, "seed": p.seed, "macro_f1": p.macro_f1, "status": p.status.value}
                for p in rows
            ]

    # --- mutation helpers ---
    def start_run(self, command: str, phase: Phase, preset: str, seed: int, config_hash: str = "", out_dir: str = "") -> int:
        with self._session_factory() as s:
            run = ExperimentRun(command=command, phase=phase, preset=preset, seed=seed, config_hash=config_hash, out_dir=out_dir)
            s.add(run)
            s.commit()
            s.refresh(run)
            return run.id

    def finish_run(self, run_id: int, checkpoint_path: str = "", metrics: Optional[Dict] = None) -> bool:
        return self._close(run_id, RunStatus.COMPLETED, checkpoint_path=checkpoint_path, metrics=metrics or {})

    def fail_run(self, run_id: int, error: str) -> bool:
        return self._close(run_id, RunStatus.FAILED, error=error)

    def _close(self, run_id: int, status: RunStatus, **changes) -> bool:
        with self._session_factory() as s:
            run = s.get(ExperimentRun, run_id)
            if not run:
                return False
            run.status = status
            run.finished_at = datetime.utcnow()
            for key, value in changes.items():
                setattr(run, key, value)
            s.add(run)
            s.commit()
            return True

    def record_point(
        self,
        sweep_id: str,
        axis: str,
        value,
        seed: int,
        macro_f1: Optional[float],
        status: RunStatus,
        error: str = "",
    ) -> None:
        with self._session_factory() as s:
            s.add(SweepPoint(sweep_id=sweep_id, axis=axis, value=str(value), seed=seed, macro_f1=macro_f1, status=status, error=error))
            s.commit()
