# app/services/registry.py
"""
Experiment run registry (SQLAlchemy). Side records only: a failing or
disabled registry never affects the files a command writes.
"""
import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, List, Optional

from app import db, models

logger = logging.getLogger(__name__)

REGISTRY_ENABLED = os.getenv("RADIOSIAM_REGISTRY", "1") not in ("0", "false", "no")


class RunRecorder:
    """Records one command invocation. With enabled=False every method is a no-op."""

    def __init__(self, enabled: bool = REGISTRY_ENABLED, url: Optional[str] = None):
        self.enabled = enabled
        self.run_id: Optional[int] = None
        self._sessions = None
        if enabled:
            try:
                self._sessions = db.make_session_factory(url or db.DATABASE_URL)
            except Exception as e:
                logger.warning("[registry] disabled, cannot open %s: %s", url or db.DATABASE_URL, e)
                self.enabled = False

    def _write(self, fn) -> Any:
        if not self.enabled:
            return None
        session = self._sessions()
        try:
            out = fn(session)
            session.commit()
            return out
        except Exception as e:
            session.rollback()
            logger.warning("[registry] write failed: %s", e)
            return None
        finally:
            session.close()

    def start_run(self, command: str, seed: Optional[int], config: Dict[str, Any], out_dir: str) -> Optional[int]:
        def add(session):
            run = models.ExperimentRun(command=command, seed=seed, out_dir=out_dir,
                                       config_json=json.dumps(config, sort_keys=True, default=str))
            session.add(run)
            session.flush()
            return run.id
        self.run_id = self._write(add)
        return self.run_id

    def _finish(self, status: str, error: Optional[str] = None) -> None:
        if self.run_id is None:
            return

        def update(session):
            run = session.query(models.ExperimentRun).filter(models.ExperimentRun.id == self.run_id).first()
            if run:
                run.status = status
                run.error = error
                run.finished_at = datetime.utcnow()
        self._write(update)

    def finish_run(self) -> None:
        self._finish("completed")

    def fail_run(self, error: str) -> None:
        self._finish("failed", error)

    def record_metrics(self, feature_set: str, metrics: Dict[str, Optional[float]]) -> None:
        if self.run_id is None:
            return

        def add(session):
            for name, value in sorted(metrics.items()):
                session.add(models.MetricRecord(run_id=self.run_id, feature_set=feature_set,
                                                name=name, value=value))
        self._write(add)

    def record_sweep_point(self, param: str, value: int, repeat: int, seed: int,
                           auc: Optional[float], minor_recall: Optional[float]) -> None:
        if self.run_id is None:
            return

        def add(session):
            session.add(models.SweepPoint(run_id=self.run_id, param=param, value=value, repeat=repeat,
                                          seed=seed, auc=auc, minor_recall=minor_recall))
        self._write(add)

    def sweep_points_for_run(self, run_id: Optional[int] = None) -> List[Dict[str, Any]]:
        rid = run_id if run_id is not None else self.run_id
        if rid is None:
            return []

        def query(session):
            rows = (session.query(models.SweepPoint).filter(models.SweepPoint.run_id == rid)
                    .order_by(models.SweepPoint.id).all())
            return [dict(param=r.param, value=r.value, repeat=r.repeat, seed=r.seed,
                         auc=r.auc, minor_recall=r.minor_recall) for r in rows]
        return self._write(query) or []

    def run_status(self, run_id: Optional[int] = None) -> Optional[str]:
        rid = run_id if run_id is not None else self.run_id
        if rid is None:
            return None

        def query(session):
            run = session.query(models.ExperimentRun).filter(models.ExperimentRun.id == rid).first()
            return run.status if run else None
        return self._write(query)
