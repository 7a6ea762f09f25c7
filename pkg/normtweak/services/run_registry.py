"""
Run registry: one database row per CLI command invocation.

Wall-clock timings are kept here and in the logs so that output trees stay
byte-identical across reruns.
"""

import json
import time
from datetime import datetime
from typing import Any, Dict, List, Optional

import structlog
from sqlalchemy.exc import SQLAlchemyError

from normtweak import ARTIFACT_VERSION
from normtweak.core.config import RunConfig
from normtweak.core.database import create_tables, get_db
from normtweak.models.models import RunRecord

logger = structlog.get_logger()


class RunRegistry:
    """Records command runs; database failures are logged and never abort a run"""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._ready = False

    def _ensure_tables(self) -> bool:
        if not self._ready:
            create_tables()
            self._ready = True
        return self._ready

    def start(self, config: RunConfig, command: str) -> Optional[int]:
        if not self.enabled:
            return None
        try:
            self._ensure_tables()
            with get_db() as db:
                record = RunRecord(
                    run_id=config.run_id,
                    command=command,
                    seed=str(config.seed),
                    config_hash=config.config_hash(),
                    artifact_version=ARTIFACT_VERSION,
                    output_dir=config.out,
                    status="running",
                )
                db.add(record)
                db.flush()
                record_id = record.id
            logger.debug("Registered run", run_id=config.run_id, command=command, record_id=record_id)
            return record_id
        except SQLAlchemyError as e:
            logger.warning(f"Run registry unavailable: {str(e)}")
            return None

    def finish(
        self,
        record_id: Optional[int],
        status: str,
        started: float,
        metrics: Optional[Dict[str, Any]] = None,
        timings: Optional[List[Dict[str, Any]]] = None,
        error: Optional[str] = None,
    ) -> None:
        if record_id is None:
            return
        try:
            with get_db() as db:
                record = db.get(RunRecord, record_id)
                if record is None:
                    return
                record.status = status
                record.error = error
                record.metrics = json.dumps(metrics or {}, sort_keys=True)
                record.timings = json.dumps(timings or [], sort_keys=True)
                record.elapsed_seconds = time.perf_counter() - started
                record.finished_at = datetime.utcnow()
        except SQLAlchemyError as e:
            logger.warning(f"Could not update run record {record_id}: {str(e)}")

    def history(self, run_id: str) -> List[Dict[str, Any]]:
        self._ensure_tables()
        with get_db() as db:
            records = db.query(RunRecord).filter(RunRecord.run_id == run_id).order_by(RunRecord.id).all()
            return [
                {
                    "command": r.command,
                    "status": r.status,
                    "seed": r.seed,
                    "metrics": json.loads(r.metrics or "{}"),
                    "timings": json.loads(r.timings or "[]"),
                }
                for r in records
            ]
