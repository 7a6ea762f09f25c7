"""
Database models for the experiment run registry
"""

from datetime import datetime

from sqlalchemy import Column, DateTime, Float, Integer, String, Text

from normtweak.core.database import Base


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(String(12), index=True, nullable=False)
    command = Column(String(20), nullable=False)  # train, gendata, quantize, tweak, eval, compare, divergence
    seed = Column(String(20), nullable=False)  # u64 does not fit a signed SQL integer
    config_hash = Column(String(64), nullable=False)
    artifact_version = Column(String(40))
    output_dir = Column(Text)
    status = Column(String(20), default="running")  # running, succeeded, failed
    error = Column(Text)
    metrics = Column(Text)  # JSON
    timings = Column(Text)  # JSON, wall-clock seconds
    elapsed_seconds = Column(Float)
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime)
