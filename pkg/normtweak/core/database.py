"""
Run-registry database configuration and session management
"""

import os
from contextlib import contextmanager
from typing import Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

DEFAULT_DATABASE_URL = "sqlite:///./normtweak_runs.db"

# Base class for models
Base = declarative_base()

_engine: Optional[Engine] = None
_session_factory: Optional[sessionmaker] = None


def database_url() -> str:
    return os.getenv("NORMTWEAK_DATABASE_URL", DEFAULT_DATABASE_URL)


def get_engine() -> Engine:
    """Create the engine on first use so the URL can be set after import"""
    global _engine, _session_factory
    url = database_url()
    if _engine is None or str(_engine.url) != url:
        _engine = create_engine(
            url,
            connect_args={"check_same_thread": False} if url.startswith("sqlite") else {},
        )
        _session_factory = sessionmaker(autocommit=False, autoflush=False, bind=_engine)
    return _engine


@contextmanager
def get_db() -> Iterator[Session]:
    """Get database session with commit on success and automatic cleanup"""
    get_engine()
    db = _session_factory()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def create_tables() -> None:
    """Create all database tables"""
    # registers RunRecord on Base.metadata
    from normtweak.models import models  # noqa: F401

    Base.metadata.create_all(bind=get_engine())
