"""Ledger database engines and session scopes, one per cache directory."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from .config import LEDGER_URL

LEDGER_FILE = "ledger.sqlite3"

Base = declarative_base()

_engines: dict[str, Engine] = {}
_sessions: dict[str, sessionmaker] = {}
_lock = threading.Lock()


def ledger_url(cache_dir: Path, override: Optional[str] = LEDGER_URL) -> str:
    if override:
        return override
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    return f"sqlite:///{cache_dir / LEDGER_FILE}"


def get_engine(url: str) -> Engine:
    with _lock:
        engine = _engines.get(url)
        if engine is None:
            connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
            engine = create_engine(url, connect_args=connect_args, pool_pre_ping=True)
            from . import models  # noqa: F401  registers tables on Base

            Base.metadata.create_all(bind=engine)
            _engines[url] = engine
            _sessions[url] = sessionmaker(bind=engine, autocommit=False, autoflush=False)
        return engine


@contextmanager
def session_scope(url: str) -> Iterator[Session]:
    """Provide a transactional scope around a series of operations."""
    get_engine(url)
    session = _sessions[url]()
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def dispose_engines() -> None:
    with _lock:
        for engine in _engines.values():
            engine.dispose()
        _engines.clear()
        _sessions.clear()
