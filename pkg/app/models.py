"""Ledger models."""

from __future__ import annotations

from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Integer, String, Text
from sqlalchemy.sql import func

from .database import Base


class CacheEntry(Base):
    """One content-addressed artifact in the cache directory."""

    __tablename__ = "cache_entries"

    id = Column(Integer, primary_key=True, index=True)
    digest = Column(String(64), nullable=False, unique=True, index=True)
    kind = Column(String(20), nullable=False)
    path = Column(String(1024), nullable=False)
    size_bytes = Column(Integer, nullable=False, default=0)
    hits = Column(Integer, nullable=False, default=0)
    created_at = Column(DateTime(timezone=True), nullable=False, server_default=func.now())
    last_used_at = Column(DateTime(timezone=True), nullable=True)

    def mark_used(self) -> None:
        self.hits = (self.hits or 0) + 1
        self.last_used_at = datetime.now(timezone.utc)


class RunRecord(Base):
    """Manifest of one CLI invocation."""

    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    subcommand = Column(String(50), nullable=False)
    status = Column(String(20), nullable=False, default="ok")
    params_digest = Column(String(64), nullable=True)
    manifest_json = Column(Text, nullable=False)
    created_at = Column(DateTime(timezone=True), nullable=False, server_default=func.now())
