"""CRUD helpers for the cache and run ledger."""

from __future__ import annotations

from typing import List, Optional

from sqlalchemy import select
from sqlalchemy.orm import Session

from . import models, schemas


def get_cache_entry(session: Session, digest: str) -> Optional[models.CacheEntry]:
    statement = select(models.CacheEntry).where(models.CacheEntry.digest == digest)
    return session.scalars(statement).first()


def record_cache_entry(session: Session, *, kind: str, digest: str, path: str, size_bytes: int) -> models.CacheEntry:
    entry = get_cache_entry(session, digest)
    if entry is None:
        entry = models.CacheEntry(kind=kind, digest=digest, path=path, size_bytes=size_bytes, hits=0)
        session.add(entry)
    else:
        entry.path = path
        entry.size_bytes = size_bytes
    session.flush()
    return entry


def touch_cache_entry(session: Session, digest: str) -> Optional[models.CacheEntry]:
    entry = get_cache_entry(session, digest)
    if entry is not None:
        entry.mark_used()
    return entry


def list_cache_entries(session: Session, *, kind: Optional[str] = None) -> List[models.CacheEntry]:
    statement = select(models.CacheEntry)
    if kind is not None:
        statement = statement.where(models.CacheEntry.kind == kind)
    statement = statement.order_by(models.CacheEntry.kind, models.CacheEntry.created_at, models.CacheEntry.id)
    return list(session.scalars(statement))


def record_run(session: Session, manifest: schemas.RunManifest) -> models.RunRecord:
    record = models.RunRecord(
        subcommand=manifest.subcommand,
        status=manifest.status,
        params_digest=manifest.digests.get("params"),
        manifest_json=manifest.model_dump_json(),
    )
    session.add(record)
    session.flush()
    return record


def list_runs(session: Session, *, limit: Optional[int] = None) -> List[models.RunRecord]:
    statement = select(models.RunRecord).order_by(models.RunRecord.id.desc())
    if limit is not None:
        statement = statement.limit(limit)
    return list(session.scalars(statement))
