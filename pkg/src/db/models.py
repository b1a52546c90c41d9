"""Run registry models for separation experiments."""
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, Union

from sqlalchemy import Column, DateTime, Float, Integer, JSON, String, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker


Base = declarative_base()


class SeparationRun(Base):
    """One evaluated mixture."""

    __tablename__ = "separation_runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    mix_id = Column(String(50), nullable=False, index=True)
    run_seed = Column(Integer, nullable=False)
    n_sources = Column(Integer, nullable=False)
    head_kind = Column(String(20), nullable=False)
    head_mode = Column(String(20), nullable=False)
    theta = Column(Float, nullable=False)

    k_eff = Column(Integer, nullable=False)
    si_snri = Column(Float, nullable=False)
    sdri = Column(Float, nullable=False)
    purity = Column(Float, nullable=True)
    conductance = Column(Float, nullable=True)
    modularity = Column(Float, nullable=True)

    run_metadata = Column(JSON, nullable=True)

    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    def __repr__(self):
        return f"<SeparationRun(id={self.id}, mix={self.mix_id}, si_snri={self.si_snri:.2f})>"


class CheckpointScore(Base):
    """Graph quality of one pretraining checkpoint (loss vs C vs Q)."""

    __tablename__ = "checkpoint_scores"

    id = Column(Integer, primary_key=True, autoincrement=True)
    checkpoint = Column(String(200), nullable=False, index=True)
    step = Column(Integer, nullable=False)
    loss = Column(Float, nullable=False)
    conductance = Column(Float, nullable=True)
    modularity = Column(Float, nullable=True)
    run_seed = Column(Integer, nullable=False)

    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    def __repr__(self):
        return f"<CheckpointScore(step={self.step}, loss={self.loss:.4f})>"


def default_registry_url(workdir: Union[str, Path]) -> str:
    return f"sqlite:///{Path(workdir).resolve() / 'registry.sqlite'}"


def get_db_engine(database_url: str):
    """Create database engine."""
    if database_url.startswith("sqlite"):
        return create_engine(database_url)
    return create_engine(database_url, pool_pre_ping=True, pool_size=10, max_overflow=20)


def get_session_maker(engine):
    """Create session maker."""
    return sessionmaker(bind=engine, expire_on_commit=False)


def init_db(database_url: str):
    """Initialize database tables."""
    engine = get_db_engine(database_url)
    Base.metadata.create_all(engine)
    return engine


def record_rows(database_url: str, model, rows: Iterable[Dict[str, Any]]) -> int:
    """Insert one `model` row per mapping; returns the number written."""
    engine = init_db(database_url)
    SessionMaker = get_session_maker(engine)
    session = SessionMaker()
    try:
        objects = [model(**row) for row in rows]
        session.add_all(objects)
        session.commit()
        return len(objects)
    finally:
        session.close()
        engine.dispose()
