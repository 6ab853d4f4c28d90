"""
Run registry using SQLModel (SQLAlchemy under the hood).
Covers: one row per command invocation, one row per sweep point, and helpers
for engine/session creation.
"""
from datetime import datetime
from enum import Enum
from typing import Dict, Optional

from sqlalchemy import JSON, Column, UniqueConstraint
from sqlmodel import Field, Session, SQLModel, create_engine


# -----------------------------
# Enums
# -----------------------------
class RunStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class Phase(str, Enum):
    PRETEXT = "pretext"
    DOWNSTREAM = "downstream"
    EVAL = "eval"
    ANALYSIS = "analysis"
    DATA = "data"


# -----------------------------
# Runs
# -----------------------------
class ExperimentRun(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    command: str = Field(index=True)
    phase: Phase
    preset: str = ""
    seed: int = 0
    config_hash: str = Field(default="", index=True)
    status: RunStatus = Field(default=RunStatus.RUNNING)
    checkpoint_path: str = ""
    out_dir: str = ""
    error: str = ""
    metrics: Dict = Field(default_factory=dict, sa_column=Column(JSON))
    started_at: datetime = Field(default_factory=datetime.utcnow)
    finished_at: Optional[datetime] = None


class SweepPoint(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    sweep_id: str = Field(index=True)
    axis: str
    value: str
    seed: int
    macro_f1: Optional[float] = None
    status: RunStatus = Field(default=RunStatus.RUNNING)
    error: str = ""

    __table_args__ = (
        UniqueConstraint("sweep_id", "value", "seed", name="uix_sweep_value_seed"),
    )


# -----------------------------
# Engine / session helpers
# -----------------------------
_DEF_URL = "sqlite:///runs/runs.db"


def make_engine(db_url: str = _DEF_URL, echo: bool = False):
    """Create a SQLAlchemy engine. Default is a SQLite file under runs/."""
    return create_engine(db_url, echo=echo)


def create_db_and_tables(engine) -> None:
    SQLModel.metadata.create_all(engine)


def get_session(engine) -> Session:
    return Session(engine)
