from sqlalchemy import Column, Integer, String, DateTime, Float, ForeignKey, Text
from sqlalchemy.orm import relationship
from datetime import datetime
from .db import Base


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"
    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False)  # synth | pretrain | extract | evaluate | sweep
    seed = Column(Integer, nullable=True)
    config_json = Column(Text, nullable=True)
    status = Column(String, default="running")  # running, completed, failed
    out_dir = Column(String, nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    sweep_points = relationship("SweepPoint", back_populates="run")
    metrics = relationship("MetricRecord", back_populates="run")


class SweepPoint(Base):
    __tablename__ = "sweep_points"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), nullable=False, index=True)
    param = Column(String, nullable=False)  # k | batch
    value = Column(Integer, nullable=False)
    repeat = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)
    auc = Column(Float, nullable=True)
    minor_recall = Column(Float, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("ExperimentRun", back_populates="sweep_points")


class MetricRecord(Base):
    __tablename__ = "metric_records"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), nullable=False, index=True)
    feature_set = Column(String, nullable=True)
    name = Column(String, nullable=False)
    value = Column(Float, nullable=True)

    run = relationship("ExperimentRun", back_populates="metrics")
