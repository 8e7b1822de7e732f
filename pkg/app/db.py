# app/db.py
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker, declarative_base
import os

DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///./radiosiam.db")

Base = declarative_base()


def make_engine(url: str = DATABASE_URL):
    # sweep workers share the sqlite file from several threads
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, connect_args=connect_args)


def make_session_factory(url: str = DATABASE_URL):
    engine = make_engine(url)
    init_db(engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


def init_db(engine):
    import app.models  # noqa: F401  (registers the tables)
    Base.metadata.create_all(bind=engine)
