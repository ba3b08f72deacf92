#!/usr/bin/env python3
"""Logging helpers shared across the orsg commands."""

import json
import logging
import os
from datetime import datetime, timezone
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

import pandas as pd

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
DEFAULT_MAX_BYTES = 5 * 1024 * 1024
DEFAULT_BACKUPS = 10
ROOT_LOGGER = "orsg"


def _log_dir() -> Path:
    log_dir = Path(os.getenv("ORSG_LOG_DIR", "logs"))
    log_dir.mkdir(parents=True, exist_ok=True)
    return log_dir


def _log_path(name: str, run_id: Optional[str]) -> Path:
    prefix = run_id or os.getenv("ORSG_RUN_ID")
    filename = f"{name}_{prefix}.log" if prefix else f"{name}.log"
    return _log_dir() / filename


def new_run_id() -> str:
    """Reuse ORSG_RUN_ID when set, otherwise stamp a new one and export it."""
    run_id = os.getenv("ORSG_RUN_ID") or datetime.now(timezone.utc).strftime("%Y%m%d%H%M%S")
    os.environ["ORSG_RUN_ID"] = run_id
    return run_id


def configure_logger(
    name: str = ROOT_LOGGER,
    level: Optional[str] = None,
    run_id: Optional[str] = None,
    to_file: bool = True,
) -> logging.Logger:
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger

    log_level = level or os.getenv("ORSG_LOG_LEVEL", "INFO")
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    formatter = logging.Formatter(LOG_FORMAT)

    if to_file:
        log_file = _log_path(name, run_id)
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=int(os.getenv("ORSG_LOG_MAX_BYTES", DEFAULT_MAX_BYTES)),
            backupCount=int(os.getenv("ORSG_LOG_BACKUPS", DEFAULT_BACKUPS)),
            encoding="utf-8",
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
        logger.debug("Logger configured: %s", log_file)

    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)
    logger.addHandler(stream_handler)
    return logger


def get_logger(module: str) -> logging.Logger:
    """Child of the package logger; handlers are attached once by the CLI."""
    return logging.getLogger(f"{ROOT_LOGGER}.{module}")


def append_json_line(path, record: dict) -> None:
    """Append one machine-readable record (training curves, validation metrics)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_json_lines(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return pd.DataFrame()
    return pd.read_json(path, lines=True)
