#!/usr/bin/env python3
"""
Process-level configuration for the YOLOv12 desk toolkit.

Values come from the environment (optionally a local .env file) and act as
defaults; explicit function or CLI arguments always win.
"""

import logging
import os

from dotenv import load_dotenv

load_dotenv()

# ========= 🔧 CONFIG ========= #
LOG_LEVEL = os.getenv("YOLO12_LOG_LEVEL", "INFO")
DEFAULT_THREADS = int(os.getenv("YOLO12_THREADS", "1"))
DEFAULT_TILE_ROWS = int(os.getenv("YOLO12_TILE_ROWS", "64"))
DEFAULT_TILE_COLS = int(os.getenv("YOLO12_TILE_COLS", "64"))
DEFAULT_AREA_COUNT = int(os.getenv("YOLO12_AREA_COUNT", "4"))

# Benchmark timing protocol
BENCH_WARMUP = int(os.getenv("YOLO12_BENCH_WARMUP", "5"))
BENCH_REPEATS = max(30, int(os.getenv("YOLO12_BENCH_REPEATS", "30")))

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = LOG_LEVEL) -> None:
    """Install the root handler. Only entry points call this."""
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT)
