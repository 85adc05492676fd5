from __future__ import annotations

import os

from rich.console import Console

console = Console(stderr=True, highlight=False)

_LEVELS = {"quiet": 0, "warning": 0, "info": 1, "debug": 2}


def log_level() -> int:
    """Current verbosity from ``SIF_LOG`` (quiet=0, info=1, debug=2)."""
    return _LEVELS.get(os.environ.get("SIF_LOG", "info").strip().lower(), 1)


def info(message: str) -> None:
    if log_level() >= 1:
        console.print(message)


def debug(message: str) -> None:
    if log_level() >= 2:
        console.log(message)


def warn(message: str) -> None:
    console.print(f"[yellow]{message}[/yellow]")


def error(message: str) -> None:
    console.print(f"[red]{message}[/red]")


def progress_disabled() -> bool:
    return log_level() == 0
