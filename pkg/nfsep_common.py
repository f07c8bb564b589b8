#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep - Common Utilities

Shared helpers used by every NFSep module and command:
- Terminal colours and tagged log lines
- Time formatting, boxes and progress bars
- The exception hierarchy and CLI exit codes
- The flat binary container used for spectrogram, model and posterior dumps
- The relative-change stopping rule shared by all iterative engines
"""

import math
import os
from typing import List, Sequence, Tuple

import numpy as np

# ============================================================
# Color and Display Utilities
# ============================================================


class Colors:
    """ANSI color codes for terminal output"""

    RED = "\033[0;31m"
    GREEN = "\033[0;32m"
    YELLOW = "\033[1;33m"
    BLUE = "\033[0;34m"
    CYAN = "\033[0;36m"
    MAGENTA = "\033[0;35m"
    BOLD = "\033[1m"
    DIM = "\033[2m"
    NC = "\033[0m"  # No Color

    @classmethod
    def disable(cls):
        """Disable colors for non-TTY output"""
        cls.RED = cls.GREEN = cls.YELLOW = cls.BLUE = ""
        cls.CYAN = cls.MAGENTA = cls.BOLD = cls.DIM = cls.NC = ""


def log_info(msg: str):
    print(f"{Colors.GREEN}[INFO]{Colors.NC} {msg}")


def log_warn(msg: str):
    print(f"{Colors.YELLOW}[WARN]{Colors.NC} {msg}")


def log_error(msg: str):
    print(f"{Colors.RED}[ERROR]{Colors.NC} {msg}")


def log_step(msg: str):
    print(f"{Colors.MAGENTA}[STEP]{Colors.NC} {msg}")


def format_time(seconds: float) -> str:
    """Format seconds to human-readable time"""
    if seconds < 1:
        return f"{seconds * 1000:.1f}ms"
    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        mins, secs = divmod(int(seconds), 60)
        return f"{mins}m{secs}s"
    else:
        hours, remainder = divmod(int(seconds), 3600)
        mins = remainder // 60
        return f"{hours}h{mins}m"


def draw_box(title: str, subtitle: str = "", color: str = None) -> str:
    """Draw a text box with title"""
    if color is None:
        color = Colors.BLUE
    width = max(50, len(title) + 6, len(subtitle) + 6)
    width = min(80, width)

    line = "═" * width

    pad_left = (width - len(title)) // 2
    pad_right = width - len(title) - pad_left
    title_line = f"║{' ' * pad_left}{title}{' ' * pad_right}║"

    result = f"{color}╔{line}╗{Colors.NC}\n"
    result += f"{color}{title_line}{Colors.NC}\n"

    if subtitle:
        pad_left = (width - len(subtitle)) // 2
        pad_right = width - len(subtitle) - pad_left
        subtitle_line = f"║{' ' * pad_left}{subtitle}{' ' * pad_right}║"
        result += f"{color}{subtitle_line}{Colors.NC}\n"

    result += f"{color}╚{line}╝{Colors.NC}"
    return result


def draw_progress_bar(current: int, total: int, width: int = 40) -> str:
    """Draw a progress bar"""
    if total == 0:
        return "░" * width

    filled = int(current * width / total)
    empty = width - filled
    return "█" * filled + "░" * empty


def show_progress(current: int, total: int, elapsed: float, label: str = ""):
    """Show a single-line progress bar with ETA"""
    if total <= 0:
        return

    percentage = current * 100 // total
    bar = draw_progress_bar(current, total)
    line = f"{Colors.CYAN}[{bar}]{Colors.NC} {Colors.BOLD}{percentage}%{Colors.NC} ({current}/{total})"

    if 0 < current < total:
        eta = elapsed / current * (total - current)
        line += f" | Elapsed: {format_time(elapsed)} | ETA: {Colors.YELLOW}{format_time(eta)}{Colors.NC}"
    else:
        line += f" | Elapsed: {format_time(elapsed)}"
    if label:
        line += f" {Colors.DIM}{label}{Colors.NC}"

    end = "\n" if current >= total else ""
    print(f"\r\033[K{line}", end=end, flush=True)


# ============================================================
# Errors and Exit Codes
# ============================================================

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_NUMERICAL = 5


class NfsepError(Exception):
    """Base class for all NFSep errors"""

    exit_code = EXIT_FAILURE


class AudioIOError(NfsepError):
    """Missing, unreadable or unsupported input/output file"""

    exit_code = EXIT_IO


class ValidationError(NfsepError, ValueError):
    """Invalid configuration, dimensions or input data"""

    exit_code = EXIT_VALIDATION


class EmptySpectrogramError(ValidationError):
    """Spectrogram without any quanta"""


class LatticeLimitError(ValidationError):
    """Joint state lattice larger than the configured limit"""


class NumericalError(NfsepError, ArithmeticError):
    """Numerical failure during inference or training"""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, iteration: int = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class ZeroSupportError(NumericalError):
    """Observed quanta in a frequency bin no dictionary element covers"""


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(error, NfsepError):
        return error.exit_code
    if isinstance(error, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return EXIT_IO
    return EXIT_FAILURE


# ============================================================
# Binary Container
# ============================================================
#
# Layout (little-endian):
#   magic        8 bytes
#   n_header     int64
#   header       n_header x int64
#   payload      float64, row-major, arrays concatenated in order

MAGIC_LENGTH = 8


def write_container(
    path: str, magic: bytes, header: Sequence[int], arrays: Sequence[np.ndarray]
):
    """Write integer header fields followed by float64 arrays"""
    if len(magic) != MAGIC_LENGTH:
        raise ValidationError(f"Container magic must be {MAGIC_LENGTH} bytes")

    header_block = np.asarray([len(header), *header], dtype="<i8")
    payload = [np.ascontiguousarray(a, dtype="<f8").ravel() for a in arrays]

    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(header_block.tobytes())
        for block in payload:
            f.write(block.tobytes())


def read_container(path: str, magic: bytes) -> Tuple[List[int], np.ndarray]:
    """Read a container written by write_container, checking its magic"""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except (IOError, OSError) as e:
        raise AudioIOError(f"Cannot read {path}: {e}") from e

    if raw[:MAGIC_LENGTH] != magic:
        raise AudioIOError(f"{path}: bad magic, expected {magic!r}")

    offset = MAGIC_LENGTH
    if len(raw) < offset + 8:
        raise AudioIOError(f"{path}: truncated header")
    n_header = int(np.frombuffer(raw, dtype="<i8", count=1, offset=offset)[0])
    offset += 8
    if n_header < 0 or len(raw) < offset + 8 * n_header:
        raise AudioIOError(f"{path}: truncated header")
    header = np.frombuffer(raw, dtype="<i8", count=n_header, offset=offset)
    offset += 8 * n_header

    if (len(raw) - offset) % 8 != 0:
        raise AudioIOError(f"{path}: payload is not a whole number of float64 values")
    payload = np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64)
    return [int(h) for h in header], payload


def split_payload(
    path: str, payload: np.ndarray, shapes: Sequence[Tuple[int, ...]]
) -> List[np.ndarray]:
    """Cut a container payload into arrays of the given shapes"""
    sizes = [int(np.prod(s)) for s in shapes]
    if sum(sizes) != payload.size:
        raise AudioIOError(
            f"{path}: payload has {payload.size} values, header implies {sum(sizes)}"
        )
    arrays = []
    offset = 0
    for shape, size in zip(shapes, sizes):
        arrays.append(payload[offset : offset + size].reshape(shape).copy())
        offset += size
    return arrays


# ============================================================
# Convergence
# ============================================================


def relative_change(previous: float, current: float) -> float:
    """|current - previous| / |previous|, infinite when undefined"""
    if not (math.isfinite(previous) and math.isfinite(current)):
        return math.inf
    if previous == 0:
        return 0.0 if current == 0 else math.inf
    return abs(current - previous) / abs(previous)


def has_converged(trace: Sequence[float], rel_tol: float) -> bool:
    """
    Stopping rule shared by every iterative engine.

    An infinite tolerance stops after the first iteration; otherwise the
    last two monitor values must differ by less than rel_tol relatively.
    """
    if math.isinf(rel_tol) and len(trace) >= 1:
        return True
    if len(trace) < 2:
        return False
    return relative_change(trace[-2], trace[-1]) < rel_tol
