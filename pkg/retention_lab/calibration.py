"""
Interaction-log calibration.

Reads a KuaiRand-style log (``user_id,item_id,...`` plus 0/1 behavior
columns) with pandas in chunks and turns per-behavior positive rates into
simulator base logits and inverse-frequency reward weights.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Set, Tuple

import pandas as pd

from retention_lab.exceptions import DegenerateRateError, FormatError
from retention_lab.user_env import BEHAVIORS

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("user_id", "item_id")
NON_BEHAVIOR_COLUMNS = {"user_id", "item_id", "session_id", "timestamp", "time_ms", "date"}
MALFORMED_LIMIT = 0.01
# A column joins the behaviors when at least this share of its values is 0/1.
BINARY_SHARE = 0.5
CHUNK_ROWS = 100_000
BINARY_VALUES = ("0", "1")


@dataclass
class InteractionStats:
    row_count: int = 0
    positives: Dict[str, int] = field(default_factory=dict)
    session_count: int = 0
    malformed: int = 0
    skipped_columns: List[str] = field(default_factory=list)


def behavior_name(column: str) -> str:
    """
    Map a log column to the simulator's behavior name.

    Args:
        column (str): Column name as found in the log header.

    Returns:
        str: ``click``/``long_view``/``like`` for known spellings
        (``is_click``, ``longview``...), otherwise the column name unchanged.
    """
    name = column.strip().lower()
    if name.startswith("is_"):
        name = name[3:]
    name = name.replace("-", "_")
    if name == "longview":
        name = "long_view"
    return name if name in BEHAVIORS else column


def _read_header(path: Path) -> List[str]:
    try:
        header = pd.read_csv(path, nrows=0, dtype=str, quoting=csv.QUOTE_NONE)
    except pd.errors.EmptyDataError:
        raise FormatError(f"{path} is empty (no header row)") from None
    return [str(name).strip() for name in header.columns]


def _chunks(path: Path, header: List[str], overlong: List[List[str]]) -> Iterator[pd.DataFrame]:
    return pd.read_csv(
        path,
        dtype=str,
        quoting=csv.QUOTE_NONE,
        header=0,
        names=header,
        chunksize=CHUNK_ROWS,
        engine="python",
        on_bad_lines=lambda line: overlong.append(line),
    )


def _binary_columns(path: Path, header: List[str], candidates: List[str]) -> List[str]:
    """
    First pass: keep the candidate columns whose values are mostly 0/1.

    Args:
        path (Path): Interaction log.
        header (List[str]): Parsed header row.
        candidates (List[str]): Columns that are not ids or timestamps.

    Returns:
        List[str]: Candidates in header order with at least ``BINARY_SHARE``
        of their non-empty values in {0, 1}. An empty log keeps every candidate.
    """
    binary = {c: 0 for c in candidates}
    filled = {c: 0 for c in candidates}
    for chunk in _chunks(path, header, []):
        values = chunk[candidates].apply(lambda col: col.str.strip())
        filled_mask = values.notna() & (values != "")
        for c in candidates:
            filled[c] += int(filled_mask[c].sum())
            binary[c] += int(values[c].isin(BINARY_VALUES).sum())
    return [c for c in candidates if filled[c] == 0 or binary[c] >= BINARY_SHARE * filled[c]]


def load_interactions(path: str | Path) -> InteractionStats:
    """
    Count rows, per-behavior positives and sessions.

    Columns that are neither ids nor mostly 0/1 (play time, durations) are
    skipped. Behavior columns are reported under their simulator names.

    Args:
        path (str | Path): CSV log with a header row.

    Returns:
        InteractionStats: Counts over the rows whose behavior values are all 0/1.

    Raises:
        FileNotFoundError: When the log does not exist.
        FormatError: When ``user_id``/``item_id`` or every behavior column is
            missing, or more than 1% of the rows are malformed.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Interaction log not found: {path}")

    header = _read_header(path)
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise FormatError(f"{path} lacks required columns {missing}")
    candidates = [c for c in header if c not in NON_BEHAVIOR_COLUMNS]
    columns = _binary_columns(path, header, candidates) if candidates else []
    if not columns:
        raise FormatError(f"{path} has no behavior column")
    skipped = [c for c in candidates if c not in columns]
    if skipped:
        logger.info("Ignoring non-binary columns in %s: %s.", path, ", ".join(skipped))
    names = {c: behavior_name(c) for c in columns}
    session_key = "session_id" if "session_id" in header else "user_id"

    stats = InteractionStats(positives={names[c]: 0 for c in columns}, skipped_columns=skipped)
    sessions: Set[Tuple[str, str]] = set()
    overlong: List[List[str]] = []
    total = 0
    for chunk in _chunks(path, header, overlong):
        total += len(chunk)
        values = chunk[columns].apply(lambda col: col.str.strip())
        valid = values.isin(BINARY_VALUES).all(axis=1) & chunk["user_id"].notna()
        stats.malformed += int((~valid).sum())
        good = values[valid]
        stats.row_count += len(good)
        for c in columns:
            stats.positives[names[c]] += int((good[c] == "1").sum())
        keys = chunk.loc[valid, ["user_id", session_key]]
        sessions.update(zip(keys.iloc[:, 0], keys.iloc[:, 1]))

    stats.malformed += len(overlong)
    total += len(overlong)
    stats.session_count = len(sessions)
    if total and stats.malformed / total > MALFORMED_LIMIT:
        raise FormatError(
            f"{path}: {stats.malformed} of {total} rows malformed (limit {MALFORMED_LIMIT:.0%})"
        )
    if stats.malformed:
        logger.warning("Skipped %d malformed rows in %s.", stats.malformed, path)
    logger.info(
        "Loaded %d interactions (%d sessions) from %s; behaviors: %s.",
        stats.row_count,
        stats.session_count,
        path,
        ", ".join(stats.positives),
    )
    return stats


def fit_rates(stats: InteractionStats) -> Tuple[Dict[str, float], Dict[str, float]]:
    """
    Turn positive counts into reward weights and base logits.

    Args:
        stats (InteractionStats): Output of ``load_interactions``.

    Returns:
        Tuple[Dict[str, float], Dict[str, float]]: ``omega``, inverse-rate
        weights scaled so the largest is 1, and ``c``, base logits ln(p / (1 - p)).

    Raises:
        FormatError: On a log without valid rows.
        DegenerateRateError: When a behavior is never or always positive.
    """
    if stats.row_count <= 0:
        raise FormatError("cannot fit rates on an empty interaction log")
    rates: Dict[str, float] = {}
    for behavior, count in stats.positives.items():
        p = count / stats.row_count
        if p <= 0.0 or p >= 1.0:
            raise DegenerateRateError(behavior, p)
        rates[behavior] = p
    c = {b: math.log(p / (1.0 - p)) for b, p in rates.items()}
    inverse = {b: 1.0 / p for b, p in rates.items()}
    top = max(inverse.values())
    omega = {b: w / top for b, w in inverse.items()}
    return omega, c


def write_calibration(path: str | Path, omega: Dict[str, float], c: Dict[str, float]) -> Path:
    """
    Write ``calib.omega.<behavior>`` / ``calib.c.<behavior>`` lines in config syntax.

    Behaviors the simulator does not model are left out with a warning; the
    remaining weights are rescaled so the largest is 1.

    Args:
        path (str | Path): Output file; parent folders are created.
        omega (Dict[str, float]): Reward weights from ``fit_rates``.
        c (Dict[str, float]): Base logits from ``fit_rates``.

    Returns:
        Path: The written file.

    Raises:
        FormatError: When none of the behaviors is modelled by the simulator.
    """
    unknown = sorted(b for b in omega if b not in BEHAVIORS)
    kept = [b for b in BEHAVIORS if b in omega]
    if not kept:
        raise FormatError(
            f"no log behavior matches the simulator's {list(BEHAVIORS)}; got {unknown}"
        )
    if unknown:
        logger.warning("Behaviors not modelled by the simulator, left out: %s.", ", ".join(unknown))
    top = max(omega[b] for b in kept)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode="w", encoding="utf-8") as fh:
        fh.write("# behavior weights and base logits fitted from an interaction log\n")
        for behavior in kept:
            fh.write(f"calib.omega.{behavior} = {omega[behavior] / top!r}\n")
        for behavior in kept:
            fh.write(f"calib.c.{behavior} = {c[behavior]!r}\n")
    logger.info("Calibration written to %s", path)
    return path
