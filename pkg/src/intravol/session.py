"""Trading-session grid: a fixed 390-minute session from 09:30 to 16:00.

All return panels live on this grid. A session day has 391 one-minute quote
marks (09:30 .. 16:00 inclusive) and therefore 390 one-minute returns; return
slot ``l`` (0-based) is the return of the minute ending at ``09:30 + (l+1)m``.
Half-day sessions are not representable and are rejected at load time.
"""

from __future__ import annotations

import numpy as np

SESSION_MINUTES = 390
OPEN_MINUTE = 9 * 60 + 30            # minutes after midnight, 09:30
CLOSE_MINUTE = OPEN_MINUTE + SESSION_MINUTES   # 16:00
HALF_HOUR_BUCKETS = 13
VALID_HORIZONS = (10, 30, 65, 390)


def buckets_per_day(horizon: int) -> int:
    """Number of non-overlapping RV buckets per session for a horizon."""
    if horizon <= 0 or SESSION_MINUTES % horizon != 0:
        raise ValueError(
            f"horizon {horizon} does not divide the {SESSION_MINUTES}-minute "
            f"session; divisors include {VALID_HORIZONS}"
        )
    return SESSION_MINUTES // horizon


def trading_days(start: str | np.datetime64, n_days: int) -> np.ndarray:
    """Consecutive weekdays (Mon-Fri) starting at or after ``start``."""
    start = np.datetime64(start, "D")
    return np.busday_offset(start, np.arange(n_days), roll="forward")


def bucket_end_times(calendar: np.ndarray, horizon: int) -> np.ndarray:
    """Bucket-end timestamps, shape (n_days, buckets_per_day), datetime64[m].

    Bucket b of a day ends at 09:30 + (b+1)*horizon minutes.
    """
    nb = buckets_per_day(horizon)
    days = calendar.astype("datetime64[m]")
    offsets = (OPEN_MINUTE + horizon * np.arange(1, nb + 1)).astype("timedelta64[m]")
    return days[:, None] + offsets[None, :]


def minute_mark_times(day: np.datetime64) -> np.ndarray:
    """The 391 quote timestamps of one session day, datetime64[m]."""
    base = np.datetime64(day, "m")
    return base + np.arange(OPEN_MINUTE, CLOSE_MINUTE + 1).astype("timedelta64[m]")


def bucket_label(horizon: int, bucket: int) -> str:
    """Time-of-day label for bucket ``bucket`` (0-based), e.g. '09:30-10:00'."""
    nb = buckets_per_day(horizon)
    if not 0 <= bucket < nb:
        raise ValueError(f"bucket {bucket} out of range for horizon {horizon}")
    start = OPEN_MINUTE + bucket * horizon
    end = start + horizon
    return f"{start // 60:02d}:{start % 60:02d}-{end // 60:02d}:{end % 60:02d}"


def half_hour_label(minute_of_day: int) -> str:
    """Half-hour interval label containing a bucket that ENDS at this minute."""
    # a bucket ending exactly on a half-hour boundary belongs to the interval
    # it closes, hence the -1 before flooring
    idx = (minute_of_day - 1 - OPEN_MINUTE) // 30
    idx = min(max(idx, 0), HALF_HOUR_BUCKETS - 1)
    start = OPEN_MINUTE + idx * 30
    end = start + 30
    return f"{start // 60:02d}:{start % 60:02d}-{end // 60:02d}:{end % 60:02d}"


def format_timestamp(ts: np.datetime64) -> str:
    """Render a minute timestamp as 'YYYY-MM-DD HH:MM'."""
    return str(np.datetime64(ts, "m")).replace("T", " ")


def fmt(x) -> str:
    """Shortest exact decimal form of a float, for delimited output."""
    return repr(float(x))


def parse_timestamp(text: str) -> np.datetime64:
    return np.datetime64(text.strip().replace(" ", "T"), "m")
