"""Reporting-triangle construction from sequential data releases.

A release snapshot is a cumulative count per event date as known on its
release date. Differencing consecutive releases attributes counts to delay
bins: the release dated at the boundary that closes time bin b reports bin b
at delay 0, so a report for event bin t appearing in the release at release
bin r carries delay d = r - 1 - t. Counts with delay >= D accumulate in the
final column.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GapError, ParseError

DEFAULT_MAX_DELAY = 10  # bins; matches the weekly production setting
DEFAULT_BIN_WIDTH = 7  # days


@dataclass(frozen=True)
class ReleaseSnapshot:
    """One dated release: cumulative counts per event date."""

    release_date: dt.date
    rows: tuple[tuple[dt.date, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple((d, int(c)) for d, c in self.rows))
        seen = set()
        for d, c in self.rows:
            if d > self.release_date:
                raise DomainError(
                    f"event date {d} is after release date {self.release_date}"
                )
            if c < 0:
                raise DomainError(f"negative count {c} for event date {d}")
            if d in seen:
                raise DomainError(f"duplicate event date {d}")
            seen.add(d)

    @property
    def total(self) -> int:
        return sum(c for _, c in self.rows)


@dataclass
class ReportingTriangle:
    """Counts per (time bin, delay bin) with the as-of-now observation mask."""

    n: np.ndarray  # (T, D+1) int64
    mask: np.ndarray  # (T, D+1) bool
    T: int
    D: int
    bin_width: int
    now: dt.date
    origin: dt.date  # start of time bin 0
    negatives_clamped: int = 0

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.n.shape != (self.T, self.D + 1) or self.mask.shape != self.n.shape:
            raise DomainError("triangle arrays must be T x (D+1)")
        if (self.n < 0).any():
            raise DomainError("triangle counts must be >= 0")


@dataclass(frozen=True)
class MarginalSeries:
    """Per-time-bin totals n_t with their provenance."""

    values: np.ndarray
    provenance: str  # raw | truth | nowcast-draw

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values))


def parse_release(text: str, release_date: dt.date) -> ReleaseSnapshot:
    """Parse one delimited snapshot body with header ``event_date,count``."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file, expected header 'event_date,count'", line=1)
    if [h.strip().lower() for h in header[:2]] != ["event_date", "count"]:
        raise ParseError(f"expected header 'event_date,count', got {','.join(header)}", line=1)
    rows = []
    seen: dict[dt.date, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) < 2:
            raise ParseError("expected two fields 'event_date,count'", line=lineno)
        try:
            date = dt.date.fromisoformat(row[0].strip())
        except ValueError:
            raise ParseError(f"malformed date {row[0].strip()!r}", line=lineno)
        try:
            count = int(row[1].strip())
        except ValueError:
            raise ParseError(f"malformed count {row[1].strip()!r}", line=lineno)
        if count < 0:
            raise ParseError(f"negative count {count}", line=lineno)
        if date in seen:
            raise ParseError(f"duplicate event_date {date}", line=lineno)
        seen[date] = lineno
        rows.append((date, count))
    rows.sort(key=lambda r: r[0])
    try:
        return ReleaseSnapshot(release_date=release_date, rows=tuple(rows))
    except DomainError as exc:
        raise ParseError(str(exc)) from exc


def build_triangle(
    snapshots: list[ReleaseSnapshot],
    max_delay: int = DEFAULT_MAX_DELAY,
    bin_width: int = DEFAULT_BIN_WIDTH,
    now: dt.date | None = None,
) -> ReportingTriangle:
    """Difference cumulative releases into a reporting triangle.

    Requires one release at every bin boundary from the first complete bin
    through ``now`` (which must itself be a release on a bin boundary); a hole
    in that ladder raises GapError. Negative increments are clipped to zero
    and counted in ``negatives_clamped``.
    """
    if len(snapshots) < 2:
        raise DomainError("need at least two snapshots")
    if max_delay < 1:
        raise DomainError("max_delay must be >= 1")
    dates = [s.release_date for s in snapshots]
    if any(b <= a for a, b in zip(dates, dates[1:])):
        raise DomainError("snapshots must have strictly increasing release dates")
    if now is None:
        now = dates[-1]
    snapshots = [s for s in snapshots if s.release_date <= now]
    if len(snapshots) < 2:
        raise DomainError(f"fewer than two releases on or before {now}")

    origin = min(d for s in snapshots for d, _ in s.rows)
    if (now - origin).days % bin_width != 0:
        raise DomainError(
            f"now={now} is not a bin boundary for origin={origin}, width={bin_width}"
        )
    T = (now - origin).days // bin_width
    if T < 1:
        raise DomainError("no complete time bin before now")
    D = max_delay

    # Cumulative counts per event bin, per release bin. Releases inside the
    # first event bin (release bin 0) cover no complete bin and are dropped.
    by_release_bin: dict[int, np.ndarray] = {}
    for snap in snapshots:
        rbin = (snap.release_date - origin).days // bin_width
        if rbin < 1:
            continue
        if rbin in by_release_bin:
            raise DomainError(
                f"two releases fall in the same bin ending {origin + dt.timedelta(days=rbin * bin_width)}"
            )
        cum = np.zeros(T, dtype=np.int64)
        for date, count in snap.rows:
            tbin = (date - origin).days // bin_width
            if tbin < T:
                cum[tbin] += count
        by_release_bin[rbin] = cum

    required = range(1, T + 1)
    missing = [r for r in required if r not in by_release_bin]
    if missing:
        raise GapError([origin + dt.timedelta(days=r * bin_width) for r in missing])

    n = np.zeros((T, D + 1), dtype=np.int64)
    mask = np.zeros((T, D + 1), dtype=bool)
    clamped = 0
    horizon = T - 1  # release at `now` has release bin T => max observed t+d
    for t in range(T):
        prev = 0
        for d in range(min(D, horizon - t) + 1):
            if d == D:
                cum = int(by_release_bin[T][t])  # accumulate everything later
            else:
                cum = int(by_release_bin[t + d + 1][t])
            inc = cum - prev
            prev = cum
            if inc < 0:
                inc = 0
                clamped += 1
            n[t, d] = inc
            mask[t, d] = True
    return ReportingTriangle(
        n=n, mask=mask, T=T, D=D, bin_width=bin_width, now=now, origin=origin,
        negatives_clamped=clamped,
    )


def marginal_totals(tri: ReportingTriangle, provenance: str = "raw") -> MarginalSeries:
    """Row sums n_t; raw provenance sums observed cells only."""
    if provenance == "raw":
        values = (tri.n * tri.mask).sum(axis=1)
    else:
        values = tri.n.sum(axis=1)
    return MarginalSeries(values=values, provenance=provenance)


def delay_distribution(tri: ReportingTriangle) -> tuple[np.ndarray, np.ndarray]:
    """Per-row delay fractions plus a flag vector marking zero-total rows."""
    totals = tri.n.sum(axis=1).astype(float)
    zero = totals == 0
    safe = np.where(zero, 1.0, totals)
    frac = tri.n / safe[:, None]
    frac[zero] = 0.0
    return frac, zero


def write_triangle(tri: ReportingTriangle, path) -> None:
    """Serialize as ``t,d,count,observed`` with a metadata header block."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# T={tri.T}\n")
        fh.write(f"# D={tri.D}\n")
        fh.write(f"# bin_width={tri.bin_width}\n")
        fh.write(f"# now={tri.now.isoformat()}\n")
        fh.write(f"# origin={tri.origin.isoformat()}\n")
        fh.write(f"# negatives_clamped={tri.negatives_clamped}\n")
        writer = csv.writer(fh)
        writer.writerow(["t", "d", "count", "observed"])
        for t in range(tri.T):
            for d in range(tri.D + 1):
                writer.writerow([t, d, int(tri.n[t, d]), int(tri.mask[t, d])])


def read_triangle(path) -> ReportingTriangle:
    """Inverse of `write_triangle`."""
    meta: dict[str, str] = {}
    body: list[str] = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            else:
                body.append(line)
    try:
        T = int(meta["T"])
        D = int(meta["D"])
        bin_width = int(meta["bin_width"])
        now = dt.date.fromisoformat(meta["now"])
        origin = dt.date.fromisoformat(meta["origin"])
        clamped = int(meta.get("negatives_clamped", "0"))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad triangle metadata header: {exc}")
    n = np.zeros((T, D + 1), dtype=np.int64)
    mask = np.zeros((T, D + 1), dtype=bool)
    reader = csv.reader(body)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["t", "d", "count", "observed"]:
        raise ParseError("expected header 't,d,count,observed'")
    for row in reader:
        if not row:
            continue
        t, d, count, observed = int(row[0]), int(row[1]), int(row[2]), int(row[3])
        n[t, d] = count
        mask[t, d] = bool(observed)
    return ReportingTriangle(
        n=n, mask=mask, T=T, D=D, bin_width=bin_width, now=now, origin=origin,
        negatives_clamped=clamped,
    )


def emit_snapshots(
    n: np.ndarray, origin: dt.date, bin_width: int = DEFAULT_BIN_WIDTH
) -> list[ReleaseSnapshot]:
    """Emit the cumulative release ladder a complete triangle implies.

    Inverse of `build_triangle` for clean data: releases at bins 1..T+D,
    where the release at bin r reports event bin t cumulatively through
    delay r - 1 - t. Event dates collapse to bin start dates.
    """
    n = np.asarray(n, dtype=np.int64)
    T, Dp1 = n.shape
    D = Dp1 - 1
    cum = np.cumsum(n, axis=1)
    out = []
    for r in range(1, T + D + 1):
        rows = []
        for t in range(min(r, T)):
            d = min(r - 1 - t, D)
            rows.append((origin + dt.timedelta(days=t * bin_width), int(cum[t, d])))
        out.append(
            ReleaseSnapshot(
                release_date=origin + dt.timedelta(days=r * bin_width), rows=tuple(rows)
            )
        )
    return out
