"""Read WiFi logs, AP mappings and class schedules; anonymize devices.

Raw MAC ids never leave this module: :func:`anonymize` swaps them for salted
SHA-256 digests and replaces each SSID with the building it is installed in.
"""

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_COLUMNS = ("mac_id", "wifi_id", "log_date")
MAPPING_COLUMNS = ("wifi_id", "building_id", "lat", "lon")
SCHEDULE_COLUMNS = ("building_id", "interval_start", "enrolment_no")
ANON_COLUMNS = ("hash_id", "building_id", "log_date")


class SchemaError(ValueError):
    """Input file lacks a required column or is not delimiter-separated text."""


class RawLogRecord(NamedTuple):
    mac_id: str
    wifi_id: str
    log_date: pd.Timestamp


class AnonLogRecord(NamedTuple):
    hash_id: str
    building_id: str
    log_date: pd.Timestamp


@dataclass(frozen=True)
class ApMapping:
    wifi_id: str
    building_id: str
    lat: float
    lon: float


@dataclass
class ParsedLog:
    frame: pd.DataFrame  # mac_id, wifi_id, log_date (datetime64)
    skipped: int = 0

    def records(self):
        for row in self.frame.itertuples(index=False):
            yield RawLogRecord(row.mac_id, row.wifi_id, row.log_date)

    def __len__(self):
        return len(self.frame)


@dataclass
class DropCounts:
    rows_in: int = 0
    skipped_rows: int = 0
    unmapped_ssid: int = 0
    rows_out: int = 0
    unmapped_ids: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "rows_in": self.rows_in,
            "skipped_rows": self.skipped_rows,
            "unmapped_ssid": self.unmapped_ssid,
            "rows_out": self.rows_out,
            "unmapped_ssid_by_id": dict(sorted(self.unmapped_ids.items())),
        }


def _read_text(source):
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            data = fh.read()
    elif hasattr(source, "read"):
        data = source.read()
    else:
        data = source
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    if data.startswith("\ufeff"):
        data = data[1:]
    return data.replace("\x00", "")


def _read_table(source, required, schema=None):
    """Header row + data rows of a CSV source, with required columns resolved.

    Returns ``(columns, rows, skipped)``; ``columns`` maps each required name to
    its position.  Rows whose field count differs from the header are skipped.
    """
    schema = dict(schema or {})
    text = _read_text(source)
    try:
        reader = csv.reader(io.StringIO(text, newline=""))
        header = next(reader, None)
        if header is None:
            raise SchemaError("empty input: no header row")
        header = [h.strip() for h in header]
        cols = {}
        for name in required:
            actual = schema.get(name, name)
            if actual not in header:
                raise SchemaError(f"missing required column {actual!r} (have {header})")
            cols[name] = header.index(actual)
        rows, skipped = [], 0
        width = len(header)
        for row in reader:
            if not row:
                continue
            if len(row) != width:
                skipped += 1
                continue
            rows.append(row)
    except csv.Error as exc:
        raise SchemaError(f"not parseable as CSV: {exc}") from exc
    return cols, rows, skipped


def parse_timestamps(values):
    """Strict ``YYYY-MM-DD HH:MM:SS`` parsing; invalid entries become NaT."""
    return pd.to_datetime(pd.Series(values, dtype=object), format=TIMESTAMP_FORMAT, errors="coerce")


def parse_log_file(source, schema=None):
    """Parse a WiFi log CSV.

    ``schema`` optionally maps the canonical names ``mac_id``, ``wifi_id`` and
    ``log_date`` to the column names used in the file.  Rows with an
    unparseable timestamp, an empty id or the wrong number of fields are
    skipped and counted.
    """
    cols, rows, skipped = _read_table(source, LOG_COLUMNS, schema)
    if not rows:
        empty = pd.DataFrame({"mac_id": pd.Series([], dtype=object), "wifi_id": pd.Series([], dtype=object),
                              "log_date": pd.Series([], dtype="datetime64[ns]")})
        return ParsedLog(empty, skipped)
    cm, cw, cd = cols["mac_id"], cols["wifi_id"], cols["log_date"]
    frame = pd.DataFrame(
        {
            "mac_id": [r[cm].strip() for r in rows],
            "wifi_id": [r[cw].strip() for r in rows],
            "log_date": parse_timestamps([r[cd].strip() for r in rows]),
        }
    )
    ok = frame["log_date"].notna() & (frame["mac_id"] != "") & (frame["wifi_id"] != "")
    skipped += int((~ok).sum())
    frame = frame[ok].reset_index(drop=True)
    return ParsedLog(frame, skipped)


def hash_mac(mac_id, salt):
    """Lowercase hex SHA-256 of ``salt || mac_id``."""
    if not mac_id:
        raise ValueError("mac_id must be non-empty")
    if isinstance(salt, str):
        salt = salt.encode("utf-8")
    return hashlib.sha256(salt + mac_id.encode("utf-8")).hexdigest()


def load_ap_mapping(source):
    cols, rows, skipped = _read_table(source, MAPPING_COLUMNS)
    if skipped:
        raise SchemaError(f"AP mapping has {skipped} malformed rows")
    mapping = {}
    for r in rows:
        wifi_id = r[cols["wifi_id"]].strip()
        building = r[cols["building_id"]].strip()
        lat = float(r[cols["lat"]])
        lon = float(r[cols["lon"]])
        if not wifi_id or not building:
            raise ValueError("AP mapping rows need a wifi_id and a building_id")
        if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
            raise ValueError(f"coordinates out of range for {wifi_id!r}: ({lat}, {lon})")
        if wifi_id in mapping:
            raise ValueError(f"duplicate wifi_id {wifi_id!r} in AP mapping")
        mapping[wifi_id] = ApMapping(wifi_id, building, lat, lon)
    return mapping


def building_locations(mapping):
    """One (lat, lon) per building: the mean over its access points."""
    acc = {}
    for ap in mapping.values():
        acc.setdefault(ap.building_id, []).append((ap.lat, ap.lon))
    return {b: tuple(np.mean(v, axis=0).tolist()) for b, v in sorted(acc.items())}


def load_schedule(source):
    cols, rows, skipped = _read_table(source, SCHEDULE_COLUMNS)
    if skipped:
        raise SchemaError(f"schedule has {skipped} malformed rows")
    frame = pd.DataFrame(
        {
            "building_id": [r[cols["building_id"]].strip() for r in rows],
            "interval_start": parse_timestamps([r[cols["interval_start"]].strip() for r in rows]),
            "enrolment_no": [float(r[cols["enrolment_no"]]) for r in rows],
        }
    )
    if frame["interval_start"].isna().any():
        raise ValueError("schedule has unparseable interval_start values")
    if (frame["enrolment_no"] < 0).any():
        raise ValueError("enrolment_no must be nonnegative")
    return frame


def resolve_building(record, mapping, salt, counts=None):
    """Anonymize one record.  Unknown SSIDs return ``None`` and bump ``counts``."""
    ap = mapping.get(record.wifi_id)
    if ap is None:
        if counts is not None:
            counts.unmapped_ssid += 1
            counts.unmapped_ids[record.wifi_id] = counts.unmapped_ids.get(record.wifi_id, 0) + 1
        return None
    return AnonLogRecord(hash_mac(record.mac_id, salt), ap.building_id, record.log_date)


def anonymize(parsed, mapping, salt):
    """Vectorized :func:`resolve_building` over a :class:`ParsedLog`.

    Returns ``(frame, counts)`` with ``frame`` columns ``hash_id, building_id,
    log_date`` in input order.
    """
    frame = parsed.frame
    counts = DropCounts(rows_in=len(frame) + parsed.skipped, skipped_rows=parsed.skipped)
    ssid_to_building = {k: v.building_id for k, v in mapping.items()}
    buildings = frame["wifi_id"].map(ssid_to_building)
    known = buildings.notna()
    if (~known).any():
        missing = frame.loc[~known, "wifi_id"].value_counts()
        counts.unmapped_ssid = int(missing.sum())
        counts.unmapped_ids = {str(k): int(v) for k, v in missing.items()}
    kept = frame[known]
    uniq = pd.unique(kept["mac_id"])
    digests = {m: hash_mac(m, salt) for m in uniq}
    out = pd.DataFrame(
        {
            "hash_id": kept["mac_id"].map(digests).to_numpy(),
            "building_id": buildings[known].to_numpy(),
            "log_date": kept["log_date"].to_numpy(),
        }
    )
    counts.rows_out = len(out)
    return out, counts


def write_anon_log(frame, path, counts=None):
    """Write the anonymized CSV and, if given, a ``<name>.drops.json`` sidecar."""
    path = Path(path)
    out = frame.loc[:, list(ANON_COLUMNS)].copy()
    out["log_date"] = out["log_date"].dt.strftime(TIMESTAMP_FORMAT)
    out.to_csv(path, index=False)
    if counts is not None:
        with open(path.with_suffix(".drops.json"), "w") as fh:
            json.dump(counts.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def read_anon_log(source):
    cols, rows, skipped = _read_table(source, ANON_COLUMNS)
    if skipped:
        log.warning("anonymized log: %d malformed rows skipped", skipped)
    frame = pd.DataFrame(
        {
            "hash_id": [r[cols["hash_id"]] for r in rows],
            "building_id": [r[cols["building_id"]] for r in rows],
            "log_date": parse_timestamps([r[cols["log_date"]] for r in rows]),
        }
    )
    bad = frame["log_date"].isna()
    if bad.any():
        log.warning("anonymized log: %d rows with bad timestamps dropped", int(bad.sum()))
        frame = frame[~bad].reset_index(drop=True)
    return frame
