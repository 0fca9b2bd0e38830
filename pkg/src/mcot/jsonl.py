"""Line-delimited JSON, the interchange format for every file this
package reads or writes."""

from __future__ import annotations

import json
from pathlib import Path
from typing import IO, Iterable


def dumps_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def write_records(target: Path | str | IO[str], records: Iterable[dict]) -> int:
    """Write one record per line; returns the number written."""
    if hasattr(target, "write"):
        return _write_stream(target, records)
    with open(target, "w", encoding="utf-8") as fh:
        return _write_stream(fh, records)


def _write_stream(fh: IO[str], records: Iterable[dict]) -> int:
    count = 0
    for record in records:
        fh.write(dumps_line(record))
        fh.write("\n")
        count += 1
    return count


def read_records(source: Path | str | IO[str]) -> tuple[list[dict], list[int]]:
    """Read records, skipping lines that do not parse to an object.

    Returns (records, bad_line_numbers); the caller decides whether the
    damage is tolerable.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="utf-8")
    records: list[dict] = []
    bad: list[int] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            bad.append(lineno)
            continue
        if not isinstance(obj, dict):
            bad.append(lineno)
            continue
        records.append(obj)
    return records, bad
