import csv
import math
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Sequence, Union

import numpy as np
import orjson
from pydantic import BaseModel

from ringsim.models.results import Trace

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
FLOAT_FORMAT = "%.15g"


def to_jsonable(payload: Union[BaseModel, Mapping[str, Any]]) -> Any:
    if isinstance(payload, BaseModel):
        return payload.model_dump(mode="json")
    return payload


def dump_json(payload: Union[BaseModel, Mapping[str, Any]]) -> bytes:
    """Byte-stable JSON: sorted keys, two-space indent, trailing newline."""
    return orjson.dumps(to_jsonable(payload), option=JSON_OPTIONS) + b"\n"


def write_json(path: Path, payload: Union[BaseModel, Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dump_json(payload))
    return path


def format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return FLOAT_FORMAT % float(value)


def write_csv(path: Path, header: Sequence[str], columns: Sequence[Iterable[Any]]) -> Path:
    """Write equal-length columns under ``header``."""
    if len(header) != len(columns):
        raise ValueError("header and columns differ in length")
    rows = zip(*[list(column) for column in columns])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])
    return path


def write_trace_csv(path: Path, trace: Trace) -> Path:
    header: List[str] = ["time_s"]
    columns: List[Iterable[Any]] = [trace.time_s]
    for name in trace.names:
        unit = trace.units.get(name)
        header.append(f"{name}_{unit}" if unit else name)
        columns.append(trace[name])
    return write_csv(path, header, columns)


def nearest_power_of_two(value: float) -> int:
    if value <= 1:
        return 1
    exponent = math.log2(value)
    return int(2 ** round(exponent))
