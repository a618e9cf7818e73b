"""CSV ingestion of hospital-by-month panels and JSON/CSV export.

Ingestion is total: every data row is either kept, dropped with a recorded
reason (zero exposure), or raises :class:`ParseError` naming its line.

JSON exports write floats with ``repr`` (shortest round-trip form, so no
precision is lost) and non-finite values as ``null``.  CSV exports follow
RFC 4180 (CRLF line ends, minimal quoting).
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bench import DiagnosticsBundle, ReplicateRow, ReplicateTable
from .design import Cluster, Dataset, Observation
from .errors import ParseError, StructuralError
from .segfit import SegFitResult

log = logging.getLogger(__name__)

__all__ = [
    "CsvSchema",
    "IngestResult",
    "ingest_csv",
    "export",
    "export_json",
    "export_csv",
    "load_json",
    "load_table_json",
    "load_table_csv",
    "PRIVATE_LEVEL",
]

PRIVATE_LEVEL = "Private"
INTERCEPT = "1"
DERIVED_TIME = "time"
DERIVED_PRIVATE = "private"


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`ingest_csv`.

    Covariate lists name the columns of each design row.  Besides file
    columns they accept ``"1"`` (intercept), ``"time"`` (the time column)
    and ``"private"`` (1 when the type column equals ``"Private"``).
    """

    id: str = "id"
    time: str = "month"
    count: str = "BSI"
    exposure: str = "CVC"
    type_col: Optional[str] = "NAT"
    count_covariates: tuple = (INTERCEPT, DERIVED_TIME, DERIVED_PRIVATE)
    zero_covariates: tuple = (INTERCEPT, DERIVED_PRIVATE)
    re_covariates: tuple = (INTERCEPT, DERIVED_TIME)
    passthrough: tuple = ()

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("count_covariates", "zero_covariates", "re_covariates", "passthrough"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParseError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)

    def required(self):
        return [self.id, self.time, self.count, self.exposure]


@dataclass
class IngestResult:
    dataset: Dataset
    n_rows: int
    n_kept: int
    dropped: dict
    derived: dict = field(default_factory=dict)

    @property
    def n_dropped(self):
        return sum(self.dropped.values())


def _number(text, line, col):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"line {line}: column {col!r} is not numeric ({text!r})", row=line)
    if not math.isfinite(v):
        raise ParseError(f"line {line}: column {col!r} is not finite ({text!r})", row=line)
    return v


def _is_private(value):
    return value.strip() == PRIVATE_LEVEL


def _covariate(name, rec, line, schema, t):
    if name == INTERCEPT:
        return 1.0
    if name == DERIVED_TIME:
        return t
    if name == DERIVED_PRIVATE:
        return 1.0 if _is_private(rec[schema.type_col]) else 0.0
    return _number(rec[name], line, name)


def ingest_csv(path, schema=None, rate=True, cluster_type=True):
    """Read a long-format CSV into a :class:`Dataset`.

    Rows with zero exposure are dropped and counted.  ``rate`` adds the
    derived ``R = count / exposure`` column and ``cluster_type`` the
    ``N`` (``Private`` / ``Non-private``) label to ``result.derived``; both
    are aligned with the kept rows in file order.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = list(schema.required())
        covs = set(schema.count_covariates) | set(schema.zero_covariates) | set(schema.re_covariates)
        if DERIVED_PRIVATE in covs or cluster_type:
            if schema.type_col is None:
                if DERIVED_PRIVATE in covs:
                    raise ParseError("the 'private' covariate needs a type column")
            else:
                needed.append(schema.type_col)
        needed += [c for c in covs if c not in (INTERCEPT, DERIVED_TIME, DERIVED_PRIVATE)]
        needed += list(schema.passthrough)
        missing = [c for c in dict.fromkeys(needed) if c not in header]
        if missing:
            raise ParseError(f"missing required column(s): {missing}", row=1)
        by_id = {}
        order = []
        derived = {"R": [], "N": [], "id": [], "time": []}
        derived.update({c: [] for c in schema.passthrough})
        n_rows = 0
        dropped = {"zero_exposure": 0}
        for k, rec in enumerate(reader):
            line = k + 2
            n_rows += 1
            if None in rec or any(v is None for v in rec.values()):
                raise ParseError(f"line {line}: wrong number of fields", row=line)
            t = _number(rec[schema.time], line, schema.time)
            y = _number(rec[schema.count], line, schema.count)
            off = _number(rec[schema.exposure], line, schema.exposure)
            if y < 0 or y != int(y):
                raise ParseError(f"line {line}: count must be a nonnegative integer", row=line)
            if off < 0:
                raise ParseError(f"line {line}: exposure must be nonnegative", row=line)
            if off == 0:
                dropped["zero_exposure"] += 1
                continue
            row = {
                "x": tuple(_covariate(c, rec, line, schema, t) for c in schema.count_covariates),
                "w": tuple(_covariate(c, rec, line, schema, t) for c in schema.zero_covariates),
                "z": tuple(_covariate(c, rec, line, schema, t) for c in schema.re_covariates),
            }
            cid = rec[schema.id].strip()
            if cid not in by_id:
                by_id[cid] = []
                order.append(cid)
            by_id[cid].append(Observation(y=int(y), t=t, offset=off, x_row=row["x"],
                                          w_row=row["w"], z_row=row["z"]))
            derived["id"].append(cid)
            derived["time"].append(t)
            derived["R"].append(y / off)
            if schema.type_col is not None and schema.type_col in rec:
                derived["N"].append("Private" if _is_private(rec[schema.type_col]) else "Non-private")
            for c in schema.passthrough:
                derived[c].append(_number(rec[c], line, c))
    if dropped["zero_exposure"]:
        log.info("dropped %d row(s) with zero exposure", dropped["zero_exposure"])
    if not order:
        raise ParseError("no usable rows in file")
    clusters = [Cluster(cid, sorted(by_id[cid], key=lambda o: o.t)) for cid in order]
    n_kept = sum(len(v) for v in by_id.values())
    if n_kept + dropped["zero_exposure"] != n_rows:
        raise StructuralError("row accounting does not reconcile")
    if not rate:
        derived.pop("R")
    if not cluster_type or not derived["N"]:
        derived.pop("N")
    out = {k: (np.asarray(v) if k not in ("id", "N") else list(v)) for k, v in derived.items()}
    meta = {"source": str(path), "n_rows": n_rows, "dropped": dict(dropped)}
    return IngestResult(Dataset(clusters, meta=meta), n_rows, n_kept, dropped, out)


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _payload(obj):
    if isinstance(obj, SegFitResult):
        d = obj.to_dict()
        grid = getattr(obj, "grid", None)
        if grid is not None:
            d["grid"] = {"psi0": grid.psi0, "candidates": grid.table()}
        return {"kind": "fit", **d}
    if isinstance(obj, ReplicateTable):
        return {"kind": "replicate_table", **obj.to_dict()}
    if isinstance(obj, DiagnosticsBundle):
        return {"kind": "diagnostics", **obj.to_dict()}
    if isinstance(obj, dict):
        return obj
    raise StructuralError(f"cannot export {type(obj).__name__}")


def export_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(_payload(obj)), fh, indent=1, allow_nan=False)
        fh.write("\n")


def _csv_rows(obj):
    if isinstance(obj, ReplicateTable):
        fields = list(ReplicateRow.__dataclass_fields__)
        return fields, [[getattr(r, f) for f in fields] for r in obj.rows]
    if isinstance(obj, SegFitResult):
        rows = [[n, e, s, p] for n, e, s, p in zip(obj.names, obj.estimate, obj.se, obj.p_value)]
        return ["name", "estimate", "se", "p_value"], rows
    if isinstance(obj, DiagnosticsBundle):
        return (["fitted", "pearson", "working"],
                [list(r) for r in zip(obj.fitted, obj.pearson, obj.working)])
    raise StructuralError(f"cannot export {type(obj).__name__} as CSV")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def export_csv(obj, path):
    header, rows = _csv_rows(obj)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def export(obj, path, fmt=None):
    """Write ``obj`` as ``json`` or ``csv`` (inferred from the suffix if omitted)."""
    fmt = fmt or str(path).rsplit(".", 1)[-1].lower()
    if fmt == "json":
        export_json(obj, path)
    elif fmt == "csv":
        export_csv(obj, path)
    else:
        raise StructuralError(f"unsupported export format {fmt!r}")


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _nan(v):
    return float("nan") if v is None else v


def load_table_json(path):
    d = load_json(path)
    if d.get("kind") != "replicate_table":
        raise ParseError(f"{path} does not hold a replicate table")
    for r in d["rows"]:
        for k in ("truth", "estimate", "se", "wall_time"):
            r[k] = _nan(r[k])
    for i in d["replicates"]:
        i["loglik_trace"] = [_nan(v) for v in i["loglik_trace"]]
    return ReplicateTable.from_dict(d)


def load_table_csv(path):
    """Rows of a CSV replicate table (per-replicate records are JSON-only)."""
    conv = {"replicate": int, "param": str, "truth": float, "estimate": float, "se": float,
            "converged": lambda s: s == "true", "iterations": int, "wall_time": float}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ReplicateRow(**{k: conv[k](rec[k]) for k in conv}))
    return ReplicateTable(rows, [], {})
