"""CSV ingestion, JSON emission and report envelopes for the CLI."""

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources

from .data import Dataset

SCHEMA_VERSION = 1


class IngestError(ValueError):
    """CSV input cannot be turned into a dataset."""


@dataclass(frozen=True)
class ColumnSpec:
    """Mapping from CSV columns to model roles.

    Column name sets must be disjoint and all present in the header.
    """

    outcome: str
    endogenous: tuple
    instruments: tuple
    controls: tuple = ()
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "endogenous", tuple(self.endogenous))
        object.__setattr__(self, "instruments", tuple(self.instruments))
        object.__setattr__(self, "controls", tuple(self.controls))
        groups = [
            (self.outcome,),
            self.endogenous,
            self.instruments,
            self.controls,
        ]
        flat = [c for g in groups for c in g]
        if len(set(flat)) != len(flat):
            raise IngestError("column roles overlap; names must be disjoint")
        if not self.endogenous or not self.instruments:
            raise IngestError("need at least one endogenous column and one instrument")

    @property
    def referenced(self):
        return (self.outcome,) + self.endogenous + self.instruments + self.controls


def ingest_csv(path, spec):
    """Read a CSV file into a dataset, rows in file order.

    Rows with a missing or non-numeric cell in any referenced column are
    rejected; the error cites their data row numbers (the header is row 0).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in spec.referenced if c not in header]
        if missing:
            raise IngestError(f"{path}: missing columns {missing}")
        pos = {c: header.index(c) for c in spec.referenced}
        rows = []
        bad = []
        for rownum, row in enumerate(reader, start=1):
            vals = []
            ok = True
            for c in spec.referenced:
                if pos[c] >= len(row):
                    ok = False
                    break
                cell = row[pos[c]].strip()
                if not cell:
                    ok = False
                    break
                try:
                    vals.append(float(cell))
                except ValueError:
                    ok = False
                    break
            if ok:
                rows.append(vals)
            else:
                bad.append(rownum)
    if bad:
        shown = ", ".join(str(r) for r in bad[:20])
        more = "" if len(bad) <= 20 else f" (and {len(bad) - 20} more)"
        raise IngestError(
            f"{path}: rows with missing or non-numeric referenced cells: {shown}{more}"
        )
    if not rows:
        raise IngestError(f"{path}: no usable data rows")
    import numpy as np

    data = np.asarray(rows, dtype=float)
    P = len(spec.endogenous)
    J = len(spec.instruments)
    m = len(spec.controls)
    y = data[:, 0]
    D = data[:, 1 : 1 + P]
    Z = data[:, 1 + P : 1 + P + J]
    W = data[:, 1 + P + J : 1 + P + J + m] if m else None
    return Dataset(y=y, D=D, Z=Z, W=W, intercept=spec.intercept)


def emit_csv(path, dataset, spec):
    """Write a dataset back to CSV under the given column names."""
    import numpy as np

    cols = [dataset.y[:, None], dataset.D, dataset.Z]
    if dataset.m:
        cols.append(dataset.W)
    data = np.column_stack(cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(spec.referenced))
        for row in data:
            writer.writerow([format(v, ".17g") for v in row])


def _float_text(x):
    if not math.isfinite(x):
        return "null"
    s = format(x, ".17g")
    if "." not in s and "e" not in s and "E" not in s:
        s += ".0"
    return s


def json_text(obj, indent=0):
    """Serialize to JSON with 17-significant-digit floats and stable key order.

    The digit count makes every double round-trip exactly; dict insertion
    order is kept as is, so building documents in a fixed order yields
    byte-identical output.
    """
    pad = " " * indent
    inner = " " * (indent + 2)
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, float):
        return _float_text(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = []
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError(f"JSON object keys must be strings, got {type(k)}")
            items.append(f"{inner}{json.dumps(k)}: {json_text(v, indent + 2)}")
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = [f"{inner}{json_text(v, indent + 2)}" for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    # numpy scalars and arrays
    try:
        import numpy as np

        if isinstance(obj, np.ndarray):
            return json_text(obj.tolist(), indent)
        if isinstance(obj, np.integer):
            return str(int(obj))
        if isinstance(obj, np.floating):
            return _float_text(float(obj))
        if isinstance(obj, np.bool_):
            return "true" if obj else "false"
    except ImportError:  # pragma: no cover
        pass
    raise TypeError(f"cannot serialize {type(obj)} to JSON")


def export_dendrogram(dendrogram, estimates):
    """JSON document with leaves, merges and memberships per cluster count.

    The leaves carry the combination indices and the point-estimate
    coordinates needed to replot the merge path; the memberships list the
    partition at every K so the cut at any level can be reconstructed
    without replaying merges.
    """
    leaves = []
    for i, est in enumerate(estimates):
        leaves.append(
            {
                "id": i,
                "combination": [int(j) for j in est.combo.indices],
                "coordinates": [float(b) for b in est.beta],
                "rcond_gamma": float(est.rcond_gamma),
            }
        )
    merges = [
        {"a": a, "b": b, "id": cid, "height": h} for a, b, cid, h in dendrogram.merges
    ]
    memberships = []
    for K in range(1, dendrogram.n_leaves + 1):
        cells = [[int(i) for i in cell] for cell in dendrogram.partition_at(K)]
        memberships.append({"k": K, "clusters": cells})
    return {
        "schema_version": SCHEMA_VERSION,
        "n_leaves": dendrogram.n_leaves,
        "leaves": leaves,
        "merges": merges,
        "memberships": memberships,
    }


def sargan_dict(outcome):
    return {
        "statistic": float(outcome.statistic),
        "df": int(outcome.df),
        "p_value": float(outcome.p_value),
        "critical_value": float(outcome.critical_value),
        "passed": bool(outcome.passed),
    }


def fit_dict(fit):
    return {
        "beta": [float(b) for b in fit.beta],
        "se": [float(s) for s in fit.se],
        "sigma_u2": float(fit.sigma_u2),
        "vcov_beta": [[float(v) for v in row] for row in fit.vcov_beta],
    }


def selection_payload(result, strength, union_ci=None):
    doc = {
        "valid": [int(i) for i in result.valid],
        "invalid": [int(i) for i in result.invalid],
        "stop_k": int(result.stop_K),
        "all_rejected": bool(result.all_rejected),
        "estimate": fit_dict(result.fit),
        "sargan": sargan_dict(result.path[result.stop_K - 1].sargan),
        "first_stage_strength": float(strength),
        "path": [
            {
                "k": int(fs.K),
                "cluster_size": len(fs.cluster_members),
                "n_valid": len(fs.valid_ivs),
                "sargan": sargan_dict(fs.sargan),
            }
            for fs in result.path
        ],
    }
    if union_ci is not None:
        doc["union_ci"] = [[float(lo), float(hi)] for lo, hi in union_ci]
    return doc


def late_payload(result):
    return {
        "stop_k": int(result.K),
        "groups": [
            {
                "ivs": [int(i) for i in g.iv_indices],
                "center": [float(c) for c in g.center],
                "estimate": fit_dict(g.fit),
                "sargan": sargan_dict(g.sargan),
            }
            for g in result.groups
        ],
    }


def envelope(tool_version, config_echo, payload_kind, payload, diagnostics, seconds):
    """Top-level report document written by the CLI."""
    return {
        "schema_version": SCHEMA_VERSION,
        "tool_version": tool_version,
        "config": config_echo,
        "payload_kind": payload_kind,
        "payload": payload,
        "diagnostics": diagnostics,
        "timing": {"seconds": float(seconds)},
    }


def load_schema(name):
    """Load a bundled JSON schema ('report' or 'dendrogram')."""
    text = (resources.files("ivclust") / "schemas" / f"{name}-v1.json").read_text()
    return json.loads(text)
