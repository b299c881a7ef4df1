"""Reading long-format trial files and writing estimate / metric tables.

Input is one row per individual with a header. Individuals with a missing
outcome are dropped; a missing covariate value is replaced by the mean of that
covariate's non-missing values over all individuals in both arms.
"""

import csv
from dataclasses import dataclass, field
import io
import math

import numpy as np

from .errors import EmptyDataset, InconsistentTreatment, ParseError
from .mmfit import TrialDataset
from .simkit import MetricsRow, MetricsTable
from .variance import EstimateReport

DEFAULT_NA = frozenset({"", "NA", "."})


@dataclass(frozen=True)
class SchemaMap:
    cluster_col: str
    treatment_col: str
    outcome_col: str
    covariate_cols: tuple = ()
    stratum_col: str = None
    delimiter: str = ","
    na_tokens: frozenset = DEFAULT_NA

    def __post_init__(self):
        object.__setattr__(self, "covariate_cols", tuple(self.covariate_cols))
        object.__setattr__(self, "na_tokens", frozenset(self.na_tokens))
        if len(self.delimiter) != 1:
            raise ValueError("delimiter must be a single character")

    @property
    def columns(self):
        cols = [self.cluster_col, self.treatment_col, self.outcome_col, *self.covariate_cols]
        if self.stratum_col:
            cols.append(self.stratum_col)
        return cols


@dataclass(frozen=True)
class IngestReport:
    n_rows: int = 0
    dropped_rows: int = 0
    imputed_cells: int = 0
    removed_clusters: int = 0
    imputed_by_column: dict = field(default_factory=dict)


def _number(token, line, col):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"column {col!r}: cannot parse {token!r} as a number", line) from None
    if not math.isfinite(value):
        raise ParseError(f"column {col!r}: non-finite value {token!r}", line)
    return value


def _treatment(token, line, col):
    value = _number(token, line, col)
    if value not in (0.0, 1.0):
        raise ParseError(f"column {col!r}: treatment must be 0 or 1, got {token!r}", line)
    return int(value)


def read_trial(path, schema):
    """Parse a delimited long-format file into (TrialDataset, IngestReport).

    ``path`` may be a filesystem path or an open text stream. Clusters keep
    the order of their first appearance in the file.
    """
    if hasattr(path, "read"):
        return _read_stream(path, schema)
    with open(path, newline="", encoding="utf-8") as fh:
        return _read_stream(fh, schema)


def _read_stream(fh, schema):
    reader = csv.reader(fh, delimiter=schema.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("file is empty", 1) from None
    header = [h.strip() for h in header]
    missing = [c for c in schema.columns if c not in header]
    if missing:
        raise ParseError(f"header lacks column(s) {', '.join(map(repr, missing))}", 1)
    pos = {c: header.index(c) for c in schema.columns}
    na = schema.na_tokens
    p = len(schema.covariate_cols)

    rows = []  # (cluster, treatment, outcome, covariates, stratum)
    treat_of = {}
    n_rows = dropped = 0
    for tokens in reader:
        line = reader.line_num
        if not tokens or all(not t.strip() for t in tokens):
            continue
        if len(tokens) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(tokens)}", line)
        n_rows += 1
        tokens = [t.strip() for t in tokens]
        cid = tokens[pos[schema.cluster_col]]
        if cid in na:
            raise ParseError("missing cluster identifier", line)
        a_tok = tokens[pos[schema.treatment_col]]
        if a_tok in na:
            raise ParseError("missing treatment value", line)
        a = _treatment(a_tok, line, schema.treatment_col)
        if treat_of.setdefault(cid, a) != a:
            raise InconsistentTreatment(f"cluster {cid!r} has both treatment values (line {line})")
        y_tok = tokens[pos[schema.outcome_col]]
        if y_tok in na:
            dropped += 1
            continue
        y = _number(y_tok, line, schema.outcome_col)
        x = [math.nan if tokens[pos[c]] in na else _number(tokens[pos[c]], line, c)
             for c in schema.covariate_cols]
        stratum = tokens[pos[schema.stratum_col]] if schema.stratum_col else None
        rows.append((cid, a, y, x, stratum))

    removed = len(treat_of) - len({r[0] for r in rows})
    if not rows:
        raise EmptyDataset("no individual with an observed outcome")

    order = {}
    for r in rows:
        order.setdefault(r[0], len(order))
    idx = sorted(range(len(rows)), key=lambda i: order[rows[i][0]])  # stable: keeps file order
    x = np.array([rows[i][3] for i in idx], dtype=float).reshape(len(idx), p)
    imputed = {}
    for j, col in enumerate(schema.covariate_cols):
        miss = np.isnan(x[:, j])
        if miss.all():
            raise EmptyDataset(f"covariate {col!r} has no observed value")
        if miss.any():
            x[miss, j] = math.fsum(x[~miss, j]) / int((~miss).sum())
        imputed[col] = int(miss.sum())
    y = np.array([rows[i][2] for i in idx])
    cids = list(order)
    counts = {c: 0 for c in cids}
    for r in rows:
        counts[r[0]] += 1
    strata = None
    if schema.stratum_col:
        first = {}
        for r in rows:
            first.setdefault(r[0], r[4])
        strata = [first[c] for c in cids]
    data = TrialDataset.from_arrays(
        y, x, [counts[c] for c in cids], [treat_of[c] for c in cids],
        cluster_ids=cids, strata=strata, covariate_names=schema.covariate_cols,
    )
    report = IngestReport(n_rows, dropped, sum(imputed.values()), removed, imputed)
    return data, report


def write_trial(data, destination, cluster_col="cluster", treatment_col="treatment",
                outcome_col="y", stratum_col=None, delimiter=","):
    """Write a dataset in long format (one row per individual)."""
    header = [cluster_col, treatment_col, outcome_col, *data.covariate_names]
    if stratum_col:
        header.append(stratum_col)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(header)
    for c in data.clusters:
        for j in range(c.size):
            row = [c.cluster_id, c.treatment, repr(float(c.outcomes[j]))]
            row += [repr(float(v)) for v in c.covariates[j]]
            if stratum_col:
                row.append(c.stratum)
            w.writerow(row)
    _emit(buf.getvalue(), destination)


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

ESTIMATE_FIELDS = ("estimator_label", "variance_method", "delta_hat", "se", "ci_low",
                   "ci_high", "level")


def fmt_number(value):
    """Six significant digits; integers stay integral."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6g}"


def _records(report):
    """Header and string rows for an EstimateReport, list of them, or MetricsTable."""
    if isinstance(report, MetricsTable):
        header = list(MetricsRow.FIELDS)
        rows = [r.as_tuple() for r in report.rows]
    else:
        reports = [report] if isinstance(report, EstimateReport) else list(report)
        extra = sorted({k for r in reports if isinstance(r, dict) for k in r} - set(ESTIMATE_FIELDS))
        header = list(ESTIMATE_FIELDS) + extra
        rows = []
        for r in reports:
            d = r if isinstance(r, dict) else {f: getattr(r, f) for f in ESTIMATE_FIELDS}
            rows.append(tuple(d.get(f, "") for f in header))
    return header, [[v if isinstance(v, str) else fmt_number(v) for v in row] for row in rows]


def format_report(report, fmt="markdown"):
    """Render to a string in ``csv`` or ``markdown`` format."""
    header, rows = _records(report)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"format must be 'csv' or 'markdown', got {fmt!r}")
    cells = [header] + rows
    widths = [max(len(r[j].replace("|", "\\|")) for r in cells) for j in range(len(header))]

    def line(r):
        out = []
        for j, v in enumerate(r):
            v = v.replace("|", "\\|")
            out.append(v.ljust(widths[j]) if j == 0 else v.rjust(widths[j]))
        return "| " + " | ".join(out) + " |"

    sep = "|" + "|".join(
        "-" * (w + 1) + ":" if j else ":" + "-" * (w + 1) for j, w in enumerate(widths)
    ) + "|"
    body = [line(header), sep] + [line(r) for r in rows]
    title = getattr(report, "title", "")
    if title:
        body = [f"**{title}**", ""] + body
    return "\n".join(body) + "\n"


def _emit(text, destination):
    if destination is None:
        return text
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        with open(destination, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def write_report(report, fmt="markdown", destination=None):
    """Write a rendered report to a path or stream; returns the rendered text."""
    return _emit(format_report(report, fmt), destination)


def read_metrics_csv(source):
    """Parse metrics CSV written by :func:`write_report` back into a MetricsTable."""
    if not hasattr(source, "read"):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_metrics_csv(fh)
    reader = csv.reader(source)
    header = next(reader)
    if tuple(header) != MetricsRow.FIELDS:
        raise ParseError("not a metrics table header", 1)
    rows = []
    for tokens in reader:
        if not tokens:
            continue
        vals = [tokens[0]] + [float(t) for t in tokens[1:]]
        vals[-2], vals[-1] = int(vals[-2]), int(vals[-1])
        rows.append(MetricsRow(*vals))
    return MetricsTable(tuple(rows))
