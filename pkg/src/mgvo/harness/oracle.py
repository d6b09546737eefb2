"""Brute-force reference for federated queries.

This is the measuring stick the engine is tested against, so it deliberately
shares nothing with the engine: it re-declares the column lists, rendering,
join-over-dumps, and sort order, and evaluates expressions with its own
recursive walker. It only borrows the parser (one grammar, one reading) and
the AST node types.

``oracle_eval`` consumes full per-site dumps (every row, no filtering) and
returns plain tuples, so an engine bug cannot hide inside a shared helper.
"""

from __future__ import annotations

from typing import Optional

from .. import mgql

REF_IMAGE_COLUMNS = (
    "patient.id",
    "patient.sex",
    "patient.age",
    "image.laterality",
    "image.view",
    "image.modality",
    "image.study_date",
)
REF_PATIENT_COLUMNS = ("patient.id", "patient.sex", "patient.height_m", "patient.weight_kg")


def ref_eval(node, row: dict) -> bool:
    """Reference two-valued evaluation: a predicate over absent data is false."""
    if isinstance(node, mgql.And):
        return ref_eval(node.left, row) and ref_eval(node.right, row)
    if isinstance(node, mgql.Or):
        return ref_eval(node.left, row) or ref_eval(node.right, row)
    if isinstance(node, mgql.Not):
        return not ref_eval(node.expr, row)
    return _ref_pred(node, row)


def _ref_pred(pred, row: dict) -> bool:
    have = row.get(pred.field)
    if have is None:
        return False
    if pred.field == "derived.kind":
        kinds = have if isinstance(have, (tuple, list, set)) else (have,)
        if pred.op == "=":
            return pred.value in kinds
        if pred.op == "!=":
            return any(k != pred.value for k in kinds)
        return False
    if pred.op == "in":
        lo, hi = pred.value
        return lo <= have <= hi
    if pred.op == "=":
        return have == pred.value
    if pred.op == "!=":
        return have != pred.value
    if pred.op == "<":
        return have < pred.value
    if pred.op == "<=":
        return have <= pred.value
    if pred.op == ">":
        return have > pred.value
    if pred.op == ">=":
        return have >= pred.value
    raise AssertionError(f"unreachable op {pred.op!r}")


def _ref_render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def oracle_eval(site_dumps: dict, query_text: str, sites: Optional[list] = None):
    """(columns, rows) for a query over full dumps.

    ``site_dumps`` maps site_id -> {"images": [row, ...], "patients": [...]},
    the unfiltered join rows each site would expose. ``sites`` restricts
    evaluation to the listed (live) sites. Rows come back as
    (site_id, row_id, (rendered values...)) tuples in global result order.
    """
    query = mgql.parse_query(query_text)
    expr = query.expr
    live = sorted(site_dumps) if sites is None else sorted(sites)

    out = []
    if query.target == "patients":
        for site in live:
            dump = site_dumps[site]
            matched_pids = set()
            for row in dump.get("images", []):
                if ref_eval(expr, {**row, "site.id": site}):
                    matched_pids.add(row["_pid"])
            by_pid = {row["_pid"]: row for row in dump.get("patients", [])}
            for pid in sorted(matched_pids):
                prow = by_pid[pid]
                values = tuple(_ref_render(prow.get(c)) for c in REF_PATIENT_COLUMNS)
                out.append((site, pid, values))
        out.sort(key=lambda r: (r[0], r[1]))
        return REF_PATIENT_COLUMNS, out

    for site in live:
        for row in site_dumps[site].get("images", []):
            if ref_eval(expr, {**row, "site.id": site}):
                values = tuple(_ref_render(row.get(c)) for c in REF_IMAGE_COLUMNS)
                out.append((site, f"{site}:{row['_local_id']}", values))
    out.sort(key=lambda r: (r[0], int(r[1].rsplit(":", 1)[1])))
    return REF_IMAGE_COLUMNS, out


def resultset_rows(rs) -> list:
    """A ResultSet flattened to oracle_eval's row tuples, for comparison."""
    return [(row.site_id, row.row_id, tuple(row.values)) for row in rs.rows]
