"""Federated query engine: decompose, execute where the data lives, merge.

A query submitted at any site is decomposed into a local part and one
residual per peer site (site.id predicates are folded into the routing),
each part executes against that site's store only, and the partial result
sets are merged into one canonically-ordered set. Sites that fail to answer
are recorded as ``missing`` entries instead of poisoning the merge.

The interchange form is a small XML dialect (UTF-8, no namespaces, the five
standard entity escapes, attribute order fixed)::

    <resultset target="images" complete="false">
      <row site="udine" id="udine:42">
        <col name="patient.id">a1b2c3d4e5f60718</col>
      </row>
      <missing site="cambridge" reason="timeout"/>
    </resultset>

An empty, complete set is exactly ``<resultset target="..." complete="true"/>``.
The dialect carries no column declaration, so a rowless set decodes with
empty columns; merge treats rowless parts as column-compatible.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Union

from . import mgql
from .errors import ColumnMismatch, MalformedXml, MgError, SchemaViolation, UnknownSite
from .model import format_gfid, parse_gfid
from .mgql import And, Expr, Not, Or, Pred, Query

if TYPE_CHECKING:  # pragma: no cover
    from .services.registry import SiteDescriptor
    from .store import SiteStore

IMAGE_COLUMNS = (
    "patient.id",
    "patient.sex",
    "patient.age",
    "image.laterality",
    "image.view",
    "image.modality",
    "image.study_date",
)
PATIENT_COLUMNS = ("patient.id", "patient.sex", "patient.height_m", "patient.weight_kg")


@dataclass(frozen=True)
class ResultRow:
    site_id: str
    row_id: str  # "site:local" for images, pid for patients
    values: tuple


@dataclass(frozen=True)
class ResultSet:
    target: str
    columns: tuple
    rows: tuple  # of ResultRow, sorted by row_sort_key
    complete: bool
    missing: tuple  # of (site_id, reason), sorted by site_id


def render_value(value) -> str:
    """Canonical text for one column cell; absent values render empty."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def row_sort_key(target: str, row: ResultRow):
    if target == "images":
        return (row.site_id, parse_gfid(row.row_id).local_id)
    return (row.site_id, row.row_id)


# --- decomposition -------------------------------------------------------------

@dataclass
class DecomposedQuery:
    local: Optional[Query]
    remote: list  # of (site_id, Query)


def _site_literals(node: Expr) -> set:
    if isinstance(node, Pred):
        return {node.value} if node.field == "site.id" else set()
    if isinstance(node, Not):
        return _site_literals(node.expr)
    return _site_literals(node.left) | _site_literals(node.right)


def _residual(node: Expr, site_id: str) -> Union[Expr, bool]:
    """Fold site.id predicates for one site; may collapse to a constant."""
    if isinstance(node, Pred):
        if node.field != "site.id":
            return node
        return (site_id == node.value) if node.op == "=" else (site_id != node.value)
    if isinstance(node, Not):
        inner = _residual(node.expr, site_id)
        return (not inner) if isinstance(inner, bool) else Not(inner)
    left = _residual(node.left, site_id)
    right = _residual(node.right, site_id)
    if isinstance(node, And):
        if left is False or right is False:
            return False
        if left is True:
            return right
        if right is True:
            return left
        return And(left, right)
    if left is True or right is True:
        return True
    if left is False:
        return right
    if right is False:
        return left
    return Or(left, right)


def analyze(query: Query, self_site: str, topology: Sequence) -> DecomposedQuery:
    """Route a SELECT query across the topology.

    Every site whose residual is satisfiable gets that residual; a residual
    that folds to constant-true is expressed as the site's own tautology
    ``site.id = '<site>'`` since the grammar has no empty WHERE.
    """
    known = {d.site_id for d in topology}
    unknown = _site_literals(query.expr) - known
    if unknown:
        raise UnknownSite(f"unknown site(s) in query: {', '.join(sorted(unknown))}")

    candidates = [self_site] + sorted(
        d.site_id for d in topology if d.public and d.site_id != self_site)

    local: Optional[Query] = None
    remote = []
    for site_id in candidates:
        folded = _residual(query.expr, site_id)
        if folded is False:
            continue
        if folded is True:
            folded = Pred("site.id", "=", site_id)
        part = Query(target=query.target, expr=folded)
        if site_id == self_site:
            local = part
        else:
            remote.append((site_id, part))
    return DecomposedQuery(local=local, remote=remote)


# --- execution and merge ----------------------------------------------------------

def execute_local(store: "SiteStore", site_id: str, query: Query) -> ResultSet:
    """Run one decomposed part against this site's store."""
    expr = query.expr

    def pred(row: dict) -> bool:
        return mgql.evaluate(expr, {**row, "site.id": site_id})

    matched = store.scan(pred, query.target)
    if query.target == "images":
        columns = IMAGE_COLUMNS
        rows = tuple(
            ResultRow(site_id, format_gfid(site_id, row["_local_id"]),
                      tuple(render_value(row.get(c)) for c in columns))
            for row in matched)
    else:
        columns = PATIENT_COLUMNS
        rows = tuple(
            ResultRow(site_id, row["_pid"],
                      tuple(render_value(row.get(c)) for c in columns))
            for row in matched)
    return ResultSet(query.target, columns, rows, True, ())


def merge(parts: Sequence[ResultSet], failed: Sequence = (),
          target: Optional[str] = None) -> ResultSet:
    """Combine partial results; failures become ``missing`` entries.

    Rowless parts cannot disagree on columns (the XML form drops them), so
    the canonical column list comes from the first part that has rows.
    """
    parts = list(parts)
    if parts:
        target = parts[0].target
        for part in parts[1:]:
            if part.target != target:
                raise ColumnMismatch(f"mixed targets {target!r} and {part.target!r}")
    elif target is None:
        raise ColumnMismatch("nothing to merge and no target given")

    columns: tuple = ()
    for part in parts:
        if part.rows:
            if columns and part.columns != columns:
                raise ColumnMismatch(f"column lists differ: {columns} vs {part.columns}")
            columns = columns or part.columns
    if not columns and parts:
        columns = parts[0].columns

    rows = sorted((r for part in parts for r in part.rows),
                  key=lambda r: row_sort_key(target, r))
    missing = tuple(sorted(failed))
    return ResultSet(target, columns, tuple(rows), not missing, missing)


# --- XML dialect ------------------------------------------------------------------

def _esc(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
                .replace('"', "&quot;").replace("'", "&apos;"))


def to_xml(rs: ResultSet) -> bytes:
    attrs = f'target="{_esc(rs.target)}" complete="{"true" if rs.complete else "false"}"'
    if not rs.rows and not rs.missing:
        return f"<resultset {attrs}/>".encode("utf-8")
    out = [f"<resultset {attrs}>"]
    for row in rs.rows:
        head = f'  <row site="{_esc(row.site_id)}" id="{_esc(row.row_id)}"'
        if not rs.columns:
            out.append(head + "/>")
            continue
        out.append(head + ">")
        for name, value in zip(rs.columns, row.values):
            out.append(f'    <col name="{_esc(name)}">{_esc(value)}</col>')
        out.append("  </row>")
    for site, reason in rs.missing:
        out.append(f'  <missing site="{_esc(site)}" reason="{_esc(reason)}"/>')
    out.append("</resultset>")
    return "\n".join(out).encode("utf-8")


def _require(condition: bool, what: str) -> None:
    if not condition:
        raise SchemaViolation(what)


def from_xml(data) -> ResultSet:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc

    _require(root.tag == "resultset", f"root element is {root.tag!r}")
    target = root.get("target")
    complete_text = root.get("complete")
    _require(target in ("patients", "images"), f"bad target {target!r}")
    _require(complete_text in ("true", "false"), f"bad complete flag {complete_text!r}")

    columns: Optional[tuple] = None
    rows = []
    missing = []
    for child in root:
        if child.tag == "row":
            site = child.get("site")
            row_id = child.get("id")
            _require(site is not None and row_id is not None, "row lacks site/id")
            names, values = [], []
            for col in child:
                _require(col.tag == "col", f"unexpected element {col.tag!r} in row")
                name = col.get("name")
                _require(name is not None, "col lacks a name")
                names.append(name)
                values.append(col.text or "")
            if columns is None:
                columns = tuple(names)
            else:
                _require(tuple(names) == columns, "rows disagree on column names")
            if target == "images":
                try:
                    gfid = parse_gfid(row_id)
                except MgError as exc:
                    raise SchemaViolation(f"bad row id {row_id!r}: {exc}") from exc
                _require(gfid.site_id == site, f"row id {row_id!r} contradicts site {site!r}")
            rows.append(ResultRow(site, row_id, tuple(values)))
        elif child.tag == "missing":
            site = child.get("site")
            reason = child.get("reason")
            _require(site is not None and reason is not None, "missing lacks site/reason")
            missing.append((site, reason))
        else:
            raise SchemaViolation(f"unexpected element {child.tag!r}")

    keys = [row_sort_key(target, r) for r in rows]
    _require(all(a < b for a, b in zip(keys, keys[1:])), "rows not strictly ordered")
    _require(missing == sorted(missing), "missing entries not ordered")
    complete = complete_text == "true"
    _require(complete == (not missing), "complete flag contradicts missing entries")
    return ResultSet(target, columns or (), tuple(rows), complete, tuple(missing))
