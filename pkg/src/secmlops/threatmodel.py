"""STRIDE threat matrix for the detection pipeline.

A matrix maps every (element, threat) pair to a likelihood letter
(N/L/M/H) and an impact level (Low/Medium/High).  Risk is the product of
likelihood weight (0..3) and impact weight (1..3).  The bundled fixture
(data/pipeline_threat_matrix.csv) covers the 16 pipeline elements: two
external entities, four processes, seven data flows and three data
stores.  Several fixture cells pair a likelihood letter with an impact
level from a different band; they are recorded as printed, verbatim, and
are not "corrected".

The CSV wire format is one row per cell, `element,kind,threat,
likelihood,impact`, canonically ordered by element id (prefix, then
number) and threat letter (alphabetical).  load(render_csv(m)) == m.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import MatrixFormatError

THREATS = ("S", "T", "R", "I", "D", "E")
LIKELIHOOD_WEIGHTS = {"N": 0, "L": 1, "M": 2, "H": 3}
IMPACT_WEIGHTS = {"Low": 1, "Medium": 2, "High": 3}
KINDS = {"EE": "external-entity", "P": "process", "DF": "data-flow",
         "DS": "data-store"}

FIXTURE_RESOURCE = "pipeline_threat_matrix.csv"


@dataclass(frozen=True)
class Element:
    element_id: str
    kind: str
    description: str = ""

    def validate(self) -> None:
        prefix = self.element_id.split("-")[0]
        if prefix not in KINDS:
            raise MatrixFormatError(f"unknown-id({self.element_id})")
        if KINDS[prefix] != self.kind:
            raise MatrixFormatError(
                f"element {self.element_id} has kind {self.kind!r}, "
                f"expected {KINDS[prefix]!r}")


@dataclass(frozen=True)
class ThreatCell:
    element_id: str
    threat: str
    likelihood: str
    impact: str

    def validate(self) -> None:
        if self.threat not in THREATS:
            raise MatrixFormatError(f"unknown threat {self.threat!r}")
        if self.likelihood not in LIKELIHOOD_WEIGHTS:
            raise MatrixFormatError(f"unknown likelihood {self.likelihood!r}")
        if self.impact not in IMPACT_WEIGHTS:
            raise MatrixFormatError(f"unknown impact {self.impact!r}")


def risk_score(cell: ThreatCell) -> int:
    cell.validate()
    return LIKELIHOOD_WEIGHTS[cell.likelihood] * IMPACT_WEIGHTS[cell.impact]


def _element_key(element_id: str) -> tuple[str, int]:
    prefix, _, num = element_id.partition("-")
    try:
        return prefix, int(num)
    except ValueError as exc:
        raise MatrixFormatError(f"unknown-id({element_id})") from exc


@dataclass
class ThreatMatrix:
    elements: list[Element] = field(default_factory=list)
    cells: dict[tuple[str, str], ThreatCell] = field(default_factory=dict)

    def validate(self) -> None:
        """Complete: every element has all six threats, exactly once, and
        no cell names an unknown element."""
        ids = set()
        for el in self.elements:
            el.validate()
            if el.element_id in ids:
                raise MatrixFormatError(f"duplicate element {el.element_id}")
            ids.add(el.element_id)
        for (eid, threat), cell in self.cells.items():
            cell.validate()
            if (cell.element_id, cell.threat) != (eid, threat):
                raise MatrixFormatError(f"misfiled cell {eid}/{threat}")
            if eid not in ids:
                raise MatrixFormatError(f"unknown-id({eid})")
        for el in sorted(self.elements, key=lambda e: _element_key(e.element_id)):
            for threat in sorted(THREATS):
                if (el.element_id, threat) not in self.cells:
                    raise MatrixFormatError(
                        f"missing-cell({el.element_id},{threat})")

    def cell(self, element_id: str, threat: str) -> ThreatCell:
        return self.cells[(element_id, threat)]

    def sorted_elements(self) -> list[Element]:
        return sorted(self.elements, key=lambda e: _element_key(e.element_id))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ThreatMatrix):
            return NotImplemented
        return (sorted(self.elements, key=lambda e: e.element_id)
                == sorted(other.elements, key=lambda e: e.element_id)
                and self.cells == other.cells)


def prioritize(matrix: ThreatMatrix) -> list[tuple[ThreatCell, int]]:
    """Cells ranked by risk score (descending), then element id, then
    threat letter."""
    matrix.validate()
    ranked = [(cell, risk_score(cell)) for cell in matrix.cells.values()]
    ranked.sort(key=lambda cs: (-cs[1], _element_key(cs[0].element_id),
                                cs[0].threat))
    return ranked


# ---------------------------------------------------------------------------
# io


CSV_HEADER = ["element", "kind", "threat", "likelihood", "impact"]


def render_csv(matrix: ThreatMatrix) -> str:
    """Canonical CSV: sorted by element id then threat letter."""
    matrix.validate()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    kind_by_id = {el.element_id: el.kind for el in matrix.elements}
    for el in matrix.sorted_elements():
        for threat in sorted(THREATS):
            cell = matrix.cells[(el.element_id, threat)]
            writer.writerow([el.element_id, kind_by_id[el.element_id], threat,
                             cell.likelihood, cell.impact])
    return buf.getvalue()


def render_markdown(matrix: ThreatMatrix) -> str:
    """Human-facing grid: one row per element, STRIDE-ordered columns,
    cells as likelihood/impact."""
    matrix.validate()
    lines = ["| Element | Kind | " + " | ".join(THREATS) + " |",
             "|---|---|" + "---|" * len(THREATS)]
    for el in matrix.sorted_elements():
        cells = [matrix.cells[(el.element_id, t)] for t in THREATS]
        lines.append("| " + el.element_id + " | " + el.kind + " | "
                     + " | ".join(f"{c.likelihood}/{c.impact}" for c in cells)
                     + " |")
    return "\n".join(lines) + "\n"


def load_csv(text: str) -> ThreatMatrix:
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if not rows or rows[0] != CSV_HEADER:
        raise MatrixFormatError(f"bad header: {rows[0] if rows else 'empty file'}")
    elements: dict[str, Element] = {}
    cells: dict[tuple[str, str], ThreatCell] = {}
    for row in rows[1:]:
        if len(row) != 5:
            raise MatrixFormatError(f"bad row: {row}")
        eid, kind, threat, likelihood, impact = row
        el = Element(eid, kind)
        el.validate()
        if eid in elements and elements[eid].kind != kind:
            raise MatrixFormatError(f"conflicting kinds for {eid}")
        elements.setdefault(eid, el)
        if (eid, threat) in cells:
            raise MatrixFormatError(f"duplicate-cell({eid},{threat})")
        cell = ThreatCell(eid, threat, likelihood, impact)
        cell.validate()
        cells[(eid, threat)] = cell
    matrix = ThreatMatrix(list(elements.values()), cells)
    matrix.validate()
    return matrix


def load_csv_file(path: str | Path) -> ThreatMatrix:
    return load_csv(Path(path).read_text())


def load_bundled() -> ThreatMatrix:
    text = resources.files("secmlops.data").joinpath(FIXTURE_RESOURCE).read_text()
    return load_csv(text)


def bundled_csv_bytes() -> bytes:
    return resources.files("secmlops.data").joinpath(FIXTURE_RESOURCE).read_bytes()
