"""Domain records shared across the grid, plus site-scoped identity helpers.

A patient is known inside a site only by a pseudonym derived from the site
secret; raw identifiers never enter any record defined here.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from datetime import date, datetime
from typing import TYPE_CHECKING, Optional

from .errors import BadGfid, BadValue, EmptyId, InvariantViolation, NegativeAge, WeakSecret

if TYPE_CHECKING:  # pragma: no cover - annotation only, no runtime cycle
    from .store import BlobRef

PSEUDONYM_RE = re.compile(r"^[0-9a-f]{16}$")
SITE_ID_RE = re.compile(r"^[a-z0-9_]{1,32}$")

SEXES = ("F", "M", "O")
LATERALITIES = ("L", "R")
VIEWS = ("CC", "MLO")
DERIVED_KINDS = ("smf", "cade")


def pseudonymize(raw_id: str, site_secret: bytes) -> str:
    """Site-scoped pseudonym: first 16 hex chars of SHA-256(secret||0x00||id)."""
    if not raw_id:
        raise EmptyId("raw patient id is empty")
    if len(site_secret) < 16:
        raise WeakSecret("site_secret must be at least 16 bytes")
    digest = hashlib.sha256(site_secret + b"\x00" + raw_id.encode("utf-8"))
    return digest.hexdigest()[:16]


def parse_ymd(value: str) -> date:
    """Parse a YYYYMMDD date string; BadValue when not a calendar date."""
    if len(value) != 8 or not value.isdigit():
        raise BadValue(f"not a YYYYMMDD date: {value!r}")
    try:
        return datetime.strptime(value, "%Y%m%d").date()
    except ValueError as exc:
        raise BadValue(f"not a calendar date: {value!r}") from exc


def derive_age(birth_date: str, study_date: str) -> int:
    """Completed years between two YYYYMMDD dates, birthday-aware."""
    born = parse_ymd(birth_date)
    study = parse_ymd(study_date)
    if study < born:
        raise NegativeAge(f"study {study_date} precedes birth {birth_date}")
    before_birthday = (study.month, study.day) < (born.month, born.day)
    return study.year - born.year - int(before_birthday)


@dataclass(frozen=True)
class GlobalFileId:
    site_id: str
    local_id: int

    def __str__(self) -> str:
        return f"{self.site_id}:{self.local_id}"


def format_gfid(site_id: str, local_id: int) -> str:
    return f"{site_id}:{local_id}"


def parse_gfid(text: str) -> GlobalFileId:
    site, sep, local = text.partition(":")
    if not sep or not SITE_ID_RE.match(site) or not local.isdigit():
        raise BadGfid(f"bad global file id: {text!r}")
    return GlobalFileId(site, int(local))


@dataclass
class PatientRecord:
    pid: str
    sex: str
    birth_year: int
    height_m: Optional[float] = None
    weight_kg: Optional[float] = None

    def validate(self, current_year: Optional[int] = None) -> None:
        if not PSEUDONYM_RE.match(self.pid):
            raise InvariantViolation(f"pid is not a pseudonym: {self.pid!r}")
        if self.sex not in SEXES:
            raise InvariantViolation(f"bad sex: {self.sex!r}")
        upper = current_year if current_year is not None else date.today().year
        if not 1880 <= self.birth_year <= upper:
            raise InvariantViolation(f"birth_year out of range: {self.birth_year}")
        if self.height_m is not None and not 0.3 <= self.height_m <= 2.5:
            raise InvariantViolation(f"height_m out of range: {self.height_m}")
        if self.weight_kg is not None and not 1.0 <= self.weight_kg <= 400.0:
            raise InvariantViolation(f"weight_kg out of range: {self.weight_kg}")


@dataclass
class ImageRecord:
    local_id: int
    pid: str
    modality: str
    laterality: str
    view: str
    study_date: str
    age_at_study: int
    rows: int
    cols: int
    blob: "BlobRef"

    def validate(self) -> None:
        if not PSEUDONYM_RE.match(self.pid):
            raise InvariantViolation(f"pid is not a pseudonym: {self.pid!r}")
        if self.laterality not in LATERALITIES:
            raise InvariantViolation(f"bad laterality: {self.laterality!r}")
        if self.view not in VIEWS:
            raise InvariantViolation(f"bad view: {self.view!r}")
        parse_ymd(self.study_date)
        if self.age_at_study < 0:
            raise InvariantViolation("age_at_study is negative")
        if self.rows < 1 or self.cols < 1:
            raise InvariantViolation("image dimensions must be positive")


@dataclass
class DerivedRecord:
    local_id: int
    image_local_id: int
    kind: str
    fields: dict = field(default_factory=dict)
    algo_id: str = ""
    job_id: str = ""

    REQUIRED = {"smf": "density_pct", "cade": "num_findings"}

    def validate(self) -> None:
        if self.kind not in DERIVED_KINDS:
            raise InvariantViolation(f"bad derived kind: {self.kind!r}")
        needed = self.REQUIRED[self.kind]
        if needed not in self.fields:
            raise InvariantViolation(f"derived kind {self.kind!r} requires field {needed!r}")
        for name, value in self.fields.items():
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise InvariantViolation(f"derived field {name!r} is not numeric")


@dataclass
class AnnotationRecord:
    local_id: int
    image_local_id: int
    author: str
    region: tuple  # (x0, y0, x1, y1), end-exclusive pixel box
    text: str
    created_at_ms: int

    def validate(self) -> None:
        if not self.author:
            raise InvariantViolation("annotation author is empty")
        if len(self.region) != 4:
            raise InvariantViolation("region must be (x0, y0, x1, y1)")
        x0, y0, x1, y1 = self.region
        if not (x0 < x1 and y0 < y1) or min(x0, y0) < 0:
            raise InvariantViolation(f"degenerate region: {self.region}")
