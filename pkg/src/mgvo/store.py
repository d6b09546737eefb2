"""Per-site persistence: content-addressed blobs + an append-only record log.

Blobs live under ``data_dir/blobs/<first 2 hex>/<sha256>`` and are verified on
every read. Metadata records (patients, images, derived results, annotations,
jobs) are appended to ``data_dir/meta.log`` as length-prefixed JSON and the
whole index is rebuilt by replaying the log at startup; a truncated tail
(crash mid-append) is tolerated. One writer, many readers: a single lock
serializes mutations, and scans build their row list under it so concurrent
writes are invisible mid-scan.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

from .errors import (
    IntegrityError,
    InvariantViolation,
    IoFailure,
    NotFound,
    RegionOutOfBounds,
    UnknownImage,
    UnknownPatient,
)
from .model import AnnotationRecord, DerivedRecord, ImageRecord, PatientRecord

_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class BlobRef:
    sha256: str
    size_bytes: int


@dataclass
class SiteStats:
    num_patients: int
    num_image_files: int
    num_derived_files: int
    metadata_size_bytes: int
    blob_storage_size_bytes: int


class SiteStore:
    def __init__(self, data_dir) -> None:
        self.data_dir = Path(data_dir)
        self._blob_dir = self.data_dir / "blobs"
        self._blob_dir.mkdir(parents=True, exist_ok=True)
        self._log_path = self.data_dir / "meta.log"
        self._lock = threading.RLock()

        self._patients: dict[str, PatientRecord] = {}
        self._images: dict[int, ImageRecord] = {}
        self._derived: dict[int, DerivedRecord] = {}
        self._latest: dict[tuple[int, str], DerivedRecord] = {}
        self._annotations: dict[int, AnnotationRecord] = {}
        self._notes_by_image: dict[int, list[int]] = {}
        self._image_by_blob: dict[str, int] = {}
        self._jobs: dict[str, dict] = {}
        self._next_image = 1
        self._next_derived = 1
        self._next_note = 1
        self._blob_bytes = 0

        self._replay()
        self._log = open(self._log_path, "ab")
        for path in self._blob_dir.glob("*/*"):
            self._blob_bytes += path.stat().st_size

    def close(self) -> None:
        with self._lock:
            self._log.close()

    # --- blobs ---------------------------------------------------------

    def _blob_path(self, sha: str) -> Path:
        return self._blob_dir / sha[:2] / sha

    def put_blob(self, data: bytes) -> BlobRef:
        sha = hashlib.sha256(data).hexdigest()
        ref = BlobRef(sha, len(data))
        path = self._blob_path(sha)
        with self._lock:
            if path.exists():
                return ref
            try:
                path.parent.mkdir(exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(data)
                os.replace(tmp, path)
            except OSError as exc:
                raise IoFailure(f"writing blob {sha}: {exc}") from exc
            self._blob_bytes += len(data)
        return ref

    def get_blob(self, ref) -> bytes:
        sha = ref if isinstance(ref, str) else ref.sha256
        path = self._blob_path(sha)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"no blob {sha}") from None
        except OSError as exc:
            raise IoFailure(f"reading blob {sha}: {exc}") from exc
        if hashlib.sha256(data).hexdigest() != sha:
            raise IntegrityError(f"blob {sha} fails its hash check")
        return data

    # --- record log ------------------------------------------------------

    def _append(self, kind: str, rec: dict) -> None:
        payload = json.dumps({"t": kind, "rec": rec}, sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
        try:
            self._log.write(_LEN.pack(len(payload)) + payload)
            self._log.flush()
        except OSError as exc:
            raise IoFailure(f"appending to {self._log_path}: {exc}") from exc

    def _replay(self) -> None:
        if not self._log_path.exists():
            return
        data = self._log_path.read_bytes()
        pos = 0
        while pos + 4 <= len(data):
            (length,) = _LEN.unpack_from(data, pos)
            if pos + 4 + length > len(data):
                break  # torn tail from an interrupted append
            entry = json.loads(data[pos + 4 : pos + 4 + length])
            self._apply(entry["t"], entry["rec"])
            pos += 4 + length

    def _apply(self, kind: str, rec: dict) -> None:
        if kind == "patient":
            patient = PatientRecord(**rec)
            self._patients[patient.pid] = patient
        elif kind == "image":
            rec = dict(rec, blob=BlobRef(**rec["blob"]))
            image = ImageRecord(**rec)
            self._images[image.local_id] = image
            self._image_by_blob[image.blob.sha256] = image.local_id
            self._next_image = max(self._next_image, image.local_id + 1)
        elif kind == "derived":
            derived = DerivedRecord(**rec)
            self._derived[derived.local_id] = derived
            self._latest[(derived.image_local_id, derived.kind)] = derived
            self._next_derived = max(self._next_derived, derived.local_id + 1)
        elif kind == "annotation":
            rec = dict(rec, region=tuple(rec["region"]))
            note = AnnotationRecord(**rec)
            self._annotations[note.local_id] = note
            self._notes_by_image.setdefault(note.image_local_id, []).append(note.local_id)
            self._next_note = max(self._next_note, note.local_id + 1)
        elif kind == "job":
            self._jobs[rec["job_id"]] = rec
        else:
            raise InvariantViolation(f"unknown record kind {kind!r} in log")

    # --- records -----------------------------------------------------------

    def upsert_patient(self, patient: PatientRecord) -> None:
        patient.validate()
        with self._lock:
            self._append("patient", asdict(patient))
            self._patients[patient.pid] = patient

    def insert_image(self, image: ImageRecord) -> int:
        with self._lock:
            if image.pid not in self._patients:
                raise UnknownPatient(f"no patient {image.pid}")
            image.local_id = self._next_image
            image.validate()
            self._append("image", asdict(image))
            self._apply_image(image)
            return image.local_id

    def _apply_image(self, image: ImageRecord) -> None:
        self._images[image.local_id] = image
        self._image_by_blob[image.blob.sha256] = image.local_id
        self._next_image = image.local_id + 1

    def insert_derived(self, derived: DerivedRecord) -> int:
        with self._lock:
            if derived.image_local_id not in self._images:
                raise UnknownImage(f"no image {derived.image_local_id}")
            derived.local_id = self._next_derived
            derived.validate()
            self._append("derived", asdict(derived))
            self._derived[derived.local_id] = derived
            self._latest[(derived.image_local_id, derived.kind)] = derived
            self._next_derived += 1
            return derived.local_id

    def insert_annotation(self, note: AnnotationRecord) -> int:
        with self._lock:
            image = self._images.get(note.image_local_id)
            if image is None:
                raise UnknownImage(f"no image {note.image_local_id}")
            note.local_id = self._next_note
            note.validate()
            x0, y0, x1, y1 = note.region
            if x1 > image.cols or y1 > image.rows:
                raise RegionOutOfBounds(
                    f"region {note.region} exceeds {image.cols}x{image.rows}")
            self._append("annotation", asdict(note))
            self._annotations[note.local_id] = note
            self._notes_by_image.setdefault(note.image_local_id, []).append(note.local_id)
            self._next_note += 1
            return note.local_id

    # --- lookups ---------------------------------------------------------------

    def patient(self, pid: str) -> PatientRecord:
        with self._lock:
            try:
                return self._patients[pid]
            except KeyError:
                raise UnknownPatient(f"no patient {pid}") from None

    def image(self, local_id: int) -> ImageRecord:
        with self._lock:
            try:
                return self._images[local_id]
            except KeyError:
                raise UnknownImage(f"no image {local_id}") from None

    def find_image_by_blob(self, sha256: str) -> Optional[int]:
        with self._lock:
            return self._image_by_blob.get(sha256)

    def latest_derived(self, image_local_id: int, kind: str) -> Optional[DerivedRecord]:
        with self._lock:
            return self._latest.get((image_local_id, kind))

    def derived_history(self, image_local_id: int, kind: str) -> list[DerivedRecord]:
        with self._lock:
            return [d for d in self._derived.values()
                    if d.image_local_id == image_local_id and d.kind == kind]

    def annotations_for_image(self, image_local_id: int) -> list[AnnotationRecord]:
        with self._lock:
            ids = self._notes_by_image.get(image_local_id, [])
            return [self._annotations[i] for i in ids]

    # --- jobs --------------------------------------------------------------------

    def upsert_job(self, job: dict) -> None:
        with self._lock:
            self._append("job", job)
            self._jobs[job["job_id"]] = job

    def jobs(self) -> dict[str, dict]:
        with self._lock:
            return dict(self._jobs)

    # --- scans ----------------------------------------------------------------------

    def _joined_row(self, image: ImageRecord) -> dict:
        patient = self._patients[image.pid]
        row = {
            "patient.id": patient.pid,
            "patient.sex": patient.sex,
            "patient.age": image.age_at_study,
            "image.laterality": image.laterality,
            "image.view": image.view,
            "image.modality": image.modality,
            "image.study_date": image.study_date,
            "_local_id": image.local_id,
            "_pid": patient.pid,
            "_blob": image.blob,
        }
        if patient.height_m is not None:
            row["patient.height_m"] = patient.height_m
        if patient.weight_kg is not None:
            row["patient.weight_kg"] = patient.weight_kg
        kinds = []
        smf = self._latest.get((image.local_id, "smf"))
        if smf is not None:
            kinds.append("smf")
            row["derived.density_pct"] = smf.fields["density_pct"]
        cade = self._latest.get((image.local_id, "cade"))
        if cade is not None:
            kinds.append("cade")
            row["derived.num_findings"] = cade.fields["num_findings"]
        if kinds:
            row["derived.kind"] = tuple(kinds)
        return row

    def _patient_row(self, pid: str) -> dict:
        patient = self._patients[pid]
        row = {
            "patient.id": patient.pid,
            "patient.sex": patient.sex,
            "_pid": patient.pid,
        }
        if patient.height_m is not None:
            row["patient.height_m"] = patient.height_m
        if patient.weight_kg is not None:
            row["patient.weight_kg"] = patient.weight_kg
        return row

    def scan(self, pred: Optional[Callable[[dict], bool]], target: str = "images") -> list[dict]:
        """Joined rows (patient x image x latest derived per kind) matching pred.

        ``target="patients"`` projects the distinct patients whose joined rows
        matched, ordered by pid; image rows come back in local_id order.
        """
        with self._lock:
            matched = []
            for local_id in sorted(self._images):
                row = self._joined_row(self._images[local_id])
                if pred is None or pred(row):
                    matched.append(row)
            if target == "images":
                return matched
            pids = sorted({row["_pid"] for row in matched})
            return [self._patient_row(pid) for pid in pids]

    def dump_rows(self, target: str = "images") -> list[dict]:
        return self.scan(None, target)

    def site_stats(self) -> SiteStats:
        with self._lock:
            self._log.flush()
            meta_size = self._log_path.stat().st_size if self._log_path.exists() else 0
            return SiteStats(
                num_patients=len(self._patients),
                num_image_files=len(self._images),
                num_derived_files=len(self._derived),
                metadata_size_bytes=meta_size,
                blob_storage_size_bytes=self._blob_bytes,
            )
