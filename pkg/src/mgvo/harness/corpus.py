"""Synthetic mammography corpus with a ground-truth manifest.

Every image is a three-level phantom: a dark background (5..40), one bright
rectangle of "dense tissue" (120..180), and up to six tiny very-bright blobs
(240..255) standing in for microcalcifications. The levels are chosen so a
threshold anywhere in the gaps recovers the planted structure exactly:

* ``planted_dense_fraction`` is measured off the finished pixels (percent
  strictly above 100), so a histogram-threshold density estimate has an
  exact reference,
* blobs are pairwise more than one pixel apart, so 8-connected labeling at
  any threshold in (180, 240) finds exactly ``planted_blob_count`` of them.

Everything derives from one seeded generator: the same (seed, parameters)
always produce byte-identical files and manifest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .. import dicom
from ..errors import BadParams

# Names are drawn from fixed lists so leak tests have concrete needles. All
# entries are 8+ letters and contain letters outside a-f, so none can occur
# inside a hex digest.
FAMILY_NAMES = (
    "ARMITAGE", "BLACKWOOD", "CASTELLANO", "DRUMMOND", "ESPINOZA", "FITZGERALD",
    "GRANTHAM", "HOLLOWAY", "IRONSIDE", "JORGENSEN", "KOWALCZYK", "LINDQVIST",
    "MARCHETTI", "NAKAMURA", "OSTROWSKI", "PELLEGRINO", "QUINTERO", "RICHMOND",
    "SUTHERLAND", "THORNBURY", "UNDERWOOD", "VALENTINE", "WHITFIELD", "YAMAGUCHI",
    "ZIELINSKI", "BERGSTROM", "CALLAGHAN", "DELACROIX", "ELDRIDGE", "FAIRBANKS",
)
GIVEN_NAMES = (
    "ALEXANDRA", "BENJAMIN", "CATHERINE", "DOMINIQUE", "ELEANORA", "FREDERICK",
    "GABRIELLA", "HENRIETTA", "ISADORA", "JOSEPHINE", "KATHERINE", "LEOPOLDINE",
    "MARGUERITE", "NICHOLAS", "OCTAVIA", "PENELOPE", "ROSALIND", "SEBASTIAN",
    "THEODORA", "VALENTINA", "WILHELMINA", "ANASTASIA", "BARTHOLOMEW", "CORNELIUS",
)

_VIEWS = ("CC", "MLO")
_LATERALITIES = ("L", "R")


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(0, len(options)))]


def _paint_image(rng: np.random.Generator, rows: int, cols: int):
    """Pixels plus measured ground truth for one phantom."""
    pixels = rng.integers(5, 41, size=(rows, cols), dtype=np.int64)

    # One dense rectangle covering very roughly a tenth to a half of the frame.
    width = int(rng.integers(max(cols // 4, 1), max(3 * cols // 4, 2)))
    height = int(rng.integers(max(rows // 4, 1), max(3 * rows // 4, 2)))
    x0 = int(rng.integers(0, cols - width + 1))
    y0 = int(rng.integers(0, rows - height + 1))
    pixels[y0:y0 + height, x0:x0 + width] = rng.integers(
        120, 181, size=(height, width), dtype=np.int64)

    # Blobs, kept more than one pixel apart so they stay separate components
    # even under 8-connectivity.
    wanted = int(rng.integers(0, 7))
    boxes = []
    for _ in range(wanted):
        for _attempt in range(50):
            bw = int(rng.integers(1, 9))
            bh = int(rng.integers(1, 9))
            bx = int(rng.integers(0, cols - bw + 1))
            by = int(rng.integers(0, rows - bh + 1))
            candidate = (bx, by, bx + bw, by + bh)
            if all(_chebyshev_gap(candidate, other) >= 2 for other in boxes):
                boxes.append(candidate)
                pixels[by:by + bh, bx:bx + bw] = rng.integers(
                    240, 256, size=(bh, bw), dtype=np.int64)
                break

    pixels = pixels.astype(np.uint8)
    boxes.sort(key=lambda b: (b[1], b[0]))
    dense_fraction = round(100.0 * float(np.count_nonzero(pixels > 100)) / pixels.size, 2)
    return pixels, dense_fraction, boxes


def _chebyshev_gap(a, b) -> int:
    """Chebyshev gap between two (x0, y0, x1, y1) boxes; 0 when they overlap."""
    gap_x = max(b[0] - a[2], a[0] - b[2])
    gap_y = max(b[1] - a[3], a[1] - b[3])
    if gap_x < 0 and gap_y < 0:
        return 0
    return max(gap_x, gap_y)


def _build_file(entry: dict, pixels: np.ndarray) -> bytes:
    ts = dicom.TagSet()
    ts.put_text(dicom.PATIENT_NAME, "PN", entry["raw_patient_name"])
    ts.put_text(dicom.PATIENT_ID, "LO", entry["raw_patient_id"])
    ts.put_text(dicom.PATIENT_BIRTH_DATE, "DA", entry["birth_date"])
    ts.put_text(dicom.PATIENT_SEX, "CS", entry["sex"])
    if entry["height_m"] is not None:
        ts.put_text(dicom.PATIENT_SIZE, "DS", f"{entry['height_m']:.2f}")
    if entry["weight_kg"] is not None:
        ts.put_text(dicom.PATIENT_WEIGHT, "DS", f"{entry['weight_kg']:.1f}")
    ts.put_text(dicom.STUDY_DATE, "DA", entry["study_date"])
    ts.put_text(dicom.MODALITY, "CS", "MG")
    ts.put_text(dicom.VIEW_POSITION, "CS", entry["view"])
    ts.put_text(dicom.IMAGE_LATERALITY, "CS", entry["laterality"])
    ts.put(dicom.ROWS, "US", struct.pack("<H", pixels.shape[0]))
    ts.put(dicom.COLUMNS, "US", struct.pack("<H", pixels.shape[1]))
    ts.put(dicom.BITS_ALLOCATED, "US", struct.pack("<H", 8))
    ts.put(dicom.PIXEL_DATA, "OB", dicom.pad_value("OB", pixels.tobytes()))
    return dicom.write_dicom(ts)


def gen_corpus(seed: int, n_patients: int, images_per_patient: int,
               rows: int = 128, cols: int = 128):
    """(manifest dict, {filename: file bytes}), fully determined by arguments."""
    if n_patients < 0 or images_per_patient < 0:
        raise BadParams("patient and image counts cannot be negative")
    if rows < 8 or cols < 8:
        raise BadParams("phantom images need at least 8x8 pixels")
    rng = np.random.default_rng(np.random.PCG64(seed))

    files: dict = {}
    entries = []
    index = 1
    for p in range(n_patients):
        raw_id = f"MRN{int(rng.integers(0, 10**7)):07d}-{p:03d}"
        raw_name = f"{_pick(rng, FAMILY_NAMES)}^{_pick(rng, GIVEN_NAMES)}"
        birth_year = int(rng.integers(1930, 1969))
        birth_date = f"{birth_year:04d}{int(rng.integers(1, 13)):02d}{int(rng.integers(1, 29)):02d}"
        sex = "F" if rng.random() < 0.85 else ("M" if rng.random() < 0.8 else "O")
        height = round(float(rng.uniform(1.45, 1.85)), 2) if rng.random() >= 0.2 else None
        weight = round(float(rng.uniform(45.0, 110.0)), 1) if rng.random() >= 0.2 else None
        for _i in range(images_per_patient):
            study_date = (f"{int(rng.integers(2003, 2006)):04d}"
                          f"{int(rng.integers(1, 13)):02d}{int(rng.integers(1, 29)):02d}")
            laterality = _pick(rng, _LATERALITIES)
            view = _pick(rng, _VIEWS)
            pixels, dense_fraction, boxes = _paint_image(rng, rows, cols)
            entry = {
                "filename": f"img_{index:05d}.dcm",
                "raw_patient_id": raw_id,
                "raw_patient_name": raw_name,
                "birth_date": birth_date,
                "sex": sex,
                "height_m": height,
                "weight_kg": weight,
                "study_date": study_date,
                "laterality": laterality,
                "view": view,
                "rows": rows,
                "cols": cols,
                "planted_dense_fraction": dense_fraction,
                "planted_blob_count": len(boxes),
                "planted_blob_bboxes": [list(b) for b in boxes],
            }
            data = _build_file(entry, pixels)
            entry["sha256"] = hashlib.sha256(data).hexdigest()
            files[entry["filename"]] = data
            entries.append(entry)
            index += 1
    manifest = {
        "seed": seed,
        "n_patients": n_patients,
        "images_per_patient": images_per_patient,
        "rows": rows,
        "cols": cols,
        "files": entries,
    }
    return manifest, files


def write_corpus(manifest: dict, files: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        (out / name).write_bytes(data)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return manifest_path


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
