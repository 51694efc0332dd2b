"""Export LIDC-IDRI radiologist ratings to the annotations CSV.

Reads the SQLite database bundled with the ``pylidc`` package directly
(no DICOM, no ORM). Readings are grouped into physical nodules the way
``pylidc.Scan.cluster_annotations`` does by default: two readings belong
to the same nodule when their closest contour points (in voxel index
coordinates) are within the scan's slice thickness; groups larger than
four readings are split by shrinking the tolerance by 0.9 until they fit
or the tolerance drops below 0.1.
"""

from __future__ import annotations

import importlib.util
import logging
import sqlite3
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .errors import InputError
from .ingest import NoduleRecord, write_annotations
from .schema import ConceptSchema, default_schema

log = logging.getLogger(__name__)

# database column -> schema concept
DB_COLUMNS = {
    "subtlety": "subtlety",
    "internalStructure": "internal_structure",
    "calcification": "calcification",
    "sphericity": "sphericity",
    "margin": "margin",
    "lobulation": "lobulation",
    "spiculation": "spiculation",
    "texture": "texture",
    "malignancy": "malignancy",
}


def find_pylidc_db() -> Path | None:
    """Path of pylidc's bundled database, without importing pylidc."""
    spec = importlib.util.find_spec("pylidc")
    if spec is None or not spec.origin:
        return None
    path = Path(spec.origin).with_name("pylidc.sqlite")
    return path if path.exists() else None


def _contour_points(coords: str) -> np.ndarray:
    # stored as "x,y" lines; pylidc reverses to (i, j)
    pts = np.array([[int(v) for v in line.split(",")] for line in coords.split("\n")])
    return pts[:, ::-1]


def group_readings(distances: np.ndarray, tol: float, factor=0.9, min_tol=0.1, max_size=4) -> np.ndarray:
    """Connected components of ``distances <= tol``, shrinking tol for oversized groups."""
    if distances.shape[0] == 1:
        return np.zeros(1, dtype=int)
    _, labels = connected_components(distances <= tol, directed=False)
    while np.bincount(labels).max() > max_size:
        tol *= factor
        if tol < min_tol:
            break
        _, labels = connected_components(distances <= tol, directed=False)
    return labels


def read_lidc_records(db_path=None, schema: ConceptSchema | None = None) -> tuple[list[NoduleRecord], dict]:
    """Per-reading records grouped into nodules, plus export statistics.

    Readings with codes outside the schema (the database holds one
    internal-structure code 5) are dropped and counted.
    """
    schema = schema or default_schema()
    db_path = Path(db_path) if db_path else find_pylidc_db()
    if db_path is None or not Path(db_path).exists():
        raise InputError("pylidc database not found; install pylidc or pass its sqlite path")
    con = sqlite3.connect(f"file:{db_path}?mode=ro", uri=True)
    try:
        zvals = defaultdict(list)
        for scan_id, val in con.execute("SELECT scan_id, val FROM zvals"):
            zvals[scan_id].append(val)
        zvals = {k: np.sort(np.asarray(v)) for k, v in zvals.items()}
        scans = {
            sid: (thickness, patient)
            for sid, thickness, patient in con.execute("SELECT id, slice_thickness, patient_id FROM scans")
        }
        contours = defaultdict(list)
        for ann_id, z, coords in con.execute(
            "SELECT annotation_id, image_z_position, coords FROM contours ORDER BY id"
        ):
            contours[ann_id].append((z, coords))
        cols = ", ".join(f'"{c}"' for c in DB_COLUMNS)
        by_scan = defaultdict(list)
        for row in con.execute(f"SELECT id, scan_id, {cols} FROM annotations ORDER BY id"):
            by_scan[row[1]].append(row)
    finally:
        con.close()

    records, dropped, n_nodules = [], 0, 0
    for scan_id in sorted(by_scan):
        rows = by_scan[scan_id]
        zs = zvals[scan_id]
        points = []
        for row in rows:
            mats = []
            for z, coords in sorted(contours[row[0]], key=lambda t: t[0]):
                ij = _contour_points(coords)
                k = np.abs(zs - z).argmin()
                mats.append(np.c_[ij, np.full(len(ij), k)])
            points.append(np.vstack(mats))
        n = len(rows)
        dist = np.zeros((n, n))
        for a in range(n):
            for b in range(a + 1, n):
                dist[a, b] = dist[b, a] = cdist(points[a], points[b]).min()
        labels = group_readings(dist, scans[scan_id][0])
        patient = scans[scan_id][1]
        # number nodules within a scan by their first reading id
        order = sorted(set(labels), key=lambda lab: min(r[0] for r, l in zip(rows, labels) if l == lab))
        for number, lab in enumerate(order, start=1):
            nodule_id = f"{patient}/s{scan_id}/n{number}"
            kept = 0
            for row, l in zip(rows, labels):
                if l != lab:
                    continue
                values = dict(zip(DB_COLUMNS.values(), row[2:]))
                rec = NoduleRecord(
                    nodule_id=nodule_id,
                    rater_id=f"a{row[0]}",
                    ordinal_ratings={c: int(values[c]) for c in schema.ordinal_names},
                    categorical_ratings={c: int(values[c]) for c in schema.categorical_names},
                    malignancy=int(values[schema.target.name]),
                )
                if _valid(rec, schema):
                    records.append(rec)
                    kept += 1
                else:
                    dropped += 1
            n_nodules += kept > 0
    stats = {"readings": len(records), "dropped_readings": dropped, "nodules": n_nodules, "scans": len(by_scan)}
    return records, stats


def _valid(rec: NoduleRecord, schema: ConceptSchema) -> bool:
    if not all(c.in_scale(rec.ordinal_ratings[c.name]) for c in schema.ordinals):
        return False
    if not all(rec.categorical_ratings[c.name] in c.class_codes for c in schema.categoricals):
        return False
    return schema.target.in_scale(rec.malignancy)


def export_annotations(out_path, db_path=None, schema: ConceptSchema | None = None) -> dict:
    records, stats = read_lidc_records(db_path, schema)
    write_annotations(records, out_path, schema)
    log.info("exported %(readings)d readings of %(nodules)d nodules (%(dropped_readings)d dropped)", stats)
    return stats
