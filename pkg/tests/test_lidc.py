import sqlite3

import numpy as np
import pytest

from nagam.errors import InputError
from nagam.lidc import DB_COLUMNS, group_readings, read_lidc_records


def test_group_readings_threshold():
    d = np.array([[0, 1, 9], [1, 0, 9], [9, 9, 0]], dtype=float)
    labels = group_readings(d, tol=2.0)
    assert labels[0] == labels[1] != labels[2]
    assert group_readings(np.zeros((1, 1)), 1.0).tolist() == [0]


def test_group_readings_splits_oversized_groups():
    # six readings chained at distance 1, two tight triples at 0.5
    d = np.full((6, 6), 1.0)
    for block in ((0, 1, 2), (3, 4, 5)):
        for i in block:
            for j in block:
                d[i, j] = 0.5
    np.fill_diagonal(d, 0)
    labels = group_readings(d, tol=1.0)
    assert np.bincount(labels).max() <= 4
    assert len(set(labels[:3])) == 1 and len(set(labels[3:])) == 1 and labels[0] != labels[3]


def _square(x0, y0, size=4):
    pts = [(x0 + i, y0) for i in range(size)] + [(x0 + size, y0 + j) for j in range(size)]
    return "\n".join(f"{x},{y}" for x, y in pts)


def _mini_db(path):
    con = sqlite3.connect(path)
    con.execute("CREATE TABLE scans (id INTEGER, slice_thickness REAL, patient_id TEXT)")
    con.execute("CREATE TABLE zvals (id INTEGER, scan_id INTEGER, val REAL)")
    con.execute("CREATE TABLE contours (id INTEGER, annotation_id INTEGER, image_z_position REAL, coords TEXT)")
    cols = ", ".join(f'"{c}" INTEGER' for c in DB_COLUMNS)
    con.execute(f"CREATE TABLE annotations (id INTEGER, scan_id INTEGER, {cols})")
    con.execute("INSERT INTO scans VALUES (1, 2.5, 'LIDC-IDRI-0001')")
    for i in range(5):
        con.execute("INSERT INTO zvals VALUES (?, 1, ?)", (i, -10.0 - 2.5 * i))
    # readings 1 and 2 outline the same lesion, 3 is far away, 4 has an invalid code
    rows = [
        (1, 1, 3, 1, 6, 3, 2, 1, 1, 5, 2),
        (2, 1, 5, 1, 6, 4, 2, 1, 3, 5, 4),
        (3, 1, 2, 1, 3, 5, 5, 1, 1, 5, 1),
        (4, 1, 2, 5, 3, 5, 5, 1, 1, 5, 1),
    ]
    con.executemany(f"INSERT INTO annotations VALUES ({','.join('?' * 11)})", rows)
    contours = [(1, 1, -12.5, _square(100, 100)), (2, 2, -12.5, _square(101, 100)), (3, 3, -15.0, _square(300, 40)), (4, 4, -10.0, _square(10, 400))]
    con.executemany("INSERT INTO contours VALUES (?, ?, ?, ?)", contours)
    con.commit()
    con.close()


def test_read_records_from_database(tmp_path, schema):
    db = tmp_path / "mini.sqlite"
    _mini_db(db)
    records, stats = read_lidc_records(db, schema)
    assert stats == {"readings": 3, "dropped_readings": 1, "nodules": 2, "scans": 1}
    ids = [r.nodule_id for r in records]
    assert ids == ["LIDC-IDRI-0001/s1/n1", "LIDC-IDRI-0001/s1/n1", "LIDC-IDRI-0001/s1/n2"]
    assert [r.rater_id for r in records] == ["a1", "a2", "a3"]
    assert records[1].ordinal_ratings["spiculation"] == 3 and records[1].malignancy == 4
    assert records[2].categorical_ratings["calcification"] == 3


def test_missing_database(tmp_path):
    with pytest.raises(InputError):
        read_lidc_records(tmp_path / "nope.sqlite")


def test_real_export(lidc_dataset):
    if lidc_dataset is None:
        pytest.skip("no LIDC-IDRI ratings available")
    assert 2600 <= len(lidc_dataset) <= 2700
    assert len(set(lidc_dataset.ids)) == len(lidc_dataset)
    n_raters = np.array([r.n_raters for r in lidc_dataset.rows])
    assert n_raters.min() >= 1
    # groups the tolerance shrinking cannot separate stay merged, as in pylidc
    assert np.mean(n_raters <= 4) > 0.99
