import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointrisk.cohort import (
    Cohort, DataError, ImageDensityRecord, SubjectRecord, aggregate_visit,
    build_cohort, read_cohort_csv, read_events_csv, read_images_csv,
    write_cohort_csv, COHORT_CSV_COLUMNS,
)


def img(sid="s1", visit=0, age=45.0, side="Left", view="CC", da=50.0,
        ba=200.0, manuf="Hologic", center=1):
    return ImageDensityRecord(subject_id=sid, visit_index=visit, age=age,
                              side=side, view=view, dense_area=da,
                              breast_area=ba, manufacturer=manuf, center=center)


class TestImageDensityRecord:
    def test_percent_density(self):
        assert img(da=50.0, ba=200.0).percent_density == 25.0

    @pytest.mark.parametrize("kwargs", [
        dict(side="Front"), dict(view="XX"), dict(manuf="Siemens"),
        dict(center=3), dict(da=-1.0), dict(ba=0.0), dict(visit=-1),
        dict(da=300.0, ba=200.0),
    ])
    def test_invalid_records(self, kwargs):
        with pytest.raises(DataError):
            img(**kwargs)


class TestAggregateVisit:
    def test_four_view_dense_area(self):
        records = [
            img(side="Left", view="CC", da=50.0),
            img(side="Left", view="MLO", da=60.0),
            img(side="Right", view="CC", da=40.0),
            img(side="Right", view="MLO", da=44.0),
        ]
        visit = aggregate_visit(records)
        assert visit.dense_area_total == pytest.approx(97.0)

    def test_single_view_per_breast(self):
        records = [img(side="Left", view="CC", da=30.0),
                   img(side="Right", view="CC", da=20.0)]
        assert aggregate_visit(records).dense_area_total == pytest.approx(50.0)

    def test_percent_density_average(self):
        # L views 30%, 34%; R views 20%, 26% -> per breast {32, 23} -> 27.5
        records = [
            img(side="Left", view="CC", da=30.0, ba=100.0),
            img(side="Left", view="MLO", da=34.0, ba=100.0),
            img(side="Right", view="CC", da=20.0, ba=100.0),
            img(side="Right", view="MLO", da=26.0, ba=100.0),
        ]
        assert aggregate_visit(records).percent_density_avg == pytest.approx(27.5)

    def test_missing_breast(self):
        with pytest.raises(DataError, match="incomplete visit"):
            aggregate_visit([img(side="Left", view="CC")])

    def test_empty(self):
        with pytest.raises(DataError, match="incomplete visit"):
            aggregate_visit([])

    def test_multiple_manufacturers_rejected(self):
        records = [img(side="Left", manuf="Hologic"),
                   img(side="Right", manuf="GEHC")]
        with pytest.raises(DataError, match="incomplete visit"):
            aggregate_visit(records)

    def test_mixed_visits_rejected(self):
        with pytest.raises(DataError):
            aggregate_visit([img(visit=0), img(visit=1, side="Right")])

    def test_permutation_invariance(self):
        records = [
            img(side="Left", view="CC", da=31.0, ba=110.0),
            img(side="Left", view="MLO", da=35.0, ba=115.0),
            img(side="Right", view="CC", da=21.0, ba=95.0),
            img(side="Right", view="MLO", da=27.0, ba=100.0),
        ]
        base = aggregate_visit(records)
        for perm in ([3, 1, 0, 2], [2, 3, 0, 1], [1, 0, 3, 2]):
            other = aggregate_visit([records[i] for i in perm])
            assert other == base

    def test_pd_formula(self):
        records = [
            img(side="Left", view="CC", da=31.0, ba=110.0),
            img(side="Left", view="MLO", da=35.0, ba=115.0),
            img(side="Right", view="CC", da=21.0, ba=95.0),
        ]
        visit = aggregate_visit(records)
        left = np.mean([100 * 31 / 110, 100 * 35 / 115])
        right = 100 * 21 / 95
        assert visit.percent_density_avg == pytest.approx(
            np.mean([left, right]), abs=1e-12)


class TestSubjectRecord:
    def test_valid(self):
        s = SubjectRecord("s1", 45.0, 45.0, 1, [45.0, 46.0], [3.0, 3.1],
                          50.0, 1)
        assert s.n_visits == 2

    def test_one_visit_rejected(self):
        with pytest.raises(DataError, match="fewer than two visits"):
            SubjectRecord("s1", 45.0, 45.0, 1, [45.0], [3.0], 50.0, 1)

    def test_nonincreasing_times(self):
        with pytest.raises(DataError):
            SubjectRecord("s1", 45.0, 45.0, 1, [45.0, 45.0], [3.0, 3.0], 50.0, 1)

    def test_entry_mismatch(self):
        with pytest.raises(DataError):
            SubjectRecord("s1", 44.0, 44.0, 1, [45.0, 46.0], [3.0, 3.0], 50.0, 1)

    def test_event_before_entry(self):
        with pytest.raises(DataError, match="event before entry"):
            SubjectRecord("s1", 45.0, 45.0, 1, [45.0, 46.0], [3.0, 3.0], 44.0, 1)

    def test_event_before_last_visit(self):
        with pytest.raises(DataError):
            SubjectRecord("s1", 45.0, 45.0, 1, [45.0, 46.0], [3.0, 3.0], 45.5, 1)


def make_images(sid, ages, da=64.0):
    out = []
    for v, age in enumerate(ages):
        out.append(img(sid=sid, visit=v, age=age, side="Left", da=da))
        out.append(img(sid=sid, visit=v, age=age, side="Right", da=0.0))
    return out


class TestBuildCohort:
    def test_two_subjects(self):
        images = make_images("a", [45.0, 46.0]) + make_images("b", [50.0, 51.0])
        events = {"a": (47.0, 1), "b": (51.0, 0)}
        cohort = build_cohort(images, events)
        assert len(cohort) == 2
        assert cohort.n_events == 1

    def test_sqrt_transform(self):
        images = make_images("a", [45.0, 46.0], da=64.0)
        cohort = build_cohort(images, {"a": (47.0, 0)}, transform="Sqrt")
        np.testing.assert_allclose(cohort.subject("a").y, [8.0, 8.0])

    def test_no_transform(self):
        images = make_images("a", [45.0, 46.0], da=64.0)
        cohort = build_cohort(images, {"a": (47.0, 0)}, transform="None")
        np.testing.assert_allclose(cohort.subject("a").y, [64.0, 64.0])

    def test_single_visit_excluded(self):
        images = make_images("a", [45.0]) + make_images("b", [50.0, 51.0])
        cohort = build_cohort(images, {"a": (47.0, 0), "b": (52.0, 0)})
        assert len(cohort) == 1
        assert ("a", "fewer than two visits") in cohort.excluded

    def test_paper_selection_entry_age(self):
        images = make_images("a", [39.0, 40.0]) + make_images("b", [50.0, 51.0])
        cohort = build_cohort(images, {"a": (41.0, 0), "b": (52.0, 0)},
                              paper_selection=True)
        assert len(cohort) == 1
        assert cohort.excluded[0][1] == "entry age outside 40-74"

    def test_duplicate_image_error(self):
        images = make_images("a", [45.0, 46.0])
        with pytest.raises(DataError, match="duplicate"):
            build_cohort(images + [images[0]], {"a": (47.0, 0)})

    def test_event_before_entry_error(self):
        images = make_images("a", [45.0, 46.0])
        with pytest.raises(DataError, match="event before entry"):
            build_cohort(images, {"a": (44.0, 1)})

    def test_missing_event_entry(self):
        with pytest.raises(DataError):
            build_cohort(make_images("a", [45.0, 46.0]), {})

    def test_manufacturer_indicator(self):
        hologic = build_cohort(make_images("a", [45.0, 46.0]), {"a": (47.0, 0)})
        assert hologic.subject("a").manuf == 1
        images = []
        for v, age in enumerate([45.0, 46.0]):
            images.append(img(sid="a", visit=v, age=age, side="Left",
                              manuf="GEHC"))
            images.append(img(sid="a", visit=v, age=age, side="Right",
                              manuf="GEHC", da=0.0))
        gehc = build_cohort(images, {"a": (47.0, 0)})
        assert gehc.subject("a").manuf == 0


class TestCohort:
    def test_duplicate_ids(self):
        s = SubjectRecord("s1", 45.0, 45.0, 1, [45.0, 46.0], [3.0, 3.0], 47.0, 0)
        s2 = SubjectRecord("s1", 45.0, 45.0, 1, [45.0, 46.0], [3.0, 3.0], 47.0, 0)
        with pytest.raises(DataError, match="duplicate"):
            Cohort(subjects=[s, s2])

    def test_unknown_kind(self):
        with pytest.raises(DataError):
            Cohort(subjects=[], biomarker_kind="Volume")

    def test_unknown_subject(self):
        with pytest.raises(DataError):
            Cohort(subjects=[]).subject("zz")


class TestCsvIO:
    def make_cohort(self, rng):
        subjects = []
        for i in range(3):
            t0 = float(rng.uniform(41.0, 60.0))
            times = t0 + np.cumsum(np.concatenate([[0.0], rng.uniform(0.9, 1.2, 3)]))
            y = rng.uniform(1.0, 10.0, 4)
            subjects.append(SubjectRecord(
                f"s{i}", t0, t0, int(rng.integers(2)), times, y,
                float(times[-1] + rng.uniform(0, 2)), int(rng.integers(2))))
        return Cohort(subjects=subjects)

    def test_round_trip_bit_exact(self, tmp_path):
        cohort = self.make_cohort(np.random.default_rng(0))
        path = tmp_path / "cohort.csv"
        write_cohort_csv(cohort, path)
        back = read_cohort_csv(path)
        assert len(back) == len(cohort)
        for a, b in zip(cohort.subjects, back.subjects):
            assert a.subject_id == b.subject_id
            assert a.t0 == b.t0 and a.age0 == b.age0 and a.manuf == b.manuf
            assert a.event_age == b.event_age
            assert a.event_indicator == b.event_indicator
            np.testing.assert_array_equal(a.times, b.times)
            np.testing.assert_array_equal(a.y, b.y)

    def test_rewrite_byte_identical(self, tmp_path):
        cohort = self.make_cohort(np.random.default_rng(1))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_cohort_csv(cohort, p1)
        write_cohort_csv(read_cohort_csv(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text(",".join(COHORT_CSV_COLUMNS) + "\r\n")
        assert len(read_cohort_csv(path)) == 0

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        cols = [c for c in COHORT_CSV_COLUMNS if c != "event_indicator"]
        path.write_text(",".join(cols) + "\n")
        with pytest.raises(DataError, match="event_indicator"):
            read_cohort_csv(path)

    def test_malformed_row_line_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(",".join(COHORT_CSV_COLUMNS) + "\n"
                        "s1,45.0,3.0,45.0,45.0,1,47.0,one\n")
        with pytest.raises(DataError, match="line 2"):
            read_cohort_csv(path)

    def test_images_and_events_csv(self, tmp_path):
        ipath = tmp_path / "images.csv"
        ipath.write_text(
            "subject_id,visit_index,age,side,view,dense_area_cm2,"
            "breast_area_cm2,manufacturer,center\n"
            "a,0,45.0,Left,CC,50.0,200.0,Hologic,1\n"
            "a,0,45.0,Right,CC,40.0,180.0,Hologic,1\n")
        records = read_images_csv(ipath)
        assert len(records) == 2
        assert records[0].percent_density == 25.0
        epath = tmp_path / "events.csv"
        epath.write_text("subject_id,event_age,event_indicator\na,50.0,1\n")
        assert read_events_csv(epath) == {"a": (50.0, 1)}

    def test_images_unknown_enum(self, tmp_path):
        path = tmp_path / "images.csv"
        path.write_text(
            "subject_id,visit_index,age,side,view,dense_area_cm2,"
            "breast_area_cm2,manufacturer,center\n"
            "a,0,45.0,Middle,CC,50.0,200.0,Hologic,1\n")
        with pytest.raises(DataError):
            read_images_csv(path)
