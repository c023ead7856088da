import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camil.data_model import (
    HRD_TARGET,
    Cohort,
    FeatureBag,
    HrdSubscores,
    PatientRecord,
    Sex,
    TargetKind,
    TargetSpec,
    binarize_target,
    compose_hrd,
    fit_cutoff,
    load_cohort,
    lower_median,
    read_clinical_table,
    read_feature_file,
    write_clinical_table,
    write_cohort,
    write_feature_file,
)
from camil.errors import DegenerateError, FormatError
from camil.synth import SynthConfig, generate_cohort


def _record(pid, target=1.0, site="S0", **kw):
    return PatientRecord(pid, site, target, **kw)


class TestFeatureBag:
    def test_rejects_non_finite(self):
        x = np.ones((3, 4), dtype=np.float32)
        x[1, 2] = np.nan
        with pytest.raises(FormatError, match="non-finite"):
            FeatureBag("p", "s", x)

    def test_rejects_empty_and_1d(self):
        with pytest.raises(FormatError):
            FeatureBag("p", "s", np.zeros((0, 4), dtype=np.float32))
        with pytest.raises(FormatError):
            FeatureBag("p", "s", np.zeros(4, dtype=np.float32))

    def test_coords_must_match_and_be_unique(self):
        x = np.zeros((2, 3), dtype=np.float32)
        with pytest.raises(FormatError, match="coords"):
            FeatureBag("p", "s", x, np.array([[0, 0]]))
        with pytest.raises(FormatError, match="duplicate"):
            FeatureBag("p", "s", x, np.array([[1, 1], [1, 1]]))

    def test_arrays_are_read_only(self):
        bag = FeatureBag("p", "s", np.zeros((2, 3)), np.array([[0, 0], [0, 1]]))
        assert bag.features.dtype == np.float32
        with pytest.raises(ValueError):
            bag.features[0, 0] = 1.0


class TestFeatureFile:
    def test_round_trip_with_coords(self, tmp_path, rng):
        x = rng.standard_normal((5, 7)).astype(np.float32)
        c = np.arange(10).reshape(5, 2)
        write_feature_file(tmp_path / "a.milf", x, c)
        got, coords = read_feature_file(tmp_path / "a.milf")
        assert got.tobytes() == x.tobytes()
        np.testing.assert_array_equal(coords, c)

    def test_header_layout(self, tmp_path):
        write_feature_file(tmp_path / "a.milf", np.ones((2, 3), dtype=np.float32))
        raw = (tmp_path / "a.milf").read_bytes()
        assert struct.unpack_from("<4sHIIB", raw) == (b"MILF", 1, 2, 3, 0)
        assert len(raw) == struct.calcsize("<4sHIIB") + 2 * 3 * 4

    def test_short_row_is_dimension_mismatch(self, tmp_path):
        # header declares d=2048 but the payload holds one value less
        header = struct.pack("<4sHIIB", b"MILF", 1, 1, 2048, 0)
        (tmp_path / "bad.milf").write_bytes(header + np.zeros(2047, dtype="<f4").tobytes())
        with pytest.raises(FormatError, match="dimension mismatch"):
            read_feature_file(tmp_path / "bad.milf")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.milf").write_bytes(struct.pack("<4sHIIB", b"XXXX", 1, 1, 1, 0) + b"\0" * 4)
        with pytest.raises(FormatError, match="magic"):
            read_feature_file(tmp_path / "bad.milf")

    def test_non_finite_payload(self, tmp_path):
        write_feature_file(tmp_path / "a.milf", np.array([[np.inf, 1.0]], dtype=np.float32))
        with pytest.raises(FormatError, match="non-finite"):
            read_feature_file(tmp_path / "a.milf")


class TestClinicalTable:
    def test_round_trip(self, tmp_path):
        recs = [
            _record("a", 1.5, age=60.0, sex=Sex.FEMALE, stage=2, survival_days=100.0, event=True),
            _record("b", 2.5),
        ]
        write_clinical_table(tmp_path / "c.csv", recs)
        back = read_clinical_table(tmp_path / "c.csv")
        assert back["a"] == recs[0]
        assert back["b"] == recs[1]

    def test_duplicate_patient(self, tmp_path):
        (tmp_path / "c.csv").write_text(
            "patient_id,site_id,target,age,sex,stage,survival_days,event\n"
            "a,S,1,,,,,\n"
            "a,S,2,,,,,\n"
        )
        with pytest.raises(FormatError, match="duplicate"):
            read_clinical_table(tmp_path / "c.csv")

    def test_missing_target_skipped(self, tmp_path):
        (tmp_path / "c.csv").write_text(
            "patient_id,site_id,target,age,sex,stage,survival_days,event\n"
            "a,S,,,,,,\n"
            "b,S,3,,unknown,,,\n"
        )
        recs = read_clinical_table(tmp_path / "c.csv")
        assert list(recs) == ["b"]
        assert recs["b"].sex is None


class TestLoadCohort:
    def test_overlap_of_three_files_and_two_rows(self, tmp_path, rng):
        fdir = tmp_path / "features"
        fdir.mkdir()
        for pid in ("a", "b", "c"):
            write_feature_file(fdir / f"{pid}.milf", rng.standard_normal((2, 4)))
        write_clinical_table(tmp_path / "c.csv", [_record("a"), _record("b"), _record("z")])
        cohort = load_cohort(fdir, tmp_path / "c.csv", TargetSpec("t"))
        assert cohort.patient_ids == ["a", "b"]
        assert cohort.report.n_target_overlap == 2
        assert cohort.report.bags_without_record == ("c",)
        assert cohort.report.records_without_bag == ("z",)

    def test_synthetic_round_trip_is_bit_exact(self, tmp_path):
        cohort, _ = generate_cohort(SynthConfig(n_patients=12, n_sites=3, d=6, signal_dim_count=2, seed=3))
        write_cohort(cohort, tmp_path / "f", tmp_path / "c.csv")
        back = load_cohort(tmp_path / "f", tmp_path / "c.csv", TargetSpec("t"))
        assert back.patient_ids == cohort.patient_ids
        for pid in cohort.patient_ids:
            assert back.bags[pid].features.tobytes() == cohort.bags[pid].features.tobytes()
            np.testing.assert_array_equal(back.bags[pid].tile_coords, cohort.bags[pid].tile_coords)
            assert back.records[pid] == cohort.records[pid]

    def test_multi_slide_concat_and_first(self, tmp_path):
        fdir = tmp_path / "f"
        fdir.mkdir()
        write_feature_file(fdir / "a__s1.milf", np.zeros((2, 3)), [[0, 0], [0, 1]])
        write_feature_file(fdir / "a__s2.milf", np.ones((3, 3)), [[0, 0], [0, 1], [1, 1]])
        write_clinical_table(tmp_path / "c.csv", [_record("a")])
        cat = load_cohort(fdir, tmp_path / "c.csv", TargetSpec("t"))
        assert cat.bags["a"].n_instances == 5
        assert cat.bags["a"].tile_coords is None
        first = load_cohort(fdir, tmp_path / "c.csv", TargetSpec("t"), merge_slides="first")
        assert first.bags["a"].n_instances == 2

    def test_width_mismatch_across_files(self, tmp_path):
        fdir = tmp_path / "f"
        fdir.mkdir()
        write_feature_file(fdir / "a.milf", np.zeros((2, 3)))
        write_feature_file(fdir / "b.milf", np.zeros((2, 4)))
        write_clinical_table(tmp_path / "c.csv", [_record("a"), _record("b")])
        with pytest.raises(FormatError, match="dimension mismatch"):
            load_cohort(fdir, tmp_path / "c.csv", TargetSpec("t"))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cohort(tmp_path / "nope", tmp_path / "c.csv", TargetSpec("t"))

    def test_cohort_rejects_bag_without_record(self):
        bag = FeatureBag("a", "s", np.zeros((1, 2)))
        with pytest.raises(FormatError):
            Cohort("c", {"a": bag}, {})


class TestHrd:
    def test_examples(self):
        assert compose_hrd(HrdSubscores(0, 0, 0)) == 0.0
        total = compose_hrd(HrdSubscores(20, 15, 10))
        assert total == 45.0
        assert binarize_target({"x": total}, HRD_TARGET, ["x"]) == {"x": 1}

    def test_negative_subscore_rejected(self):
        with pytest.raises(ValueError):
            HrdSubscores(-1, 0, 0)

    @given(
        st.floats(0, 50), st.floats(0, 50), st.floats(0, 50), st.floats(0, 10)
    )
    def test_symmetric_and_additive(self, a, b, c, delta):
        base = compose_hrd(HrdSubscores(a, b, c))
        assert base == pytest.approx(compose_hrd(HrdSubscores(c, a, b)))
        assert compose_hrd(HrdSubscores(a + delta, b, c)) == pytest.approx(base + delta)

    def test_synthetic_hrd_range(self):
        cohort, truth = generate_cohort(
            SynthConfig(n_patients=80, n_sites=4, d=4, signal_dim_count=2, target_kind="hrd", label_noise_sd=0.3)
        )
        values = np.array(list(cohort.targets().values()))
        assert values.min() >= 0.0 and values.max() <= 103.0 + 1e-9
        for pid, sub in truth.subscores.items():
            assert compose_hrd(sub) == cohort.records[pid].target_value


class TestBinarize:
    def test_hrd_cutoff_examples(self):
        labels = binarize_target({"a": 41.9, "b": 42.0, "c": 60.0}, HRD_TARGET, ["a", "b", "c"])
        assert labels == {"a": 0, "b": 1, "c": 1}

    def test_median_split_tie_goes_negative(self):
        values = {str(v): float(v) for v in range(1, 6)}
        labels = binarize_target(values, TargetSpec("t"), values)
        assert labels == {"1": 0, "2": 0, "3": 0, "4": 1, "5": 1}

    def test_cutoff_fitted_on_train_only(self):
        # train median is 10; the pooled lower median would be 11 and flip te2
        values = {"tr0": 0.0, "tr1": 10.0, "tr2": 30.0, "te": 5.0, "te2": 11.0, "te3": 40.0, "te4": 50.0}
        labels = binarize_target(values, TargetSpec("t"), ["tr0", "tr1", "tr2"])
        assert labels["te"] == 0 and labels["te2"] == 1
        assert binarize_target(values, TargetSpec("t"), list(values))["te2"] == 0

    def test_lower_median(self):
        assert lower_median([4, 1, 3, 2]) == 2.0
        assert lower_median([5]) == 5.0

    def test_degenerate_target(self):
        with pytest.raises(DegenerateError, match="degenerate target"):
            binarize_target({"a": 1.0, "b": 1.0}, TargetSpec("t"), ["a", "b"])

    def test_spec_invariants(self):
        with pytest.raises(ValueError):
            TargetSpec("t", TargetKind.FIXED_CUTOFF)
        with pytest.raises(ValueError):
            TargetSpec("t", TargetKind.MEDIAN_SPLIT, cutoff=1.0)

    @settings(max_examples=60)
    @given(
        st.lists(st.floats(-100, 100), min_size=2, max_size=30, unique=True),
        st.lists(st.floats(-100, 100), max_size=10),
    )
    def test_monotone_and_independent_of_held_out(self, train, held_out):
        values = {f"t{i}": v for i, v in enumerate(train)}
        spec = TargetSpec("t")
        cut = fit_cutoff(values, spec, list(values))
        labels = binarize_target(values, spec, list(values))
        order = sorted(values, key=values.get)
        seq = [labels[p] for p in order]
        assert seq == sorted(seq)
        # adding or duplicating held-out patients never moves the cutoff
        extended = dict(values)
        extended.update({f"h{i}": v for i, v in enumerate(held_out + held_out)})
        assert fit_cutoff(extended, spec, list(values)) == cut
