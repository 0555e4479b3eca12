"""Trajectory containers, history assembly, design rows, CSV round trip."""

import numpy as np
import pytest

from dtrcal import simlab
from dtrcal.data_model import (
    CovariateSource,
    CovariateTerm,
    DesignSpec,
    HistoryLayout,
    PatientRecord,
    StageObservation,
    Transform,
    assemble_history,
    build_design_row,
    cohort_to_records,
    read_patient_csv,
    records_to_cohort,
    write_patient_csv,
)
from dtrcal.errors import DimensionMismatch, MissingSource, StageAbsent


def one_stage_record(rid=0, z=(0.5,), w=((2.0, 4.0),), x=None, a=1, y=1.0):
    return PatientRecord(
        id=rid,
        stages=(StageObservation(np.array(z), np.array(w), a, x),),
        outcome=y,
    )


def two_stage_record(rid=0, x2=1.3):
    s1 = StageObservation(np.array([0.1]), np.array([[1.0, 2.0]]), 1, np.array([0.7]))
    s2 = StageObservation(np.array([0.2]), np.array([[3.0, 5.0]]), 0, np.array([x2]))
    return PatientRecord(id=rid, stages=(s1, s2), outcome=2.5)


class TestStageObservation:
    def test_rejects_all_absent_replicates(self):
        with pytest.raises(ValueError):
            StageObservation(np.array([0.0]), np.array([[np.nan, np.nan]]), 0)

    def test_rejects_nonbinary_treatment(self):
        with pytest.raises(ValueError):
            StageObservation(np.array([0.0]), np.array([[1.0]]), 2)

    def test_replicate_count_ignores_missing(self):
        obs = StageObservation(np.array([0.0]), np.array([[1.0, np.nan, 3.0]]), 0)
        assert obs.replicate_count() == 2

    def test_arrays_are_read_only(self):
        obs = StageObservation(np.array([0.0]), np.array([[1.0]]), 0)
        with pytest.raises(ValueError):
            obs.surrogates[0, 0] = 9.0


class TestPatientRecord:
    def test_outcome_must_be_finite(self):
        with pytest.raises(ValueError):
            one_stage_record(y=np.inf)

    def test_stage_bounds(self):
        with pytest.raises(StageAbsent):
            one_stage_record().stage(2)


class TestAssembleHistory:
    def test_true_source_passthrough(self):
        record = two_stage_record(x2=1.3)
        h = assemble_history(record, 2, CovariateSource.true())
        # layout [z1, x1, z2, x2, a1]
        assert np.allclose(h, [0.1, 0.7, 0.2, 1.3, 1.0])

    def test_averaged_surrogate_mean_of_present(self):
        record = one_stage_record(w=((2.0, 4.0, np.nan),))
        h = assemble_history(record, 1, CovariateSource.averaged_surrogate())
        assert np.allclose(h, [0.5, 3.0])

    def test_single_surrogate_first_replicate(self):
        record = one_stage_record(w=((2.0, 4.0),))
        h = assemble_history(record, 1, CovariateSource.single_surrogate())
        assert np.allclose(h, [0.5, 2.0])

    def test_missing_truth_raises(self):
        with pytest.raises(MissingSource):
            assemble_history(one_stage_record(), 1, CovariateSource.true())

    def test_stage_absent(self):
        with pytest.raises(StageAbsent):
            assemble_history(one_stage_record(), 2, CovariateSource.single_surrogate())

    def test_calibrated_estimates_by_id(self):
        record = one_stage_record(rid=17)
        source = CovariateSource.calibrated(stage1_estimates={17: np.array([9.0])})
        assert np.allclose(assemble_history(record, 1, source), [0.5, 9.0])
        with pytest.raises(MissingSource):
            assemble_history(one_stage_record(rid=3), 1, source)

    def test_single_replicate_mean_equals_single_surrogate(self):
        record = one_stage_record(w=((2.5,),))
        h_avg = assemble_history(record, 1, CovariateSource.averaged_surrogate())
        h_one = assemble_history(record, 1, CovariateSource.single_surrogate())
        assert np.array_equal(h_avg, h_one)


class TestBuildDesignRow:
    def spec_ix(self):
        # history (x,) treated as error-prone at index 0
        t = (CovariateTerm.intercept(), CovariateTerm.error_prone(0))
        return DesignSpec(t, t)

    def test_control_zeroes_blip_block(self):
        row = build_design_row(np.array([1.0]), 0, self.spec_ix())
        assert np.allclose(row, [1.0, 1.0, 0.0, 0.0])

    def test_treated_copies_blip_block(self):
        row = build_design_row(np.array([1.0]), 1, self.spec_ix())
        assert np.allclose(row, [1.0, 1.0, 1.0, 1.0])

    def test_mixed_terms_expand_in_declared_order(self):
        # history (z, x); treatment-free (1, z, x); blip (1, x)
        spec = DesignSpec(
            (CovariateTerm.intercept(), CovariateTerm.error_free(0), CovariateTerm.error_prone(1)),
            (CovariateTerm.intercept(), CovariateTerm.error_prone(1)),
        )
        row = build_design_row(np.array([0.5, 2.0]), 1, spec)
        assert np.allclose(row, [1.0, 0.5, 2.0, 1.0, 2.0])

    def test_blip_difference_is_zero_on_treatment_free_block(self):
        rng = np.random.default_rng(0)
        spec = DesignSpec(
            (CovariateTerm.intercept(), CovariateTerm.error_free(0), CovariateTerm.error_prone(1)),
            (CovariateTerm.intercept(), CovariateTerm.error_prone(1)),
        )
        for _ in range(25):
            h = rng.normal(size=2)
            r0 = build_design_row(h, 0, spec)
            r1 = build_design_row(h, 1, spec)
            assert np.all(r0[3:] == 0.0)
            assert np.array_equal(r1[:3], r0[:3])

    def test_out_of_range_index_raises(self):
        spec = DesignSpec((CovariateTerm.error_prone(5),), (CovariateTerm.intercept(),))
        with pytest.raises(DimensionMismatch):
            build_design_row(np.array([1.0]), 0, spec)


class TestLayoutValidation:
    def test_tag_must_match_slot(self):
        layout = HistoryLayout(1, (1,), (1,))  # [z, x]
        spec = DesignSpec((CovariateTerm.error_free(1),), (CovariateTerm.intercept(),))
        with pytest.raises(DimensionMismatch):
            spec.validate(layout)

    def test_prior_treatment_requires_stage2(self):
        layout = HistoryLayout(1, (1,), (1,))
        spec = DesignSpec((CovariateTerm.prior_treatment(),), (CovariateTerm.intercept(),))
        with pytest.raises(DimensionMismatch):
            spec.validate(layout)

    def test_stage2_layout_accepts_carryover_terms(self):
        layout = HistoryLayout(2, (1, 1), (1, 1))
        spec = DesignSpec(
            (
                CovariateTerm.intercept(),
                CovariateTerm.prior_treatment(),
                CovariateTerm.error_prone(1, Transform.TIMES_PRIOR_TREATMENT),
            ),
            (CovariateTerm.error_prone(3),),
        )
        spec.validate(layout)
        assert layout.labels() == ["z1", "x1", "z2", "x2", "a1"]


class TestPackedRoundTrip:
    def test_records_to_cohort_and_back(self):
        cfg = simlab.two_stage_config(n=40, sigma1=0.7, sigma2=0.5)
        records = simlab.simulate_two_stage(cfg, seed=9)
        cohort = records_to_cohort(records)
        back = cohort_to_records(cohort)
        for a, b in zip(records, back):
            assert a.id == b.id and a.outcome == b.outcome
            for sa, sb in zip(a.stages, b.stages):
                assert np.array_equal(sa.error_free, sb.error_free)
                assert np.array_equal(sa.surrogates, sb.surrogates, equal_nan=True)
                assert sa.treatment == sb.treatment
                assert np.array_equal(sa.true_covariate, sb.true_covariate)

    def test_take_resamples_whole_trajectories(self):
        # drop stage-2 for some records to exercise the membership mapping
        records = simlab.simulate_two_stage(simlab.two_stage_config(n=12), seed=3)
        trimmed = [
            PatientRecord(id=r.id, stages=r.stages[:1] if r.id % 3 == 0 else r.stages,
                          outcome=r.outcome)
            for r in records
        ]
        cohort = records_to_cohort(trimmed)
        idx = np.array([0, 0, 3, 5, 11])
        sub = cohort.take(idx)
        assert sub.n == 5
        assert np.array_equal(sub.ids, cohort.ids[idx])
        expect_stage2 = [cohort.stage2_pos[i] >= 0 for i in idx]
        assert sub.stage2.m == sum(expect_stage2)
        assert np.allclose(sub.y, cohort.y[idx])


class TestCsvRoundTrip:
    def test_two_stage_with_missing_replicates(self, tmp_path):
        cfg = simlab.two_stage_config(n=60)
        records = simlab.simulate_two_stage(cfg, seed=21)
        path = tmp_path / "patients.csv"
        write_patient_csv(path, records)
        back = read_patient_csv(path)
        assert len(back) == len(records)
        for a, b in zip(records, back):
            assert a.id == b.id
            assert a.outcome == b.outcome  # exact: 17 significant digits
            for sa, sb in zip(a.stages, b.stages):
                assert np.array_equal(sa.error_free, sb.error_free)
                assert np.array_equal(sa.surrogates, sb.surrogates, equal_nan=True)
                assert np.array_equal(sa.true_covariate, sb.true_covariate)

    def test_real_data_fields_and_absent_stage2(self, tmp_path):
        records = [
            PatientRecord(
                id=1,
                stages=(StageObservation(np.array([1.0, -0.5]), np.array([[0.3, 0.4]]), 1),),
                outcome=-8.0,
                stage1_outcome=-8.0,
                remission_flag=1,
            ),
            PatientRecord(
                id=2,
                stages=(
                    StageObservation(np.array([0.0, 0.25]), np.array([[0.1, 0.2]]), 0),
                    StageObservation(np.array([1.0, 0.5]), np.array([[0.6, 0.9]]), 1),
                ),
                outcome=-6.25,
                stage1_outcome=-7.5,
                remission_flag=0,
            ),
        ]
        path = tmp_path / "real.csv"
        write_patient_csv(path, records)
        back = read_patient_csv(path)
        assert back[0].remission_flag == 1 and back[0].n_stages == 1
        assert back[1].remission_flag == 0 and back[1].n_stages == 2
        assert back[1].stage1_outcome == -7.5
