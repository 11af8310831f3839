"""Masked image-quality metrics and the per-slice report files.

masked_mse is checked against a plain nested-loop accumulator; PSNR
anchors are asserted exactly; the CSV/PPM emitters are checked for
schema, formatting, and content round trips.
"""

import numpy as np
import pytest

import ctrefine.tensor_ops as T
from ctrefine import metrics
from ctrefine.storage import VolumeHU
from ctrefine.tensor_ops import ShapeError


def loop_masked_mse(x, ref, mask_lo, mask_hi, win_lo, win_hi):
    """Independent accumulator: one voxel at a time, no vectorization."""
    total, count = 0.0, 0
    for idx in np.ndindex(ref.shape):
        r = float(ref[idx])
        if mask_lo <= r <= mask_hi:
            d = (r - float(x[idx])) / (win_hi - win_lo)
            total += d * d
            count += 1
    return total / count, count


class TestPsnr:
    def test_exact_anchor_values(self):
        assert metrics.psnr(1.0) == 0.0
        assert metrics.psnr(0.01) == 20.0

    def test_zero_mse_is_positive_infinity(self):
        assert metrics.psnr(0.0) == float("inf")

    def test_monotone_decreasing_in_mse(self):
        values = [metrics.psnr(m) for m in (1e-4, 1e-3, 1e-2, 1e-1)]
        assert values == sorted(values, reverse=True)

    def test_rejects_negative_mse(self):
        with pytest.raises(ValueError, match="non-negative"):
            metrics.psnr(-1e-9)


class TestMaskedMse:
    def test_hand_case_uniform_offset(self):
        # 200 HU error on a 2000 HU window is 0.1 normalized -> MSE 0.01
        ref = np.full((1, 2, 2), 1000.0)
        mse, count = metrics.masked_mse(ref + 200.0, ref)
        assert count == 4
        assert mse == pytest.approx(0.01, abs=1e-15)
        assert metrics.psnr(mse) == pytest.approx(20.0, abs=1e-12)

    def test_matches_nested_loop_oracle(self):
        rng = T.seeded_rng(70, purpose=140)
        ref = rng.uniform(0.0, 2000.0, size=(4, 6, 6))
        x = ref + rng.normal(0.0, 30.0, size=ref.shape)
        got_mse, got_count = metrics.masked_mse(x, ref)
        want_mse, want_count = loop_masked_mse(x, ref, 700.0, 1500.0, 0.0, 2000.0)
        assert got_count == want_count
        assert got_mse == pytest.approx(want_mse, rel=1e-12)

    def test_custom_ranges_match_oracle(self):
        rng = T.seeded_rng(71, purpose=141)
        ref = rng.uniform(-100.0, 2100.0, size=(3, 5, 5))
        x = ref + rng.normal(0.0, 10.0, size=ref.shape)
        got_mse, got_count = metrics.masked_mse(
            x, ref, mask_range=(0.0, 2000.0), normalization_window=(-100.0, 2100.0))
        want_mse, want_count = loop_masked_mse(x, ref, 0.0, 2000.0, -100.0, 2100.0)
        assert got_count == want_count
        assert got_mse == pytest.approx(want_mse, rel=1e-12)

    def test_voxels_outside_mask_do_not_contribute(self):
        ref = np.array([[[1000.0, 100.0], [1400.0, 1800.0]]])
        x = ref + 50.0
        base_mse, base_count = metrics.masked_mse(x, ref)
        assert base_count == 2  # only 1000 and 1400 fall inside [700, 1500]
        wrecked = x.copy()
        wrecked[0, 0, 1] = 1e6
        wrecked[0, 1, 1] = -1e6
        mse, count = metrics.masked_mse(wrecked, ref)
        assert (mse, count) == (base_mse, base_count)

    def test_mask_is_defined_on_the_reference(self):
        ref = np.array([[[1000.0]]])
        x = np.array([[[5000.0]]])  # way outside the mask range, still scored
        mse, count = metrics.masked_mse(x, ref)
        assert count == 1
        assert mse == pytest.approx(4.0)

    def test_accepts_volume_objects(self):
        ref = VolumeHU(voxels=np.full((1, 2, 2), 1000.0, dtype=np.float32))
        x = VolumeHU(voxels=np.full((1, 2, 2), 1100.0, dtype=np.float32))
        mse, count = metrics.masked_mse(x, ref)
        assert count == 4
        assert mse == pytest.approx(0.0025)

    def test_empty_mask_raises(self):
        ref = np.zeros((1, 3, 3))
        with pytest.raises(metrics.EmptyMaskError):
            metrics.masked_mse(ref, ref)

    def test_rejects_shape_mismatch_and_bad_window(self):
        ref = np.full((1, 2, 2), 1000.0)
        with pytest.raises(ShapeError, match="differ"):
            metrics.masked_mse(np.zeros((1, 2, 3)), ref)
        with pytest.raises(ShapeError, match="window"):
            metrics.masked_mse(ref, ref, normalization_window=(2000.0, 0.0))


@pytest.fixture(scope="module")
def report_inputs():
    rng = T.seeded_rng(72, purpose=142)
    ref = rng.uniform(800.0, 1400.0, size=(4, 8, 8))
    ref[2] = 0.0  # slice with an empty mask must be skipped, not zero-scored
    fbp = ref + rng.normal(0.0, 40.0, size=ref.shape)
    denoised = ref + rng.normal(0.0, 10.0, size=ref.shape)
    return ref, fbp, denoised


class TestPerSliceReport:
    def test_rows_sorted_and_empty_slices_omitted(self, report_inputs):
        ref, fbp, denoised = report_inputs
        report = metrics.per_slice_report({"fbp": fbp, "denoised": denoised}, ref, fbp)
        keys = [(r.method, r.slice_index) for r in report.rows]
        assert keys == [("denoised", 0), ("denoised", 1), ("denoised", 3),
                        ("fbp", 0), ("fbp", 1), ("fbp", 3)]

    def test_row_values_reproduce_masked_mse(self, report_inputs):
        ref, fbp, denoised = report_inputs
        report = metrics.per_slice_report({"denoised": denoised}, ref, fbp)
        for row in report.rows:
            mse, count = metrics.masked_mse(denoised[row.slice_index], ref[row.slice_index])
            assert row.mse == pytest.approx(mse, rel=1e-12)
            assert row.masked_voxels == count
            assert row.psnr_db == pytest.approx(metrics.psnr(mse), rel=1e-12)

    def test_improvement_statistics_against_baseline(self, report_inputs):
        ref, fbp, denoised = report_inputs
        report = metrics.per_slice_report({"fbp": fbp, "denoised": denoised}, ref, fbp)
        by_label = {s.method: s for s in report.summary}
        base = by_label["fbp"]
        assert base.mean_improvement_db == pytest.approx(0.0, abs=1e-12)
        assert base.max_improvement_db == pytest.approx(0.0, abs=1e-12)
        assert base.min_improvement_db == pytest.approx(0.0, abs=1e-12)
        better = by_label["denoised"]
        assert better.mean_improvement_db > 5.0
        assert better.min_improvement_db <= better.mean_improvement_db <= better.max_improvement_db

    def test_perfect_method_reported_as_infinite(self, report_inputs):
        ref, fbp, _ = report_inputs
        report = metrics.per_slice_report({"exact": ref.copy()}, ref, fbp)
        summary = report.summary[0]
        assert summary.infinite_slices == 3
        assert np.isnan(summary.mean_psnr_db)  # no finite slices remain
        assert summary.volume_psnr_db == float("inf")
        assert all(r.psnr_db == float("inf") for r in report.rows)

    def test_volume_psnr_pools_all_slices(self, report_inputs):
        ref, fbp, denoised = report_inputs
        report = metrics.per_slice_report({"denoised": denoised}, ref, fbp)
        mse, _ = metrics.masked_mse(denoised, ref)
        assert report.summary[0].volume_psnr_db == pytest.approx(metrics.psnr(mse), rel=1e-12)

    def test_rejects_dim_mismatch(self, report_inputs):
        ref, fbp, denoised = report_inputs
        with pytest.raises(ShapeError, match="dims"):
            metrics.per_slice_report({"bad": denoised[:2]}, ref, fbp)
        with pytest.raises(ShapeError, match="dims"):
            metrics.per_slice_report({"ok": denoised}, ref, fbp[:2])


class TestEmitReport:
    def test_csv_schema_and_six_decimal_formatting(self, report_inputs, tmp_path):
        ref, fbp, denoised = report_inputs
        report = metrics.per_slice_report({"denoised": denoised}, ref, fbp)
        out = tmp_path / "report.csv"
        written = metrics.emit_report(report, out)
        assert [str(out), str(tmp_path / "report_summary.csv")] == written
        lines = out.read_text().splitlines()
        assert lines[0] == "method,slice,psnr_db,mse,masked_voxels"
        assert len(lines) == 1 + len(report.rows)
        for line, row in zip(lines[1:], report.rows):
            method, sl, p, mse, voxels = line.split(",")
            assert (method, int(sl), int(voxels)) == (row.method, row.slice_index,
                                                      row.masked_voxels)
            assert p == f"{row.psnr_db:.6f}"
            assert mse == f"{row.mse:.6f}"

    def test_summary_declares_metric_convention(self, report_inputs, tmp_path):
        ref, fbp, denoised = report_inputs
        report = metrics.per_slice_report({"denoised": denoised}, ref, fbp)
        metrics.emit_report(report, tmp_path / "r.csv")
        lines = (tmp_path / "r_summary.csv").read_text().splitlines()
        assert lines[0].startswith("method,mean_psnr_db,volume_psnr_db,")
        assert lines[0].endswith("window_lo_hu,window_hi_hu,mask_lo_hu,mask_hi_hu")
        fields = lines[1].split(",")
        assert fields[0] == "denoised"
        assert fields[-4:] == ["0", "2000", "700", "1500"]

    def test_infinite_values_rendered_as_inf_token(self, report_inputs, tmp_path):
        ref, fbp, _ = report_inputs
        report = metrics.per_slice_report({"exact": ref.copy()}, ref, fbp)
        metrics.emit_report(report, tmp_path / "r.csv")
        rows = (tmp_path / "r.csv").read_text().splitlines()[1:]
        assert all(r.split(",")[2] == "inf" for r in rows)
        summary = (tmp_path / "r_summary.csv").read_text().splitlines()[1]
        assert summary.split(",")[2] == "inf"  # volume PSNR column
        # parses back to the float sentinel
        assert float(summary.split(",")[2]) == float("inf")

    def test_timing_sidecar_only_when_present(self, report_inputs, tmp_path):
        ref, fbp, denoised = report_inputs
        report = metrics.per_slice_report({"denoised": denoised}, ref, fbp)
        metrics.emit_report(report, tmp_path / "a.csv")
        assert not (tmp_path / "a_timing.csv").exists()
        report.timing = [metrics.TimingEntry(method="denoised", mean_s=0.125,
                                             min_s=0.120, repeats=3)]
        written = metrics.emit_report(report, tmp_path / "b.csv")
        timing = tmp_path / "b_timing.csv"
        assert str(timing) in written
        lines = timing.read_text().splitlines()
        assert lines[0] == "method,mean_s,min_s,repeats"
        assert lines[1] == "denoised,0.125000,0.120000,3"

    def test_plot_is_valid_binary_ppm(self, report_inputs, tmp_path):
        ref, fbp, denoised = report_inputs
        report = metrics.per_slice_report({"denoised": denoised, "fbp": fbp}, ref, fbp)
        written = metrics.emit_report(report, tmp_path / "r.csv", with_plots=True,
                                      canvas=(320, 240))
        ppm = tmp_path / "r_psnr.ppm"
        assert str(ppm) in written
        raw = ppm.read_bytes()
        magic, dims, maxval = raw.split(b"\n", 3)[:3]
        assert magic == b"P6"
        w, h = map(int, dims.split())
        assert (w, h) == (320, 240)
        assert maxval == b"255"
        header_len = len(magic) + len(dims) + len(maxval) + 3
        assert len(raw) == header_len + 3 * w * h

    def test_unwritable_path_raises_oserror(self, report_inputs, tmp_path):
        ref, fbp, denoised = report_inputs
        report = metrics.per_slice_report({"denoised": denoised}, ref, fbp)
        with pytest.raises(OSError, match="cannot write"):
            metrics.emit_report(report, tmp_path / "missing_dir" / "r.csv")
