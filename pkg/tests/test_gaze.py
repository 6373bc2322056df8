"""Gaze records, timestamp recovery, slicing, rasterization, file formats."""

import math

import numpy as np
import pytest

from tsal import gaze
from tsal.errors import (
    ConfigError,
    DegenerateMapError,
    FormatError,
    NonFiniteError,
    PreconditionError,
    UnrecoverableObserverError,
)

import oracles


def fx(i, x, y, t=None, image="img0", obs="obs0"):
    return gaze.Fixation(image_id=image, observer_id=obs, order_index=i,
                         x=x, y=y, t_ms=t)


def gz(t, x, y, image="img0", obs="obs0"):
    return gaze.GazeSample(image_id=image, observer_id=obs, t_ms=t, x=x, y=y)


class TestSaliencyMap:
    def test_basic_construction(self):
        m = gaze.make_map(np.ones((2, 3)))
        assert (m.height, m.width) == (2, 3)
        assert m.normalization is gaze.Normalization.RAW

    def test_values_frozen_and_private(self):
        src = np.ones((2, 2))
        m = gaze.make_map(src)
        src[0, 0] = 99.0
        assert m.values[0, 0] == 1.0
        with pytest.raises(ValueError):
            m.values[0, 0] = 5.0

    def test_negative_rejected(self):
        with pytest.raises(PreconditionError):
            gaze.make_map(np.array([[1.0, -0.1]]))

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            gaze.make_map(np.array([[np.nan, 1.0]]))

    def test_sum_invariant_enforced(self):
        good = np.full((2, 2), 0.25)
        gaze.make_map(good, gaze.Normalization.SUM_TO_ONE)
        with pytest.raises(PreconditionError):
            gaze.make_map(good * 1.01, gaze.Normalization.SUM_TO_ONE)

    def test_max_invariant_enforced(self):
        good = np.array([[1.0, 0.5]])
        gaze.make_map(good, gaze.Normalization.MAX_TO_ONE)
        with pytest.raises(PreconditionError):
            gaze.make_map(good * 0.9, gaze.Normalization.MAX_TO_ONE)

    def test_normalize_map(self):
        m = gaze.make_map(np.array([[1.0, 3.0]]))
        s = gaze.normalize_map(m, gaze.Normalization.SUM_TO_ONE)
        assert np.allclose(s.values, [[0.25, 0.75]])
        x = gaze.normalize_map(m, gaze.Normalization.MAX_TO_ONE)
        assert np.allclose(x.values, [[1.0 / 3.0, 1.0]])

    def test_normalize_degenerate(self):
        zero = gaze.make_map(np.zeros((2, 2)))
        with pytest.raises(DegenerateMapError):
            gaze.normalize_map(zero, gaze.Normalization.SUM_TO_ONE)
        with pytest.raises(DegenerateMapError):
            gaze.normalize_map(zero, gaze.Normalization.MAX_TO_ONE)


class TestRecoverTimestamps:
    def test_exact_spatial_match_takes_that_sample(self):
        out = gaze.recover_timestamps([fx(0, 10.0, 20.0)],
                                      [gz(1200.0, 10.0, 20.0)])
        assert out[0].t_ms == 1200.0

    def test_tie_broken_by_earliest_gaze_time(self):
        fixes = [fx(0, 5.0, 0.0)]
        samples = [gz(900.0, 0.0, 0.0), gz(500.0, 10.0, 0.0)]
        out = gaze.recover_timestamps(fixes, samples, w_t=0.0)
        assert out[0].t_ms == 500.0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(50)
        for _ in range(200):
            m = int(rng.integers(1, 6))
            g = int(rng.integers(1, 12))
            fix_pts = [(float(rng.uniform(0, 64)), float(rng.uniform(0, 64)))
                       for _ in range(m)]
            gaze_pts = [(float(rng.uniform(0, 64)), float(rng.uniform(0, 64)),
                         float(rng.uniform(0, 5000))) for _ in range(g)]
            fixes = [fx(i, x, y) for i, (x, y) in enumerate(fix_pts)]
            samples = [gz(t, x, y) for x, y, t in gaze_pts]
            got = [f.t_ms for f in
                   gaze.recover_timestamps(fixes, samples, w_s=1.0, w_t=0.01)]
            want = oracles.recover_oracle(fix_pts, gaze_pts, 1.0, 0.01, 5000.0)
            assert got == want

    def test_gaze_at_each_fixation_returns_those_times(self):
        fixes = [fx(0, 1.0, 1.0), fx(1, 9.0, 3.0), fx(2, 4.0, 8.0)]
        samples = [gz(100.0, 1.0, 1.0), gz(900.0, 9.0, 3.0),
                   gz(2400.0, 4.0, 8.0)]
        out = gaze.recover_timestamps(fixes, samples, w_t=0.0)
        assert [f.t_ms for f in out] == [100.0, 900.0, 2400.0]

    def test_output_monotone(self):
        rng = np.random.default_rng(51)
        for _ in range(50):
            fixes = [fx(i, float(rng.uniform(0, 32)), float(rng.uniform(0, 32)))
                     for i in range(4)]
            samples = [gz(float(rng.uniform(0, 5000)),
                          float(rng.uniform(0, 32)), float(rng.uniform(0, 32)))
                       for _ in range(8)]
            out = gaze.recover_timestamps(fixes, samples)
            ts = [f.t_ms for f in out]
            assert ts == sorted(ts)

    def test_empty_gaze_is_unrecoverable(self):
        with pytest.raises(UnrecoverableObserverError):
            gaze.recover_timestamps([fx(0, 1.0, 1.0)], [])

    def test_empty_fixations_ok(self):
        assert gaze.recover_timestamps([], []) == []

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            gaze.recover_timestamps([fx(0, 1.0, 1.0)], [gz(0.0, 1.0, 1.0)],
                                    w_s=-1.0)

    def test_unordered_fixations_rejected(self):
        fixes = [fx(1, 1.0, 1.0), fx(0, 2.0, 2.0)]
        with pytest.raises(PreconditionError):
            gaze.recover_timestamps(fixes, [gz(0.0, 1.0, 1.0)])

    def test_does_not_mutate_input(self):
        fixes = [fx(0, 1.0, 1.0)]
        gaze.recover_timestamps(fixes, [gz(10.0, 1.0, 1.0)])
        assert fixes[0].t_ms is None


class TestEqualDuration:
    def test_boundary_examples(self):
        fixes = [fx(0, 1, 1, t=0.0), fx(1, 1, 1, t=1000.0),
                 fx(2, 1, 1, t=4999.0), fx(3, 1, 1, t=5000.0)]
        out = gaze.slice_equal_duration(fixes, n=5, t_total=5000.0)
        assert [f.t_ms for f in out.slices[0]] == [0.0]
        assert [f.t_ms for f in out.slices[1]] == [1000.0]  # half-open bins
        assert [f.t_ms for f in out.slices[4]] == [4999.0, 5000.0]
        assert out.boundaries_ms == (0.0, 1000.0, 2000.0, 3000.0, 4000.0, 5000.0)
        assert out.scheme is gaze.Scheme.EQUAL_DURATION

    def test_counts_match_histogram_oracle(self):
        rng = np.random.default_rng(52)
        for _ in range(30):
            n = int(rng.integers(1, 8))
            t_total = float(rng.uniform(100, 9000))
            ts = [float(rng.uniform(0, t_total)) for _ in range(200)]
            fixes = [fx(i, 1, 1, t=t) for i, t in enumerate(ts)]
            out = gaze.slice_equal_duration(fixes, n=n, t_total=t_total)
            got = [len(s) for s in out.slices]
            assert got == oracles.duration_histogram_oracle(ts, n, t_total)

    def test_partition_property(self):
        rng = np.random.default_rng(53)
        fixes = [fx(i, 1, 1, t=float(rng.uniform(0, 5000))) for i in range(60)]
        out = gaze.slice_equal_duration(fixes, n=5)
        merged = [f for s in out.slices for f in s]
        assert sorted(merged, key=lambda f: f.order_index) == fixes

    def test_missing_timestamp_rejected(self):
        with pytest.raises(PreconditionError):
            gaze.slice_equal_duration([fx(0, 1, 1)], n=2)

    def test_out_of_range_timestamp_rejected(self):
        with pytest.raises(PreconditionError):
            gaze.slice_equal_duration([fx(0, 1, 1, t=5001.0)], n=2)
        with pytest.raises(PreconditionError):
            gaze.slice_equal_duration([fx(0, 1, 1, t=-1.0)], n=2)

    def test_bad_parameters_rejected(self):
        with pytest.raises(ConfigError):
            gaze.slice_equal_duration([], n=0)
        with pytest.raises(ConfigError):
            gaze.slice_equal_duration([], n=2, t_total=0.0)

    def test_mixed_images_rejected(self):
        fixes = [fx(0, 1, 1, t=1.0, image="a"), fx(0, 1, 1, t=2.0, image="b")]
        with pytest.raises(PreconditionError):
            gaze.slice_equal_duration(fixes, n=2)


class TestEqualDistribution:
    def test_even_split(self):
        fixes = [fx(i, 1, 1, t=float(i * 100)) for i in range(10)]
        out = gaze.slice_equal_distribution(fixes, n=5)
        assert [len(s) for s in out.slices] == [2, 2, 2, 2, 2]
        assert out.boundaries_ms is None

    def test_remainder_goes_to_early_slices(self):
        fixes = [fx(i, 1, 1, t=float(i)) for i in range(7)]
        out = gaze.slice_equal_distribution(fixes, n=5)
        assert [len(s) for s in out.slices] == [2, 2, 1, 1, 1]

    def test_matches_sort_chunk_oracle_with_ties(self):
        rng = np.random.default_rng(54)
        for _ in range(50):
            count = int(rng.integers(0, 30))
            n = int(rng.integers(1, 7))
            # coarse timestamps so duplicates are common
            fixes = [fx(i, 1, 1, t=float(rng.integers(0, 5)) * 1000.0)
                     for i in range(count)]
            out = gaze.slice_equal_distribution(fixes, n=n)
            keyed = [((f.t_ms, f.order_index), f) for f in fixes]
            want = oracles.sort_chunk_oracle(keyed, n)
            assert [list(s) for s in out.slices] == want

    def test_monotone_across_slices(self):
        rng = np.random.default_rng(55)
        fixes = [fx(i, 1, 1, t=float(rng.uniform(0, 5000))) for i in range(41)]
        out = gaze.slice_equal_distribution(fixes, n=5)
        for a, b in zip(out.slices, out.slices[1:]):
            if a and b:
                assert max(f.t_ms for f in a) <= min(f.t_ms for f in b)

    def test_partition_property(self):
        rng = np.random.default_rng(56)
        fixes = [fx(i, 1, 1, t=float(rng.uniform(0, 5000))) for i in range(23)]
        out = gaze.slice_equal_distribution(fixes, n=4)
        merged = [f for s in out.slices for f in s]
        assert sorted(merged, key=lambda f: f.order_index) == fixes


class TestRasterize:
    def test_gaussian_neighbor_ratio(self):
        sigma = 3.0
        m = gaze.rasterize([fx(0, 16.0, 16.0)], 33, 33, sigma_px=sigma,
                           normalization=gaze.Normalization.SUM_TO_ONE)
        v = m.values
        assert np.unravel_index(v.argmax(), v.shape) == (16, 16)
        ratio = v[16, 16] / v[16, 17]
        assert abs(ratio - math.exp(1.0 / (2.0 * sigma * sigma))) < 1e-9

    def test_superposition(self):
        a = gaze.rasterize([fx(0, 5.0, 5.0)], 24, 24, sigma_px=2.0)
        b = gaze.rasterize([fx(0, 15.0, 12.0)], 24, 24, sigma_px=2.0)
        both = gaze.rasterize([fx(0, 5.0, 5.0), fx(1, 15.0, 12.0)], 24, 24,
                              sigma_px=2.0)
        assert np.allclose(both.values, a.values + b.values, atol=1e-12)

    def test_matches_dense_convolution_oracle(self):
        rng = np.random.default_rng(57)
        pts = [(float(rng.uniform(0, 20)), float(rng.uniform(0, 14)))
               for _ in range(5)]
        fixes = [fx(i, x, y) for i, (x, y) in enumerate(pts)]
        m = gaze.rasterize(fixes, 20, 14, sigma_px=1.5)
        want = oracles.rasterize_dense_oracle(pts, 20, 14, 1.5)
        assert np.abs(m.values - want).max() < 1e-12

    def test_mass_preserved_away_from_borders(self):
        sigma = 2.0
        fixes = [fx(0, 20.0, 20.0), fx(1, 25.0, 22.0), fx(2, 18.0, 24.0)]
        m = gaze.rasterize(fixes, 44, 44, sigma_px=sigma)
        assert abs(m.values.sum() - 3.0) < 1e-9

    def test_empty_raw_is_zero_map(self):
        m = gaze.rasterize([], 8, 8, sigma_px=1.0)
        assert m.values.sum() == 0.0
        assert m.normalization is gaze.Normalization.RAW

    def test_empty_normalized_is_degenerate(self):
        with pytest.raises(DegenerateMapError):
            gaze.rasterize([], 8, 8, sigma_px=1.0,
                           normalization=gaze.Normalization.SUM_TO_ONE)

    def test_out_of_bounds_fixation_rejected(self):
        with pytest.raises(PreconditionError):
            gaze.rasterize([fx(0, 8.0, 4.0)], 8, 8, sigma_px=1.0)

    def test_bad_sigma_rejected(self):
        with pytest.raises(ConfigError):
            gaze.rasterize([fx(0, 1.0, 1.0)], 8, 8, sigma_px=0.0)

    def test_default_sigma_scales_with_short_side(self):
        assert gaze.default_sigma(640, 480) == 19.0
        assert gaze.default_sigma(480, 640) == 19.0
        assert gaze.default_sigma(64, 64) == pytest.approx(19.0 * 64 / 480)

    def test_rounding_to_nearest_pixel(self):
        m = gaze.rasterize([fx(0, 3.6, 2.4)], 8, 8, sigma_px=0.3)
        assert m.values.argmax() == np.ravel_multi_index((2, 4), (8, 8))


class TestGazeJsonl:
    def test_roundtrip(self, tmp_path):
        path = str(tmp_path / "gaze.jsonl")
        samples = [gz(1.5, 2.25, 3.125), gz(10.0, 0.0, 0.5, obs="obs1")]
        gaze.write_gaze_jsonl(path, samples)
        assert gaze.read_gaze_jsonl(path) == samples

    def test_invalid_json_line(self, tmp_path):
        path = str(tmp_path / "bad.jsonl")
        path_obj = tmp_path / "bad.jsonl"
        path_obj.write_text('{"image_id": "a"\n')
        with pytest.raises(FormatError):
            gaze.read_gaze_jsonl(path)

    def test_missing_key(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"image_id": "a", "observer_id": "o", "x": 1, "y": 2}\n')
        with pytest.raises(FormatError):
            gaze.read_gaze_jsonl(str(p))

    def test_non_numeric_coordinate(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"image_id": "a", "observer_id": "o", "t_ms": 1, '
                     '"x": "left", "y": 2}\n')
        with pytest.raises(FormatError):
            gaze.read_gaze_jsonl(str(p))

    def test_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "gaze.jsonl"
        p.write_text('\n{"image_id": "a", "observer_id": "o", "t_ms": 1.0, '
                     '"x": 1.0, "y": 2.0}\n\n')
        assert len(gaze.read_gaze_jsonl(str(p))) == 1


class TestFixationCsv:
    def test_roundtrip_without_timestamps(self, tmp_path):
        path = str(tmp_path / "fix.csv")
        fixes = [fx(0, 1.5, 2.5), fx(1, 3.0, 4.0)]
        gaze.write_fixations_csv(path, fixes)
        assert gaze.read_fixations_csv(path) == fixes

    def test_roundtrip_with_timestamps_exact(self, tmp_path):
        path = str(tmp_path / "fix.csv")
        fixes = [fx(0, 1.0 / 3.0, 2.5, t=1234.5678901234)]
        gaze.write_fixations_csv(path, fixes)
        got = gaze.read_fixations_csv(path)
        assert got[0].x == fixes[0].x  # repr() keeps floats exact
        assert got[0].t_ms == fixes[0].t_ms

    def test_slice_index_column(self, tmp_path):
        path = str(tmp_path / "fix.csv")
        fixes = [fx(0, 1.0, 2.0, t=10.0), fx(1, 3.0, 4.0, t=20.0)]
        gaze.write_fixations_csv(path, fixes, slice_indices=[0, 3])
        got, slices = gaze.read_fixation_table(path)
        assert got == fixes
        assert slices == [0, 3]

    def test_no_slice_column_reads_none(self, tmp_path):
        path = str(tmp_path / "fix.csv")
        gaze.write_fixations_csv(path, [fx(0, 1.0, 2.0)])
        _, slices = gaze.read_fixation_table(path)
        assert slices is None

    def test_missing_column_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("image_id,observer_id,x,y\na,o,1,2\n")
        with pytest.raises(FormatError):
            gaze.read_fixations_csv(str(p))

    def test_bad_value_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("image_id,observer_id,order_index,x,y\na,o,zero,1,2\n")
        with pytest.raises(FormatError):
            gaze.read_fixations_csv(str(p))

    def test_mismatched_slice_list_rejected(self, tmp_path):
        with pytest.raises(PreconditionError):
            gaze.write_fixations_csv(str(tmp_path / "x.csv"),
                                     [fx(0, 1.0, 2.0)], slice_indices=[1, 2])


class TestMapContainer:
    def test_raw_roundtrip_is_f32_exact(self, tmp_path):
        rng = np.random.default_rng(58)
        values = rng.uniform(0, 3, size=(5, 7)).astype(np.float32)
        m = gaze.make_map(values.astype(np.float64))
        path = str(tmp_path / "m.tsal")
        gaze.write_map_tsal(path, m)
        got = gaze.read_map_tsal(path)
        assert got.normalization is gaze.Normalization.RAW
        assert np.array_equal(got.values, values.astype(np.float64))

    def test_sum_map_renormalized_after_quantization(self, tmp_path):
        rng = np.random.default_rng(59)
        v = rng.uniform(0.1, 1.0, size=(31, 37))
        m = gaze.make_map(v / v.sum(), gaze.Normalization.SUM_TO_ONE)
        path = str(tmp_path / "m.tsal")
        gaze.write_map_tsal(path, m)
        got = gaze.read_map_tsal(path)
        assert got.normalization is gaze.Normalization.SUM_TO_ONE
        assert abs(got.values.sum() - 1.0) <= 1e-9

    def test_max_map_renormalized_after_quantization(self, tmp_path):
        rng = np.random.default_rng(60)
        v = rng.uniform(0.1, 1.0, size=(9, 9))
        m = gaze.make_map(v / v.max(), gaze.Normalization.MAX_TO_ONE)
        path = str(tmp_path / "m.tsal")
        gaze.write_map_tsal(path, m)
        got = gaze.read_map_tsal(path)
        assert abs(got.values.max() - 1.0) <= 1e-9

    def test_header_layout(self):
        blob = gaze.serialize_map(np.zeros((2, 3)), gaze.Normalization.RAW)
        assert blob[:4] == b"TSAL"
        assert int.from_bytes(blob[4:8], "little") == 3   # width
        assert int.from_bytes(blob[8:12], "little") == 2  # height
        assert blob[12] == 0
        assert len(blob) == 13 + 4 * 6

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            gaze.deserialize_map(b"XXXX" + b"\x00" * 20)

    def test_bad_normalization_code(self):
        blob = bytearray(gaze.serialize_map(np.zeros((1, 1)),
                                            gaze.Normalization.RAW))
        blob[12] = 7
        with pytest.raises(FormatError):
            gaze.deserialize_map(bytes(blob))

    def test_truncated_payload(self):
        blob = gaze.serialize_map(np.zeros((2, 2)), gaze.Normalization.RAW)
        with pytest.raises(FormatError):
            gaze.deserialize_map(blob[:-3])

    def test_signed_container_roundtrip(self, tmp_path):
        d = np.array([[-1.5, 0.0], [2.5, -0.25]])
        path = str(tmp_path / "d.tsal")
        gaze.write_signed_tsal(path, d)
        values, norm = gaze.read_raw_tsal(path)
        assert norm is gaze.Normalization.RAW
        assert np.array_equal(values, d)

    def test_negative_values_rejected_for_saliency_read(self, tmp_path):
        path = str(tmp_path / "d.tsal")
        gaze.write_signed_tsal(path, np.array([[-1.0, 1.0]]))
        with pytest.raises(PreconditionError):
            gaze.read_map_tsal(path)


class TestViewingExports:
    def test_pgm_header_and_scaling(self, tmp_path):
        m = gaze.make_map(np.array([[0.0, 0.5], [1.0, 0.25]]))
        path = str(tmp_path / "m.pgm")
        gaze.write_map_pgm(path, m)
        blob = open(path, "rb").read()
        header = b"P5\n2 2\n65535\n"
        assert blob.startswith(header)
        pixels = np.frombuffer(blob[len(header):], dtype=">u2").reshape(2, 2)
        assert pixels[1, 0] == 65535
        assert pixels[0, 1] == round(0.5 * 65535)

    def test_pgm_all_zero(self, tmp_path):
        m = gaze.make_map(np.zeros((2, 2)))
        path = str(tmp_path / "z.pgm")
        gaze.write_map_pgm(path, m)
        blob = open(path, "rb").read()
        pixels = np.frombuffer(blob[len(b"P5\n2 2\n65535\n"):], dtype=">u2")
        assert np.all(pixels == 0)

    def test_ppm_diverging_colors(self, tmp_path):
        diff = np.array([[1.0, -1.0, 0.0]])
        path = str(tmp_path / "d.ppm")
        gaze.write_diff_ppm(path, diff)
        blob = open(path, "rb").read()
        header = b"P6\n3 1\n255\n"
        assert blob.startswith(header)
        rgb = np.frombuffer(blob[len(header):], dtype=np.uint8).reshape(1, 3, 3)
        assert tuple(rgb[0, 0]) == (255, 0, 0)    # strongest positive: red
        assert tuple(rgb[0, 1]) == (0, 0, 255)    # strongest negative: blue
        assert tuple(rgb[0, 2]) == (255, 255, 255)  # zero: white

    def test_ppm_all_zero_is_white(self, tmp_path):
        path = str(tmp_path / "z.ppm")
        gaze.write_diff_ppm(path, np.zeros((2, 2)))
        blob = open(path, "rb").read()
        rgb = np.frombuffer(blob[len(b"P6\n2 2\n255\n"):], dtype=np.uint8)
        assert np.all(rgb == 255)


class TestGrouping:
    def test_group_gaze_and_fixations(self):
        samples = [gz(1.0, 0, 0, image="a", obs="x"),
                   gz(2.0, 0, 0, image="a", obs="y"),
                   gz(3.0, 0, 0, image="a", obs="x")]
        groups = gaze.group_gaze(samples)
        assert set(groups) == {("a", "x"), ("a", "y")}
        assert [s.t_ms for s in groups[("a", "x")]] == [1.0, 3.0]

        fixes = [fx(0, 1, 1, image="a", obs="x"), fx(0, 1, 1, image="b", obs="x")]
        fgroups = gaze.group_fixations(fixes)
        assert set(fgroups) == {("a", "x"), ("b", "x")}
