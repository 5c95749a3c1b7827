import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nativevid.errors import (ContractError, InfeasibleResolutionError, IntegrityError, ManifestError,
                              VocabularyError)
from nativevid.media import (DatasetManifest, ResolutionPolicy, VideoRecord, VideoTensor, decimate_indices,
                             load_manifest, load_video, read_nvt, resample_frames, resize_bilinear,
                             smart_resize, write_manifest, write_nvt)

BUDGET = ResolutionPolicy(224 * 224, 720 * 720, 14)


def reference_smart_resize(h, w, lo, hi, f):
    """Independent restatement of round-then-rescale."""
    H, W = f * max(1, round(h / f)), f * max(1, round(w / f))
    if H * W > hi:
        b = math.sqrt(h * w / hi)
        H, W = f * math.floor(h / b / f), f * math.floor(w / b / f)
    elif H * W < lo:
        b = math.sqrt(lo / (h * w))
        H, W = f * math.ceil(h * b / f), f * math.ceil(w * b / f)
    return H, W


class TestSmartResize:
    def test_already_aligned(self):
        assert smart_resize(224, 224, BUDGET) == (224, 224)

    def test_1080p(self):
        h, w = smart_resize(1088, 1920, BUDGET)
        assert (h, w) == (532, 952)
        assert h * w <= 720 * 720 and h % 14 == 0 and w % 14 == 0

    def test_480p(self):
        assert smart_resize(480, 832, BUDGET) == (476, 826)

    def test_upscale_small(self):
        h, w = smart_resize(100, 150, BUDGET)
        assert h * w >= 224 * 224 and h % 14 == 0 and w % 14 == 0

    def test_infeasible_extreme_aspect(self):
        with pytest.raises(InfeasibleResolutionError, match="100000"):
            smart_resize(1, 100000, BUDGET)

    def test_nonpositive(self):
        with pytest.raises(ContractError):
            smart_resize(0, 10, BUDGET)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(16, 3000), st.integers(16, 3000))
    def test_contract_and_reference(self, h, w):
        try:
            out = smart_resize(h, w, BUDGET)
        except InfeasibleResolutionError:
            return
        hh, ww = out
        assert hh % 14 == 0 and ww % 14 == 0 and hh > 0 and ww > 0
        assert 224 * 224 <= hh * ww <= 720 * 720
        assert out == reference_smart_resize(h, w, 224 * 224, 720 * 720, 14)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(16, 3000), st.integers(16, 3000), st.integers(300, 700), st.integers(1, 400))
    def test_monotone_in_max_pixels(self, h, w, side, extra):
        lo = ResolutionPolicy(224 * 224, side * side, 14)
        hi = ResolutionPolicy(224 * 224, (side + extra) ** 2, 14)
        try:
            a = smart_resize(h, w, lo)
            b = smart_resize(h, w, hi)
        except InfeasibleResolutionError:
            return
        assert b[0] * b[1] >= a[0] * a[1]

    @settings(max_examples=300, deadline=None)
    @given(st.integers(64, 2000), st.integers(64, 2000))
    def test_aspect_close(self, h, w):
        if max(h, w) / min(h, w) > 4:
            return
        hh, ww = smart_resize(h, w, BUDGET)
        # quantization by 14 bounds the aspect distortion
        assert abs(math.log((hh / ww) / (h / w))) <= math.log((1 + 14 / hh) * (1 + 14 / ww)) + 1e-12


class TestResample:
    def test_center_window(self):
        frames = np.arange(16).reshape(16, 1, 1, 1)
        out = resample_frames(frames, 2.0, 2.0, 8, "center")
        assert out.ravel().tolist() == list(range(4, 12))

    def test_short_video_repeats_last(self):
        frames = np.arange(4).reshape(4, 1, 1, 1)
        out = resample_frames(frames, 2.0, 2.0, 8)
        assert out.ravel().tolist() == [0, 1, 2, 3, 3, 3, 3, 3]

    def test_decimation_nearest(self):
        assert decimate_indices(16, 4.0, 2.0).tolist() == [0, 2, 4, 6, 8, 10, 12, 14]
        assert decimate_indices(9, 3.0, 2.0).tolist() == [0, 2, 3, 5, 6, 8]

    def test_random_reproducible(self):
        frames = np.random.default_rng(0).random((40, 2, 2, 3))
        a = resample_frames(frames, 4.0, 2.0, 8, "random", seed=7)
        b = resample_frames(frames, 4.0, 2.0, 8, "random", seed=7)
        assert np.array_equal(a, b)

    def test_random_is_consecutive(self):
        frames = np.arange(30).reshape(30, 1, 1, 1)
        out = resample_frames(frames, 2.0, 2.0, 8, "random", seed=3).ravel()
        assert np.all(np.diff(out) == 1)

    def test_center_deterministic(self):
        frames = np.random.default_rng(1).random((21, 2, 2, 3))
        assert np.array_equal(resample_frames(frames, 3.0), resample_frames(frames, 3.0))


class TestResize:
    def test_identity_bitwise(self):
        v = np.random.default_rng(0).random((2, 5, 7, 3))
        assert np.array_equal(resize_bilinear(v, 5, 7), v)

    @pytest.mark.parametrize("shape", [(3, 9), (40, 2), (11, 11), (1, 1)])
    def test_constant_exact(self, shape):
        v = np.full((2, 6, 8, 3), 0.3)
        out = resize_bilinear(v, *shape)
        assert out.shape == (2, *shape, 3)
        assert np.max(np.abs(out - 0.3)) <= 1e-15

    def test_checkerboard_upscale(self):
        v = np.array([[0.0, 1.0], [1.0, 0.0]])[None, :, :, None]
        out = resize_bilinear(v, 4, 4)[0, :, :, 0]
        # closed form: triangle weights (0.75, 0.25) at the inner output samples
        assert out[1, 1] == pytest.approx(0.375, abs=1e-15)
        assert out[1, 2] == pytest.approx(0.625, abs=1e-15)
        assert out[1:3, 1:3].mean() == pytest.approx(0.5, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 1000))
    def test_range_preserved(self, h, w, seed):
        v = np.random.default_rng(seed).random((1, 13, 17, 3))
        out = resize_bilinear(v, h, w)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_downscale_attenuates_fine_grid(self):
        x = np.arange(448)
        grid = 0.5 + 0.25 * np.cos(2 * np.pi * x / 4)
        v = np.broadcast_to(grid, (448, 448))[None, :, :, None].copy()
        out = resize_bilinear(v, 224 // 2, 224 // 2)
        assert out.std() < 0.05 * v.std()


def _record(rid, path, **kw):
    base = dict(id=rid, path=path, label="real", generator="g", split="train", width=28, height=14,
                fps=2.0, frame_count=3)
    base.update(kw)
    return base


class TestContainerAndManifest:
    def test_roundtrip_bit_exact(self, tmp_path):
        q = np.random.default_rng(0).integers(0, 256, (3, 14, 28, 3)).astype(np.uint8)
        v = VideoTensor(q.astype(np.float64) / 255.0, 2.0)
        write_nvt(tmp_path / "a.nvt", v)
        back = read_nvt(tmp_path / "a.nvt", dtype=np.float64)
        assert np.array_equal(back.frames, v.frames) and back.fps == 2.0

    def test_truncated_payload(self, tmp_path):
        v = VideoTensor(np.zeros((2, 14, 14, 3)), 2.0)
        write_nvt(tmp_path / "a.nvt", v)
        raw = (tmp_path / "a.nvt").read_bytes()
        (tmp_path / "a.nvt").write_bytes(raw[:-5])
        with pytest.raises(IntegrityError):
            read_nvt(tmp_path / "a.nvt")

    def test_checksum(self, tmp_path):
        v = VideoTensor(np.zeros((2, 14, 14, 3)), 2.0)
        write_nvt(tmp_path / "a.nvt", v)
        raw = bytearray((tmp_path / "a.nvt").read_bytes())
        raw[-1] ^= 0xFF
        (tmp_path / "a.nvt").write_bytes(bytes(raw))
        with pytest.raises(IntegrityError, match="checksum"):
            read_nvt(tmp_path / "a.nvt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "a.nvt").write_bytes(b"XXXX\x00\x00\x00\x00")
        with pytest.raises(IntegrityError):
            read_nvt(tmp_path / "a.nvt")

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("")
        assert len(load_manifest(tmp_path / "m.jsonl")) == 0

    def test_fake_label_rejected(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps(_record("a", "a.nvt", label="fake")) + "\n")
        with pytest.raises(VocabularyError, match="line 1"):
            load_manifest(tmp_path / "m.jsonl", check_paths=False)

    def test_parse_error_has_line_number(self, tmp_path):
        lines = [json.dumps(_record("a", "a.nvt")), "{not json", ""]
        (tmp_path / "m.jsonl").write_text("\n".join(lines))
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(tmp_path / "m.jsonl", check_paths=False)

    def test_missing_field_and_bad_split(self, tmp_path):
        rec = _record("a", "a.nvt")
        del rec["fps"]
        (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n")
        with pytest.raises(ManifestError, match="fps"):
            load_manifest(tmp_path / "m.jsonl", check_paths=False)
        (tmp_path / "m.jsonl").write_text(json.dumps(_record("a", "a.nvt", split="dev")) + "\n")
        with pytest.raises(VocabularyError):
            load_manifest(tmp_path / "m.jsonl", check_paths=False)

    def test_duplicate_ids_and_unresolvable_path(self, tmp_path):
        line = json.dumps(_record("a", "a.nvt"))
        (tmp_path / "m.jsonl").write_text(line + "\n" + line + "\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(tmp_path / "m.jsonl", check_paths=False)
        (tmp_path / "m.jsonl").write_text(line + "\n")
        with pytest.raises(ManifestError, match="resolve"):
            load_manifest(tmp_path / "m.jsonl")

    def test_unknown_fields_ignored_and_roundtrip(self, tmp_path):
        v = VideoTensor(np.full((3, 14, 28, 3), 0.5), 2.0)
        write_nvt(tmp_path / "a.nvt", v)
        rec = _record("a", "a.nvt", extra="ignored", quality=0.7)
        (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n")
        m = load_manifest(tmp_path / "m.jsonl")
        assert m.records[0].quality == 0.7
        write_manifest(tmp_path / "m2.jsonl", m)
        m2 = load_manifest(tmp_path / "m2.jsonl")
        assert m2.records == m.records
        video = load_video(m.records[0], m.root)
        assert video.frames.shape == (3, 14, 28, 3)

    def test_shape_mismatch_is_integrity_error(self, tmp_path):
        write_nvt(tmp_path / "a.nvt", VideoTensor(np.zeros((2, 14, 28, 3)), 2.0))
        rec = VideoRecord(**_record("a", "a.nvt"))
        with pytest.raises(IntegrityError):
            load_video(rec, tmp_path)

    def test_generators_and_splits(self):
        recs = [VideoRecord(**_record(str(i), "x", label=l, generator=g, split=s))
                for i, (l, g, s) in enumerate([("generated", "b", "train"), ("real", "", "train"),
                                               ("generated", "a", "test"), ("generated", "b", "test")])]
        m = DatasetManifest(recs)
        assert m.generators() == ["b", "a"]
        assert len(m.split("test")) == 2
