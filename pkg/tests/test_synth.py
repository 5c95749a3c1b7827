import hashlib
import json

import numpy as np
import pytest

from nativevid import synth
from nativevid.errors import ConfigError
from nativevid.media import load_manifest, load_video

PROFILE = synth.GeneratorProfile("g", 0.5)


def scene(seed=0, h=48, w=64):
    return synth.SceneParams.sample(seed, h, w)


class TestReal:
    def test_deterministic(self):
        a = synth.gen_real(scene(3), 48, 64, 4).frames
        b = synth.gen_real(scene(3), 48, 64, 4).frames
        assert np.array_equal(a, b)

    def test_static_scene_frames_identical(self):
        v = synth.gen_real(scene(1).static(), 48, 64, 5).frames
        assert all(np.array_equal(v[0], v[t]) for t in range(1, 5))

    def test_pan_moves_pixels(self):
        s = scene(2)
        s = synth.SceneParams(s.seed, s.gamma, (0.7, 0.0), [dict(b, velocity=[0.0, 0.0]) for b in s.blobs])
        v = synth.gen_real(s, 48, 64, 3).frames
        assert np.mean(np.diff(v, axis=0) ** 2) > 0

    def test_range_and_size_limits(self):
        v = synth.gen_real(scene(4), 48, 64, 3).frames
        assert v.min() >= 0 and v.max() <= 1 and v.shape == (3, 48, 64, 3)
        with pytest.raises(ConfigError):
            synth.gen_real(scene(4), 16, 64, 3)


class TestFake:
    def test_zero_amplitudes_leave_clip_unchanged(self):
        p = synth.GeneratorProfile("z", 0.5, grid_amp_max=0, blur_sigma_max=0, flicker_max=0, ringing_max=0)
        s = scene(5)
        assert np.array_equal(synth.gen_fake(s, p, 48, 64, 3).frames, synth.gen_real(s, 48, 64, 3).frames)

    @pytest.mark.parametrize("seed", range(3))
    def test_artifact_energy_decreasing_in_quality(self, seed):
        s = scene(seed)
        base = synth.gen_real(s, 48, 64, 4).frames
        diffs = [np.mean(np.abs(synth.gen_fake(s, synth.GeneratorProfile("g", q), 48, 64, 4).frames - base))
                 for q in (0.3, 0.6, 0.9)]
        assert diffs[0] > diffs[1] > diffs[2] > 0

    def test_grid_spectral_peak(self):
        p = synth.GeneratorProfile("g", 0.3, blur_sigma_max=0, flicker_max=0, ringing_max=0)
        s = scene(6, 64, 64)
        d = synth.gen_fake(s, p, 64, 64, 2).frames[0, ..., 0] - synth.gen_real(s, 64, 64, 2).frames[0, ..., 0]
        mag = np.abs(np.fft.fft2(d))
        k = 64 // p.grid_period
        mag[0, 0] = 0
        assert mag[0, k] == mag.max() or mag[k, 0] == mag.max()
        assert mag[0, k] > 20 * np.median(mag)

    def test_quality_cap(self):
        with pytest.raises(ConfigError):
            synth.GeneratorProfile("g", 0.96)
        with pytest.raises(ConfigError):
            synth.GeneratorProfile("g", 0.5, flicker_max=-1)

    def test_coverage_limits_artifacts(self):
        p = synth.GeneratorProfile("g", 0.3, flicker_max=0, artifact_coverage=0.3)
        s = scene(7, 64, 80)
        d = np.abs(synth.gen_fake(s, p, 64, 80, 2).frames - synth.gen_real(s, 64, 80, 2).frames)
        touched = np.mean(d[0].max(axis=-1) > 0)
        assert 0.2 < touched <= 0.35


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestCorpus:
    def small(self, **kw):
        cfg = synth.preset("tiny")
        cfg.real_per_profile = {"train": 10, "val": 1, "test": 1}
        cfg.fake_per_profile = {"train": 10, "val": 1, "test": 1}
        cfg.profiles = cfg.profiles + [synth.GeneratorProfile("gen_c", 0.5, resolutions=[[64, 64]],
                                                              duration_s=[1.0, 1.0], fps=[2.0])]
        for k, v in kw.items():
            setattr(cfg, k, v)
        return cfg

    def test_shared_reals_count(self, tmp_path):
        m = synth.build_corpus(self.small(share_reals=True), tmp_path)
        train = m.split("train").records
        assert len(train) == 40
        assert sum(r.label == "real" for r in train) == 10
        assert all(r.generator == "" for r in train if r.label == "real")

    def test_balanced_roundtrip_and_deterministic(self, tmp_path):
        cfg = synth.preset("tiny")
        a = synth.build_corpus(cfg, tmp_path / "a")
        b = synth.build_corpus(cfg, tmp_path / "b")
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
        for r in a.records:
            assert sha(tmp_path / "a" / r.path) == sha(tmp_path / "b" / r.path)
        m = load_manifest(tmp_path / "a/manifest.jsonl")
        for split in ("train", "val", "test"):
            recs = m.split(split).records
            assert sum(r.is_generated for r in recs) * 2 == len(recs)
        for r in m.records:
            v = load_video(r, m.root)
            assert v.frames.shape == (r.frame_count, r.height, r.width, 3)
        assert {r.quality for r in m.records if r.is_generated} == {0.3, 0.7}

    def test_seed_changes_content(self, tmp_path):
        cfg = synth.preset("tiny")
        synth.build_corpus(cfg, tmp_path / "a")
        cfg.seed = 1
        m = synth.build_corpus(cfg, tmp_path / "b")
        r = m.records[0]
        assert sha(tmp_path / "a" / r.path) != sha(tmp_path / "b" / r.path)

    def test_config_roundtrip_and_preset(self, tmp_path):
        cfg = synth.CorpusConfig.from_dict({"preset": "default", "seed": 5})
        assert cfg.seed == 5 and len(cfg.profiles) == 4
        back = synth.CorpusConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg
        with pytest.raises(ConfigError):
            synth.preset("nope")

    def test_default_mixes_resolutions(self):
        cfg = synth.preset("default")
        n = len(cfg.profiles)
        assert n * (cfg.real_per_profile["train"] + cfg.fake_per_profile["train"]) == 400
        assert n * (cfg.real_per_profile["val"] + cfg.fake_per_profile["val"]) == 100
        sizes = {tuple(r) for p in cfg.profiles for r in p.resolutions}
        assert len({h / w for h, w in sizes}) > 1


@pytest.mark.parametrize("h,w", synth.HIRES_RESOLUTIONS + [[672, 392]])
def test_end_band_misses_center_crop(h, w):
    prof = synth.preset("hires").profiles[0]
    for seed in range(6):
        base = synth.gen_real(scene(seed, h, w), h, w, 2)
        diff = np.abs(synth.apply_artifacts(base, prof, seed).frames - base.frames).max(axis=(0, 3))
        top, left = (h - 224) // 2, (w - 224) // 2
        assert diff[top:top + 224, left:left + 224].max() == 0
        touched = diff > 0
        assert abs(touched.mean() - 0.3) < 0.05


def test_unknown_region_rejected():
    with pytest.raises(ConfigError):
        synth.GeneratorProfile("g", 0.5, artifact_region="middle")
