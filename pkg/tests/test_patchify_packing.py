import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nativevid.errors import ContractError
from nativevid.packing import PackedBatch, bucket_pack, greedy_bucket, pack, unpack, unpack_sequences
from nativevid.patchify import (PatchEmbedder, PatchSequence, PatchSpec, grid_coords, patchify,
                                temporal_pad, unpatchify)

SPEC = PatchSpec()


def random_video(rng, T, H, W, C=3):
    return rng.random((T, H, W, C))


class TestTemporalPad:
    def test_divisible_unchanged(self):
        v = np.zeros((8, 2, 2, 3))
        assert temporal_pad(v, 2) is v

    def test_odd_repeats_last(self):
        v = np.arange(7).reshape(7, 1, 1, 1).astype(float)
        out = temporal_pad(v, 2)
        assert out.ravel().tolist() == [0, 1, 2, 3, 4, 5, 6, 6]

    def test_single_image(self):
        out = temporal_pad(np.ones((1, 3, 3, 3)), 2)
        assert out.shape[0] == 2 and np.array_equal(out[0], out[1])


class TestPatchify:
    def test_small_shape(self):
        seq = patchify(np.zeros((2, 28, 28, 3)), SPEC)
        assert seq.tokens.shape == (4, 1176)

    def test_token_count_on_resized_clip(self):
        seq = patchify(np.zeros((8, 532, 952, 3), dtype=np.float32), SPEC)
        assert len(seq) == 4 * 38 * 68 == 10336

    def test_identity_embedding_gives_raw_pixels(self):
        v = random_video(np.random.default_rng(0), 2, 28, 42)
        seq = patchify(v, SPEC, PatchEmbedder.identity(SPEC))
        # token for grid cell (0, 1, 2) is the (t, h, w, c)-flattened block
        k = int(np.flatnonzero((seq.coords == [0, 1, 2]).all(axis=1))[0])
        assert np.array_equal(seq.tokens[k], v[0:2, 14:28, 28:42, :].reshape(-1))

    def test_enumeration_order(self):
        seq = patchify(np.zeros((4, 28, 42, 3)), SPEC)
        assert seq.coords.tolist() == grid_coords(2, 2, 3).tolist()
        assert seq.coords[:4].tolist() == [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 1, 0]]

    @pytest.mark.parametrize("shape,axis", [((3, 28, 28, 3), "T"), ((2, 27, 28, 3), "H"), ((2, 28, 30, 3), "W")])
    def test_divisibility_error_names_axis(self, shape, axis):
        with pytest.raises(ContractError, match=f"axis {axis}"):
            patchify(np.zeros(shape), SPEC)

    def test_embedder_shape_checked(self):
        with pytest.raises(ContractError):
            patchify(np.zeros((2, 14, 14, 3)), SPEC, PatchEmbedder(np.zeros((10, 4))))

    @pytest.mark.parametrize("k", range(12))
    def test_roundtrip_random_shapes(self, k):
        rng = np.random.default_rng(k)
        spec = PatchSpec(int(rng.integers(1, 3)), int(rng.integers(2, 15)), int(rng.integers(2, 15)))
        T, H, W = spec.pt * int(rng.integers(1, 4)), spec.ph * int(rng.integers(1, 5)), spec.pw * int(rng.integers(1, 5))
        v = random_video(rng, T, H, W)
        seq = patchify(v, spec, PatchEmbedder.identity(spec))
        assert len(seq) == (T // spec.pt) * (H // spec.ph) * (W // spec.pw)
        assert np.array_equal(unpatchify(seq, spec), v)

    def test_single_patch_roundtrip(self):
        v = random_video(np.random.default_rng(1), 2, 14, 14)
        assert np.array_equal(unpatchify(patchify(v, SPEC), SPEC), v)

    def test_permuted_tokens_still_reconstruct(self):
        rng = np.random.default_rng(2)
        v = random_video(rng, 4, 28, 42)
        seq = patchify(v, SPEC)
        perm = rng.permutation(len(seq))
        shuffled = PatchSequence(seq.tokens[perm], seq.coords[perm], seq.dims)
        assert np.array_equal(unpatchify(shuffled, SPEC), v)

    def test_incomplete_coords_rejected(self):
        seq = patchify(np.zeros((2, 28, 28, 3)), SPEC)
        broken = PatchSequence(seq.tokens[:3], seq.coords[:3], seq.dims)
        with pytest.raises(ContractError):
            unpatchify(broken, SPEC)
        dup = PatchSequence(seq.tokens, np.vstack([seq.coords[:3], seq.coords[:1]]), seq.dims)
        with pytest.raises(ContractError):
            unpatchify(dup, SPEC)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        E = PatchEmbedder(rng.standard_normal((1176, 16)))
        v1, v2 = random_video(rng, 2, 28, 28), random_video(rng, 2, 28, 28)
        a, b = 0.7, -1.3
        lhs = patchify(a * v1 + b * v2, SPEC, E).tokens
        rhs = a * patchify(v1, SPEC, E).tokens + b * patchify(v2, SPEC, E).tokens
        assert np.max(np.abs(lhs - rhs)) <= 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 6),
           st.integers(1, 6))
    def test_token_count_formula(self, nt, nh, nw, pt, ph, pw):
        spec = PatchSpec(pt, ph, pw)
        seq = patchify(np.zeros((nt * pt, nh * ph, nw * pw, 3)), spec)
        assert len(seq) == nt * nh * nw
        assert len(np.unique(seq.coords, axis=0)) == len(seq)


def seq_of(n, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return PatchSequence(rng.standard_normal((n, d)), grid_coords(1, 1, n), (2, 14, 14 * n))


class TestPacking:
    def test_boundaries(self):
        b = pack([seq_of(3), seq_of(5)])
        assert b.boundaries.tolist() == [0, 3, 8]

    def test_single(self):
        assert pack([seq_of(6)]).boundaries.tolist() == [0, 6]

    def test_roundtrip(self):
        seqs = [seq_of(n, seed=n) for n in (2, 7, 1, 4)]
        back = unpack_sequences(pack(seqs))
        for a, b in zip(seqs, back):
            assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.coords, b.coords)
            assert a.dims == b.dims

    def test_unpack_empty(self):
        assert unpack(np.zeros((0, 3)), []) == []

    def test_unpack_mismatch(self):
        with pytest.raises(ContractError):
            unpack(np.zeros((5, 3)), [0, 2, 4])

    def test_mixed_width_rejected(self):
        with pytest.raises(ContractError):
            pack([seq_of(2, d=4), seq_of(2, d=5)])

    def test_empty_list_rejected(self):
        with pytest.raises(ContractError):
            pack([])

    def test_invalid_boundaries(self):
        with pytest.raises(ContractError):
            PackedBatch(np.zeros((4, 2)), [0, 2, 2, 4], np.zeros((4, 3)))

    def test_greedy_example(self):
        bins = greedy_bucket([6, 4, 4, 2], 10)
        assert [[ [6, 4, 4, 2][i] for i in b] for b in bins] == [[6, 4], [4, 2]]

    def test_equal_lengths(self):
        assert len(greedy_bucket([5] * 7, 15)) == 3

    def test_all_in_one(self):
        assert len(greedy_bucket([3, 1, 4, 1, 5], 14)) == 1

    def test_oversize_lists_ids(self):
        with pytest.raises(ContractError, match="clip-9"):
            greedy_bucket([3, 20], 10, ids=["clip-1", "clip-9"])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 50), min_size=1, max_size=40), st.integers(50, 200))
    def test_conservation_and_cap(self, lengths, cap):
        bins = greedy_bucket(lengths, cap)
        flat = sorted(i for b in bins for i in b)
        assert flat == list(range(len(lengths)))
        assert all(sum(lengths[i] for i in b) <= cap for b in bins)

    def test_bucket_pack_keeps_ids(self):
        seqs = [seq_of(n, seed=n) for n in (6, 4, 4, 2)]
        batches = bucket_pack(seqs, 10, labels=[1, 0, 1, 0], ids=["a", "b", "c", "d"])
        assert [b.ids for b in batches] == [["a", "b"], ["c", "d"]]
        assert [b.labels for b in batches] == [[1, 0], [1, 0]]
