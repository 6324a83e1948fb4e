"""Packing: first-fit bins, cu_seqlens, block-causal masks, isolation proof."""

import numpy as np
import pytest

from omnipipe.errors import ContractError, ShapeError
from omnipipe.numkit import Tensor
from omnipipe.packing import (
    IsolationMask,
    build_mask,
    mask_matrix,
    pack,
    packed_attention,
)

from oracles import standalone_causal_attention


class TestPack:
    def test_first_fit_hand_case(self):
        batch = pack([3, 5, 2], capacity=8)
        assert [list(b.sample_ids) for b in batch.bins] == [[0, 1], [2]]
        assert [list(b.cu_seqlens) for b in batch.bins] == [[0, 3, 8], [0, 2]]
        assert [b.pad_len for b in batch.bins] == [0, 6]

    def test_empty_input(self):
        assert pack([], capacity=8).bins == ()

    def test_oversize_names_sample(self):
        with pytest.raises(ContractError, match="sample 0"):
            pack([9], capacity=8)

    def test_non_positive_length_rejected(self):
        with pytest.raises(ContractError):
            pack([3, 0], capacity=8)

    def test_deterministic(self):
        lengths = [5, 1, 7, 3, 3, 2, 6]
        a = pack(lengths, capacity=8)
        b = pack(lengths, capacity=8)
        assert a == b

    def test_first_fit_keeps_arrival_order_within_bins(self):
        batch = pack([2, 2, 2], capacity=6)
        assert list(batch.bins[0].sample_ids) == [0, 1, 2]

    def test_ffd_visits_longest_first(self):
        batch = pack([2, 7, 5, 3], capacity=8, policy="first_fit_decreasing")
        assert [list(b.sample_ids) for b in batch.bins] == [[1], [2, 3], [0]]

    def test_unknown_policy(self):
        with pytest.raises(ContractError):
            pack([1], capacity=2, policy="best_fit")

    def test_lengths_roundtrip_and_waste(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            capacity = int(rng.integers(4, 40))
            lengths = [int(rng.integers(1, capacity + 1)) for _ in range(int(rng.integers(0, 12)))]
            batch = pack(lengths, capacity)
            assert len(batch.bins) <= len(lengths)
            reconstructed = {}
            for b in batch.bins:
                for sid, ln in zip(b.sample_ids, b.lengths()):
                    reconstructed[sid] = ln
            assert reconstructed == dict(enumerate(lengths))
            assert batch.total_padding == len(batch.bins) * capacity - sum(lengths)

    def test_json_shape(self):
        assert pack([3, 5, 2], capacity=8).to_json() == {
            "capacity": 8,
            "bins": [
                {"samples": [0, 1], "cu_seqlens": [0, 3, 8], "pad": 0},
                {"samples": [2], "cu_seqlens": [0, 2], "pad": 6},
            ],
        }


def _segment_of(cu, i):
    for s, (a, b) in enumerate(zip(cu, cu[1:])):
        if a <= i < b:
            return s
    return None


class TestBuildMask:
    def test_enumerated_hand_case(self):
        mask = IsolationMask.from_cu_seqlens([0, 2, 4], capacity=4)
        allowed = {(i, j) for i in range(4) for j in range(4) if mask.matrix[i, j]}
        assert allowed == {(0, 0), (1, 0), (1, 1), (2, 2), (3, 2), (3, 3)}

    def test_single_full_sample_is_causal_triangle(self):
        batch = pack([4], capacity=4)
        mask = build_mask(batch, 0)
        assert np.array_equal(mask.matrix, np.tril(np.ones((4, 4), dtype=bool)))

    def test_padding_rows_attend_nowhere(self):
        batch = pack([2], capacity=4)
        mask = build_mask(batch, 0)
        assert not mask.matrix[2:].any()
        assert not mask.matrix[:, 2:].any()

    def test_index_out_of_range(self):
        batch = pack([2], capacity=4)
        with pytest.raises(ContractError):
            build_mask(batch, 1)

    def test_matrix_matches_definition(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            capacity = int(rng.integers(3, 20))
            lengths = []
            room = capacity
            while room > 0 and rng.random() > 0.2:
                ln = int(rng.integers(1, room + 1))
                lengths.append(ln)
                room -= ln
            cu = [0]
            for ln in lengths:
                cu.append(cu[-1] + ln)
            matrix = mask_matrix(cu, capacity)
            for i in range(capacity):
                for j in range(capacity):
                    si, sj = _segment_of(cu, i), _segment_of(cu, j)
                    expected = si is not None and si == sj and j <= i
                    assert matrix[i, j] == expected


class TestPackedAttention:
    def test_single_sample_equals_plain_causal(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3))
        mask = IsolationMask.from_cu_seqlens([0, 5], capacity=5)
        got = packed_attention(Tensor(x), mask).array
        assert np.max(np.abs(got - standalone_causal_attention(x))) <= 1e-10

    def test_two_packed_samples_match_standalone(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 4))
        tokens = np.concatenate([a, b, np.zeros((1, 4))])
        mask = IsolationMask.from_cu_seqlens([0, 3, 7], capacity=8)
        got = packed_attention(Tensor(tokens), mask).array
        assert np.max(np.abs(got[0:3] - standalone_causal_attention(a))) <= 1e-10
        assert np.max(np.abs(got[3:7] - standalone_causal_attention(b))) <= 1e-10
        assert np.all(got[7] == 0.0)

    def test_all_padding_bin_is_zero(self):
        mask = IsolationMask.from_cu_seqlens([0], capacity=3)
        out = packed_attention(Tensor(np.ones((3, 2))), mask)
        assert np.all(out.array == 0.0)

    def test_size_mismatch(self):
        mask = IsolationMask.from_cu_seqlens([0, 2], capacity=4)
        with pytest.raises(ShapeError):
            packed_attention(Tensor(np.ones((3, 2))), mask)

    def test_isolation_over_random_packings(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            n_samples = int(rng.integers(1, 7))
            lengths = [int(rng.integers(1, 9)) for _ in range(n_samples)]
            capacity = max(lengths) + int(rng.integers(0, 8))
            d = int(rng.integers(1, 17))
            batch = pack(lengths, capacity)
            samples = [rng.normal(size=(ln, d)) for ln in lengths]
            for b, packed_bin in enumerate(batch.bins):
                tokens = np.zeros((capacity, d))
                for sid, (start, end) in zip(
                    packed_bin.sample_ids,
                    zip(packed_bin.cu_seqlens, packed_bin.cu_seqlens[1:]),
                ):
                    tokens[start:end] = samples[sid]
                out = packed_attention(Tensor(tokens), build_mask(batch, b)).array
                for sid, (start, end) in zip(
                    packed_bin.sample_ids,
                    zip(packed_bin.cu_seqlens, packed_bin.cu_seqlens[1:]),
                ):
                    expected = standalone_causal_attention(samples[sid])
                    assert np.max(np.abs(out[start:end] - expected)) <= 1e-10
                assert np.all(out[packed_bin.cu_seqlens[-1] :] == 0.0)
