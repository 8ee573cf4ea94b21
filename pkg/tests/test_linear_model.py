from __future__ import annotations

import math

import numpy as np
import pytest

from gfa_oamp.denoisers import Prior
from gfa_oamp.linear_model import (
    decorrelation_residual,
    dump_instance,
    generate_instance,
    load_instance,
    n_measurements,
    substreams,
)


class TestGenerate:
    def test_shapes_and_model(self):
        inst = generate_instance(200, 0.5, 0.01, Prior(0.1), seed=3)
        assert inst.A.shape == (100, 200)
        assert inst.M == 100 and inst.N == 200 and inst.delta == 0.5
        np.testing.assert_allclose(inst.y, inst.A @ inst.x0 + inst.omega)

    def test_measurement_count_rounds_half_up(self):
        assert n_measurements(5, 0.5) == 3
        assert n_measurements(2000, 0.5) == 1000

    def test_same_seed_same_bits(self):
        a = generate_instance(64, 0.5, 0.1, Prior(0.2), seed=9)
        b = generate_instance(64, 0.5, 0.1, Prior(0.2), seed=9)
        for name in ("A", "x0", "omega", "y"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_different_seeds_differ(self):
        a = generate_instance(64, 0.5, 0.1, Prior(0.2), seed=1)
        b = generate_instance(64, 0.5, 0.1, Prior(0.2), seed=2)
        assert not np.array_equal(a.A, b.A)

    def test_arrays_read_only(self):
        inst = generate_instance(16, 0.5, 0.0, Prior(0.5), seed=0)
        with pytest.raises(ValueError):
            inst.A[0, 0] = 1.0

    def test_column_norms(self):
        # E[|a_j|^2] = 1 with variance 2/M per column
        inst = generate_instance(2000, 0.5, 0.0, Prior(0.1), seed=5)
        norms = np.sum(inst.A**2, axis=0)
        assert abs(norms.mean() - 1.0) < 4 * math.sqrt(2 / inst.M / inst.N)

    def test_noise_variance(self):
        inst = generate_instance(4000, 1.0, 0.25, Prior(0.1), seed=5)
        assert abs(inst.omega.var() - 0.25) < 4 * 0.25 * math.sqrt(2 / inst.M)

    @pytest.mark.parametrize("kwargs", [dict(delta=0.0), dict(delta=1.5), dict(sigma0_2=-1.0), dict(n=0)])
    def test_rejects_bad_input(self, kwargs):
        args = dict(n=16, delta=0.5, sigma0_2=0.01, prior=Prior(0.1), seed=0)
        args.update(kwargs)
        with pytest.raises(ValueError):
            generate_instance(**args)


class TestSubstreams:
    def test_independent_and_reproducible(self):
        a = [g.random() for g in substreams(7, 3)]
        b = [g.random() for g in substreams(7, 3)]
        assert a == b and len(set(a)) == 3

    def test_key_changes_streams(self):
        assert substreams(7, 1, 0)[0].random() != substreams(7, 1, 1)[0].random()


class TestDecorrelation:
    def test_identity_pair(self):
        A = np.eye(4)
        assert decorrelation_residual(A.T, A) == 0.0

    def test_trace_formula(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((5, 8))
        W = rng.standard_normal((8, 5))
        np.testing.assert_allclose(decorrelation_residual(W, A), np.trace(np.eye(8) - W @ A) / 8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            decorrelation_residual(np.zeros((3, 4)), np.zeros((3, 4)))

    def test_matched_filter_small_residual(self):
        inst = generate_instance(2000, 0.5, 0.0, Prior(0.1), seed=2)
        # sd of tr(A^T A)/N is sqrt(2/(M N))
        assert abs(decorrelation_residual(inst.A.T, inst.A)) < 5 * math.sqrt(2 / (inst.M * inst.N))


class TestDumpLoad:
    def test_roundtrip(self, tmp_path):
        inst = generate_instance(40, 0.5, 0.02, Prior(0.3), seed=2**63 + 5)
        path = tmp_path / "inst.bin"
        dump_instance(inst, path)
        back = load_instance(path)
        assert (back.M, back.N, back.seed, back.sigma0_2) == (inst.M, inst.N, inst.seed, inst.sigma0_2)
        for name in ("A", "x0", "omega", "y"):
            np.testing.assert_array_equal(getattr(back, name), getattr(inst, name))

    def test_layout(self, tmp_path):
        inst = generate_instance(6, 0.5, 0.0, Prior(1.0), seed=1)
        path = tmp_path / "inst.bin"
        dump_instance(inst, path)
        raw = path.read_bytes()
        assert raw[:4] == b"GFAI"
        assert len(raw) == 40 + 8 * (3 * 6 + 6 + 3 + 3)
        np.testing.assert_array_equal(np.frombuffer(raw, "<f8", count=18, offset=40).reshape(3, 6), inst.A)

    def test_truncated_file(self, tmp_path):
        inst = generate_instance(6, 0.5, 0.0, Prior(1.0), seed=1)
        path = tmp_path / "inst.bin"
        dump_instance(inst, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_instance(path)

    def test_short_file(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"GFAI")
        with pytest.raises(ValueError, match="not an instance"):
            load_instance(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"XXXX" + bytes(36))
        with pytest.raises(ValueError, match="not an instance"):
            load_instance(path)
