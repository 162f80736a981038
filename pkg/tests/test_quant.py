import json
import struct
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from errors import (
    CorruptIndices,
    EmptyGroup,
    InvalidConfig,
    MalformedContainer,
    PlanLengthMismatch,
    TargetOutOfRange,
    UnsupportedVersion,
)
from model import Engine
from quant import (
    MixedPrecisionPlan,
    depalettize,
    depalettize_checkpoint,
    group_sensitivities,
    load_palettized,
    load_palettized_checkpoint,
    open_checkpoint,
    pack_indices,
    palettize_checkpoint,
    palettize_group,
    palettize_tensor,
    palettized_from_bytes,
    palettized_to_bytes,
    plan_mixed_precision,
    quantization_report,
    save_palettized,
    save_palettized_checkpoint,
    unpack_indices,
)
from tests.helpers import TempDirTestCase, random_prompt, toy_checkpoint


def group_mse(values, codebook, indices):
    values = np.asarray(values, dtype=np.float32).astype(np.float64)
    return float(np.mean((codebook[indices].astype(np.float64) - values) ** 2))


class TestPalettizeGroup(unittest.TestCase):

    def test_few_distinct_values_are_exact(self):
        values = [0.5, -1.0, 0.5, 2.0, 3.0, -1.0]
        codebook, indices = palettize_group(values, 2)
        self.assertEqual(codebook.shape, (4,))
        self.assertEqual(codebook.dtype, np.float32)
        assert_array_equal(codebook[indices], np.asarray(values, np.float32))

    def test_constant_group(self):
        codebook, indices = palettize_group([0.25] * 10, 4)
        self.assertEqual(codebook.shape, (16,))
        assert_array_equal(codebook[indices], np.full(10, 0.25, np.float32))

    def test_eight_evenly_spaced_values_at_two_bits(self):
        values = np.arange(8, dtype=np.float32)
        codebook, indices = palettize_group(values, 2)
        assert_allclose(np.sort(codebook), [0.5, 2.5, 4.5, 6.5], atol=1e-6)
        self.assertAlmostEqual(group_mse(values, codebook, indices), 0.25, places=9)

    def test_more_bits_never_worse(self):
        for seed in range(10):
            values = np.random.default_rng(seed).standard_normal(64).astype(np.float32)
            cb2, idx2 = palettize_group(values, 2)
            cb4, idx4 = palettize_group(values, 4)
            self.assertLessEqual(group_mse(values, cb4, idx4), group_mse(values, cb2, idx2) + 1e-12)

    def test_deterministic(self):
        values = np.random.default_rng(3).standard_normal(64).astype(np.float32)
        a = palettize_group(values, 4)
        b = palettize_group(values, 4)
        assert_array_equal(a[0], b[0])
        assert_array_equal(a[1], b[1])

    def test_errors(self):
        with self.assertRaises(EmptyGroup):
            palettize_group([], 2)
        with self.assertRaises(InvalidConfig):
            palettize_group([1.0, 2.0], 3)
        with self.assertRaises(InvalidConfig):
            palettize_group([1.0, float("nan")], 2)


class TestPacking(unittest.TestCase):

    def test_lsb_first(self):
        self.assertEqual(pack_indices(np.array([1, 2, 3, 0]), 2), bytes([57]))
        self.assertEqual(pack_indices(np.array([1, 15]), 4), bytes([241]))

    def test_partial_byte(self):
        packed = pack_indices(np.array([3, 1, 2, 0, 3]), 2)
        self.assertEqual(len(packed), 2)
        assert_array_equal(unpack_indices(packed, 2, 5), [3, 1, 2, 0, 3])

    def test_wrong_length(self):
        with self.assertRaises(CorruptIndices):
            unpack_indices(bytes([57]), 2, 5)


class TestPlanning(unittest.TestCase):

    def test_average_close_to_target(self):
        rng = np.random.default_rng(0)
        for n in (1, 7, 64, 1000):
            plan = plan_mixed_precision(list(rng.random(n)), 3.5)
            self.assertEqual(len(plan), n)
            self.assertLessEqual(abs(plan.achieved_avg_bits - 3.5), 2.0 / n)
            self.assertEqual(set(plan.bits) - {2, 4}, set())

    def test_most_sensitive_groups_get_four_bits(self):
        plan = plan_mixed_precision([0.1, 0.9, 0.5, 0.3], 3.0)
        self.assertEqual(plan.bits, [2, 4, 4, 2])

    def test_ties_go_to_lower_index(self):
        self.assertEqual(plan_mixed_precision([1.0] * 4, 3.0).bits, [4, 4, 2, 2])

    def test_bounds(self):
        self.assertEqual(plan_mixed_precision([1.0, 2.0], 2.0).bits, [2, 2])
        self.assertEqual(plan_mixed_precision([1.0, 2.0], 4.0).bits, [4, 4])
        with self.assertRaises(TargetOutOfRange):
            plan_mixed_precision([1.0], 4.5)
        with self.assertRaises(TargetOutOfRange):
            plan_mixed_precision([1.0], 1.9)
        with self.assertRaises(PlanLengthMismatch):
            plan_mixed_precision([1.0, 2.0], 3.0, group_lengths=[64])

    def test_weighted_average(self):
        plan = plan_mixed_precision([0.1, 0.9], 3.0, group_lengths=[64, 16])
        self.assertEqual(plan.bits, [2, 4])
        self.assertAlmostEqual(plan.achieved_avg_bits, (2 * 64 + 4 * 16) / 80)

    def test_sensitivities(self):
        self.assertEqual(group_sensitivities(np.array([1.0, -3.0, 2.0]), 2), [2.0, 2.0])

    def test_three_and_a_half_bits_is_three_quarters_four_bit(self):
        sens = list(np.random.default_rng(3).random(100))
        plan = plan_mixed_precision(sens, 3.5)
        self.assertEqual(plan.bits.count(4), 75)
        self.assertEqual(plan.bits.count(2), 25)
        self.assertAlmostEqual(plan.achieved_avg_bits, 3.5)
        cutoff = min(s for s, b in zip(sens, plan.bits) if b == 4)
        self.assertTrue(all(s <= cutoff for s, b in zip(sens, plan.bits) if b == 2))


class TestTensor(unittest.TestCase):

    def setUp(self):
        self.t = np.random.default_rng(5).standard_normal((6, 32)).astype(np.float32)

    def test_short_last_group(self):
        t = np.arange(10, dtype=np.float32).reshape(2, 5)
        p = palettize_tensor(t, 4, MixedPrecisionPlan.uniform(3, 2))
        self.assertEqual([g.length for g in p.groups], [4, 4, 2])
        self.assertEqual(depalettize(p).shape, (2, 5))
        assert_array_equal(depalettize(p), t)

    def test_identity_matrix_is_exact(self):
        eye = np.eye(16, dtype=np.float32)
        for bits in (2, 4):
            p = palettize_tensor(eye, 16, MixedPrecisionPlan.uniform(16, bits))
            assert_array_equal(depalettize(p), eye)
            self.assertEqual(quantization_report(eye, p).mse, 0.0)

    def test_plan_length_checked(self):
        with self.assertRaises(PlanLengthMismatch):
            palettize_tensor(self.t, 64, MixedPrecisionPlan.uniform(2, 2))

    def test_workers_do_not_change_output(self):
        plan = plan_mixed_precision(group_sensitivities(self.t, 16), 3.0)
        serial = palettize_tensor(self.t, 16, plan, workers=1)
        pooled = palettize_tensor(self.t, 16, plan, workers=4)
        self.assertEqual(palettized_to_bytes(serial), palettized_to_bytes(pooled))

    def test_report(self):
        p = palettize_tensor(self.t, 64, MixedPrecisionPlan.uniform(3, 2))
        report = quantization_report(self.t, p)
        diff = depalettize(p).astype(np.float64) - self.t.astype(np.float64)
        self.assertAlmostEqual(report.mse, float(np.mean(diff ** 2)))
        self.assertAlmostEqual(report.max_abs_err, float(np.max(np.abs(diff))))
        self.assertEqual(report.avg_bits, 2.0)
        # 2 bits per weight plus a 4 x 32-bit codebook per 64 weights
        self.assertAlmostEqual(report.compression_ratio, 8.0)

    def test_four_bit_error_below_two_bit(self):
        two = quantization_report(self.t, palettize_tensor(self.t, 64, MixedPrecisionPlan.uniform(3, 2)))
        four = quantization_report(self.t, palettize_tensor(self.t, 64, MixedPrecisionPlan.uniform(3, 4)))
        self.assertLess(four.mse, two.mse)


class TestTensorPayload(TempDirTestCase):

    def setUp(self):
        super().setUp()
        t = np.random.default_rng(6).standard_normal((3, 40)).astype(np.float32)
        self.p = palettize_tensor(t, 32, plan_mixed_precision(group_sensitivities(t, 32), 3.0))
        self.buf = palettized_to_bytes(self.p)

    def test_round_trip(self):
        path = self.tmp / "w.unlq"
        save_palettized(self.p, path)
        loaded = load_palettized(path)
        self.assertEqual(loaded.original_shape, (3, 40))
        self.assertEqual([g.bits for g in loaded.groups], [g.bits for g in self.p.groups])
        assert_array_equal(depalettize(loaded), depalettize(self.p))

    def test_bad_magic(self):
        with self.assertRaises(MalformedContainer):
            palettized_from_bytes(b"XXXX" + self.buf[4:])

    def test_bad_version(self):
        with self.assertRaises(UnsupportedVersion):
            palettized_from_bytes(self.buf[:4] + struct.pack("<I", 2) + self.buf[8:])

    def test_truncated_and_trailing(self):
        with self.assertRaises(MalformedContainer):
            palettized_from_bytes(self.buf[:-1])
        with self.assertRaises(MalformedContainer):
            palettized_from_bytes(self.buf + b"\x00")

    def test_bad_bit_width(self):
        # magic, version, group_size, rank, two dims, group count
        first_bits = 4 + 4 + 4 + 1 + 16 + 8
        buf = bytearray(self.buf)
        buf[first_bits] = 3
        with self.assertRaises(CorruptIndices):
            palettized_from_bytes(bytes(buf))


class TestCheckpoint(TempDirTestCase):

    @classmethod
    def setUpClass(cls):
        cls.ckpt = toy_checkpoint(seed=4)
        cls.pc = palettize_checkpoint(cls.ckpt, target_avg_bits=3.5, group_size=64)

    def test_layout(self):
        self.assertEqual(self.pc.n_groups, 1440)
        self.assertAlmostEqual(self.pc.avg_bits, 3.5, places=9)
        self.assertIn("embed.weight", self.pc.raw)
        self.assertIn("final_norm", self.pc.raw)
        self.assertIn("layers.0.attn.wq", self.pc.palettized)

    def test_embeddings_optional(self):
        pc = palettize_checkpoint(self.ckpt, target_avg_bits=2.0, include_embeddings=True)
        self.assertIn("embed.weight", pc.palettized)
        self.assertEqual(pc.avg_bits, 2.0)

    def test_round_trip(self):
        path = self.tmp / "toy.unlp"
        save_palettized_checkpoint(self.pc, path)
        loaded = load_palettized_checkpoint(path)
        self.assertEqual(loaded.config, self.pc.config)
        self.assertEqual(loaded.group_size, 64)
        expected = depalettize_checkpoint(self.pc)
        self.assertEqual(depalettize_checkpoint(loaded).checksum(), expected.checksum())
        self.assertEqual(open_checkpoint(path).checksum(), expected.checksum())

    def test_truncated_container(self):
        path = self.tmp / "toy.unlp"
        save_palettized_checkpoint(self.pc, path)
        path.write_bytes(path.read_bytes()[:-10])
        with self.assertRaises(MalformedContainer):
            load_palettized_checkpoint(path)

    def rewrite_header(self, path, edit):
        buf = path.read_bytes()
        (header_len,) = struct.unpack("<Q", buf[8:16])
        header = json.loads(buf[16:16 + header_len])
        edit(header)
        raw = json.dumps(header).encode("utf-8")
        path.write_bytes(buf[:8] + struct.pack("<Q", len(raw)) + raw + buf[16 + header_len:])

    def test_malformed_tensor_entries(self):
        edits = [
            lambda h: h["tensors"][0].pop("kind"),
            lambda h: h["tensors"][0].update(kind="float16"),
            lambda h: h["tensors"][0].update(offset="zero"),
            lambda h: h["tensors"][0].update(nbytes=-4),
            lambda h: h["tensors"][0].update(shape="64x256"),
            lambda h: h["tensors"][0].update(shape=[3, 3]),
            lambda h: h.update(tensors={"embed.weight": 1}),
        ]
        for i, edit in enumerate(edits):
            path = self.tmp / f"bad{i}.unlp"
            save_palettized_checkpoint(self.pc, path)
            self.rewrite_header(path, edit)
            with self.assertRaises(MalformedContainer, msg=i):
                load_palettized_checkpoint(path)


class TestQuantizedModelSmoke(unittest.TestCase):

    def test_greedy_agreement(self):
        ckpt = toy_checkpoint(seed=7)
        quantized = depalettize_checkpoint(palettize_checkpoint(ckpt, target_avg_bits=4.0, group_size=32))
        base, approx = Engine(ckpt), Engine(quantized)
        rng = np.random.default_rng(8)
        agree = 0
        for _ in range(100):
            ids = random_prompt(rng, 8)
            agree += int(np.argmax(base.forward(ids)[-1]) == np.argmax(approx.forward(ids)[-1]))
        self.assertGreaterEqual(agree, 90)


if __name__ == "__main__":
    unittest.main()
