import unittest

import numpy as np
from numpy.testing import assert_array_equal

from errors import ContextOverflow, ShapeMismatch
from kv_cache import KVCache


class TestKVCache(unittest.TestCase):

    def setUp(self):
        self.cache = KVCache(n_layers=2, max_seq_len=200, n_kv_heads=2, head_dim=4)

    def _block(self, T, fill):
        return np.full((T, 2, 4), fill, dtype=np.float32)

    def test_write_returns_visible_prefix(self):
        keys, values = self.cache.write(0, self._block(3, 1.0), self._block(3, 2.0))
        self.assertEqual(keys.shape, (3, 2, 4))
        self.cache.write(1, self._block(3, 1.0), self._block(3, 2.0))
        self.cache.advance(3)
        keys, values = self.cache.write(0, self._block(1, 5.0), self._block(1, 6.0))
        self.assertEqual(keys.shape, (4, 2, 4))
        assert_array_equal(keys[:3], self._block(3, 1.0))
        assert_array_equal(values[3], np.full((2, 4), 6.0))

    def test_grows_past_initial_capacity(self):
        self.assertEqual(self.cache.capacity, KVCache.INITIAL_CAPACITY)
        for layer in range(2):
            self.cache.write(layer, self._block(100, float(layer)), self._block(100, 0.0))
        self.cache.advance(100)
        self.assertEqual(self.cache.capacity, 128)
        keys, _ = self.cache.write(0, self._block(90, 9.0), self._block(90, 9.0))
        self.assertEqual(self.cache.capacity, 200)
        assert_array_equal(keys[:100], self._block(100, 0.0))

    def test_overflow(self):
        with self.assertRaises(ContextOverflow):
            self.cache.write(0, self._block(201, 0.0), self._block(201, 0.0))

    def test_shape_checked(self):
        with self.assertRaises(ShapeMismatch):
            self.cache.write(0, np.zeros((1, 3, 4), np.float32), np.zeros((1, 3, 4), np.float32))

    def test_stats(self):
        for layer in range(2):
            self.cache.write(layer, self._block(4, 0.0), self._block(4, 0.0))
        self.cache.advance(4)
        for layer in range(2):
            self.cache.write(layer, self._block(1, 0.0), self._block(1, 0.0))
        self.cache.advance(1)
        stats = self.cache.get_stats()
        self.assertEqual(stats["cur_len"], 5)
        self.assertEqual(stats["appended_tokens"], 5)
        self.assertEqual(stats["reused_tokens"], 4)
        self.assertEqual(stats["forward_calls"], 2)
        self.assertAlmostEqual(stats["reuse_rate"], 4 / 9)
        self.assertEqual(self.cache.remaining(), 195)


if __name__ == "__main__":
    unittest.main()
