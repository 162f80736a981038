import base64
import json
import unittest

import numpy as np

from errors import AlphabetMismatch, EmptyCorpus, IdOutOfRange, MalformedFile, TargetTooSmall
from tests.helpers import CORPUS_PATH, TempDirTestCase, random_text
from tokenizer import (
    BYTE_ALPHABET_SIZE,
    Tokenizer,
    byte_tokenizer,
    load_tokenizer,
    merge_pair,
    merge_tokenizers,
    read_jsonl_corpus,
    save_tokenizer,
    train_bpe,
    train_bpe_from_jsonl,
)


def sequential_merge_oracle(tok: Tokenizer, text: str):
    """Apply every merge once, in priority order, over the whole sequence."""
    ids = list(text.encode("utf-8"))
    for m in sorted(tok.merges, key=lambda m: m.priority):
        ids = merge_pair(ids, (m.left, m.right), m.result)
    return ids


class TestTraining(unittest.TestCase):

    def test_aaab_merges(self):
        tok = train_bpe(["aaab"], 258)
        a, b = ord("a"), ord("b")
        self.assertEqual([(m.left, m.right, m.result) for m in tok.merges],
                         [(a, a, 256), (a, b, 257)])
        self.assertEqual(tok.vocab[256], b"aa")
        self.assertEqual(tok.vocab[257], b"ab")
        self.assertEqual(tok.encode("aaab"), [256, 257])

    def test_target_equal_to_alphabet_learns_nothing(self):
        tok = train_bpe(["xyz"], 256)
        self.assertEqual(tok.merges, [])
        self.assertEqual(tok.encode("xyz"), [120, 121, 122])

    def test_empty_corpus(self):
        with self.assertRaises(EmptyCorpus):
            train_bpe([], 300)

    def test_target_too_small(self):
        with self.assertRaises(TargetTooSmall):
            train_bpe(["abc"], 257, special_tokens=["bos", "eos"])

    def test_exhausted_corpus_sets_flag(self):
        tok = train_bpe(["ab"], 300)
        self.assertTrue(tok.exhausted)
        self.assertEqual(tok.vocab_size, 257)

    def test_exact_target_size(self):
        tok = train_bpe(read_jsonl_corpus(CORPUS_PATH), 320, special_tokens=["bos", "eos", "pad", "unk"])
        self.assertEqual(tok.vocab_size, 320)
        self.assertFalse(tok.exhausted)
        tok.validate()

    def test_specials_follow_bytes(self):
        tok = train_bpe(["hello hello"], 262, special_tokens=["bos", "eos"])
        self.assertEqual(tok.special_tokens, {"bos": 256, "eos": 257})
        self.assertEqual(tok.vocab[256], b"<|bos|>")
        self.assertEqual(tok.merges[0].result, 258)

    def test_deterministic(self):
        corpus = read_jsonl_corpus(CORPUS_PATH)
        self.assertEqual(train_bpe(corpus, 300), train_bpe(corpus, 300))

    def test_jsonl_blank_lines_skipped(self):
        self.assertEqual(len(read_jsonl_corpus(CORPUS_PATH)), 12)
        tok = train_bpe_from_jsonl(CORPUS_PATH, 280)
        self.assertEqual(tok.vocab_size, 280)


class TestJsonlErrors(TempDirTestCase):

    def test_malformed_line_names_line_number(self):
        path = self.tmp / "bad.jsonl"
        path.write_text('{"text": "ok"}\n{not json}\n', encoding="utf-8")
        with self.assertRaises(MalformedFile) as ctx:
            read_jsonl_corpus(path)
        self.assertEqual(ctx.exception.field, "line 2")

    def test_missing_text_key(self):
        path = self.tmp / "bad.jsonl"
        path.write_text('{"body": "ok"}\n', encoding="utf-8")
        with self.assertRaises(MalformedFile):
            read_jsonl_corpus(path)


class TestEncodeDecode(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tok = train_bpe(read_jsonl_corpus(CORPUS_PATH), 400, special_tokens=["bos", "eos", "pad", "unk"])

    def test_byte_fallback(self):
        tok = byte_tokenizer()
        self.assertEqual(tok.encode("ab"), [97, 98])
        self.assertEqual(tok.decode([97, 98]), "ab")

    def test_empty(self):
        self.assertEqual(self.tok.encode(""), [])
        self.assertEqual(self.tok.decode([]), "")

    def test_ids_in_range(self):
        ids = self.tok.encode("Bahasa Melayu Nusantara")
        self.assertTrue(all(0 <= i < self.tok.vocab_size for i in ids))
        self.assertLess(len(ids), len("Bahasa Melayu Nusantara"))

    def test_round_trip_fixed_corpus(self):
        for doc in read_jsonl_corpus(CORPUS_PATH):
            self.assertEqual(self.tok.decode(self.tok.encode(doc)), doc)

    def test_round_trip_random_strings(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            s = random_text(rng)
            self.assertEqual(self.tok.decode(self.tok.encode(s)), s)

    def test_out_of_range(self):
        with self.assertRaises(IdOutOfRange):
            self.tok.decode([self.tok.vocab_size])
        with self.assertRaises(IdOutOfRange):
            self.tok.decode([-1])

    def test_specials_are_stripped(self):
        bos = self.tok.special_id("bos")
        eos = self.tok.special_id("eos")
        self.assertEqual(self.tok.decode([bos] + self.tok.encode("saya") + [eos]), "saya")

    def test_lossy_decode_flagged(self):
        text, lossy = byte_tokenizer().decode_with_status([0xFF])
        self.assertTrue(lossy)
        self.assertEqual(text, "\ufffd")
        self.assertEqual(byte_tokenizer().decode_with_status([97]), ("a", False))

    def test_matches_sequential_merge_oracle(self):
        rng = np.random.default_rng(11)
        alphabet = "aabbnsu lm"
        corpus = ["".join(rng.choice(list(alphabet), size=30)) for _ in range(20)]
        tok = train_bpe(corpus, 300)
        for _ in range(300):
            s = "".join(rng.choice(list(alphabet), size=int(rng.integers(0, 13))))
            self.assertEqual(tok.encode(s), sequential_merge_oracle(tok, s), s)


class TestMerge(unittest.TestCase):

    def test_self_merge_adds_nothing(self):
        tok = train_bpe(read_jsonl_corpus(CORPUS_PATH), 300, special_tokens=["bos", "eos"])
        merged, report = merge_tokenizers(tok, tok)
        self.assertEqual(merged.vocab_size, tok.vocab_size)
        self.assertEqual(report.duplicates_dropped, tok.vocab_size)
        self.assertEqual(report.id_mapping, {i: i for i in range(tok.vocab_size)})
        self.assertEqual(report.merges_dropped, len(tok.merges))
        self.assertEqual(merged.merges, tok.merges)

    def test_randomized_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            base_corpus = [random_text(rng, 15) for _ in range(4)] + ["selamat pagi"]
            ext_corpus = [random_text(rng, 15) for _ in range(4)] + ["selamat malam"]
            base = train_bpe(base_corpus, 256 + 2 + int(rng.integers(0, 12)), special_tokens=["bos", "eos"])
            ext = train_bpe(ext_corpus, 256 + 3 + int(rng.integers(0, 12)), special_tokens=["bos", "eos", "pad"])
            merged, report = merge_tokenizers(base, ext)

            self.assertEqual(merged.vocab[:base.vocab_size], base.vocab)
            self.assertEqual(report.merged_size,
                             report.base_size + report.extension_size - report.duplicates_dropped)
            self.assertLessEqual(report.merged_size, report.base_size + report.extension_size)
            self.assertEqual(merged.special_tokens["bos"], base.special_tokens["bos"])
            self.assertIn("pad", merged.special_tokens)
            for ext_id, merged_id in report.id_mapping.items():
                self.assertEqual(merged.vocab[merged_id], ext.vocab[ext_id])
            merged.validate()
            for text in ext_corpus + base_corpus:
                self.assertEqual(merged.decode(merged.encode(text)), text)

    def test_alphabet_mismatch(self):
        base = byte_tokenizer()
        broken = Tokenizer(vocab=[bytes([b]) for b in range(128)], merges=[])
        with self.assertRaises(AlphabetMismatch):
            merge_tokenizers(base, broken)


class TestPersistence(TempDirTestCase):

    def test_round_trip(self):
        tok = train_bpe(["aaab"], 258, special_tokens=[])
        path = self.tmp / "tok.json"
        save_tokenizer(tok, path)
        self.assertEqual(load_tokenizer(path), tok)

    def test_merged_round_trip_preserves_ids(self):
        corpus = read_jsonl_corpus(CORPUS_PATH)
        base = train_bpe(corpus[::2], 300, special_tokens=["bos", "eos"])
        ext = train_bpe(corpus[1::2], 300, special_tokens=["bos", "eos"])
        merged, _ = merge_tokenizers(base, ext)
        path = self.tmp / "merged.json"
        save_tokenizer(merged, path)
        loaded = load_tokenizer(path)
        for doc in corpus:
            self.assertEqual(loaded.encode(doc), merged.encode(doc))

    def test_truncated_file(self):
        path = self.tmp / "tok.json"
        save_tokenizer(byte_tokenizer(), path)
        raw = path.read_text(encoding="utf-8")
        path.write_text(raw[: len(raw) // 2], encoding="utf-8")
        with self.assertRaises(MalformedFile):
            load_tokenizer(path)

    def test_wrong_version_names_field(self):
        path = self.tmp / "tok.json"
        save_tokenizer(byte_tokenizer(), path)
        data = json.loads(path.read_text(encoding="utf-8"))
        data["version"] = 2
        path.write_text(json.dumps(data), encoding="utf-8")
        with self.assertRaises(MalformedFile) as ctx:
            load_tokenizer(path)
        self.assertEqual(ctx.exception.field, "version")

    def test_merge_with_missing_result(self):
        data = {"version": 1, "type": "byte_bpe",
                "vocab": [base64.b64encode(bytes([b])).decode() for b in range(BYTE_ALPHABET_SIZE)],
                "merges": [[97, 97]], "special_tokens": {}}
        path = self.tmp / "tok.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        with self.assertRaises(MalformedFile) as ctx:
            load_tokenizer(path)
        self.assertEqual(ctx.exception.field, "merges")


if __name__ == "__main__":
    unittest.main()
