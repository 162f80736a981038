"""Shared fixtures for the unilm test suite."""

import contextlib
import io
import shutil
import socket
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from typing import List, Tuple

import numpy as np

from model import Checkpoint, ModelConfig, init_checkpoint


DATA_DIR = Path(__file__).parent / "data"
CORPUS_PATH = DATA_DIR / "malay_english.jsonl"

TOY = ModelConfig.preset("toy")

# code points that are never surrogates: ASCII, Latin-1/Latin Extended, Arabic (Jawi), CJK, emoji
CODEPOINT_RANGES = [(0x20, 0x7F), (0xA0, 0x250), (0x600, 0x700), (0x4E00, 0x4F00), (0x1F600, 0x1F650)]


def toy_config(**overrides) -> ModelConfig:
    return replace(TOY, **overrides) if overrides else TOY


def toy_checkpoint(seed: int = 0, **overrides) -> Checkpoint:
    return init_checkpoint(toy_config(**overrides), seed=seed)


def random_text(rng: np.random.Generator, max_len: int = 20) -> str:
    chars = []
    for _ in range(int(rng.integers(0, max_len + 1))):
        lo, hi = CODEPOINT_RANGES[int(rng.integers(len(CODEPOINT_RANGES)))]
        chars.append(chr(int(rng.integers(lo, hi))))
    return "".join(chars)


def random_prompt(rng: np.random.Generator, length: int, vocab_size: int = 256) -> List[int]:
    return [int(t) for t in rng.integers(0, vocab_size, size=length)]


def free_port() -> int:
    """A localhost port with nothing listening on it."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def run_cli(argv: List[str]) -> Tuple[int, str, str]:
    from cli import main

    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


class TempDirTestCase(unittest.TestCase):
    """Gives each test a scratch directory at ``self.tmp``."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp(prefix="unilm-test-"))

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)
