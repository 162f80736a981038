#!/usr/bin/env python3
"""
End-to-end walkthrough on the toy preset

1. Train a bilingual tokenizer and merge an extension into it
2. Build a toy checkpoint, generate with and without the KV cache
3. Palettize to mixed 2/4-bit and compare greedy decodes
4. Attach a zero-delta adapter
5. Route requests between the local engine and a background server
"""

from pathlib import Path

import numpy as np

from adapter import AdapterConfig, adapter_size_bytes, encode_adapter, init_adapter
from config import ServerSettings, setup_logging
from model import Engine, GenerationParams, ModelConfig, extend_embeddings, init_checkpoint
from orchestrator import GenerationRequest, Orchestrator, TaskClass
from quant import depalettize_checkpoint, palettize_checkpoint
from server import ServerState, start_background
from tokenizer import merge_tokenizers, read_jsonl_corpus, train_bpe


CORPUS = Path(__file__).parent / "tests" / "data" / "malay_english.jsonl"


def banner(title: str) -> None:
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)


def example_1_tokenizers():
    banner("Example 1: train and merge tokenizers")
    docs = read_jsonl_corpus(CORPUS)
    base = train_bpe(docs[1::2], 300, special_tokens=["bos", "eos"])
    extension = train_bpe(docs[::2], 300, special_tokens=["bos", "eos", "pad"])
    merged, report = merge_tokenizers(base, extension)

    text = "Saya suka makan nasi lemak"
    print(f"base vocab:     {base.vocab_size}")
    print(f"merged vocab:   {merged.vocab_size} ({report.duplicates_dropped} duplicates dropped)")
    print(f"base ids:       {len(base.encode(text))} tokens")
    print(f"merged ids:     {len(merged.encode(text))} tokens")
    print(f"round trip ok:  {merged.decode(merged.encode(text)) == text}")
    return merged


def example_2_generation(tokenizer):
    banner("Example 2: toy checkpoint and KV-cached decoding")
    ckpt = init_checkpoint(ModelConfig.preset("toy"), seed=0)
    ckpt = extend_embeddings(ckpt, tokenizer.vocab_size)
    engine = Engine(ckpt)

    ids = tokenizer.encode("Selamat pagi")
    full = engine.forward(ids)
    cache = engine.new_cache()
    engine.forward(ids[:-1], cache)
    step = engine.forward(ids[-1:], cache)
    print(f"prompt tokens:          {len(ids)}")
    print(f"cached vs full max err: {np.max(np.abs(step[-1] - full[-1])):.2e}")
    print(f"cache stats:            {cache.get_stats()}")

    tokens = engine.generate(ids, GenerationParams(max_new_tokens=8))
    print(f"greedy continuation:    {tokens}")
    return ckpt


def example_3_palettization(ckpt):
    banner("Example 3: mixed-precision palettization")
    pc = palettize_checkpoint(ckpt, target_avg_bits=3.5, group_size=64)
    print(f"groups:   {pc.n_groups}")
    print(f"avg bits: {pc.avg_bits:.3f}")

    base, approx = Engine(ckpt), Engine(depalettize_checkpoint(pc))
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(20):
        ids = [int(t) for t in rng.integers(0, 256, size=8)]
        agree += int(np.argmax(base.forward(ids)[-1]) == np.argmax(approx.forward(ids)[-1]))
    print(f"first greedy token agrees on {agree}/20 prompts")


def example_4_adapters(ckpt):
    banner("Example 4: adapters")
    manyak = ModelConfig.preset("manyak")
    size = adapter_size_bytes(manyak, AdapterConfig(rank=16))
    print(f"manyak rank-16 adapter file: {size / 1e6:.1f} MB")

    adapter = init_adapter(ckpt.config, AdapterConfig(rank=4, name="ms-en"))
    engine = Engine(ckpt)
    before = engine.generate([1, 2, 3], GenerationParams(max_new_tokens=5))
    engine.attach(adapter)
    after = engine.generate([1, 2, 3], GenerationParams(max_new_tokens=5))
    print(f"fresh adapter is a no-op: {before == after}")
    print(f"encoded bytes:            {len(encode_adapter(adapter))}")


def example_5_routing(ckpt, tokenizer):
    banner("Example 5: local/remote routing")
    state = ServerState(ckpt, tokenizer, ServerSettings(workers=2))
    httpd, port = start_background(state)
    try:
        orch = Orchestrator(Engine(ckpt), tokenizer, endpoint=f"http://127.0.0.1:{port}")
        for task in (TaskClass.CHAT, TaskClass.TRANSLATE):
            req = GenerationRequest(prompt="Good morning", params=GenerationParams(max_new_tokens=6),
                                    task_class=task)
            response = orch.execute(req)
            print(f"{task.value:10s} -> {response.route.value:6s} {response.reasons} {response.tokens}")
    finally:
        httpd.shutdown()
        httpd.server_close()


def main():
    setup_logging("WARNING")
    print("unilm pipeline walkthrough")

    try:
        tokenizer = example_1_tokenizers()
        ckpt = example_2_generation(tokenizer)
        example_3_palettization(ckpt)
        example_4_adapters(ckpt)
        example_5_routing(ckpt, tokenizer)

        banner("All examples done!")
    except Exception as e:
        print(f"\nExample failed: {e}")
        import traceback
        traceback.print_exc()


if __name__ == "__main__":
    main()
