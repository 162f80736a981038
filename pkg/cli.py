#!/usr/bin/env python3
"""unilm command line.

Exit codes:
    0   success
    1   unexpected internal error
    2   usage error (unknown subcommand, missing or unknown flag)
    3   I/O error (missing file, permission denied)
    10+ tokenizer   20+ containers   30+ shapes   40+ config
    50+ generation  60+ quantization 70+ adapters 80+ routing/remote
    90+ server
Each error class has its own code; see ``errors.py``.
"""

import argparse
import base64
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from config import Config, ServerSettings, setup_logging
from errors import MissingFlag, UnilmError, UnknownSubcommand


logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting on usage errors."""

    def error(self, message):
        if "required" in message or "expected one argument" in message:
            raise MissingFlag(message)
        raise UnknownSubcommand(message)


@dataclass
class Command:
    name: str
    args: argparse.Namespace

    @property
    def json(self) -> bool:
        return bool(getattr(self.args, "json", False))


# module.operation -> subcommand that reaches it
OPERATION_COVERAGE: Dict[str, str] = {
    "tokenizer.train_bpe": "train-tokenizer",
    "tokenizer.train_bpe_from_jsonl": "train-tokenizer",
    "tokenizer.merge_tokenizers": "merge-tokenizer",
    "tokenizer.encode": "tokenize",
    "tokenizer.decode": "detokenize",
    "tokenizer.save_tokenizer": "train-tokenizer",
    "tokenizer.load_tokenizer": "tokenize",
    "nn_core.linear_nobias": "generate",
    "nn_core.rms_norm": "generate",
    "nn_core.apply_rope": "generate",
    "nn_core.gqa_attention": "generate",
    "nn_core.gqa_attention_tiled": "generate",
    "nn_core.swiglu_ffn": "generate",
    "model.count_parameters": "count-params",
    "model.published_count_discrepancy": "count-params",
    "model.init_checkpoint": "init-checkpoint",
    "model.save_checkpoint": "init-checkpoint",
    "model.load_checkpoint": "inspect",
    "model.forward": "generate",
    "model.generate": "generate",
    "model.perplexity": "ppl",
    "model.rank_by_perplexity": "ppl",
    "model.extend_embeddings": "extend-embeddings",
    "quant.palettize_group": "quantize",
    "quant.plan_mixed_precision": "quantize",
    "quant.palettize_tensor": "quantize",
    "quant.palettize_checkpoint": "quantize",
    "quant.depalettize": "dequantize",
    "quant.depalettize_checkpoint": "dequantize",
    "quant.quantization_report": "inspect",
    "quant.save_palettized_checkpoint": "quantize",
    "quant.load_palettized_checkpoint": "inspect",
    "adapter.init_adapter": "adapter-init",
    "adapter.adapter_size_bytes": "adapter-init",
    "adapter.save_adapter": "adapter-init",
    "adapter.load_adapter": "adapter-load",
    "adapter.attach": "serve",
    "adapter.detach": "serve",
    "orchestrator.decide_route": "route-explain",
    "orchestrator.execute": "generate",
    "orchestrator.probe_server": "route-explain",
    "server.handle_generate": "serve",
    "server.handle_load_adapter": "serve",
    "server.handle_health": "serve",
    "server.handle_models": "serve",
}


def _add_checkpoint(p, required: bool = True):
    p.add_argument("--checkpoint", type=Path, required=required, help="UNLM or UNLP checkpoint")


def _add_tokenizer(p):
    p.add_argument("--tokenizer", type=Path, help="tokenizer JSON (default: raw bytes)")


def _add_model_source(p):
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", type=Path, help="UNLM or UNLP checkpoint")
    group.add_argument("--preset", choices=["toy", "slim34m", "manyak"], help="architecture preset")


def _add_generation(p):
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-k", type=int, default=0, help="0 = unlimited")
    p.add_argument("--seed", type=int, default=0)


def _add_routing(p):
    p.add_argument("--server", default=Config.SERVER_URL, help="remote endpoint (env UNILM_SERVER)")
    p.add_argument("--policy", type=Path, help="routing policy JSON")
    p.add_argument("--privacy", choices=["strict", "default"], default="default")
    p.add_argument("--task", choices=["chat", "translate", "summarize", "qa", "other"], default="chat")
    p.add_argument("--adapter", help="server-side adapter name")
    p.add_argument("--deadline-ms", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON output")
    common.add_argument("--log-level", default=Config.LOG_LEVEL, help="DEBUG, INFO, WARNING, ERROR")

    parser = _Parser(prog="unilm", description="Bilingual small-LM toolkit: tokenizers, "
                     "inference, palettization, adapters, local/remote routing.")
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    def add(name: str, help_text: str):
        return sub.add_parser(name, help=help_text, description=help_text, parents=[common])

    p = add("train-tokenizer", "train a byte-level BPE tokenizer")
    p.add_argument("--corpus", type=Path, required=True, help="JSONL ({\"text\": ...}) or plain text")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--special", action="append", default=None, help="special token name (repeatable)")
    p.add_argument("--out", type=Path, required=True)

    p = add("merge-tokenizer", "merge an extension tokenizer into a base tokenizer")
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--extension", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("tokenize", "encode text to token ids")
    _add_tokenizer(p)
    p.add_argument("--text", required=True)

    p = add("detokenize", "decode token ids to text")
    _add_tokenizer(p)
    p.add_argument("--ids", required=True, help="comma separated or JSON list")

    p = add("init-checkpoint", "write seeded random weights for a preset")
    p.add_argument("--preset", choices=["toy", "slim34m", "manyak"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--out", type=Path, required=True)

    p = add("count-params", "closed-form parameter count")
    _add_model_source(p)

    p = add("extend-embeddings", "grow the vocabulary of a checkpoint")
    _add_checkpoint(p)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--init", choices=["mean", "gaussian"], default="mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = add("quantize", "palettize a checkpoint to mixed 2/4-bit codebooks")
    _add_checkpoint(p)
    p.add_argument("--target-bits", type=float, default=3.5)
    p.add_argument("--group-size", type=int, default=64)
    p.add_argument("--include-embeddings", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)

    p = add("dequantize", "expand a palettized checkpoint back to float32")
    _add_checkpoint(p)
    p.add_argument("--out", type=Path, required=True)

    p = add("inspect", "describe a checkpoint, palettized checkpoint or adapter file")
    p.add_argument("path", type=Path)
    p.add_argument("--reference", type=Path, help="float checkpoint to measure palettization error against")

    p = add("generate", "generate a completion")
    p.add_argument("--checkpoint", type=Path, help="UNLM or UNLP checkpoint (not needed for --mode remote)")
    _add_tokenizer(p)
    p.add_argument("--prompt")
    p.add_argument("--mode", choices=["local", "remote", "auto"], default="local")
    p.add_argument("--interactive", action="store_true", help="read prompts from stdin until EOF")
    p.add_argument("--tiled-attention", action="store_true")
    _add_generation(p)
    _add_routing(p)

    p = add("ppl", "perplexity of a text, or rank candidate texts")
    _add_checkpoint(p)
    _add_tokenizer(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--text")
    group.add_argument("--candidates", nargs="+")

    p = add("serve", "run the HTTP generation server")
    _add_checkpoint(p)
    _add_tokenizer(p)
    p.add_argument("--config", type=Path, help="server settings JSON")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--max-adapter-bytes", type=int)
    p.add_argument("--max-request-bytes", type=int, help="body cap for /v1/generate")

    p = add("route-explain", "print the routing decision without generating")
    _add_model_source(p)
    _add_tokenizer(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new-tokens", type=int, default=32)
    _add_routing(p)

    p = add("adapter-init", "create a zero-delta adapter file")
    _add_model_source(p)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--alpha", type=float)
    p.add_argument("--targets", default="wq,wk,wv,wo")
    p.add_argument("--name", default="adapter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = add("adapter-load", "register an adapter with a running server")
    p.add_argument("--server", default=Config.SERVER_URL)
    p.add_argument("--name", required=True)
    p.add_argument("--file", type=Path, required=True)
    p.add_argument("--server-path", action="store_true", help="send the path instead of the bytes")

    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> Command:
    args = build_parser().parse_args(argv)
    return Command(name=args.command, args=args)


# ---------------------------------------------------------------------------
# helpers


def _artifact(path: Path) -> Path:
    """Relative paths that do not exist here are looked up under UNILM_HOME."""
    if path.is_absolute() or path.exists():
        return path
    candidate = Config.HOME / path
    return candidate if candidate.exists() else path


def _tokenizer(path: Optional[Path]):
    from tokenizer import byte_tokenizer, load_tokenizer

    return load_tokenizer(_artifact(path)) if path else byte_tokenizer()


def _model_config(args):
    from model import ModelConfig

    if getattr(args, "preset", None):
        return ModelConfig.preset(args.preset)
    return _checkpoint(args.checkpoint).config


def _checkpoint(path: Path):
    from quant import open_checkpoint

    return open_checkpoint(_artifact(path))


def _params(args):
    from model import GenerationParams

    return GenerationParams.from_dict({
        "max_new_tokens": args.max_new_tokens,
        "temperature": args.temperature,
        "top_k": args.top_k,
        "seed": args.seed,
    })


def _policy(args):
    from orchestrator import RoutingPolicy

    return RoutingPolicy.from_json(args.policy) if args.policy else RoutingPolicy()


def _request(args, prompt: str):
    from orchestrator import GenerationRequest, Privacy, TaskClass

    return GenerationRequest(prompt=prompt, params=_params(args), task_class=TaskClass(args.task),
                             privacy=Privacy(args.privacy), adapter_name=args.adapter,
                             deadline_ms=args.deadline_ms)


def _require(args, flag: str) -> None:
    if getattr(args, flag.lstrip("-").replace("-", "_")) in (None, ""):
        raise MissingFlag(f"{flag} is required here")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_tokenizer(args) -> Any:
    from tokenizer import DEFAULT_SPECIAL_TOKENS, save_tokenizer, train_bpe, train_bpe_from_jsonl

    specials = tuple(args.special) if args.special is not None else DEFAULT_SPECIAL_TOKENS
    if args.corpus.suffix == ".jsonl":
        tok = train_bpe_from_jsonl(args.corpus, args.vocab_size, specials)
    else:
        lines = args.corpus.read_text(encoding="utf-8").splitlines()
        tok = train_bpe(lines, args.vocab_size, specials)
    save_tokenizer(tok, args.out)
    return {"vocab_size": tok.vocab_size, "merges": len(tok.merges), "exhausted": tok.exhausted,
            "out": str(args.out)}


def cmd_merge_tokenizer(args) -> Any:
    from tokenizer import load_tokenizer, merge_tokenizers, save_tokenizer

    merged, report = merge_tokenizers(load_tokenizer(args.base), load_tokenizer(args.extension))
    save_tokenizer(merged, args.out)
    result = report.to_dict()
    result.pop("id_mapping", None)
    result["out"] = str(args.out)
    return result


def cmd_tokenize(args) -> Any:
    return _tokenizer(args.tokenizer).encode(args.text)


def cmd_detokenize(args) -> Any:
    raw = args.ids.strip()
    try:
        ids = json.loads(raw) if raw.startswith("[") else [int(t) for t in raw.split(",") if t.strip()]
    except ValueError as e:
        raise MissingFlag(f"--ids must be integers ({e})")
    return _tokenizer(args.tokenizer).decode(ids)


def cmd_init_checkpoint(args) -> Any:
    from model import ModelConfig, init_checkpoint, save_checkpoint

    ckpt = init_checkpoint(ModelConfig.preset(args.preset), seed=args.seed, sigma=args.sigma)
    save_checkpoint(ckpt, args.out)
    return {"model_id": ckpt.model_id, "parameters": ckpt.num_parameters(), "out": str(args.out)}


def cmd_count_params(args) -> Any:
    from model import count_parameters, published_count_discrepancy

    config = _model_config(args)
    result = {"model_id": config.model_id, "parameters": count_parameters(config)}
    if args.checkpoint:
        result["tensor_sum"] = _checkpoint(args.checkpoint).num_parameters()
    report = published_count_discrepancy()
    result["published_comparison"] = {
        "model_id": report["model_id"],
        "closed_form": report["closed_form"],
        "published_total": report["published_total"],
        "difference": report["closed_form"] - report["published_total"],
        "any_kv_heads_match": report["any_match"],
    }
    return result


def cmd_extend_embeddings(args) -> Any:
    from model import extend_embeddings, save_checkpoint

    ckpt = _checkpoint(args.checkpoint)
    old = ckpt.config.vocab_size
    extended = extend_embeddings(ckpt, args.vocab_size, init_policy=args.init, seed=args.seed)
    save_checkpoint(extended, args.out)
    return {"old_vocab_size": old, "new_vocab_size": extended.config.vocab_size, "out": str(args.out)}


def cmd_quantize(args) -> Any:
    from quant import palettize_checkpoint, save_palettized_checkpoint

    pc = palettize_checkpoint(_checkpoint(args.checkpoint), target_avg_bits=args.target_bits,
                              group_size=args.group_size, include_embeddings=args.include_embeddings,
                              workers=args.workers)
    save_palettized_checkpoint(pc, args.out)
    return {"model_id": pc.model_id, "avg_bits": pc.avg_bits, "groups": pc.n_groups,
            "target_bits": args.target_bits, "out": str(args.out)}


def cmd_dequantize(args) -> Any:
    from model import save_checkpoint
    from quant import depalettize_checkpoint, load_palettized_checkpoint

    ckpt = depalettize_checkpoint(load_palettized_checkpoint(args.checkpoint))
    save_checkpoint(ckpt, args.out)
    return {"model_id": ckpt.model_id, "parameters": ckpt.num_parameters(), "out": str(args.out)}


def cmd_inspect(args) -> Any:
    from adapter import ADAPTER_MAGIC, describe, load_adapter
    from model import CONTAINER_MAGIC, count_parameters, load_checkpoint
    from quant import CHECKPOINT_MAGIC, load_palettized_checkpoint, quantization_report

    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == CONTAINER_MAGIC:
        _, ckpt = load_checkpoint(args.path)
        return {"format": "UNLM", "model_id": ckpt.model_id, "config": ckpt.config.to_dict(),
                "parameters": count_parameters(ckpt.config), "checksum": ckpt.checksum()}
    if magic == CHECKPOINT_MAGIC:
        pc = load_palettized_checkpoint(args.path)
        result = {"format": "UNLP", "model_id": pc.model_id, "avg_bits": pc.avg_bits,
                  "target_bits": pc.target_avg_bits, "group_size": pc.group_size, "groups": pc.n_groups,
                  "palettized_tensors": len(pc.palettized), "raw_tensors": len(pc.raw)}
        if args.reference:
            _, ref = load_checkpoint(args.reference)
            reports = {name: quantization_report(ref.tensors[name], p) for name, p in pc.palettized.items()}
            result["worst_mse"] = max(r.mse for r in reports.values())
            result["max_abs_err"] = max(r.max_abs_err for r in reports.values())
        return result
    if magic == ADAPTER_MAGIC:
        return {"format": "UNLA", **describe(load_adapter(args.path))}
    raise UnknownSubcommand(f"{args.path}: unrecognized file magic {magic!r}")


def _generate_once(args, prompt: str, orchestrator, engine, tokenizer) -> dict:
    from orchestrator import RemoteClient

    if args.mode == "auto":
        return orchestrator.execute(_request(args, prompt)).to_dict()
    if args.mode == "remote":
        body = RemoteClient(args.server).generate(tokenizer.encode(prompt), _params(args), args.adapter,
                                                  timeout_s=args.deadline_ms / 1000.0 if args.deadline_ms else None)
        return {"tokens": body["tokens"], "text": tokenizer.decode(body["tokens"]),
                "model_id": body.get("model_id", ""), "route": "remote", "degraded": False}
    tokens = engine.generate(tokenizer.encode(prompt), _params(args))
    return {"tokens": tokens, "text": tokenizer.decode(tokens), "model_id": engine.model_id,
            "route": "local", "degraded": False}


def cmd_generate(args) -> Any:
    from model import Engine
    from orchestrator import Orchestrator

    if args.mode == "remote":
        _require(args, "--server")
    else:
        _require(args, "--checkpoint")
    if not args.interactive:
        _require(args, "--prompt")

    tokenizer = _tokenizer(args.tokenizer)
    engine = None
    orchestrator = None
    if args.mode != "remote":
        engine = Engine(_checkpoint(args.checkpoint), use_tiled_attention=args.tiled_attention)
        orchestrator = Orchestrator(engine, tokenizer, _policy(args), endpoint=args.server or None)

    if not args.interactive:
        return _generate_once(args, args.prompt, orchestrator, engine, tokenizer)

    for line in sys.stdin:
        prompt = line.rstrip("\n")
        if not prompt:
            continue
        try:
            result = _generate_once(args, prompt, orchestrator, engine, tokenizer)
        except UnilmError as e:
            _print_error(e, args.json)
            continue
        if args.json:
            print(json.dumps(result, separators=(",", ":"), sort_keys=True), flush=True)
        else:
            print(f"[{result['route']}] {result['text']}", flush=True)
    return None


def cmd_ppl(args) -> Any:
    from model import Engine, rank_by_perplexity

    engine = Engine(_checkpoint(args.checkpoint))
    tokenizer = _tokenizer(args.tokenizer)
    if args.text is not None:
        return {"perplexity": engine.perplexity(tokenizer.encode(args.text))}
    ranked = rank_by_perplexity(engine, tokenizer, args.candidates)
    return [{"text": text, "perplexity": ppl} for text, ppl in ranked]


def cmd_serve(args) -> Any:
    from server import serve

    settings = ServerSettings.from_json(args.config) if args.config else ServerSettings()
    overrides = {"host": args.host, "port": args.port, "workers": args.workers,
                 "max_adapter_bytes": args.max_adapter_bytes, "max_request_bytes": args.max_request_bytes}
    settings = ServerSettings(**{**settings.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})
    serve(settings, _checkpoint(args.checkpoint), _tokenizer(args.tokenizer))
    return None


def cmd_route_explain(args) -> Any:
    from model import GenerationParams
    from orchestrator import GenerationRequest, Privacy, TaskClass, decide_route, probe_server

    config = _model_config(args)
    policy = _policy(args)
    health = probe_server(args.server) if args.server else None
    req = GenerationRequest(prompt=args.prompt, params=GenerationParams(max_new_tokens=args.max_new_tokens),
                            task_class=TaskClass(args.task), privacy=Privacy(args.privacy),
                            adapter_name=args.adapter, deadline_ms=args.deadline_ms)
    decision = decide_route(req, policy, config, health, _tokenizer(args.tokenizer), now=time.time())
    return {**decision.to_dict(), "health": health.to_dict() if health else None, "policy": policy.to_dict()}


def cmd_adapter_init(args) -> Any:
    from adapter import AdapterConfig, adapter_payload_bytes, adapter_size_bytes, init_adapter, save_adapter

    config = _model_config(args)
    targets = tuple(t.strip() for t in args.targets.split(",") if t.strip())
    adapter_config = AdapterConfig(rank=args.rank, alpha=args.alpha, target_projections=targets, name=args.name)
    adapter = init_adapter(config, adapter_config, seed=args.seed)
    save_adapter(adapter, args.out)
    return {"name": args.name, "model_id": config.model_id, "rank": args.rank,
            "payload_bytes": adapter_payload_bytes(config, adapter_config),
            "file_bytes": adapter_size_bytes(config, adapter_config), "out": str(args.out)}


def cmd_adapter_load(args) -> Any:
    from adapter import ADAPTER_MAGIC
    from orchestrator import RemoteClient

    _require(args, "--server")
    if args.server_path:
        body = {"name": args.name, "path": str(args.file.resolve())}
    else:
        raw = args.file.read_bytes()
        if raw[:4] != ADAPTER_MAGIC:
            logger.warning("%s does not start with the UNLA magic", args.file)
        body = {"name": args.name, "payload": base64.b64encode(raw).decode("ascii")}
    return RemoteClient(args.server).call("POST", "/v1/adapters", body)


HANDLERS: Dict[str, Callable[[argparse.Namespace], Any]] = {
    "train-tokenizer": cmd_train_tokenizer,
    "merge-tokenizer": cmd_merge_tokenizer,
    "tokenize": cmd_tokenize,
    "detokenize": cmd_detokenize,
    "init-checkpoint": cmd_init_checkpoint,
    "count-params": cmd_count_params,
    "extend-embeddings": cmd_extend_embeddings,
    "quantize": cmd_quantize,
    "dequantize": cmd_dequantize,
    "inspect": cmd_inspect,
    "generate": cmd_generate,
    "ppl": cmd_ppl,
    "serve": cmd_serve,
    "route-explain": cmd_route_explain,
    "adapter-init": cmd_adapter_init,
    "adapter-load": cmd_adapter_load,
}


# ---------------------------------------------------------------------------
# output


def _format_human(result: Any) -> str:
    if isinstance(result, str):
        return result
    if isinstance(result, dict):
        width = max((len(k) for k in result), default=0)
        lines = []
        for key, value in result.items():
            shown = json.dumps(value) if isinstance(value, (dict, list)) else value
            lines.append(f"{key.ljust(width)}  {shown}")
        return "\n".join(lines)
    if isinstance(result, list) and result and all(isinstance(r, dict) for r in result):
        return "\n".join("  ".join(str(v) for v in row.values()) for row in result)
    return " ".join(str(r) for r in result) if isinstance(result, list) else str(result)


def emit(result: Any, as_json: bool) -> None:
    if result is None:
        return
    if as_json:
        print(json.dumps(result, separators=(",", ":"), sort_keys=True))
    else:
        print(_format_human(result))


def _print_error(error: UnilmError, as_json: bool) -> None:
    if as_json:
        print(json.dumps(error.to_dict()), file=sys.stderr)
    else:
        print(f"Error [{error.code}]: {error.detail}", file=sys.stderr)


def run(cmd: Command) -> int:
    setup_logging(getattr(cmd.args, "log_level", None))
    try:
        emit(HANDLERS[cmd.name](cmd.args), cmd.json)
    except UnilmError as e:
        _print_error(e, cmd.json)
        return e.exit_code
    except OSError as e:
        print(f"Error [io]: {e}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        cmd = parse_args(argv)
    except UnilmError as e:
        print(f"usage error: {e.detail}", file=sys.stderr)
        print("run `unilm --help` for the list of subcommands", file=sys.stderr)
        return e.exit_code
    return run(cmd)


if __name__ == "__main__":
    sys.exit(main())
