#!/usr/bin/env python3
"""HTTP/JSON generation server.

Endpoints:
    POST /v1/generate   {prompt | tokens, max_new_tokens, temperature, top_k, seed, stop_ids, adapter}
    POST /v1/adapters   {name, payload (base64 UNLA) | path}
    GET  /v1/health
    GET  /v1/models
Errors answer {"error": code, "detail": text} with the error's HTTP status.
"""

import base64
import binascii
import hashlib
import json
import logging
import threading
import time
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from adapter import Adapter, decode_adapter
from config import ServerSettings
from errors import (
    AdapterActive,
    BadRequest,
    InvalidConfig,
    Overloaded,
    PayloadTooLarge,
    UnilmError,
    UnknownAdapter,
)
from model import Checkpoint, Engine, GenerationParams
from tokenizer import Tokenizer


logger = logging.getLogger(__name__)

GENERATION_KEYS = {"prompt", "tokens", "adapter", "max_new_tokens", "temperature", "top_k", "seed", "stop_ids"}
DRAIN_CHUNK_BYTES = 64 * 1024


class ServerState:
    """Checkpoint, tokenizer and adapter registry shared by all request threads.

    The checkpoint is never mutated; adapters attach to a per-request Engine.
    """

    def __init__(self, checkpoint: Checkpoint, tokenizer: Tokenizer,
                 settings: Optional[ServerSettings] = None):
        checkpoint.validate()
        self.checkpoint = checkpoint
        self.tokenizer = tokenizer
        self.settings = settings or ServerSettings()
        self.adapter_registry: Dict[str, Adapter] = {}
        self._digests: Dict[str, str] = {}
        self._in_use: Dict[str, int] = {}
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(self.settings.workers)
        self.start_time = time.time()
        self.request_counter = 0
        self.queue_depth = 0

    @property
    def model_id(self) -> str:
        return self.checkpoint.model_id

    @property
    def active_adapters(self) -> List[str]:
        """Adapters attached to at least one in-flight request."""
        with self._lock:
            return sorted(name for name, n in self._in_use.items() if n > 0)

    def checkpoint_checksum(self) -> str:
        return self.checkpoint.checksum()

    # -- generation ---------------------------------------------------------

    def _parse_generate(self, body: Any) -> Tuple[List[int], GenerationParams, Optional[str]]:
        if not isinstance(body, dict):
            raise BadRequest("body must be a JSON object")
        unknown = sorted(set(body) - GENERATION_KEYS)
        if unknown:
            raise BadRequest(f"unknown fields {unknown}")
        if "tokens" in body:
            tokens = body["tokens"]
            if not isinstance(tokens, list) or not all(isinstance(t, int) and not isinstance(t, bool)
                                                       for t in tokens):
                raise BadRequest("tokens must be a list of integers")
            ids = list(tokens)
        elif isinstance(body.get("prompt"), str):
            ids = self.tokenizer.encode(body["prompt"])
        else:
            raise BadRequest("body needs a prompt string or a tokens list")
        try:
            params = GenerationParams.from_dict(body)
        except (TypeError, ValueError) as e:
            raise BadRequest(f"invalid generation params ({e})")
        except InvalidConfig as e:
            raise BadRequest(e.detail)
        adapter_name = body.get("adapter")
        if adapter_name is not None and not isinstance(adapter_name, str):
            raise BadRequest("adapter must be a string")
        return ids, params, adapter_name

    def _acquire(self, adapter_name: Optional[str]) -> Optional[Adapter]:
        with self._lock:
            adapter = None
            if adapter_name:
                adapter = self.adapter_registry.get(adapter_name)
                if adapter is None:
                    raise UnknownAdapter(f"adapter {adapter_name!r} is not registered")
                self._in_use[adapter_name] = self._in_use.get(adapter_name, 0) + 1
            return adapter

    def _release(self, adapter_name: Optional[str]) -> None:
        if adapter_name:
            with self._lock:
                self._in_use[adapter_name] -= 1

    def handle_generate(self, body: Any) -> dict:
        ids, params, adapter_name = self._parse_generate(body)
        with self._lock:
            self.request_counter += 1
            self.queue_depth += 1
        try:
            if not self._slots.acquire(timeout=self.settings.queue_timeout_s):
                raise Overloaded(f"no worker free within {self.settings.queue_timeout_s}s")
            try:
                adapter = self._acquire(adapter_name)
                try:
                    engine = Engine(self.checkpoint)
                    if adapter is not None:
                        engine.attach(adapter)
                    started = time.monotonic()
                    tokens = engine.generate(ids, params)
                finally:
                    self._release(adapter_name)
            finally:
                self._slots.release()
        finally:
            with self._lock:
                self.queue_depth -= 1

        logger.info("generate: %d prompt + %d completion tokens in %.1f ms%s", len(ids), len(tokens),
                    (time.monotonic() - started) * 1000.0, f" (adapter {adapter_name})" if adapter_name else "")
        return {
            "tokens": tokens,
            "text": self.tokenizer.decode(tokens),
            "model_id": self.model_id,
            "usage": {"prompt_tokens": len(ids), "completion_tokens": len(tokens)},
        }

    # -- adapters -----------------------------------------------------------

    def _adapter_bytes(self, body: dict) -> bytes:
        cap = self.settings.max_adapter_bytes
        if isinstance(body.get("payload"), str):
            encoded = body["payload"]
            if len(encoded) * 3 // 4 > cap:
                raise PayloadTooLarge(f"adapter payload exceeds {cap} bytes")
            try:
                return base64.b64decode(encoded, validate=True)
            except (binascii.Error, ValueError) as e:
                raise BadRequest(f"payload is not valid base64 ({e})")
        if isinstance(body.get("path"), str):
            path = Path(body["path"])
            if not path.is_file():
                raise BadRequest(f"no adapter file at {path}")
            if path.stat().st_size > cap:
                raise PayloadTooLarge(f"adapter file exceeds {cap} bytes")
            return path.read_bytes()
        raise BadRequest("body needs a base64 payload or a server-local path")

    def handle_load_adapter(self, body: Any) -> dict:
        if not isinstance(body, dict) or not isinstance(body.get("name"), str) or not body["name"]:
            raise BadRequest("body must be a JSON object with a non-empty name")
        name = body["name"]
        raw = self._adapter_bytes(body)
        if len(raw) > self.settings.max_adapter_bytes:
            raise PayloadTooLarge(f"adapter payload exceeds {self.settings.max_adapter_bytes} bytes")
        digest = hashlib.sha256(raw).hexdigest()

        adapter = decode_adapter(raw, self.checkpoint.config)
        adapter = replace(adapter, config=replace(adapter.config, name=name))

        with self._lock:
            previous = self._digests.get(name)
            if previous == digest:
                status = "unchanged"
            else:
                if previous is not None and self._in_use.get(name, 0) > 0:
                    raise AdapterActive(f"adapter {name!r} is serving requests")
                self.adapter_registry[name] = adapter
                self._digests[name] = digest
                status = "replaced" if previous is not None else "registered"
        logger.info("Adapter %s %s (rank %d, %d bytes)", name, status, adapter.config.rank, len(raw))
        return {"name": name, "status": status, "rank": adapter.config.rank, "bytes": len(raw)}

    # -- introspection ------------------------------------------------------

    def handle_health(self) -> dict:
        return {
            "status": "ok",
            "model_id": self.model_id,
            "uptime_s": time.time() - self.start_time,
            "queue_depth": self.queue_depth,
            "active_adapters": self.active_adapters,
        }

    def handle_models(self) -> list:
        with self._lock:
            adapters = sorted(self.adapter_registry.items())
        models = [{"id": self.model_id, "type": "model", "parameters": self.checkpoint.num_parameters()}]
        models += [{"id": name, "type": "adapter", "rank": a.config.rank,
                    "targets": list(a.config.target_projections)} for name, a in adapters]
        return models


class InferenceHandler(BaseHTTPRequestHandler):
    server_version = "unilm/0.1"
    protocol_version = "HTTP/1.1"

    @property
    def state(self) -> ServerState:
        return self.server.state

    def _send_response(self, status_code: int, body: Any) -> None:
        payload = json.dumps(body).encode("utf-8")
        self.send_response(status_code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _send_error(self, error: UnilmError) -> None:
        self._send_response(error.http_status, error.to_dict())

    def _read_json(self, limit: int) -> Any:
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = -1
        if length < 0:
            self.close_connection = True
            raise BadRequest("invalid Content-Length")
        if length > limit:
            self._discard(length)
            raise PayloadTooLarge(f"request body of {length} bytes exceeds {limit}")
        raw = self.rfile.read(length)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise BadRequest(f"body is not UTF-8 JSON ({e})")

    def _discard(self, length: int) -> None:
        # drain in chunks so the connection stays usable
        while length > 0:
            chunk = self.rfile.read(min(length, DRAIN_CHUNK_BYTES))
            if not chunk:
                self.close_connection = True
                return
            length -= len(chunk)

    def do_GET(self):
        if self.path == "/v1/health":
            self._send_response(200, self.state.handle_health())
        elif self.path == "/v1/models":
            self._send_response(200, self.state.handle_models())
        else:
            self._send_response(404, {"error": "not_found", "detail": self.path})

    def do_POST(self):
        settings = self.state.settings
        try:
            if self.path == "/v1/generate":
                body = self._read_json(settings.max_request_bytes)
                self._send_response(200, self.state.handle_generate(body))
            elif self.path == "/v1/adapters":
                # base64 inflates by 4/3; leave room for the JSON envelope
                body = self._read_json(settings.max_adapter_bytes * 4 // 3 + 4096)
                self._send_response(200, self.state.handle_load_adapter(body))
            else:
                self._send_response(404, {"error": "not_found", "detail": self.path})
        except UnilmError as e:
            logger.info("%s %s -> %d %s", self.command, self.path, e.http_status, e.code)
            self._send_error(e)
        except Exception as e:
            logger.exception("Unhandled error on %s", self.path)
            self._send_response(500, {"error": "internal_error", "detail": str(e)})

    def log_message(self, format, *args):
        logger.debug("%s - %s", self.address_string(), format % args)


def create_server(state: ServerState, host: str, port: int) -> ThreadingHTTPServer:
    httpd = ThreadingHTTPServer((host, port), InferenceHandler)
    httpd.daemon_threads = True
    httpd.state = state
    return httpd


def start_background(state: ServerState, host: str = "127.0.0.1",
                     port: int = 0) -> Tuple[ThreadingHTTPServer, int]:
    """Serve on a daemon thread; returns the server and the bound port. Stop with ``shutdown()``."""
    httpd = create_server(state, host, port)
    thread = threading.Thread(target=httpd.serve_forever, name="unilm-server", daemon=True)
    thread.start()
    bound = httpd.server_address[1]
    logger.info("Serving %s on %s:%d (background)", state.model_id, host, bound)
    return httpd, bound


def serve(settings: ServerSettings, checkpoint: Checkpoint, tokenizer: Tokenizer) -> None:
    """Run until interrupted."""
    state = ServerState(checkpoint, tokenizer, settings)
    httpd = create_server(state, settings.host, settings.port)
    logger.info("Serving %s on %s:%d with %d workers", state.model_id, settings.host,
                httpd.server_address[1], settings.workers)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        logger.info("Shutting down")
    finally:
        httpd.server_close()
