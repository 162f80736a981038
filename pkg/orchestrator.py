#!/usr/bin/env python3
"""Local/remote request routing.

Routing rules, first match wins:
  1. privacy=strict           -> local (PrivacyConflict if the prompt does not fit)
  2. prompt does not fit      -> remote
  3. task class in remote set -> remote
  4. otherwise                -> local
A remote verdict with an unreachable or stale server falls back to local when
the policy allows it and the prompt fits; otherwise NoViableRoute.
"""

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Union

from config import Config, check_known_keys, load_json_object
from errors import (
    ConfigError,
    EmptyPrompt,
    InvalidConfig,
    LocalEngineError,
    NoViableRoute,
    PrivacyConflict,
    RemoteProtocolError,
    RemoteTransportError,
    UnilmError,
)
from model import Engine, GenerationParams, ModelConfig


logger = logging.getLogger(__name__)


class TaskClass(Enum):
    CHAT = "chat"
    TRANSLATE = "translate"
    SUMMARIZE = "summarize"
    QA = "qa"
    OTHER = "other"


class Privacy(Enum):
    STRICT = "strict"
    DEFAULT = "default"


class Route(Enum):
    LOCAL = "local"
    REMOTE = "remote"


DEFAULT_REMOTE_TASKS = frozenset({TaskClass.TRANSLATE, TaskClass.SUMMARIZE})

# rule names recorded in RouteDecision.reasons
REASON_PRIVACY = "privacy"
REASON_TOO_LONG = "prompt_too_long"
REASON_TASK = "task_class"
REASON_DEFAULT = "default_local"
REASON_UNREACHABLE = "server_unreachable"
REASON_REMOTE_FAILED = "remote_failed"
REASON_FALLBACK = "fallback_local"


@dataclass
class GenerationRequest:
    prompt: Union[str, List[int]]
    params: GenerationParams = field(default_factory=GenerationParams)
    task_class: TaskClass = TaskClass.CHAT
    privacy: Privacy = Privacy.DEFAULT
    adapter_name: Optional[str] = None
    deadline_ms: Optional[int] = None

    def validate(self) -> None:
        if not self.prompt:
            raise EmptyPrompt("generation request needs a non-empty prompt")
        if self.deadline_ms is not None and self.deadline_ms <= 0:
            raise InvalidConfig("deadline_ms must be positive")
        self.params.validate()

    def prompt_ids(self, tokenizer=None) -> List[int]:
        if isinstance(self.prompt, str):
            if tokenizer is None:
                return list(self.prompt.encode("utf-8"))
            return tokenizer.encode(self.prompt)
        return [int(t) for t in self.prompt]


@dataclass
class RoutingPolicy:
    local_max_prompt_tokens: Optional[int] = None  # None -> max_seq_len - max_new_tokens
    remote_task_classes: FrozenSet[TaskClass] = DEFAULT_REMOTE_TASKS
    allow_fallback: bool = True
    health_ttl_ms: int = Config.HEALTH_TTL_MS

    def __post_init__(self):
        self.remote_task_classes = frozenset(TaskClass(t) for t in self.remote_task_classes)
        if self.health_ttl_ms < 0:
            raise ConfigError("health_ttl_ms must be >= 0")
        if self.local_max_prompt_tokens is not None and self.local_max_prompt_tokens < 1:
            raise ConfigError("local_max_prompt_tokens must be >= 1")

    def prompt_limit(self, local_config: ModelConfig, max_new_tokens: int) -> int:
        if self.local_max_prompt_tokens is None:
            return local_config.max_seq_len - max_new_tokens
        if self.local_max_prompt_tokens > local_config.max_seq_len:
            raise ConfigError(f"local_max_prompt_tokens {self.local_max_prompt_tokens} exceeds "
                              f"local max_seq_len {local_config.max_seq_len}")
        return self.local_max_prompt_tokens

    def to_dict(self) -> dict:
        return {
            "local_max_prompt_tokens": self.local_max_prompt_tokens,
            "remote_task_classes": sorted(t.value for t in self.remote_task_classes),
            "allow_fallback": self.allow_fallback,
            "health_ttl_ms": self.health_ttl_ms,
        }

    @classmethod
    def from_dict(cls, data: dict, source: str = "policy") -> "RoutingPolicy":
        check_known_keys(cls, data, source)
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{source}: {e}")

    @classmethod
    def from_json(cls, path: Path) -> "RoutingPolicy":
        return cls.from_dict(load_json_object(path), str(path))


@dataclass
class RouteDecision:
    route: Route
    reasons: List[str]
    degraded: bool = False

    def to_dict(self) -> dict:
        return {"route": self.route.value, "reasons": list(self.reasons), "degraded": self.degraded}


@dataclass(frozen=True)
class ServerHealth:
    reachable: bool
    model_id: str = ""
    probed_at: float = 0.0  # wall clock seconds
    queue_depth: int = 0

    def is_fresh(self, ttl_ms: int, now: Optional[float] = None) -> bool:
        now = time.time() if now is None else now
        return (now - self.probed_at) * 1000.0 <= ttl_ms

    def usable(self, ttl_ms: int, now: Optional[float] = None) -> bool:
        return self.reachable and self.is_fresh(ttl_ms, now)

    def to_dict(self) -> dict:
        return {"reachable": self.reachable, "model_id": self.model_id,
                "probed_at": self.probed_at, "queue_depth": self.queue_depth}

    @classmethod
    def unreachable(cls, now: Optional[float] = None) -> "ServerHealth":
        return cls(reachable=False, probed_at=time.time() if now is None else now)


def fits_locally(n_prompt: int, req: GenerationRequest, policy: RoutingPolicy,
                 local_config: ModelConfig) -> bool:
    limit = policy.prompt_limit(local_config, req.params.max_new_tokens)
    return n_prompt <= limit and n_prompt + req.params.max_new_tokens <= local_config.max_seq_len


def decide_route(req: GenerationRequest, policy: RoutingPolicy, local_config: ModelConfig,
                 health: Optional[ServerHealth], tokenizer=None, *,
                 now: float) -> RouteDecision:
    """Pure routing decision at wall-clock time ``now``.

    ``health`` None means no remote endpoint is configured.
    """
    req.validate()
    fits = fits_locally(len(req.prompt_ids(tokenizer)), req, policy, local_config)

    if req.privacy is Privacy.STRICT:
        if not fits:
            raise PrivacyConflict("privacy=strict but the prompt exceeds local capacity")
        return RouteDecision(Route.LOCAL, [REASON_PRIVACY])
    if not fits:
        reasons = [REASON_TOO_LONG]
    elif req.task_class in policy.remote_task_classes:
        reasons = [REASON_TASK]
    else:
        return RouteDecision(Route.LOCAL, [REASON_DEFAULT])

    if health is not None and health.usable(policy.health_ttl_ms, now):
        return RouteDecision(Route.REMOTE, reasons)
    if policy.allow_fallback and fits:
        return RouteDecision(Route.LOCAL, reasons + [REASON_UNREACHABLE, REASON_FALLBACK], degraded=True)
    raise NoViableRoute(f"remote required ({', '.join(reasons)}) but the server is unavailable")


# ---------------------------------------------------------------------------
# remote side


class RemoteClient:
    """JSON client for the generation server."""

    def __init__(self, endpoint: str, timeout_s: float = Config.REMOTE_TIMEOUT_S):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s

    def call(self, method: str, path: str, data: Optional[Dict] = None,
             timeout_s: Optional[float] = None):
        """Make a request to the server and return the decoded JSON body."""
        req = urllib.request.Request(
            f"{self.endpoint}{path}",
            data=json.dumps(data).encode("utf-8") if data is not None else None,
            headers={"Content-Type": "application/json"},
            method=method,
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout_s or self.timeout_s) as r:
                raw = r.read()
        except urllib.error.HTTPError as e:
            body = e.read().decode("utf-8", errors="replace")
            if e.code == 503:
                raise RemoteTransportError(f"{path}: server unavailable ({body})")
            try:
                detail = json.loads(body)
                detail = f"{detail.get('error')}: {detail.get('detail')}"
            except (json.JSONDecodeError, AttributeError):
                detail = body
            raise RemoteProtocolError(f"{path}: HTTP {e.code} {detail}")
        except (urllib.error.URLError, OSError) as e:
            raise RemoteTransportError(f"{path}: {e}")
        try:
            return json.loads(raw)
        except json.JSONDecodeError as e:
            raise RemoteProtocolError(f"{path}: invalid JSON ({e})")

    def health(self, timeout_s: float = Config.PROBE_TIMEOUT_S) -> ServerHealth:
        body = self.call("GET", "/v1/health", timeout_s=timeout_s)
        if not isinstance(body, dict) or body.get("status") != "ok":
            raise RemoteProtocolError(f"unexpected health payload {body!r}")
        return ServerHealth(reachable=True, model_id=str(body.get("model_id", "")),
                            probed_at=time.time(), queue_depth=int(body.get("queue_depth", 0)))

    def generate(self, prompt_ids: Sequence[int], params: GenerationParams,
                 adapter_name: Optional[str] = None, timeout_s: Optional[float] = None) -> dict:
        payload = {"tokens": list(prompt_ids), **params.to_dict()}
        if adapter_name:
            payload["adapter"] = adapter_name
        body = self.call("POST", "/v1/generate", payload, timeout_s=timeout_s)
        if not isinstance(body, dict) or not isinstance(body.get("tokens"), list):
            raise RemoteProtocolError(f"generation payload without tokens: {body!r}")
        return body


def fetch_health(endpoint: str) -> ServerHealth:
    """Uncached probe; failures are reported as an unreachable ServerHealth."""
    try:
        return RemoteClient(endpoint).health()
    except (RemoteTransportError, RemoteProtocolError) as e:
        logger.warning("Health probe of %s failed: %s", endpoint, e.detail)
        return ServerHealth.unreachable()


class HealthCache:
    """TTL cache of ServerHealth per endpoint; entries are swapped whole under a lock."""

    def __init__(self, ttl_ms: int = Config.HEALTH_TTL_MS,
                 fetch: Callable[[str], ServerHealth] = fetch_health,
                 clock: Callable[[], float] = time.time):
        self.ttl_ms = ttl_ms
        self._fetch = fetch
        self._clock = clock
        self._entries: Dict[str, ServerHealth] = {}
        self._lock = threading.Lock()
        self.probes = 0

    def now(self) -> float:
        return self._clock()

    def get(self, endpoint: str) -> ServerHealth:
        with self._lock:
            cached = self._entries.get(endpoint)
        if cached is not None and cached.is_fresh(self.ttl_ms, self._clock()):
            return cached
        health = self._fetch(endpoint)
        with self._lock:
            self._entries[endpoint] = health
            self.probes += 1
        return health

    def invalidate(self, endpoint: Optional[str] = None) -> None:
        with self._lock:
            if endpoint is None:
                self._entries.clear()
            else:
                self._entries.pop(endpoint, None)


_health_cache: Optional[HealthCache] = None


def get_health_cache() -> HealthCache:
    global _health_cache
    if _health_cache is None:
        _health_cache = HealthCache()
    return _health_cache


def probe_server(endpoint: str, cache: Optional[HealthCache] = None) -> ServerHealth:
    """GET /v1/health, cached for the cache TTL. Never raises."""
    return (cache or get_health_cache()).get(endpoint)


# ---------------------------------------------------------------------------
# execution


@dataclass
class GenerationResponse:
    tokens: List[int]
    text: str
    model_id: str
    route: Route
    degraded: bool
    reasons: List[str]
    timing: Dict[str, float]

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "text": self.text,
            "model_id": self.model_id,
            "route": self.route.value,
            "degraded": self.degraded,
            "reasons": self.reasons,
            "timing": self.timing,
        }


class Orchestrator:
    """Runs requests on the local engine or the remote server."""

    def __init__(self, engine: Engine, tokenizer, policy: Optional[RoutingPolicy] = None,
                 endpoint: Optional[str] = None, health_cache: Optional[HealthCache] = None):
        self.engine = engine
        self.tokenizer = tokenizer
        self.policy = policy or RoutingPolicy()
        self.endpoint = endpoint if endpoint is not None else (Config.SERVER_URL or None)
        self.health_cache = health_cache or HealthCache(ttl_ms=self.policy.health_ttl_ms)
        self.client = RemoteClient(self.endpoint) if self.endpoint else None

    def health(self) -> Optional[ServerHealth]:
        if not self.endpoint:
            return None
        return probe_server(self.endpoint, self.health_cache)

    def explain(self, req: GenerationRequest) -> RouteDecision:
        health = self.health()
        return decide_route(req, self.policy, self.engine.config, health, self.tokenizer,
                            now=self.health_cache.now())

    def _run_local(self, prompt_ids: List[int], req: GenerationRequest) -> List[int]:
        if req.adapter_name:
            logger.warning("Adapter %r is server-side only; running the base local model", req.adapter_name)
        try:
            return self.engine.generate(prompt_ids, req.params)
        except UnilmError:
            raise
        except Exception as e:
            raise LocalEngineError(f"local generation failed: {e}")

    def _remote_timeout(self, started: float, req: GenerationRequest) -> float:
        timeout = self.client.timeout_s
        if req.deadline_ms is not None:
            left = req.deadline_ms / 1000.0 - (time.monotonic() - started)
            if left <= 0:
                raise RemoteTransportError("deadline expired before the remote call")
            timeout = min(timeout, left)
        return timeout

    def execute(self, req: GenerationRequest) -> GenerationResponse:
        started = time.monotonic()
        decision = self.explain(req)
        prompt_ids = req.prompt_ids(self.tokenizer)
        decided = time.monotonic()
        logger.info("Route %s (%s)%s", decision.route.value, ",".join(decision.reasons),
                    " degraded" if decision.degraded else "")

        route, degraded, reasons = decision.route, decision.degraded, list(decision.reasons)
        model_id = self.engine.model_id
        if route is Route.REMOTE:
            try:
                body = self.client.generate(prompt_ids, req.params, req.adapter_name,
                                            timeout_s=self._remote_timeout(started, req))
                tokens = [int(t) for t in body["tokens"]]
                model_id = str(body.get("model_id", ""))
            except RemoteTransportError as e:
                self.health_cache.invalidate(self.endpoint)
                if not (self.policy.allow_fallback and
                        fits_locally(len(prompt_ids), req, self.policy, self.engine.config)):
                    raise NoViableRoute(f"remote failed and local fallback is not possible: {e.detail}")
                logger.warning("Remote generation failed (%s); retrying locally", e.detail)
                route, degraded = Route.LOCAL, True
                reasons += [REASON_REMOTE_FAILED, REASON_FALLBACK]
                tokens = self._run_local(prompt_ids, req)
        else:
            tokens = self._run_local(prompt_ids, req)

        finished = time.monotonic()
        return GenerationResponse(
            tokens=tokens,
            text=self.tokenizer.decode(tokens),
            model_id=model_id,
            route=route,
            degraded=degraded,
            reasons=reasons,
            timing={
                "decide_ms": (decided - started) * 1000.0,
                "generate_ms": (finished - decided) * 1000.0,
                "total_ms": (finished - started) * 1000.0,
            },
        )
