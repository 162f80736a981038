import base64
import json
import socket
import threading
import unittest
import urllib.error
import urllib.request

import numpy as np

from adapter import AdapterConfig, encode_adapter, init_adapter, with_random_b
from config import ServerSettings
from errors import (
    AdapterActive,
    BadRequest,
    ConfigMismatch,
    ContextOverflow,
    MalformedFile,
    PayloadTooLarge,
    UnknownAdapter,
)
from model import Engine, GenerationParams
from orchestrator import GenerationRequest, HealthCache, Orchestrator, Route, TaskClass
from server import ServerState, start_background
from tests.helpers import TOY, TempDirTestCase, random_prompt, toy_checkpoint, toy_config
from tokenizer import byte_tokenizer


def adapter_payload(name="ms-en", seed=0, rank=4):
    adapter = with_random_b(init_adapter(TOY, AdapterConfig(rank=rank, name=name), seed=seed), sigma=0.5)
    return encode_adapter(adapter)


class TestHandlers(TempDirTestCase):

    def setUp(self):
        super().setUp()
        self.ckpt = toy_checkpoint(seed=9)
        self.state = ServerState(self.ckpt, byte_tokenizer(), ServerSettings(workers=2))

    def test_generate_matches_engine(self):
        params = GenerationParams(max_new_tokens=5)
        out = self.state.handle_generate({"prompt": "apa khabar", "max_new_tokens": 5})
        self.assertEqual(out["tokens"], Engine(self.ckpt).generate(list(b"apa khabar"), params))
        self.assertEqual(out["model_id"], "toy")
        self.assertEqual(out["usage"], {"prompt_tokens": 10, "completion_tokens": 5})
        self.assertEqual(self.state.request_counter, 1)
        self.assertEqual(self.state.queue_depth, 0)

    def test_generate_bad_requests(self):
        for body in ([1, 2], {}, {"tokens": "abc"}, {"tokens": [1, True]}, {"prompt": "x", "bogus": 1},
                     {"prompt": "x", "temperature": -2}, {"prompt": "x", "adapter": 5}):
            with self.assertRaises(BadRequest, msg=body):
                self.state.handle_generate(body)
        with self.assertRaises(ContextOverflow):
            self.state.handle_generate({"tokens": [1] * 120, "max_new_tokens": 20})
        with self.assertRaises(UnknownAdapter):
            self.state.handle_generate({"prompt": "x", "adapter": "missing"})
        self.assertEqual(self.state.queue_depth, 0)

    def test_adapter_statuses(self):
        payload = base64.b64encode(adapter_payload()).decode()
        first = self.state.handle_load_adapter({"name": "ms-en", "payload": payload})
        self.assertEqual(first["status"], "registered")
        self.assertEqual(first["rank"], 4)
        again = self.state.handle_load_adapter({"name": "ms-en", "payload": payload})
        self.assertEqual(again["status"], "unchanged")
        other = base64.b64encode(adapter_payload(seed=1)).decode()
        self.assertEqual(self.state.handle_load_adapter({"name": "ms-en", "payload": other})["status"],
                         "replaced")

    def test_adapter_from_path_is_renamed(self):
        path = self.tmp / "a.unla"
        path.write_bytes(adapter_payload(name="on-disk"))
        self.state.handle_load_adapter({"name": "served", "path": str(path)})
        self.assertEqual(self.state.adapter_registry["served"].name, "served")
        models = self.state.handle_models()
        self.assertEqual(models[0], {"id": "toy", "type": "model", "parameters": 108_864})
        self.assertEqual(models[1]["id"], "served")
        self.assertEqual(models[1]["targets"], ["wq", "wk", "wv", "wo"])

    def test_adapter_errors(self):
        with self.assertRaises(BadRequest):
            self.state.handle_load_adapter({"payload": "AAAA"})
        with self.assertRaises(BadRequest):
            self.state.handle_load_adapter({"name": "x", "payload": "not base64!"})
        with self.assertRaises(BadRequest):
            self.state.handle_load_adapter({"name": "x", "path": str(self.tmp / "missing.unla")})
        with self.assertRaises(MalformedFile):
            self.state.handle_load_adapter({"name": "x", "payload": base64.b64encode(b"garbage!").decode()})
        wrong = encode_adapter(init_adapter(toy_config(n_layers=3), AdapterConfig(rank=2)))
        with self.assertRaises(ConfigMismatch):
            self.state.handle_load_adapter({"name": "x", "payload": base64.b64encode(wrong).decode()})
        small = ServerState(self.ckpt, byte_tokenizer(), ServerSettings(max_adapter_bytes=1000))
        with self.assertRaises(PayloadTooLarge):
            small.handle_load_adapter({"name": "x", "payload": base64.b64encode(adapter_payload()).decode()})

    def test_active_adapter_cannot_be_replaced(self):
        self.state.handle_load_adapter({"name": "ms-en", "payload": base64.b64encode(adapter_payload()).decode()})
        self.state._acquire("ms-en")
        self.assertEqual(self.state.active_adapters, ["ms-en"])
        self.assertEqual(self.state.handle_health()["active_adapters"], ["ms-en"])
        other = base64.b64encode(adapter_payload(seed=1)).decode()
        with self.assertRaises(AdapterActive):
            self.state.handle_load_adapter({"name": "ms-en", "payload": other})
        self.state._release("ms-en")
        self.assertEqual(self.state.handle_load_adapter({"name": "ms-en", "payload": other})["status"],
                         "replaced")

    def test_adapter_is_request_scoped(self):
        self.state.handle_load_adapter({"name": "ms-en", "payload": base64.b64encode(adapter_payload()).decode()})
        plain = self.state.handle_generate({"tokens": [5, 6, 7], "max_new_tokens": 6})
        adapted = self.state.handle_generate({"tokens": [5, 6, 7], "max_new_tokens": 6, "adapter": "ms-en"})
        self.assertEqual(self.state.handle_generate({"tokens": [5, 6, 7], "max_new_tokens": 6}), plain)
        self.assertEqual(len(adapted["tokens"]), 6)
        self.assertEqual(self.state.active_adapters, [])

    def test_concurrent_requests_leave_checkpoint_untouched(self):
        self.state.handle_load_adapter({"name": "ms-en", "payload": base64.b64encode(adapter_payload()).decode()})
        before = self.state.checkpoint_checksum()
        rng = np.random.default_rng(0)
        bodies = [{"tokens": random_prompt(rng, 6), "max_new_tokens": 3,
                   "adapter": "ms-en" if i % 2 else None} for i in range(16)]
        results = [None] * len(bodies)

        def work(i):
            results[i] = self.state.handle_generate(bodies[i])

        threads = [threading.Thread(target=work, args=(i,)) for i in range(len(bodies))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.assertTrue(all(r is not None for r in results))
        self.assertEqual(self.state.checkpoint_checksum(), before)
        self.assertEqual(self.state.request_counter, 16)
        self.assertEqual(self.state.queue_depth, 0)
        for body, result in zip(bodies, results):
            self.assertEqual(self.state.handle_generate(body), result)


class TestHttp(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.ckpt = toy_checkpoint(seed=11)
        settings = ServerSettings(workers=2, max_adapter_bytes=64 * 1024, max_request_bytes=4096)
        cls.state = ServerState(cls.ckpt, byte_tokenizer(), settings)
        cls.httpd, port = start_background(cls.state)
        cls.url = f"http://127.0.0.1:{port}"

    @classmethod
    def tearDownClass(cls):
        cls.httpd.shutdown()
        cls.httpd.server_close()

    def request(self, method, path, body=None, raw=None):
        data = raw if raw is not None else (json.dumps(body).encode() if body is not None else None)
        req = urllib.request.Request(self.url + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=30) as r:
                return r.status, json.loads(r.read())
        except urllib.error.HTTPError as e:
            return e.code, json.loads(e.read())

    def test_health_and_models(self):
        status, body = self.request("GET", "/v1/health")
        self.assertEqual(status, 200)
        self.assertEqual(body["status"], "ok")
        self.assertEqual(body["model_id"], "toy")
        self.assertEqual(body["active_adapters"], [])
        status, models = self.request("GET", "/v1/models")
        self.assertEqual(status, 200)
        self.assertEqual(models[0]["id"], "toy")

    def test_generate(self):
        status, body = self.request("POST", "/v1/generate", {"tokens": [1, 2, 3], "max_new_tokens": 4})
        self.assertEqual(status, 200)
        self.assertEqual(body["tokens"], Engine(self.ckpt).generate([1, 2, 3], GenerationParams(max_new_tokens=4)))

    def test_error_statuses(self):
        self.assertEqual(self.request("GET", "/v1/nothing"), (404, {"error": "not_found", "detail": "/v1/nothing"}))
        status, body = self.request("POST", "/v1/generate", {"prompt": "x", "adapter": "nope"})
        self.assertEqual((status, body["error"]), (404, "adapter_not_found"))
        status, body = self.request("POST", "/v1/generate", raw=b"{not json")
        self.assertEqual((status, body["error"]), (400, "bad_request"))
        status, body = self.request("POST", "/v1/generate", {"tokens": [1] * 130})
        self.assertEqual((status, body["error"]), (422, "context_overflow"))
        status, body = self.request("POST", "/v1/adapters", {"name": "big", "payload": "A" * 200_000})
        self.assertEqual((status, body["error"]), (413, "payload_too_large"))

    def test_generate_body_has_its_own_cap(self):
        status, body = self.request("POST", "/v1/generate", {"tokens": [1] * 2000, "max_new_tokens": 1})
        self.assertEqual((status, body["error"]), (413, "payload_too_large"))
        status, _ = self.request("POST", "/v1/generate", {"tokens": [1, 2], "max_new_tokens": 1})
        self.assertEqual(status, 200)

    def test_negative_content_length_is_rejected(self):
        host, port = self.url[len("http://"):].split(":")
        with socket.create_connection((host, int(port)), timeout=10) as sock:
            sock.sendall(b"POST /v1/generate HTTP/1.1\r\nHost: localhost\r\n"
                         b"Content-Type: application/json\r\nContent-Length: -1\r\n\r\n")
            data = b""
            while True:
                chunk = sock.recv(4096)
                if not chunk:
                    break
                data += chunk
        self.assertTrue(data.startswith(b"HTTP/1.1 400"), data)
        self.assertIn(b"bad_request", data)

    def test_adapter_upload_and_use(self):
        payload = base64.b64encode(adapter_payload(name="http")).decode()
        status, body = self.request("POST", "/v1/adapters", {"name": "http", "payload": payload})
        self.assertEqual((status, body["status"]), (200, "registered"))
        status, body = self.request("POST", "/v1/generate", {"tokens": [4, 5], "max_new_tokens": 3, "adapter": "http"})
        self.assertEqual(status, 200)
        self.assertEqual(len(body["tokens"]), 3)

    def test_orchestrator_remote_matches_local(self):
        engine = Engine(self.ckpt)
        orch = Orchestrator(engine, byte_tokenizer(), endpoint=self.url, health_cache=HealthCache())
        rng = np.random.default_rng(12)
        params = GenerationParams(max_new_tokens=5)
        for _ in range(20):
            prompt = random_prompt(rng, int(rng.integers(1, 12)))
            response = orch.execute(GenerationRequest(prompt=prompt, params=params, task_class=TaskClass.TRANSLATE))
            self.assertIs(response.route, Route.REMOTE)
            self.assertEqual(response.model_id, "toy")
            self.assertEqual(response.tokens, engine.generate(prompt, params))


if __name__ == "__main__":
    unittest.main()
