"""Thin HTTP client for the service.

By default the app is mounted in-process (no sockets, no server to
start); pass base_url to talk to a remote `stacksched serve` instead.
Raises ServiceError carrying the server's error code so callers can map
failures to exit codes without parsing text.
"""

import asyncio

import httpx


class ServiceError(RuntimeError):
    def __init__(self, code: str, detail: str, status: int):
        super().__init__(f"[{code}] {detail}")
        self.code = code
        self.detail = detail
        self.status = status


class _InProcessTransport(httpx.BaseTransport):
    """Sync bridge onto the async ASGI transport: run each request on a
    private event loop and hand back a fully-read response."""

    def __init__(self, app):
        self._asgi = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        async def call():
            resp = await self._asgi.handle_async_request(request)
            body = b"".join([chunk async for chunk in resp.stream])
            return httpx.Response(resp.status_code, headers=resp.headers,
                                  content=body)
        return asyncio.run(call())


class ServiceClient:
    def __init__(self, base_url: str | None = None, timeout: float | None = None):
        if base_url is None:
            from .service import app
            self._client = httpx.Client(
                transport=_InProcessTransport(app),
                base_url="http://stacksched.local", timeout=timeout)
        else:
            self._client = httpx.Client(base_url=base_url, timeout=timeout)

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, path: str, payload: dict) -> dict:
        resp = self._client.post(path, json=payload)
        if resp.status_code == 422:
            raise ServiceError("config", resp.text, 422)
        if resp.is_error:
            try:
                doc = resp.json()
            except ValueError:
                doc = {}
            raise ServiceError(doc.get("code", "config"),
                               doc.get("detail", resp.text), resp.status_code)
        return resp.json()

    def health(self) -> dict:
        resp = self._client.get("/v1/health")
        resp.raise_for_status()
        return resp.json()

    def calibrate(self, config: dict) -> dict:
        return self._post("/v1/thermal/calibrate", {"config": config})

    def collect_traces(self, config: dict) -> dict:
        return self._post("/v1/traces/collect", {"config": config})

    def train_oracle(self, config: dict, traces_csv: str) -> dict:
        return self._post("/v1/oracle/train",
                          {"config": config, "traces_csv": traces_csv})

    def train_policy(self, config: dict, oracle: dict) -> dict:
        return self._post("/v1/policy/train",
                          {"config": config, "oracle": oracle})

    def train_direct(self, config: dict) -> dict:
        return self._post("/v1/direct/train", {"config": config})

    def evaluate(self, config: dict, schedulers, policy=None, oracle=None,
                 direct=None) -> dict:
        return self._post("/v1/evaluate",
                          {"config": config, "schedulers": list(schedulers),
                           "policy": policy, "oracle": oracle,
                           "direct": direct})

    def compare(self, config: dict, policy: dict, oracle=None,
                direct=None) -> dict:
        return self._post("/v1/compare",
                          {"config": config, "policy": policy,
                           "oracle": oracle, "direct": direct})
