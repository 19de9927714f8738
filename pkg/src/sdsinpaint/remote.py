"""HTTP noise-prediction protocol: client predictor and a loopback mock server.

``POST {endpoint}/v1/denoise`` with JSON
``{height, width, channels, z_t, mask, prompt, t, guidance}`` where ``z_t`` is
base64 of little-endian float32 (row-major H, W, C) and ``mask`` base64 of
0/1 bytes (row-major H, W).  The reply is ``{"eps_hat": <base64, same layout>}``.
The server applies classifier-free guidance itself.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np

from .errors import InvalidInputError, PriorUnavailableError, ProtocolError
from .prior import CosineSchedule, NoisePredictor, PriorRequest, predict_noise_cfg

log = logging.getLogger(__name__)

DENOISE_PATH = "/v1/denoise"


def encode_request(req: PriorRequest) -> dict:
    h, w, c = req.z_t.shape
    return {
        "height": h,
        "width": w,
        "channels": c,
        "z_t": base64.b64encode(np.ascontiguousarray(req.z_t, dtype="<f4").tobytes()).decode("ascii"),
        "mask": base64.b64encode(np.ascontiguousarray(req.mask, dtype=np.uint8).tobytes()).decode("ascii"),
        "prompt": req.prompt,
        "t": float(req.t),
        "guidance": float(req.guidance),
    }


def decode_request(payload: dict) -> PriorRequest:
    """Parse a request body; raises :class:`ProtocolError` on any malformation."""
    try:
        h, w, c = int(payload["height"]), int(payload["width"]), int(payload["channels"])
        z_raw = base64.b64decode(payload["z_t"], validate=True)
        m_raw = base64.b64decode(payload["mask"], validate=True)
        prompt = str(payload["prompt"])
        t = float(payload["t"])
        guidance = float(payload["guidance"])
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        raise ProtocolError(f"malformed request: {exc}") from exc
    if min(h, w, c) < 1 or len(z_raw) != h * w * c * 4 or len(m_raw) != h * w:
        raise ProtocolError("payload sizes do not match height/width/channels")
    z = np.frombuffer(z_raw, dtype="<f4").reshape(h, w, c).astype(np.float32)
    m = np.frombuffer(m_raw, dtype=np.uint8).reshape(h, w) != 0
    try:
        return PriorRequest(z, m, prompt, t, guidance)
    except InvalidInputError as exc:
        raise ProtocolError(str(exc)) from exc


def encode_response(eps: np.ndarray) -> dict:
    return {"eps_hat": base64.b64encode(np.ascontiguousarray(eps, dtype="<f4").tobytes()).decode("ascii")}


class RemotePredictor(NoisePredictor):
    """Client for a remote noise predictor; one pooled HTTP connection per instance."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2, backoff: float = 0.1, schedule=None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.schedule = schedule or CosineSchedule()
        self._client = httpx.Client(timeout=timeout)

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def predict(self, z_t, t, prompt, mask=None, tag=None):
        z_t = np.asarray(z_t)
        mask = np.ones(z_t.shape[:2], bool) if mask is None else mask
        return self.predict_guided(PriorRequest(z_t, mask, prompt, t, 1.0))

    def predict_guided(self, request: PriorRequest) -> np.ndarray:
        body = encode_request(request)
        url = self.endpoint + DENOISE_PATH
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(url, json=body)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("prior request to %s failed (attempt %d): %s", url, attempt + 1, last)
            else:
                if resp.status_code == 200:
                    return self._parse(resp, request.z_t.shape)
                if 400 <= resp.status_code < 500:
                    raise ProtocolError(f"prior rejected request with HTTP {resp.status_code}: {resp.text[:200]}")
                last = f"HTTP {resp.status_code}"
            if attempt < self.retries:
                time.sleep(self.backoff * (2**attempt))
        raise PriorUnavailableError(f"prior at {self.endpoint} unavailable after {self.retries + 1} attempts ({last})")

    @staticmethod
    def _parse(resp, shape):
        try:
            raw = base64.b64decode(resp.json()["eps_hat"], validate=True)
        except (KeyError, TypeError, ValueError, binascii.Error) as exc:
            raise ProtocolError(f"malformed prior response: {exc}") from exc
        if len(raw) != int(np.prod(shape)) * 4:
            raise ProtocolError(f"prior response has {len(raw)} bytes, expected {int(np.prod(shape)) * 4}")
        eps = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if not np.all(np.isfinite(eps)):
            raise ProtocolError("prior response contains non-finite values")
        return eps


def remote_predictor(endpoint: str, timeout: float = 30.0, retries: int = 2) -> RemotePredictor:
    return RemotePredictor(endpoint, timeout, retries)


class _Handler(BaseHTTPRequestHandler):
    predictor: NoisePredictor  # set on the server subclass

    def log_message(self, fmt, *args):
        log.debug("mock prior: " + fmt, *args)

    def _reply(self, status, payload):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        if self.path.rstrip("/") != DENOISE_PATH:
            self._reply(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length))
            if not isinstance(payload, dict):
                raise ProtocolError("request body must be a JSON object")
            req = decode_request(payload)
        except (ProtocolError, ValueError) as exc:
            self._reply(400, {"error": str(exc)})
            return
        try:
            eps = predict_noise_cfg(self.server.predictor, req)
        except Exception as exc:  # reported to the client as a server fault
            log.exception("mock prior failed")
            self._reply(500, {"error": str(exc)})
            return
        self._reply(200, encode_response(eps))


class MockPriorServer(ThreadingHTTPServer):
    """Serves any in-process predictor over the wire protocol."""

    daemon_threads = True

    def __init__(self, predictor: NoisePredictor, host: str = "127.0.0.1", port: int = 0):
        self.predictor = predictor
        super().__init__((host, port), _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        th = threading.Thread(target=self.serve_forever, daemon=True)
        th.start()
        return th

    def stop(self):
        self.shutdown()
        self.server_close()
