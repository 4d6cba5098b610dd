"""HTTP clients for pluggable network-backed services.

Three services share one transport layer: the noise predictor (JSON latents),
the background editor (PNG in / PNG out), and the shading refiner (PNG +
float16 payloads).  All float payloads on the wire are little-endian float32
(or float16 where noted), base64-encoded, row-major.

Failures are split into two exception types so callers can tell a dead or
flaky endpoint (:class:`TransportError` — retried with backoff) from a
server that answered with something malformed (:class:`ContractError` —
never retried; retrying can't fix a broken contract).
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 0.25


class TransportError(RuntimeError):
    """The endpoint could not be reached or did not answer in time."""


class ContractError(RuntimeError):
    """The endpoint answered, but not with what the wire contract promises."""


# ---------------------------------------------------------------------------
# wire codecs
# ---------------------------------------------------------------------------


def array_to_wire(arr: np.ndarray) -> str:
    """Row-major little-endian float32, base64."""
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
    ).decode("ascii")


def array_from_wire(data: str, shape, *, dtype: str = "<f4") -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except (ValueError, TypeError) as exc:
        raise ContractError(f"payload is not valid base64: {exc}") from exc
    arr = np.frombuffer(raw, dtype=dtype)
    expected = int(np.prod(shape)) if len(shape) else 1
    if arr.size != expected:
        raise ContractError(
            f"payload holds {arr.size} values, shape {tuple(shape)} needs {expected}"
        )
    return arr.reshape(shape).astype(np.float64)


def f16_to_wire(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f2").tobytes()
    ).decode("ascii")


def f16_from_wire(data: str, shape) -> np.ndarray:
    return array_from_wire(data, shape, dtype="<f2")


def bytes_to_wire(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def bytes_from_wire(data: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (ValueError, TypeError) as exc:
        raise ContractError(f"payload is not valid base64: {exc}") from exc


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------


def http_post_json(
    url: str,
    payload: dict,
    *,
    timeout: float = DEFAULT_TIMEOUT,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
) -> dict:
    """POST a JSON body, return the decoded JSON response.

    Connection failures, timeouts, and 5xx responses are retried up to
    ``retries`` times with linear backoff; 4xx responses and undecodable
    bodies raise :class:`ContractError` immediately.
    """
    body = json.dumps(payload).encode("utf-8")
    last: Exception | None = None
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(backoff * attempt)
        req = urllib.request.Request(
            url, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            if 400 <= exc.code < 500:
                raise ContractError(f"{url} answered HTTP {exc.code}: {exc.reason}") from exc
            last = exc
            continue
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            last = exc
            continue
        try:
            decoded = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContractError(f"{url} returned a non-JSON body: {exc}") from exc
        if not isinstance(decoded, dict):
            raise ContractError(f"{url} returned JSON of type {type(decoded).__name__}, expected object")
        return decoded
    raise TransportError(
        f"POST {url} failed after {retries + 1} attempts: {last}"
    ) from last


def require_fields(response: dict, *names: str) -> None:
    missing = [n for n in names if n not in response]
    if missing:
        raise ContractError(f"response missing fields: {', '.join(missing)}")


def resolve_endpoint(explicit: str | None, env_var: str) -> str | None:
    """Explicit argument wins; otherwise fall back to the environment."""
    if explicit:
        return explicit
    return os.environ.get(env_var) or None


# ---------------------------------------------------------------------------
# service clients
# ---------------------------------------------------------------------------

PREDICTOR_ENDPOINT_VAR = "BODYATLAS_PREDICTOR_ENDPOINT"
EDITOR_ENDPOINT_VAR = "BODYATLAS_EDITOR_ENDPOINT"
REFINER_ENDPOINT_VAR = "BODYATLAS_REFINER_ENDPOINT"


@dataclass
class RemotePredictor:
    """Noise predictor backed by an HTTP endpoint.

    Request:  {latent, shape, t, prompt, guidance_scale, seed}
    Response: {eps, shape}

    A lock serializes requests so one client instance can be shared by
    concurrent optimization loops without interleaving connections.
    """

    endpoint: str
    guidance_scale: float = 7.5
    seed: int = 0
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES
    backoff: float = DEFAULT_BACKOFF
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def predict(self, z_t: np.ndarray, t: int, prompt: str) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float64)
        payload = {
            "latent": array_to_wire(z_t),
            "shape": list(z_t.shape),
            "t": int(t),
            "prompt": prompt,
            "guidance_scale": float(self.guidance_scale),
            "seed": int(self.seed),
        }
        with self._lock:
            resp = http_post_json(
                self.endpoint,
                payload,
                timeout=self.timeout,
                retries=self.retries,
                backoff=self.backoff,
            )
        require_fields(resp, "eps", "shape")
        if tuple(resp["shape"]) != z_t.shape:
            raise ContractError(
                f"predictor returned shape {tuple(resp['shape'])}, sent {z_t.shape}"
            )
        return array_from_wire(resp["eps"], resp["shape"])


def remote_predictor(
    endpoint: str,
    *,
    timeout: float = DEFAULT_TIMEOUT,
    retries: int = DEFAULT_RETRIES,
    guidance_scale: float = 7.5,
    seed: int = 0,
) -> RemotePredictor:
    return RemotePredictor(
        endpoint=endpoint,
        guidance_scale=guidance_scale,
        seed=seed,
        timeout=timeout,
        retries=retries,
    )


def post_image_edit(
    endpoint: str,
    image_png: bytes,
    prompt: str,
    depth_png: bytes | None = None,
    *,
    timeout: float = DEFAULT_TIMEOUT,
    retries: int = DEFAULT_RETRIES,
) -> bytes:
    """Background-editor contract: PNG + prompt (+ optional depth PNG) -> PNG."""
    payload = {"image": bytes_to_wire(image_png), "prompt": prompt}
    if depth_png is not None:
        payload["depth"] = bytes_to_wire(depth_png)
    resp = http_post_json(endpoint, payload, timeout=timeout, retries=retries)
    require_fields(resp, "image")
    return bytes_from_wire(resp["image"])


def post_shading_refine(
    endpoint: str,
    composite_png: bytes,
    shading: np.ndarray,
    mask_png: bytes,
    normals_png: bytes,
    depth_png: bytes,
    *,
    timeout: float = DEFAULT_TIMEOUT,
    retries: int = DEFAULT_RETRIES,
) -> np.ndarray:
    """Shading-refiner contract: composite/mask/normals/depth travel as PNGs,
    shading as base64 float16; the response is refined shading, same shape."""
    shading = np.asarray(shading, dtype=np.float64)
    payload = {
        "composite": bytes_to_wire(composite_png),
        "shading": f16_to_wire(shading),
        "shading_shape": list(shading.shape),
        "mask": bytes_to_wire(mask_png),
        "normals": bytes_to_wire(normals_png),
        "depth": bytes_to_wire(depth_png),
    }
    resp = http_post_json(endpoint, payload, timeout=timeout, retries=retries)
    require_fields(resp, "shading", "shading_shape")
    if tuple(resp["shading_shape"]) != shading.shape:
        raise ContractError(
            f"refiner returned shape {tuple(resp['shading_shape'])}, sent {shading.shape}"
        )
    return f16_from_wire(resp["shading"], resp["shading_shape"])
