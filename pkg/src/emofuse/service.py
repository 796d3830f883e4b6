"""HTTP prediction service.

All checkpoints load once at startup into an immutable registry keyed by
canonical modality set ("face", "face+body+text", ...). Handlers are
stateless and share the registry read-only, so arbitrary concurrent
requests are safe and identical requests get identical bodies.

Endpoints (JSON bodies):
    GET  /api/health          liveness plus loaded model keys
    GET  /api/models          model keys with label vocabularies and dims
    POST /api/predict         {"model": key, "face"/"body"/"text": [...],
                               "text_raw": "..."} -> scores + argmax label
    GET  /api/reports         stored evaluation report names
    GET  /api/report/{name}   one stored report, streamed verbatim
Static UI assets are served from a directory under / when configured.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Dict, Optional

from .data import resolve_features
from .errors import DimensionError, EmofuseError, InputError
from .model import FafModel

_REPORT_NAME = re.compile(r"^[A-Za-z0-9_-]+$")

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


class ModelRegistry:
    """Canonical-key -> loaded model map; immutable after construction."""

    def __init__(self, models: Dict[str, FafModel]):
        if not models:
            raise InputError("registry needs at least one model")
        for key, model in models.items():
            if key != model.config.modality_key:
                raise InputError(
                    f"registry key {key!r} does not match model modalities "
                    f"{model.config.modality_key!r}"
                )
        self._models = dict(models)

    @property
    def keys(self) -> list:
        return sorted(self._models)

    def get(self, key: str) -> Optional[FafModel]:
        return self._models.get(key)

    def items(self):
        return self._models.items()


def load_models(model_dir) -> ModelRegistry:
    """Load every checkpoint in a directory, exactly once, before serving.

    Fails on an empty directory, an unreadable checkpoint (naming the
    file), or two checkpoints covering the same modality set.
    """
    root = Path(model_dir)
    if not root.is_dir():
        raise InputError(f"model directory {model_dir} does not exist")
    models: Dict[str, FafModel] = {}
    sources: Dict[str, Path] = {}
    for path in sorted(root.glob("*.json")):
        try:
            model = FafModel.load(path)
        except EmofuseError as exc:
            raise InputError(f"cannot load checkpoint {path}: {exc}") from exc
        key = model.config.modality_key
        if key in models:
            raise InputError(
                f"duplicate checkpoints for modality set {key!r}: "
                f"{sources[key].name} and {path.name}"
            )
        models[key] = model
        sources[key] = path
    if not models:
        raise InputError(f"no checkpoints found in {model_dir}")
    return ModelRegistry(models)


def handle_predict(request: dict, registry: ModelRegistry) -> dict:
    """Validate a predict request and run the chosen model.

    Raises InputError / DimensionError with messages that name the missing
    modality or the expected vector length; the HTTP layer maps those to
    structured 400 bodies.
    """
    if not isinstance(request, dict):
        raise InputError("request body must be an object")
    key = request.get("model")
    if not isinstance(key, str) or registry.get(key) is None:
        raise InputError(f"unknown model: {key!r}; loaded models are {registry.keys}")
    model = registry.get(key)
    features = resolve_features(request, model.config.enabled_modalities)
    result = model.predict(features)
    return {"model": key, "scores": result["scores"], "predicted": result["predicted"]}


def models_payload(registry: ModelRegistry) -> dict:
    entries = []
    for key in registry.keys:
        model = registry.get(key)
        entries.append(
            {
                "key": key,
                "label_names": list(model.config.label_names),
                "input_dims": {
                    m.value: model.config.input_dims[m]
                    for m in model.config.enabled_modalities
                },
                "gate_active": model.gate_active,
            }
        )
    return {"models": entries}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    # quiet by default; the server stores a flag to re-enable request logs
    def log_message(self, fmt, *args):
        if getattr(self.server, "verbose", False):
            super().log_message(fmt, *args)

    @property
    def registry(self) -> ModelRegistry:
        return self.server.registry

    def _send(self, status: int, body: bytes, content_type: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, payload: dict) -> None:
        self._send(status, (json.dumps(payload, sort_keys=True) + "\n").encode("utf-8"))

    def _send_error_body(self, status: int, kind: str, message: str) -> None:
        self._send_json(status, {"error": kind, "message": message})

    def do_GET(self):
        path = self.path.split("?", 1)[0]
        if path == "/api/health":
            self._send_json(200, {"status": "ok", "models": self.registry.keys})
        elif path == "/api/models":
            self._send_json(200, models_payload(self.registry))
        elif path == "/api/reports":
            self._send_json(200, {"reports": self._report_names()})
        elif path.startswith("/api/report/"):
            self._serve_report(path[len("/api/report/"):])
        elif path.startswith("/api/"):
            self._send_error_body(404, "not_found", f"no such endpoint: {path}")
        else:
            self._serve_static(path)

    def do_POST(self):
        path = self.path.split("?", 1)[0]
        if path != "/api/predict":
            self._send_error_body(404, "not_found", f"no such endpoint: {path}")
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length)
            request = json.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            self._send_error_body(400, "bad_request", f"unparseable body: {exc}")
            return
        try:
            response = handle_predict(request, self.registry)
        except InputError as exc:
            message = str(exc)
            kind = "unknown_model" if message.startswith("unknown model") else "missing_modality"
            self._send_error_body(400, kind, message)
            return
        except DimensionError as exc:
            self._send_error_body(400, "wrong_length", str(exc))
            return
        self._send_json(200, response)

    def _report_names(self) -> list:
        reports_dir = self.server.reports_dir
        if reports_dir is None or not Path(reports_dir).is_dir():
            return []
        return sorted(p.stem for p in Path(reports_dir).glob("*.json"))

    def _serve_report(self, name: str) -> None:
        if not _REPORT_NAME.match(name):
            self._send_error_body(400, "bad_request", f"invalid report name: {name!r}")
            return
        reports_dir = self.server.reports_dir
        path = Path(reports_dir) / f"{name}.json" if reports_dir else None
        if path is None or not path.is_file():
            self._send_error_body(404, "not_found", f"no report named {name!r}")
            return
        self._send(200, path.read_bytes())

    def _serve_static(self, path: str) -> None:
        static_dir = self.server.static_dir
        if static_dir is None:
            if path == "/":
                body = b"<html><body><h1>emotion prediction service</h1><p>API under /api/</p></body></html>"
                self._send(200, body, "text/html; charset=utf-8")
            else:
                self._send_error_body(404, "not_found", f"no such path: {path}")
            return
        name = path.lstrip("/") or "index.html"
        root = Path(static_dir).resolve()
        target = (root / name).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            self._send_error_body(404, "not_found", f"no such path: {path}")
            return
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        self._send(200, target.read_bytes(), ctype)


class PredictionServer(ThreadingHTTPServer):
    """Threading HTTP server over an immutable model registry."""

    daemon_threads = True
    # accept bursts of concurrent connections without kernel resets
    request_queue_size = 128

    def __init__(self, address, registry: ModelRegistry,
                 reports_dir=None, static_dir=None, verbose: bool = False):
        super().__init__(address, _Handler)
        self.registry = registry
        self.reports_dir = reports_dir
        self.static_dir = static_dir
        self.verbose = verbose

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def serve(model_dir, port: int = 8000, reports_dir=None, static_dir=None,
          host: str = "127.0.0.1", verbose: bool = True) -> PredictionServer:
    """Load models once, bind, and serve until interrupted."""
    registry = load_models(model_dir)
    server = PredictionServer((host, port), registry, reports_dir, static_dir, verbose)
    print(f"serving {len(registry.keys)} model(s) {registry.keys} on http://{host}:{server.port}/")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return server
