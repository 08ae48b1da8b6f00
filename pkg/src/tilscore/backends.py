"""Patch inference backends and their newline-delimited JSON wire protocol.

One request per line:

    {"id": str, "task": "classify" | "quantify", "width": int, "height": int,
     "mpp": float, "pixels_b64": base64 of row-major RGB bytes}

and one response per line, matched by id (responses may arrive out of order):

    {"id": ..., "probs": {"necrosis": p, "stroma": p, "normal_lung": p, "tumor": p}}
    {"id": ..., "cells": [{"x": f, "y": f, "class": str}, ...]}

Transports: an in-process mock driven by planted truth, a spawned subprocess
speaking the protocol on stdin/stdout, and an HTTP endpoint accepting one
request per POST. Patches are sent as raw RGB; any model-specific
normalization belongs to the backend. Probability vectors whose sum is off by
more than 1e-3 are renormalized with a warning; negative probabilities are
rejected. Timeouts and dead transports raise BackendUnavailableError,
contract violations raise ProtocolError.

Patch ids are "slide_id:x:y"; the mock parses the coordinates back out so its
answers are pure functions of (truth, seed, patch coordinates) regardless of
call order or worker count.
"""

from __future__ import annotations

import base64
import json
import logging
import shlex
import subprocess
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .errors import BackendUnavailableError, ConfigError, ProtocolError
from .rng import generator_from
from .synthetic import GroundTruthMap
from .taxonomy import CELL_CLASSES, PATCH_CLASSES, TIL_CLASS

__all__ = [
    "ClassProbs",
    "CellInstance",
    "make_patch_id",
    "encode_request",
    "decode_request",
    "encode_classify_response",
    "encode_quantify_response",
    "decode_response",
    "MockBackend",
    "SubprocessBackend",
    "HttpBackend",
    "parse_backend_descriptor",
]

log = logging.getLogger(__name__)

_MOCK_CONFIDENCE = 0.9
_NON_TIL_CYCLE = tuple(c for c in CELL_CLASSES if c != TIL_CLASS)


@dataclass(frozen=True)
class ClassProbs:
    """Probability vector aligned with PATCH_CLASSES; sums to 1 within 1e-6."""

    probs: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.probs)
        if len(p) != len(PATCH_CLASSES):
            raise ValueError(f"expected {len(PATCH_CLASSES)} probabilities")
        if any(v < 0 for v in p):
            raise ValueError("probabilities must be non-negative")
        if abs(sum(p) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {sum(p)}, expected 1")
        object.__setattr__(self, "probs", p)

    def as_dict(self) -> dict:
        return dict(zip(PATCH_CLASSES, self.probs))

    def argmax_label(self) -> str:
        # ties break toward the earlier class in the fixed order
        best = max(self.probs)
        return PATCH_CLASSES[self.probs.index(best)]


@dataclass(frozen=True)
class CellInstance:
    x: float
    y: float
    cell_class: str

    def __post_init__(self):
        if self.cell_class not in CELL_CLASSES:
            raise ValueError(f"unknown cell class {self.cell_class!r}")


def make_patch_id(slide_id: str, x: int, y: int) -> str:
    return f"{slide_id}:{x}:{y}"


def _coords_from_patch_id(patch_id: str) -> tuple[int, int]:
    try:
        _, xs, ys = patch_id.rsplit(":", 2)
        return int(xs), int(ys)
    except ValueError as e:
        raise ValueError(f"patch id {patch_id!r} does not carry coordinates") from e


# ---------------------------------------------------------------- protocol

def encode_request(patch_id: str, task: str, buf: np.ndarray, mpp: float) -> str:
    if task not in ("classify", "quantify"):
        raise ValueError(f"unknown task {task!r}")
    arr = np.ascontiguousarray(buf)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("expected an (h, w, 3) uint8 RGB buffer")
    h, w = arr.shape[:2]
    msg = {
        "id": patch_id,
        "task": task,
        "width": w,
        "height": h,
        "mpp": float(mpp),
        "pixels_b64": base64.b64encode(arr.tobytes()).decode("ascii"),
    }
    return json.dumps(msg, sort_keys=True, separators=(",", ":"))


def _parse_line(line: str) -> dict:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"message is not valid JSON: {e}") from e
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    return msg


def decode_request(line: str) -> tuple[str, str, np.ndarray, float]:
    """Parse a request line into (patch_id, task, buffer, mpp)."""
    msg = _parse_line(line)
    try:
        patch_id = str(msg["id"])
        task = msg["task"]
        w = int(msg["width"])
        h = int(msg["height"])
        mpp = float(msg["mpp"])
        raw = base64.b64decode(msg["pixels_b64"], validate=True)
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolError(f"malformed request: {e}") from e
    if task not in ("classify", "quantify"):
        raise ProtocolError(f"unknown task {task!r}")
    if w < 1 or h < 1 or mpp <= 0:
        raise ProtocolError("width/height/mpp out of range")
    if len(raw) != w * h * 3:
        raise ProtocolError(f"pixel payload is {len(raw)} bytes, expected {w * h * 3}")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()
    return patch_id, task, buf, mpp


def encode_classify_response(patch_id: str, probs: ClassProbs) -> str:
    return json.dumps({"id": patch_id, "probs": probs.as_dict()},
                      sort_keys=True, separators=(",", ":"))


def encode_quantify_response(patch_id: str, cells) -> str:
    payload = [{"x": c.x, "y": c.y, "class": c.cell_class} for c in cells]
    return json.dumps({"id": patch_id, "cells": payload},
                      sort_keys=True, separators=(",", ":"))


def _validate_probs(obj) -> ClassProbs:
    if not isinstance(obj, dict):
        raise ProtocolError("probs must be an object")
    if set(obj) != set(PATCH_CLASSES):
        raise ProtocolError(f"probs keys {sorted(obj)} != {sorted(PATCH_CLASSES)}")
    try:
        vec = [float(obj[k]) for k in PATCH_CLASSES]
    except (TypeError, ValueError) as e:
        raise ProtocolError(f"non-numeric probability: {e}") from e
    if any(v < 0 for v in vec):
        raise ProtocolError("negative probability rejected")
    total = sum(vec)
    if total <= 0:
        raise ProtocolError("probabilities sum to zero")
    if abs(total - 1.0) > 1e-3:
        log.warning("probabilities sum to %.6f; renormalizing", total)
    return ClassProbs(tuple(v / total for v in vec))


def _validate_cells(obj, width: int, height: int) -> list[CellInstance]:
    if not isinstance(obj, list):
        raise ProtocolError("cells must be a list")
    out = []
    for item in obj:
        if not isinstance(item, dict):
            raise ProtocolError("cell entry must be an object")
        try:
            x = float(item["x"])
            y = float(item["y"])
            klass = item["class"]
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed cell entry: {e}") from e
        if not (0 <= x < width and 0 <= y < height):
            raise ProtocolError(f"cell ({x}, {y}) outside the {width}x{height} patch")
        if klass not in CELL_CLASSES:
            raise ProtocolError(f"unknown cell class {klass!r}")
        out.append(CellInstance(x=x, y=y, cell_class=klass))
    return out


def decode_response(line: str, task: str, width: int, height: int):
    """Parse and validate a response line; returns (patch_id, payload)."""
    msg = _parse_line(line)
    if "id" not in msg:
        raise ProtocolError("response carries no id")
    patch_id = str(msg["id"])
    if task == "classify":
        if "probs" not in msg:
            raise ProtocolError("classify response carries no probs")
        return patch_id, _validate_probs(msg["probs"])
    if task == "quantify":
        if "cells" not in msg:
            raise ProtocolError("quantify response carries no cells")
        return patch_id, _validate_cells(msg["cells"], width, height)
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------- backends

class MockBackend:
    """Truth-driven stand-in for trained models.

    classify: 0.9 on the majority non-background truth class under the patch,
    the rest uniform; a patch with no tissue pixels answers uniform.
    quantify: Poisson(planted TIL density x patch area) instances placed
    uniformly, an inflammatory fraction equal to the truth's TIL share
    (remaining instances cycle through the other nucleus classes). Every
    answer is a pure function of (truth, seed, patch coordinates).
    """

    def __init__(self, truth: GroundTruthMap, seed: int = 0):
        self.truth = truth
        self.seed = int(seed)

    def classify(self, patch_id: str, buf: np.ndarray, mpp: float) -> ClassProbs:
        x, y = _coords_from_patch_id(patch_id)
        h, w = np.asarray(buf).shape[:2]
        majority = self.truth.majority_tissue_class(x, y, w, h)
        n = len(PATCH_CLASSES)
        if majority is None:
            return ClassProbs((1.0 / n,) * n)
        rest = (1.0 - _MOCK_CONFIDENCE) / (n - 1)
        vec = tuple(_MOCK_CONFIDENCE if k == majority else rest for k in PATCH_CLASSES)
        return ClassProbs(vec)

    def quantify(self, patch_id: str, buf: np.ndarray, mpp: float) -> list[CellInstance]:
        x, y = _coords_from_patch_id(patch_id)
        h, w = np.asarray(buf).shape[:2]
        lam = self.truth.expected_til_count(x, y, w, h)
        rng = generator_from(self.seed, "quantify", x, y)
        count = int(rng.poisson(lam))
        xs = rng.uniform(0.0, w, size=count)
        ys = rng.uniform(0.0, h, size=count)
        n_til = int(round(count * self.truth.til_share))
        cells = []
        for i in range(count):
            if i < n_til:
                klass = TIL_CLASS
            else:
                klass = _NON_TIL_CYCLE[(i - n_til) % len(_NON_TIL_CYCLE)]
            cells.append(CellInstance(x=float(xs[i]), y=float(ys[i]), cell_class=klass))
        return cells

    def close(self):
        pass


class SubprocessBackend:
    """Line-protocol client around a spawned model process.

    A single reader thread files responses by id, so concurrent workers can
    interleave requests and the process may answer out of order.
    """

    def __init__(self, command: str, timeout: float = 60.0):
        self.timeout = timeout
        try:
            self._proc = subprocess.Popen(
                shlex.split(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1,
            )
        except OSError as e:
            raise BackendUnavailableError(f"cannot spawn backend {command!r}: {e}") from e
        self._pending: dict[str, dict] = {}
        self._dead: Exception | None = None
        self._cond = threading.Condition()
        self._wlock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        try:
            for line in self._proc.stdout:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = _parse_line(line)
                    rid = str(msg["id"])
                except (ProtocolError, KeyError) as e:
                    with self._cond:
                        self._dead = ProtocolError(f"unroutable backend message: {e}")
                        self._cond.notify_all()
                    return
                with self._cond:
                    self._pending[rid] = msg
                    self._cond.notify_all()
        except ValueError:
            pass  # stream closed mid-read
        finally:
            with self._cond:
                if self._dead is None:
                    self._dead = BackendUnavailableError("backend process closed its stdout")
                self._cond.notify_all()

    def _roundtrip(self, line: str, patch_id: str) -> dict:
        if self._proc.poll() is not None:
            raise BackendUnavailableError("backend process has exited")
        try:
            with self._wlock:
                self._proc.stdin.write(line + "\n")
                self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise BackendUnavailableError(f"backend pipe closed: {e}") from e
        deadline = threading.TIMEOUT_MAX if self.timeout is None else self.timeout
        with self._cond:
            ok = self._cond.wait_for(
                lambda: patch_id in self._pending or self._dead is not None,
                timeout=deadline)
            if patch_id in self._pending:
                return self._pending.pop(patch_id)
            if self._dead is not None:
                raise self._dead
            if not ok:
                raise BackendUnavailableError(
                    f"backend did not answer {patch_id!r} within {self.timeout}s")
            raise BackendUnavailableError("backend wait interrupted")

    def _request(self, patch_id: str, task: str, buf, mpp: float):
        line = encode_request(patch_id, task, buf, mpp)
        msg = self._roundtrip(line, patch_id)
        h, w = np.asarray(buf).shape[:2]
        rid, payload = decode_response(
            json.dumps(msg, separators=(",", ":")), task, w, h)
        return payload

    def classify(self, patch_id: str, buf, mpp: float) -> ClassProbs:
        return self._request(patch_id, "classify", buf, mpp)

    def quantify(self, patch_id: str, buf, mpp: float) -> list[CellInstance]:
        return self._request(patch_id, "quantify", buf, mpp)

    def close(self):
        try:
            if self._proc.poll() is None:
                self._proc.stdin.close()
                try:
                    self._proc.wait(timeout=2.0)
                except subprocess.TimeoutExpired:
                    self._proc.kill()
                    self._proc.wait()
        except OSError:
            pass


class HttpBackend:
    """One request per POST; the response body is a single protocol line."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def _request(self, patch_id: str, task: str, buf, mpp: float):
        line = encode_request(patch_id, task, buf, mpp)
        req = urllib.request.Request(
            self.url, data=line.encode("ascii"),
            headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read().decode("utf-8")
        except urllib.error.HTTPError as e:
            raise BackendUnavailableError(f"backend returned HTTP {e.code}") from e
        except (urllib.error.URLError, TimeoutError, OSError) as e:
            raise BackendUnavailableError(f"cannot reach backend {self.url}: {e}") from e
        h, w = np.asarray(buf).shape[:2]
        rid, payload = decode_response(body.strip(), task, w, h)
        if rid != patch_id:
            raise ProtocolError(f"response id {rid!r} does not match request {patch_id!r}")
        return payload

    def classify(self, patch_id: str, buf, mpp: float) -> ClassProbs:
        return self._request(patch_id, "classify", buf, mpp)

    def quantify(self, patch_id: str, buf, mpp: float) -> list[CellInstance]:
        return self._request(patch_id, "quantify", buf, mpp)

    def close(self):
        pass


def parse_backend_descriptor(descriptor: str) -> tuple[str, str]:
    """Split "mock" | "subprocess:CMD" | "http:URL" into (kind, argument).

    The http form is the URL itself (http://host:port/path).
    """
    if descriptor == "mock":
        return "mock", ""
    if descriptor.startswith("subprocess:") and len(descriptor) > len("subprocess:"):
        return "subprocess", descriptor[len("subprocess:"):]
    if descriptor.startswith(("http:", "https:")) and "//" in descriptor:
        return "http", descriptor
    raise ConfigError(f"unknown backend descriptor {descriptor!r}")
