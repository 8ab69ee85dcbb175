"""Label-only black-box oracle with exact query accounting.

Two ledgers are kept per oracle: the attack ledger, which is the cost the
attack pays and reports, and an evaluation counter for metric passes that
an attacker would not need in practice.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .errors import TransportError, UsageError
from .netcore import Params, predict

log = logging.getLogger(__name__)


class QueryLedger:
    """Monotone query counter split by iteration. Thread-safe."""

    def __init__(self):
        self._lock = threading.Lock()
        self.per_iteration = [0]

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self.per_iteration)

    def begin_iteration(self) -> None:
        with self._lock:
            self.per_iteration.append(0)

    def add(self, n: int) -> None:
        if n < 0:
            raise ValueError("ledger increments must be nonnegative")
        with self._lock:
            self.per_iteration[-1] += n


class Oracle:
    """Base class. Subclasses implement :meth:`_backend_labels`."""

    def __init__(self, n_inputs: int, n_classes: int | None = None, cache: bool = False):
        self.n_inputs = n_inputs
        self.n_classes = n_classes
        self.ledger = QueryLedger()
        self.eval_queries = 0
        self._eval_lock = threading.Lock()
        self._cache: dict[bytes, int] | None = {} if cache else None
        self._cache_lock = threading.Lock()

    def _backend_labels(self, X: np.ndarray) -> list[int]:
        raise NotImplementedError

    def _validate(self, xs) -> np.ndarray:
        X = np.asarray(xs, dtype=np.float64)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, self.n_inputs)
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise UsageError(
                f"oracle expects inputs of dimension {self.n_inputs}, got shape {X.shape}"
            )
        if X.size and (not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0):
            raise UsageError("oracle inputs must lie in [0, 1]")
        return np.ascontiguousarray(X)

    def query(self, x) -> int:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise UsageError("query takes a single input vector")
        return int(self.query_batch(x[None, :])[0])

    def query_batch(self, xs) -> np.ndarray:
        """Label a batch, charging the attack ledger one query per cache miss."""
        X = self._validate(xs)
        m = X.shape[0]
        labels = np.full(m, -1, dtype=np.int64)
        if m == 0:
            return labels
        if self._cache is None:
            miss_rows = np.arange(m)
            keys = None
        else:
            keys = [row.tobytes() for row in X]
            first_row: dict[bytes, int] = {}
            with self._cache_lock:
                for r, key in enumerate(keys):
                    if key in self._cache:
                        labels[r] = self._cache[key]
                    elif key not in first_row:
                        first_row[key] = r
            miss_rows = np.fromiter(first_row.values(), dtype=np.int64, count=len(first_row))
        try:
            got = self._backend_labels(X[miss_rows]) if miss_rows.size else []
            failure = None
        except TransportError as exc:
            got = exc.completed
            failure = exc
        got = np.asarray(got, dtype=np.int64)
        done = miss_rows[: got.size]
        labels[done] = got
        self.ledger.add(int(got.size))
        if keys is not None:
            with self._cache_lock:
                for r in done:
                    self._cache[keys[r]] = int(labels[r])
            # fill duplicates of rows answered in this batch
            for r in range(m):
                if labels[r] < 0 and keys[r] in self._cache:
                    labels[r] = self._cache[keys[r]]
        if failure is not None:
            unknown = np.flatnonzero(labels < 0)
            prefix = labels[: unknown[0]] if unknown.size else labels
            raise TransportError(str(failure), attempted=int(got.size) + 1,
                                 completed=prefix.tolist()) from failure
        return labels

    def metric_query(self, xs) -> np.ndarray:
        """Label a batch for evaluation only; the attack ledger is untouched."""
        X = self._validate(xs)
        if X.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        try:
            labels = np.asarray(self._backend_labels(X), dtype=np.int64)
        except TransportError as exc:
            with self._eval_lock:
                self.eval_queries += len(exc.completed)
            raise
        with self._eval_lock:
            self.eval_queries += X.shape[0]
        return labels


class LocalOracle(Oracle):
    """Oracle backed by an in-process network."""

    def __init__(self, params: Params, cache: bool = False):
        super().__init__(params.spec.n_inputs, params.spec.n_classes, cache=cache)
        self.params = params

    def _backend_labels(self, X):
        return predict(self.params, X)


class RemoteOracle(Oracle):
    """Oracle reached over HTTP using the JSON inputs/labels protocol.

    Requests are sent in chunks of ``chunk_size`` rows; each chunk is retried
    up to ``retries`` extra times before the batch fails.
    """

    def __init__(self, url: str, n_inputs: int, n_classes: int | None = None,
                 timeout: float = 10.0, retries: int = 2, chunk_size: int = 1024,
                 cache: bool = False):
        super().__init__(n_inputs, n_classes, cache=cache)
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.chunk_size = chunk_size

    def _post(self, X):
        body = json.dumps({"inputs": X.tolist()}).encode()
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read())
        labels = payload["labels"]
        if len(labels) != X.shape[0]:
            raise ValueError(f"server returned {len(labels)} labels for {X.shape[0]} inputs")
        return [int(v) for v in labels]

    def _backend_labels(self, X):
        out: list[int] = []
        for start in range(0, X.shape[0], self.chunk_size):
            chunk = X[start:start + self.chunk_size]
            last_exc = None
            for attempt in range(self.retries + 1):
                try:
                    out.extend(self._post(chunk))
                    break
                except (urllib.error.URLError, OSError, ValueError, KeyError) as exc:
                    last_exc = exc
                    log.warning("oracle request failed (attempt %d): %s", attempt + 1, exc)
            else:
                raise TransportError(
                    f"remote oracle at {self.url} failed: {last_exc}",
                    attempted=len(out) + len(chunk),
                    completed=out,
                )
        return out


def make_oracle_server(params: Params, host: str = "127.0.0.1", port: int = 0,
                       path: str = "/query") -> ThreadingHTTPServer:
    """HTTP server answering the label protocol with an in-process model.

    Call ``serve_forever()`` on the result; ``server_address`` carries the
    bound port when ``port=0``.
    """
    n_inputs = params.spec.n_inputs

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path != path:
                self.send_error(404, "unknown path")
                return
            try:
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length))
                X = np.asarray(payload["inputs"], dtype=np.float64)
                if X.size == 0:
                    X = X.reshape(0, n_inputs)
                if X.ndim != 2 or X.shape[1] != n_inputs:
                    raise ValueError(f"inputs must have shape (m, {n_inputs})")
                labels = predict(params, X).tolist() if X.shape[0] else []
            except (ValueError, KeyError, TypeError) as exc:
                self.send_error(400, str(exc))
                return
            body = json.dumps({"labels": labels}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt, *args):
            log.debug("oracle server: " + fmt, *args)

    return ThreadingHTTPServer((host, port), Handler)
