"""Threaded HTTP stub for exercising the live client paths offline."""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class StubServer:
    """Scriptable endpoint: a status plan per request, recorded concurrency.

    `status_plan` lists the status code for each successive request; the last
    entry repeats. Bodies for 200s come from `respond`, a callable taking the
    raw request body.
    """

    def __init__(self, respond, status_plan=(200,), delay=0.0):
        self.respond = respond
        self.status_plan = list(status_plan)
        self.delay = delay
        self.request_count = 0
        self.in_flight = 0
        self.peak_in_flight = 0
        self._lock = threading.Lock()

        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                with stub._lock:
                    stub.in_flight += 1
                    stub.peak_in_flight = max(stub.peak_in_flight, stub.in_flight)
                    idx = stub.request_count
                    stub.request_count += 1
                try:
                    if stub.delay:
                        time.sleep(stub.delay)
                    status = stub.status_plan[min(idx, len(stub.status_plan) - 1)]
                    length = int(self.headers.get("Content-Length", 0))
                    body = self.rfile.read(length)
                    if status == 200:
                        payload = stub.respond(body)
                        self.send_response(200)
                        self.send_header("Content-Length", str(len(payload)))
                        self.end_headers()
                        self.wfile.write(payload)
                    else:
                        self.send_response(status)
                        self.send_header("Content-Length", "0")
                        self.end_headers()
                finally:
                    with stub._lock:
                        stub.in_flight -= 1

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()


def chat_responder(text="stub reply"):
    """Respond like a chat-completions endpoint, echoing n choices."""

    def respond(body: bytes) -> bytes:
        n = json.loads(body.decode("utf-8")).get("n", 1)
        choices = [{"message": {"content": f"{text} {i}"}} for i in range(n)]
        return json.dumps({"choices": choices}).encode("utf-8")

    return respond


def bytes_responder(payload: bytes):
    def respond(body: bytes) -> bytes:
        return payload

    return respond
