"""Threaded HTTP server plumbing and a tiny client shared by all services."""

from __future__ import annotations

import http.client
import logging
import socket
import sys
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlsplit

from hygeia.errors import BindError

logger = logging.getLogger(__name__)

XML_TYPE = "application/xml; charset=utf-8"
JSON_TYPE = "application/json"


def parse_bind(bind: str) -> tuple[str, int]:
    host, sep, port = bind.rpartition(":")
    if not sep or not host:
        raise ValueError(f"bind address {bind!r} must look like host:port")
    return host, int(port)


class Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 256

    def handle_error(self, request, client_address):
        exc = sys.exc_info()[1]
        if isinstance(exc, ConnectionError):
            # client gave up (e.g. its deadline passed) before we answered
            logger.debug("client %s went away: %s", client_address, exc)
            return
        logger.exception("error serving %s", client_address)


class Handler(BaseHTTPRequestHandler):
    """Request handler base with helpers; subclasses set ``app``."""

    protocol_version = "HTTP/1.0"
    app = None

    def log_message(self, fmt, *args):
        logger.debug("%s " + fmt, self.address_string(), *args)

    @property
    def route(self) -> tuple[str, dict[str, str]]:
        parts = urlsplit(self.path)
        query = {k: v[-1] for k, v in parse_qs(parts.query, keep_blank_values=True).items()}
        return parts.path, query

    def read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def reply(self, status: int, body: bytes, content_type: str = XML_TYPE) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def reply_text(self, status: int, text: str) -> None:
        self.reply(status, text.encode("utf-8"), "text/plain; charset=utf-8")


class ServerHandle:
    """A server running on a background thread."""

    def __init__(self, server: Server, name: str):
        self.server = server
        self._thread = threading.Thread(target=server.serve_forever, name=name, daemon=True)
        self._thread.start()
        self._closed = False

    @property
    def host(self) -> str:
        return self.server.server_address[0]

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.server.shutdown()
        self.server.server_close()
        self._thread.join()


def start_server(bind: str, handler: type, name: str, **attrs) -> ServerHandle:
    """Bind and start serving; ``attrs`` are set on the server beforehand."""
    host, port = parse_bind(bind)
    try:
        server = Server((host, port), handler)
    except OSError as exc:
        raise BindError(f"cannot bind {bind}: {exc.strerror or exc}") from None
    for key, value in attrs.items():
        setattr(server, key, value)
    return ServerHandle(server, name)


# Federation traffic is loopback/LAN; never route it through an env proxy.
_opener = urllib.request.build_opener(urllib.request.ProxyHandler({}))


class Unreachable(Exception):
    """The remote end refused or dropped the connection."""


def request(method: str, url: str, body: Optional[bytes] = None,
            timeout: float = 10.0, content_type: str = XML_TYPE) -> tuple[int, bytes]:
    """Perform one HTTP exchange and return ``(status, body)``.

    Non-2xx statuses are returned, not raised. Socket timeouts propagate as
    ``TimeoutError``; any other connection failure raises :class:`Unreachable`.
    """
    req = urllib.request.Request(url, data=body, method=method)
    if body is not None:
        req.add_header("Content-Type", content_type)
    try:
        with _opener.open(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        with exc:
            return exc.code, exc.read()
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (TimeoutError, socket.timeout)):
            raise TimeoutError(str(exc.reason)) from None
        raise Unreachable(str(exc.reason)) from None
    except (TimeoutError, socket.timeout):
        raise
    except (ConnectionError, OSError, http.client.HTTPException) as exc:
        raise Unreachable(str(exc)) from None
