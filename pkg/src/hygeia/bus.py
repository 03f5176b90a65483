"""The enterprise service bus.

The bus owns the registry, picks providers for each request, sends through
a per-scheme :class:`Adapter`, and folds every outcome (including transport
failure and missed deadlines) into an in-band :class:`Fault` reply.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
import time
import xml.etree.ElementTree as ET
from concurrent.futures import Future, wait
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from typing import Optional, Protocol, Union
from urllib.parse import quote, urlsplit

from hygeia import _http, _xml
from hygeia.envelope import (NAMESPACE, Content, Envelope, EnvelopeError, Fault, FaultCode,
                             envelope_xml, fault_from_element, fault_xml, from_element,
                             new_reply, new_request, parse, serialize, with_correlation)
from hygeia.errors import HygeiaError
from hygeia.registry import (InvalidContract, InvalidEndpoint, Registry, RegistryEntry,
                             contract_from_element, parse_version, services_xml)
from hygeia import registry as registry_mod

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 2000


class NoProvider(HygeiaError):
    def __init__(self, service: str):
        super().__init__(f"no provider registered for {service!r}")
        self.service = service


class BusAlreadyRunning(HygeiaError):
    pass


class TransportError(HygeiaError):
    """An adapter could not deliver a request or read its reply."""


class FailurePolicy(str, enum.Enum):
    ALL_OR_FAULT = "all"
    PARTIAL = "partial"


class Adapter(Protocol):
    def send(self, endpoint: str, request: Envelope, deadline: float) -> Envelope:
        """Deliver ``request`` and return the reply before ``deadline``.

        ``deadline`` is a :func:`time.monotonic` instant. Raise
        ``TimeoutError`` when it passes and :class:`TransportError` for any
        other delivery failure.
        """


class HttpAdapter:
    """POSTs canonical envelopes to ``<endpoint>/service/invoke``."""

    invoke_path = "/service/invoke"

    def send(self, endpoint: str, request: Envelope, deadline: float) -> Envelope:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TimeoutError("deadline passed before sending")
        url = endpoint
        if urlsplit(endpoint).path in ("", "/"):
            url = endpoint.rstrip("/") + self.invoke_path
        try:
            status, body = _http.request("POST", url, serialize(request), timeout=remaining)
        except _http.Unreachable as exc:
            raise TransportError(str(exc)) from None
        if status != 200:
            raise TransportError(f"{endpoint} answered HTTP {status}")
        try:
            return parse(body)
        except EnvelopeError as exc:
            raise TransportError(f"{endpoint} sent an unreadable reply: {exc}") from None


@dataclass(frozen=True)
class Invoke:
    contract: str
    operation: str
    body: str
    min_version: Optional[str] = None
    timeout_ms: int = DEFAULT_TIMEOUT_MS


@dataclass(frozen=True)
class ScatterGather:
    contract: str
    operation: str
    body: str
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    min_version: Optional[str] = None
    policy: FailurePolicy = FailurePolicy.PARTIAL


Step = Union[Invoke, ScatterGather]


@dataclass(frozen=True)
class OrchestrationPlan:
    steps: tuple[Step, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("a plan needs at least one step")
        for step in self.steps:
            if not isinstance(step, (Invoke, ScatterGather)):
                raise ValueError(f"unknown step type {type(step).__name__}")
            if step.timeout_ms < 1:
                raise ValueError("timeout_ms must be at least 1")


@dataclass(frozen=True)
class OrchestrationResult:
    """Accumulated outcome of one scatter-gather run.

    ``replies`` and ``faults`` are ``(endpoint, ...)`` pairs in registry
    sequence order. ``fault`` is the overall verdict: set when the failure
    policy turns provider faults into a failed run, or when nobody was
    there to ask.
    """

    replies: tuple[tuple[str, Envelope], ...]
    faults: tuple[tuple[str, Fault], ...]
    elapsed_ms: int
    correlation_id: Optional[str] = None
    fault: Optional[Fault] = None

    @property
    def ok(self) -> bool:
        return self.fault is None


def _spawn(fn, *args) -> Future:
    """Run ``fn`` on a daemon thread so a stuck send never blocks a join."""
    fut: Future = Future()

    def run():
        if not fut.set_running_or_notify_cancel():
            return
        try:
            fut.set_result(fn(*args))
        except BaseException as exc:  # noqa: BLE001 - handed to the waiter
            fut.set_exception(exc)

    threading.Thread(target=run, daemon=True).start()
    return fut


def _elapsed_ms(start: float) -> int:
    return max(0, round((time.monotonic() - start) * 1000))


def describe_faults(faults) -> str:
    """One ``endpoint<TAB>code<TAB>reason`` line per provider fault."""
    return "\n".join(f"{ep}\t{f.code.value}\t{f.reason}" for ep, f in faults)


def parse_fault_lines(detail: Optional[str]) -> list[tuple[str, Fault]]:
    out = []
    for line in (detail or "").splitlines():
        ep, code, reason = (line.split("\t", 2) + ["", ""])[:3]
        try:
            out.append((ep, Fault(code, reason)))
        except EnvelopeError:
            continue
    return out


class Bus:
    def __init__(self, registry: Optional[Registry] = None, store_path=None):
        self.registry = registry if registry is not None else Registry()
        self.store_path = store_path
        self._adapters: dict[str, Adapter] = {"http": HttpAdapter()}
        self._rr: dict[tuple, int] = {}
        self._rr_lock = threading.Lock()
        self._running = False

    @property
    def running(self) -> bool:
        return self._running

    # -- registry facade, persisting after each change --

    def register(self, contract, endpoint: str) -> RegistryEntry:
        entry = self.registry.register(contract, endpoint)
        self._persist()
        return entry

    def deregister(self, registration_id: str) -> bool:
        removed = self.registry.deregister(registration_id)
        if removed:
            self._persist()
        return removed

    def _persist(self) -> None:
        if self.store_path is not None:
            self.registry.save(self.store_path)

    # -- routing --

    def register_adapter(self, scheme: str, adapter: Adapter) -> None:
        if not scheme or scheme != scheme.lower():
            raise ValueError("scheme must be nonempty lowercase")
        if self._running:
            raise BusAlreadyRunning("adapters are fixed once the bus is serving")
        self._adapters[scheme] = adapter

    def route(self, request: Envelope, min_version: Optional[str] = None) -> RegistryEntry:
        """Pick the next provider round-robin per ``(service, min_version)``."""
        entries = self.registry.discover(request.service, min_version)
        if not entries:
            raise NoProvider(request.service)
        key = (request.service, min_version)
        with self._rr_lock:
            k = self._rr.get(key, 0)
            self._rr[key] = k + 1
        return entries[k % len(entries)]

    def _exchange(self, entry: RegistryEntry, request: Envelope, deadline: float) -> Envelope:
        """Send to one provider and vet the reply against its contract."""
        def fail(code, reason):
            return new_reply(request, Fault(code, reason))

        spec = entry.contract.operation(request.operation)
        if spec is None:
            return fail(FaultCode.SENDER_ERROR,
                        f"{entry.contract.name} {entry.contract.version} has no operation "
                        f"{request.operation!r}")
        if not isinstance(request.body, Content):
            return fail(FaultCode.SENDER_ERROR, "request body must be content, not a fault")
        if request.body.root != spec.input_root:
            return fail(FaultCode.SENDER_ERROR,
                        f"{request.operation} expects <{spec.input_root}>, got <{request.body.root}>")
        scheme = urlsplit(entry.endpoint).scheme
        adapter = self._adapters.get(scheme)
        if adapter is None:
            return fail(FaultCode.SERVICE_UNAVAILABLE, f"no adapter for scheme {scheme!r}")
        try:
            reply = adapter.send(entry.endpoint, request, deadline)
        except TimeoutError:
            return fail(FaultCode.TIMEOUT, f"{entry.endpoint} did not answer in time")
        except (TransportError, OSError) as exc:
            return fail(FaultCode.SERVICE_UNAVAILABLE, f"{entry.endpoint}: {exc}")
        if time.monotonic() > deadline:
            return fail(FaultCode.TIMEOUT, f"{entry.endpoint} answered after the deadline")
        if reply.correlation_id != request.message_id:
            logger.warning("%s replied with correlation %s, expected %s",
                           entry.endpoint, reply.correlation_id, request.message_id)
            reply = with_correlation(reply, request.message_id)
        if isinstance(reply.body, Content) and reply.body.root != spec.output_root:
            return fail(FaultCode.CONTRACT_MISMATCH,
                        f"{entry.endpoint} replied <{reply.body.root}>, contract says "
                        f"<{spec.output_root}>")
        return reply

    def submit(self, request: Envelope, min_version: Optional[str] = None,
               timeout_ms: int = DEFAULT_TIMEOUT_MS) -> Envelope:
        """Deliver ``request`` to one provider; every outcome is an envelope."""
        if timeout_ms < 1:
            raise ValueError("timeout_ms must be at least 1")
        try:
            entry = self.route(request, min_version)
        except NoProvider as exc:
            return new_reply(request, Fault(FaultCode.SERVICE_UNAVAILABLE, str(exc)))
        return self.invoke(entry, request, timeout_ms)

    def invoke(self, entry: RegistryEntry, request: Envelope,
               timeout_ms: int = DEFAULT_TIMEOUT_MS) -> Envelope:
        """Like :meth:`submit` but aimed at one given registry entry."""
        deadline = time.monotonic() + timeout_ms / 1000
        fut = _spawn(self._exchange, entry, request, deadline)
        try:
            return fut.result(timeout=max(0.0, deadline - time.monotonic()))
        except FutureTimeout:
            return new_reply(request, Fault(FaultCode.TIMEOUT,
                                            f"{entry.endpoint} did not answer in time"))
        except Exception as exc:  # noqa: BLE001
            logger.exception("adapter failure")
            return new_reply(request, Fault(FaultCode.INTERNAL_ERROR, type(exc).__name__))

    def scatter_gather(self, contract: str, min_version: Optional[str], operation: str,
                       body: Union[str, Content], timeout_ms: int,
                       policy: FailurePolicy = FailurePolicy.PARTIAL,
                       correlation_id: Optional[str] = None) -> OrchestrationResult:
        """Ask every provider of ``contract`` at once and gather until the deadline.

        Raises :class:`NoProvider` when discovery comes back empty.
        """
        if timeout_ms < 1:
            raise ValueError("timeout_ms must be at least 1")
        policy = FailurePolicy(policy)
        start = time.monotonic()
        deadline = start + timeout_ms / 1000
        entries = self.registry.discover(contract, min_version)
        if not entries:
            raise NoProvider(contract)
        pending = []
        for entry in entries:
            request = new_request(contract, operation, body)
            pending.append((entry, request, _spawn(self._exchange, entry, request, deadline)))
        wait([fut for _, _, fut in pending], timeout=max(0.0, deadline - time.monotonic()))

        replies, faults = [], []
        for entry, request, fut in pending:
            if not fut.done():
                faults.append((entry.endpoint, Fault(
                    FaultCode.TIMEOUT, f"{entry.endpoint} did not answer in time")))
                continue
            try:
                reply = fut.result()
            except Exception as exc:  # noqa: BLE001
                faults.append((entry.endpoint, Fault(FaultCode.INTERNAL_ERROR,
                                                      type(exc).__name__)))
                continue
            if isinstance(reply.body, Fault):
                faults.append((entry.endpoint, reply.body))
            else:
                replies.append((entry.endpoint, reply))

        overall = None
        if policy is FailurePolicy.ALL_OR_FAULT and faults:
            overall = Fault(FaultCode.SERVICE_UNAVAILABLE,
                            f"{len(faults)} of {len(entries)} providers failed",
                            describe_faults(faults))
        return OrchestrationResult(tuple(replies), tuple(faults), _elapsed_ms(start),
                                   correlation_id or pending[0][1].message_id, overall)

    def orchestrate(self, plan: OrchestrationPlan) -> list[Union[Envelope, OrchestrationResult]]:
        """Run steps in order, stopping after the first one that fails overall."""
        results = []
        for step in plan.steps:
            if isinstance(step, Invoke):
                reply = self.submit(new_request(step.contract, step.operation, step.body),
                                    step.min_version, step.timeout_ms)
                results.append(reply)
                failed = reply.is_fault
            else:
                try:
                    outcome = self.scatter_gather(step.contract, step.min_version,
                                                  step.operation, step.body, step.timeout_ms,
                                                  step.policy)
                except NoProvider as exc:
                    outcome = OrchestrationResult((), (), 0, None,
                                                  Fault(FaultCode.SERVICE_UNAVAILABLE, str(exc)))
                results.append(outcome)
                failed = not outcome.ok
            if failed:
                break
        return results

    # -- serving --

    def serve(self, bind: str) -> "BusHandle":
        handler = type("BusHandler", (_BusHandler,), {"app": self})
        self._running = True
        handle = BusHandle(self)
        try:
            handle._server = _http.start_server(bind, handler, "bus", bus_handle=handle)
        except Exception:
            self._running = False
            raise
        logger.info("bus serving on %s", handle.url)
        return handle

    def shutdown(self, handle: "BusHandle") -> None:
        handle.shutdown()


class BusHandle:
    """A serving bus. :meth:`shutdown` drains in-flight requests first."""

    def __init__(self, bus: Bus):
        self.bus = bus
        self._server: Optional[_http.ServerHandle] = None
        self._cond = threading.Condition()
        self._inflight: dict[int, float] = {}
        self._tokens = itertools.count()
        self._draining = False

    @property
    def url(self) -> str:
        return self._server.url

    @property
    def port(self) -> int:
        return self._server.port

    def enter(self, timeout_ms: int) -> Optional[int]:
        """Track a request; ``None`` once draining has begun."""
        with self._cond:
            if self._draining:
                return None
            token = next(self._tokens)
            self._inflight[token] = time.monotonic() + 2 * timeout_ms / 1000
            return token

    def leave(self, token: int) -> None:
        with self._cond:
            self._inflight.pop(token, None)
            self._cond.notify_all()

    def shutdown(self) -> None:
        with self._cond:
            self._draining = True
            while self._inflight:
                remaining = max(self._inflight.values()) - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(remaining)
        self._server.close()
        self.bus._running = False


def gather_result_xml(result: OrchestrationResult) -> bytes:
    parts = [
        _xml.element("Reply", attrs={"endpoint": ep}, children=envelope_xml(env, xmlns=False))
        for ep, env in result.replies
    ]
    parts += [
        _xml.element("ProviderFault", attrs={"endpoint": ep}, children=fault_xml(f))
        for ep, f in result.faults
    ]
    parts.append(_xml.element("ElapsedMs", str(result.elapsed_ms)))
    doc = _xml.element("GatherResult", children="".join(parts), xmlns=NAMESPACE)
    return (_xml.DECLARATION + doc).encode("utf-8")


def parse_gather_result(data: bytes) -> OrchestrationResult:
    """Decode a ``<GatherResult>`` document; raises ``ValueError`` on defects."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ValueError(f"malformed gather result: {exc}") from None
    if root.tag != f"{{{NAMESPACE}}}GatherResult":
        raise ValueError(f"unexpected root {root.tag!r}")
    replies, faults, elapsed = [], [], None
    for kid in _xml.child_elements(root):
        name = _xml.split_tag(kid.tag)[1]
        if name == "Reply":
            (env,) = _xml.child_elements(kid)
            replies.append((kid.attrib["endpoint"], from_element(env)))
        elif name == "ProviderFault":
            (el,) = _xml.child_elements(kid)
            faults.append((kid.attrib["endpoint"], fault_from_element(el)))
        elif name == "ElapsedMs":
            elapsed = int(_xml.leaf_text(kid))
        else:
            raise ValueError(f"unexpected element {name!r} in GatherResult")
    if elapsed is None:
        raise ValueError("GatherResult lacks ElapsedMs")
    return OrchestrationResult(tuple(replies), tuple(faults), elapsed)


def _registered_xml(entry: RegistryEntry) -> bytes:
    doc = _xml.element("Registered", attrs={"id": entry.registration_id,
                                            "sequence": entry.sequence},
                       xmlns=registry_mod.NAMESPACE)
    return (_xml.DECLARATION + doc).encode("utf-8")


def _violations_xml(violations: list[str]) -> bytes:
    body = "".join(_xml.element("Violation", v) for v in violations)
    doc = _xml.element("Violations", children=body, xmlns=registry_mod.NAMESPACE)
    return (_xml.DECLARATION + doc).encode("utf-8")


class _BusHandler(_http.Handler):
    app: Bus

    def _int_param(self, query, name, default):
        raw = query.get(name)
        if raw is None or raw == "":
            return default
        value = int(raw)
        if value < 1:
            raise ValueError(f"{name} must be a positive integer")
        return value

    def do_POST(self):
        path, query = self.route
        body = self.read_body()
        if path == "/registry/register":
            return self._register(body)
        if path not in ("/bus/submit", "/bus/scatter"):
            return self.reply_text(404, "not found")
        try:
            timeout_ms = self._int_param(query, "timeout_ms", DEFAULT_TIMEOUT_MS)
            min_version = query.get("min_version") or None
            if min_version is not None:
                parse_version(min_version)
            policy = FailurePolicy(query.get("policy") or "partial")
        except ValueError as exc:
            return self.reply_text(400, str(exc))
        try:
            request = parse(body)
        except EnvelopeError as exc:
            return self.reply_text(400, f"unparseable envelope: {exc}")
        token = self.server.bus_handle.enter(timeout_ms)
        if token is None:
            return self.reply_text(503, "bus is shutting down")
        try:
            if path == "/bus/submit":
                reply = self.app.submit(request, min_version, timeout_ms)
                return self.reply(200, serialize(reply))
            self._scatter(request, min_version, timeout_ms, policy)
        finally:
            self.server.bus_handle.leave(token)

    def _scatter(self, request, min_version, timeout_ms, policy):
        if not isinstance(request.body, Content):
            return self.reply(200, serialize(new_reply(request, Fault(
                FaultCode.SENDER_ERROR, "scatter request body must be content"))))
        try:
            result = self.app.scatter_gather(request.service, min_version, request.operation,
                                             request.body, timeout_ms, policy,
                                             correlation_id=request.message_id)
        except NoProvider as exc:
            return self.reply(200, serialize(new_reply(
                request, Fault(FaultCode.SERVICE_UNAVAILABLE, str(exc)))))
        if result.fault is not None:
            return self.reply(200, serialize(new_reply(request, result.fault)))
        self.reply(200, gather_result_xml(result))

    def _register(self, body: bytes):
        try:
            root = ET.fromstring(body)
            if _xml.split_tag(root.tag)[1] != "Register":
                raise ValueError("expected a <Register> document")
            kids = _xml.child_elements(root)
            if [_xml.split_tag(k.tag)[1] for k in kids] != ["Contract", "Endpoint"]:
                raise ValueError("Register must contain Contract then Endpoint")
            contract = contract_from_element(kids[0])
            endpoint = _xml.leaf_text(kids[1])
        except (ET.ParseError, ValueError) as exc:
            return self.reply(400, _violations_xml([str(exc)]))
        try:
            entry = self.app.register(contract, endpoint)
        except InvalidContract as exc:
            return self.reply(400, _violations_xml(exc.violations))
        except InvalidEndpoint as exc:
            return self.reply(400, _violations_xml([f"endpoint: {exc}"]))
        self.reply(200, _registered_xml(entry))

    def do_DELETE(self):
        path, _ = self.route
        prefix = "/registry/registrations/"
        if not path.startswith(prefix) or len(path) == len(prefix):
            return self.reply_text(404, "not found")
        removed = self.app.deregister(path[len(prefix):])
        doc = _xml.element("Removed", "true" if removed else "false",
                           xmlns=registry_mod.NAMESPACE)
        self.reply(200, (_xml.DECLARATION + doc).encode("utf-8"))

    def do_GET(self):
        path, query = self.route
        if path != "/registry/services":
            return self.reply_text(404, "not found")
        name = query.get("name") or None
        min_version = query.get("min_version") or None
        try:
            if name is None:
                entries = [e for e in self.app.registry.entries()
                           if registry_mod.version_satisfies(e.contract.version, min_version)]
            else:
                entries = self.app.registry.discover(name, min_version)
        except ValueError as exc:
            return self.reply_text(400, str(exc))
        self.reply(200, services_xml(entries))


def register_url(bus_url: str) -> str:
    return bus_url.rstrip("/") + "/registry/register"


def register_document(contract, endpoint: str) -> bytes:
    doc = _xml.element("Register", children=registry_mod.contract_xml(contract)
                       + _xml.element("Endpoint", endpoint), xmlns=registry_mod.NAMESPACE)
    return (_xml.DECLARATION + doc).encode("utf-8")


def deregister_url(bus_url: str, registration_id: str) -> str:
    return f"{bus_url.rstrip('/')}/registry/registrations/{quote(registration_id, safe='')}"
