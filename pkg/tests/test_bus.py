import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor

import pytest

from hygeia import _http
from hygeia.bus import (Bus, BusAlreadyRunning, FailurePolicy, Invoke, NoProvider,
                        OrchestrationPlan, ScatterGather, gather_result_xml,
                        parse_fault_lines, parse_gather_result, register_document)
from hygeia.envelope import (Content, Fault, FaultCode, new_reply, new_request, parse,
                             serialize)
from hygeia.errors import BindError
from hygeia.provider import HOSPITAL_RECORDS, FileBackedStore, save_store
from hygeia.registry import OperationSpec, ServiceContract

from conftest import hospital_store

QUERY = "<Query><Diagnosis>A00</Diagnosis></Query>"
ECHO = ServiceContract("echo.svc", "1.0.0", (OperationSpec("Echo", "Ping", "Pong"),
                                             OperationSpec("Other", "Ping", "Pong")))


class MemAdapter:
    """In-process transport: endpoint -> (delay_s, reply builder)."""

    def __init__(self):
        self.routes = {}
        self.calls = Counter()

    def add(self, endpoint, delay=0.0, build=None):
        self.routes[endpoint] = (delay, build or (lambda req: new_reply(req, Content("<Pong/>"))))

    def send(self, endpoint, request, deadline):
        self.calls[endpoint] += 1
        delay, build = self.routes[endpoint]
        if delay:
            time.sleep(delay)
        return build(request)


@pytest.fixture
def mem_bus():
    bus = Bus()
    adapter = MemAdapter()
    bus.register_adapter("mem", adapter)
    return bus, adapter


def ping(op="Echo"):
    return new_request("echo.svc", op, "<Ping/>")


# -- adapters and routing ----------------------------------------------------

def test_adapter_is_used(mem_bus):
    bus, adapter = mem_bus
    adapter.add("mem://a:1")
    bus.register(ECHO, "mem://a:1")
    reply = bus.submit(ping())
    assert reply.body == Content("<Pong/>")
    assert adapter.calls["mem://a:1"] == 1


def test_unknown_scheme_is_service_unavailable():
    bus = Bus()
    bus.register(ECHO, "ftp://files:21")
    reply = bus.submit(ping())
    assert reply.body.code is FaultCode.SERVICE_UNAVAILABLE


def test_register_adapter_after_start_fails():
    bus = Bus()
    handle = bus.serve("127.0.0.1:0")
    try:
        with pytest.raises(BusAlreadyRunning):
            bus.register_adapter("mem", MemAdapter())
    finally:
        handle.shutdown()
    bus.register_adapter("mem", MemAdapter())  # allowed again once stopped


def test_round_robin(mem_bus):
    bus, _ = mem_bus
    e1 = bus.register(ECHO, "mem://a:1")
    e2 = bus.register(ECHO, "mem://b:1")
    assert [bus.route(ping()) for _ in range(3)] == [e1, e2, e1]


def test_round_robin_single_and_none(mem_bus):
    bus, _ = mem_bus
    with pytest.raises(NoProvider):
        bus.route(ping())
    e1 = bus.register(ECHO, "mem://a:1")
    assert [bus.route(ping()) for _ in range(3)] == [e1] * 3


def test_round_robin_counters_are_per_version_filter(mem_bus):
    bus, _ = mem_bus
    e1 = bus.register(ECHO, "mem://a:1")
    e2 = bus.register(ECHO, "mem://b:1")
    assert bus.route(ping()) == e1
    assert bus.route(ping(), "1.0.0") == e1
    assert bus.route(ping()) == e2


# -- submit ------------------------------------------------------------------

def test_submit_no_provider_is_fault():
    reply = Bus().submit(ping())
    assert reply.body.code is FaultCode.SERVICE_UNAVAILABLE
    assert reply.correlation_id == reply.correlation_id


def test_submit_contract_mismatch(mem_bus):
    bus, adapter = mem_bus
    adapter.add("mem://a:1", build=lambda req: new_reply(req, Content("<Wrong/>")))
    bus.register(ECHO, "mem://a:1")
    req = ping()
    reply = bus.submit(req)
    assert reply.body.code is FaultCode.CONTRACT_MISMATCH
    assert reply.correlation_id == req.message_id


def test_submit_rewrites_bad_correlation(mem_bus):
    bus, adapter = mem_bus
    stranger = new_request("echo.svc", "Echo", "<Ping/>")
    adapter.add("mem://a:1", build=lambda req: new_reply(stranger, Content("<Pong/>")))
    bus.register(ECHO, "mem://a:1")
    req = ping()
    assert bus.submit(req).correlation_id == req.message_id


def test_submit_sender_errors(mem_bus):
    bus, adapter = mem_bus
    adapter.add("mem://a:1")
    bus.register(ECHO, "mem://a:1")
    assert bus.submit(ping("Missing")).body.code is FaultCode.SENDER_ERROR
    wrong_root = new_request("echo.svc", "Echo", "<NotPing/>")
    assert bus.submit(wrong_root).body.code is FaultCode.SENDER_ERROR
    assert adapter.calls["mem://a:1"] == 0


def test_submit_timeout_with_blocking_adapter(mem_bus):
    bus, adapter = mem_bus
    adapter.add("mem://a:1", delay=2.0)
    bus.register(ECHO, "mem://a:1")
    start = time.monotonic()
    reply = bus.submit(ping(), timeout_ms=100)
    assert time.monotonic() - start < 1.0
    assert reply.body.code is FaultCode.TIMEOUT


def test_submit_timeout_over_http(providers):
    p = providers(hospital_store(0, 10), delay_ms=5000)
    bus = Bus()
    bus.register(HOSPITAL_RECORDS, p.url)
    req = new_request("hospital.records", "FindCases", QUERY)
    start = time.monotonic()
    reply = bus.submit(req, timeout_ms=100)
    assert time.monotonic() - start < 1.0
    assert reply.body.code is FaultCode.TIMEOUT
    assert reply.correlation_id == req.message_id


def test_submit_live_provider(providers):
    p = providers(hospital_store(0, 20))
    bus = Bus()
    bus.register(HOSPITAL_RECORDS, p.url)
    req = new_request("hospital.records", "FindCases", QUERY)
    reply = bus.submit(req)
    assert reply.body.root == "CaseList"
    assert reply.correlation_id == req.message_id


def test_submit_dead_provider_is_unavailable(providers):
    p = providers(hospital_store(0, 5))
    url = p.url
    p.shutdown()
    bus = Bus()
    bus.register(HOSPITAL_RECORDS, url)
    reply = bus.submit(new_request("hospital.records", "FindCases", QUERY))
    assert reply.body.code is FaultCode.SERVICE_UNAVAILABLE


def test_concurrent_submits_keep_correlation(providers):
    bus = Bus()
    for i in range(3):
        bus.register(HOSPITAL_RECORDS, providers(hospital_store(i, 20)).url)
    requests = [new_request("hospital.records", "CountCasesByRegion",
                            f"<Query><Diagnosis>D{i}</Diagnosis></Query>") for i in range(100)]
    with ThreadPoolExecutor(100) as pool:
        replies = list(pool.map(lambda r: bus.submit(r, timeout_ms=10000), requests))
    for req, rep in zip(requests, replies):
        assert rep.correlation_id == req.message_id
        assert not rep.is_fault


# -- scatter-gather ----------------------------------------------------------

def three(mem_bus, delays=(0, 0, 0), faulty=()):
    bus, adapter = mem_bus
    for i, delay in enumerate(delays):
        ep = f"mem://p{i}:1"
        build = None
        if i in faulty:
            build = lambda req: new_reply(req, Fault(FaultCode.INTERNAL_ERROR, "boom"))
        adapter.add(ep, delay, build)
        bus.register(ECHO, ep)
    return bus


def test_scatter_all_healthy(mem_bus):
    bus = three(mem_bus)
    res = bus.scatter_gather("echo.svc", None, "Echo", "<Ping/>", 1000)
    assert [ep for ep, _ in res.replies] == ["mem://p0:1", "mem://p1:1", "mem://p2:1"]
    assert res.faults == () and res.ok
    ids = {env.correlation_id for _, env in res.replies}
    assert len(ids) == 3  # one fresh message per provider


def test_scatter_partial_timeout(mem_bus):
    bus = three(mem_bus, delays=(0, 2.0, 0))
    start = time.monotonic()
    res = bus.scatter_gather("echo.svc", None, "Echo", "<Ping/>", 200, FailurePolicy.PARTIAL)
    assert time.monotonic() - start < 0.2 + 0.5
    assert len(res.replies) == 2
    assert [(ep, f.code) for ep, f in res.faults] == [("mem://p1:1", FaultCode.TIMEOUT)]
    assert res.ok


def test_scatter_all_or_fault(mem_bus):
    bus = three(mem_bus, delays=(0, 2.0, 0))
    res = bus.scatter_gather("echo.svc", None, "Echo", "<Ping/>", 200, FailurePolicy.ALL_OR_FAULT)
    assert res.fault is not None
    assert res.fault.code is FaultCode.SERVICE_UNAVAILABLE
    assert parse_fault_lines(res.fault.detail) == [
        ("mem://p1:1", Fault(FaultCode.TIMEOUT, "mem://p1:1 did not answer in time"))]


def test_scatter_provider_fault_counts(mem_bus):
    bus = three(mem_bus, faulty={0})
    res = bus.scatter_gather("echo.svc", None, "Echo", "<Ping/>", 1000)
    assert len(res.replies) + len(res.faults) == 3
    assert res.faults[0][1].code is FaultCode.INTERNAL_ERROR


def test_scatter_reverse_arrival_keeps_sequence_order(mem_bus):
    bus = three(mem_bus, delays=(0.3, 0.15, 0.0))
    res = bus.scatter_gather("echo.svc", None, "Echo", "<Ping/>", 2000)
    assert [ep for ep, _ in res.replies] == ["mem://p0:1", "mem://p1:1", "mem://p2:1"]


def test_scatter_no_provider(mem_bus):
    bus, _ = mem_bus
    with pytest.raises(NoProvider):
        bus.scatter_gather("echo.svc", None, "Echo", "<Ping/>", 100)


def test_gather_result_round_trip(mem_bus):
    bus = three(mem_bus, delays=(0, 1.0, 0))
    res = bus.scatter_gather("echo.svc", None, "Echo", "<Ping/>", 100)
    back = parse_gather_result(gather_result_xml(res))
    assert back.replies == res.replies
    assert back.faults == res.faults
    assert back.elapsed_ms == res.elapsed_ms


# -- orchestration -----------------------------------------------------------

def test_orchestrate_in_order(mem_bus):
    bus, adapter = mem_bus
    order = []
    for name in ("a", "b"):
        ep = f"mem://{name}:1"
        adapter.add(ep, build=lambda req, n=name: order.append(n) or new_reply(req, Content("<Pong/>")))
    bus.register(ECHO, "mem://a:1")
    other = ServiceContract("other.svc", "1.0.0", ECHO.operations)
    bus.register(other, "mem://b:1")
    plan = OrchestrationPlan([Invoke("echo.svc", "Echo", "<Ping/>"),
                              Invoke("other.svc", "Echo", "<Ping/>")])
    results = bus.orchestrate(plan)
    assert [r.service for r in results] == ["echo.svc", "other.svc"]
    assert order == ["a", "b"]


def test_orchestrate_halts_on_fault(mem_bus):
    bus, adapter = mem_bus
    adapter.add("mem://a:1", build=lambda req: new_reply(req, Fault(FaultCode.INTERNAL_ERROR, "x")))
    adapter.add("mem://b:1")
    bus.register(ECHO, "mem://a:1")
    bus.register(ServiceContract("other.svc", "1.0.0", ECHO.operations), "mem://b:1")
    results = bus.orchestrate(OrchestrationPlan([
        ScatterGather("echo.svc", "Echo", "<Ping/>", 500, policy=FailurePolicy.ALL_OR_FAULT),
        Invoke("other.svc", "Echo", "<Ping/>"),
    ]))
    assert len(results) == 1 and not results[0].ok
    assert adapter.calls["mem://b:1"] == 0


def test_orchestrate_scatter_without_providers(mem_bus):
    bus, _ = mem_bus
    results = bus.orchestrate(OrchestrationPlan([ScatterGather("echo.svc", "Echo", "<Ping/>")]))
    assert len(results) == 1
    assert results[0].fault.code is FaultCode.SERVICE_UNAVAILABLE


def test_plan_validation():
    with pytest.raises(ValueError):
        OrchestrationPlan([])
    with pytest.raises(ValueError):
        OrchestrationPlan([ScatterGather("echo.svc", "Echo", "<Ping/>", 0)])


# -- HTTP surface ------------------------------------------------------------

@pytest.fixture
def served_bus():
    bus = Bus()
    handle = bus.serve("127.0.0.1:0")
    yield bus, handle
    handle.shutdown()


def test_http_registry_endpoints(served_bus, providers):
    bus, handle = served_bus
    p = providers(hospital_store(0, 5))
    status, body = _http.request("POST", handle.url + "/registry/register",
                                 register_document(HOSPITAL_RECORDS, p.url))
    assert status == 200 and b'sequence="1"' in body
    status, body = _http.request("GET", handle.url + "/registry/services?name=hospital.records")
    assert status == 200 and p.url.encode() in body
    reg_id = bus.registry.entries()[0].registration_id
    status, body = _http.request("DELETE", f"{handle.url}/registry/registrations/{reg_id}")
    assert b">true<" in body
    status, body = _http.request("DELETE", f"{handle.url}/registry/registrations/{reg_id}")
    assert b">false<" in body


def test_http_register_rejects_bad_contract(served_bus):
    _, handle = served_bus
    bad = ServiceContract("hospital.records", "1.0", ())
    status, body = _http.request("POST", handle.url + "/registry/register",
                                 register_document(bad, "http://h:1"))
    assert status == 400 and b"<Violation>" in body


def test_http_submit_and_scatter(served_bus, providers):
    bus, handle = served_bus
    for i in range(2):
        bus.register(HOSPITAL_RECORDS, providers(hospital_store(i, 30)).url)
    req = new_request("hospital.records", "CountCasesByRegion", QUERY)
    status, body = _http.request("POST", handle.url + "/bus/submit?timeout_ms=2000",
                                 serialize(req))
    assert status == 200 and parse(body).correlation_id == req.message_id
    status, body = _http.request("POST", handle.url + "/bus/scatter?timeout_ms=2000&policy=all",
                                 serialize(req))
    assert status == 200
    res = parse_gather_result(body)
    assert len(res.replies) == 2


def test_http_submit_faults_are_in_band(served_bus):
    _, handle = served_bus
    req = new_request("hospital.records", "FindCases", QUERY)
    status, body = _http.request("POST", handle.url + "/bus/submit", serialize(req))
    assert status == 200 and parse(body).body.code is FaultCode.SERVICE_UNAVAILABLE
    status, body = _http.request("POST", handle.url + "/bus/scatter", serialize(req))
    assert status == 200 and parse(body).is_fault
    status, _ = _http.request("POST", handle.url + "/bus/submit", b"<Envelope/>")
    assert status == 400
    status, _ = _http.request("POST", handle.url + "/bus/submit?timeout_ms=0", serialize(req))
    assert status == 400


def test_bind_error_on_occupied_port(served_bus):
    _, handle = served_bus
    with pytest.raises(BindError):
        Bus().serve(f"127.0.0.1:{handle.port}")


def test_shutdown_refuses_connections():
    bus = Bus()
    handle = bus.serve("127.0.0.1:0")
    url = handle.url
    handle.shutdown()
    with pytest.raises(_http.Unreachable):
        _http.request("GET", url + "/registry/services")


def test_shutdown_drains_inflight(providers):
    p = providers(hospital_store(0, 5), delay_ms=300)
    bus = Bus()
    bus.register(HOSPITAL_RECORDS, p.url)
    handle = bus.serve("127.0.0.1:0")
    req = new_request("hospital.records", "FindCases", QUERY)
    out = {}
    t = threading.Thread(target=lambda: out.update(r=_http.request(
        "POST", handle.url + "/bus/submit?timeout_ms=1000", serialize(req))))
    t.start()
    time.sleep(0.1)
    handle.shutdown()
    t.join()
    status, body = out["r"]
    assert status == 200 and not parse(body).is_fault


def test_registry_persists_through_bus(tmp_path, providers):
    store = tmp_path / "registry.xml"
    bus = Bus(store_path=store)
    bus.register(HOSPITAL_RECORDS, "http://127.0.0.1:1")
    from hygeia.registry import Registry
    assert len(Registry.load(store)) == 1


# -- architecture invariants -------------------------------------------------

def test_decoupling_memory_vs_file_backend(tmp_path, providers):
    records = hospital_store(0, 200)
    save_store(records, tmp_path / "h1.xml")
    bodies = []
    for store in (records, FileBackedStore(tmp_path / "h1.xml")):
        bus = Bus()
        bus.register(HOSPITAL_RECORDS, providers(store).url)
        for op in ("FindCases", "CountCasesByRegion", "ListTreatments"):
            reply = bus.submit(new_request("hospital.records", op, QUERY))
            bodies.append(reply.body.xml.encode())
    assert bodies[:3] == bodies[3:]


def test_hub_extensibility(providers):
    bus = Bus()
    originals = [bus.register(HOSPITAL_RECORDS, providers(hospital_store(i, 50)).url)
                 for i in range(2)]

    def replies():
        return [bus.invoke(e, new_request("hospital.records", "CountCasesByRegion", QUERY)).body
                for e in originals]

    def scatter_count():
        return len(bus.scatter_gather("hospital.records", None, "CountCasesByRegion",
                                      QUERY, 2000).replies)

    before, n_before = replies(), scatter_count()
    bus.register(HOSPITAL_RECORDS, providers(hospital_store(2, 50)).url)
    assert replies() == before
    assert scatter_count() == n_before + 1
