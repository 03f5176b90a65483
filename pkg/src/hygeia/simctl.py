"""``hygeia`` command line: boot a simulated federation and query it.

All components run as in-process servers on loopback ports::

    bus        base_port
    hospital i base_port + 1 + i     (facility "H<i+1>", seed seed + i)
    gateway    base_port + n + 1
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence
from urllib.parse import urlencode

from hygeia import _http
from hygeia.bus import Bus, register_document, register_url, deregister_url
from hygeia.errors import BindError, HygeiaError
from hygeia.gateway import FORMATS, Gateway
from hygeia.provider import (HOSPITAL_RECORDS, HealthRecord, InMemoryStore, ProviderHandle,
                             generate_synthetic, serve_provider)
from hygeia.registry import Registry, parse_contract, parse_services, validate_contract

logger = logging.getLogger(__name__)

DEFAULT_REGIONS = ("GA", "AS", "WR", "NR")
DEFAULT_DIAGNOSES = ("A00", "J10", "U07")
DEFAULT_TREATMENTS = ("T1", "T2", "T3")
DEFAULT_DRUGS = ("D1", "D2")


class RegistrationFailed(HygeiaError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    n_hospitals: int = 3
    seed: int = 42
    records_per_hospital: int = 200
    base_port: int = 7000
    host: str = "127.0.0.1"
    regions: tuple[str, ...] = DEFAULT_REGIONS
    diagnoses: tuple[str, ...] = DEFAULT_DIAGNOSES
    treatments: tuple[str, ...] = DEFAULT_TREATMENTS
    drugs: tuple[str, ...] = DEFAULT_DRUGS

    def __post_init__(self):
        if self.n_hospitals < 1 or self.records_per_hospital < 1:
            raise ValueError("n_hospitals and records_per_hospital must be positive")
        if not 0 <= self.seed <= 0xFFFFFFFF:
            raise ValueError("seed must be a 32-bit unsigned integer")
        if not (0 < self.base_port and self.base_port + self.n_hospitals + 1 <= 65535):
            raise ValueError("port range out of bounds")

    def facility(self, i: int) -> str:
        return f"H{i + 1}"

    def hospital_seed(self, i: int) -> int:
        return (self.seed + i) & 0xFFFFFFFF

    def hospital_port(self, i: int) -> int:
        return self.base_port + 1 + i

    @property
    def gateway_port(self) -> int:
        return self.base_port + self.n_hospitals + 1

    @property
    def bus_url(self) -> str:
        return f"http://{self.host}:{self.base_port}"

    @property
    def gateway_url(self) -> str:
        return f"http://{self.host}:{self.gateway_port}"

    def hospital_records(self, i: int) -> list[HealthRecord]:
        return generate_synthetic(self.hospital_seed(i), self.records_per_hospital,
                                  self.facility(i), self.regions, self.diagnoses,
                                  self.treatments, self.drugs)


class Federation:
    """A running bus, its hospitals, and the gateway. Use :meth:`up`."""

    def __init__(self, config: FederationConfig):
        self.config = config
        self.bus: Optional[Bus] = None
        self.bus_handle = None
        self.providers: list[ProviderHandle] = []
        self.registrations: list[str] = []
        self.gateway_handle = None

    @classmethod
    def up(cls, config: FederationConfig, stores: Optional[Sequence] = None) -> "Federation":
        """Boot everything; on any failure tear down what started and re-raise."""
        fed = cls(config)
        try:
            fed._boot(stores)
        except BaseException:
            fed.down()
            raise
        return fed

    def _boot(self, stores) -> None:
        c = self.config
        self.bus = Bus(Registry())
        self.bus_handle = self.bus.serve(f"{c.host}:{c.base_port}")
        for i in range(c.n_hospitals):
            store = stores[i] if stores else InMemoryStore(c.facility(i), c.hospital_records(i))
            handle = serve_provider(f"{c.host}:{c.hospital_port(i)}", HOSPITAL_RECORDS, store)
            self.providers.append(handle)
            self.registrations.append(register_remote(self.bus_handle.url, handle.url))
        self.gateway_handle = Gateway(self.bus_handle.url).serve(f"{c.host}:{c.gateway_port}")

    def urls(self) -> list[tuple[str, str]]:
        lines = [("bus", self.bus_handle.url)]
        lines += [(f"hospital {self.config.facility(i)}", p.url)
                  for i, p in enumerate(self.providers)]
        lines.append(("gateway", self.gateway_handle.url))
        return lines

    def down(self) -> None:
        """Stop every component that is running; safe to call repeatedly."""
        if self.gateway_handle is not None:
            self.gateway_handle.close()
            self.gateway_handle = None
        for p in self.providers:
            p.shutdown()
        self.providers = []
        if self.bus_handle is not None:
            self.bus_handle.shutdown()
            self.bus_handle = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.down()


def register_remote(bus_url: str, endpoint: str, contract=HOSPITAL_RECORDS) -> str:
    """Register through the bus admin endpoint and return the registration id."""
    try:
        status, body = _http.request("POST", register_url(bus_url),
                                     register_document(contract, endpoint))
    except (_http.Unreachable, TimeoutError) as exc:
        raise RegistrationFailed(f"bus unreachable: {exc}") from None
    if status != 200:
        raise RegistrationFailed(f"bus rejected {endpoint}: {body.decode(errors='replace')}")
    return ET.fromstring(body).attrib["id"]


# -- oracle ------------------------------------------------------------------

def oracle_region_counts(records: Sequence[HealthRecord], diagnosis: str) -> dict[str, int]:
    """Group-by over raw records, independent of the provider query code."""
    counts = Counter()
    for r in records:
        if r.diagnosis_code == diagnosis:
            counts[r.region_code] += 1
    return dict(sorted(counts.items()))


def gateway_search(gateway_url: str, kind: str, diagnosis: str, **filters) -> dict:
    """Run one search over HTTP and return the decoded JSON answer."""
    params = {"kind": kind, "diagnosis": diagnosis, "format": "json", **filters}
    url = f"{gateway_url.rstrip('/')}/search?{urlencode(params)}"
    status, body = _http.request("GET", url, timeout=30)
    if status != 200:
        raise HygeiaError(f"gateway answered HTTP {status}: {body.decode(errors='replace')}")
    return json.loads(body)


@dataclass
class ScenarioReport:
    config: dict
    queries: list[dict] = field(default_factory=list)
    elapsed_ms: int = 0
    verdict: str = "fail"
    detail: str = ""

    def to_json(self, include_elapsed: bool = True) -> str:
        doc = {"config": self.config, "queries": self.queries, "verdict": self.verdict,
               "detail": self.detail}
        if include_elapsed:
            doc["elapsed_ms"] = self.elapsed_ms
        return json.dumps(doc, sort_keys=True, indent=2)


def scenario_outbreak(config: FederationConfig) -> ScenarioReport:
    """Trace every diagnosis across the federation and check it against the oracle."""
    start = time.monotonic()
    report = ScenarioReport(config={
        "hospitals": config.n_hospitals, "seed": config.seed,
        "records": config.records_per_hospital, "base_port": config.base_port,
    })
    union = [r for i in range(config.n_hospitals) for r in config.hospital_records(i)]
    mismatches = []
    fed = None
    try:
        fed = Federation.up(config)
        for diagnosis in config.diagnoses:
            answer = gateway_search(fed.gateway_handle.url, "region_counts", diagnosis)
            expected = oracle_region_counts(union, diagnosis)
            report.queries.append({
                "kind": "region_counts",
                "diagnosis": diagnosis,
                "merged": answer["merged"],
                "per_hospital": {p["endpoint"]: p["result"] for p in answer["per_provider"]},
                "providers_total": answer["providers_total"],
                "providers_answered": answer["providers_answered"],
            })
            if answer["faults"]:
                mismatches.append(f"{diagnosis}: {len(answer['faults'])} provider faults")
            if answer["merged"] != expected:
                mismatches.append(f"{diagnosis}: merged {answer['merged']} != oracle {expected}")
    except Exception as exc:  # noqa: BLE001 - reported as the verdict
        mismatches.append(f"{type(exc).__name__}: {exc}")
    finally:
        if fed is not None:
            fed.down()
    report.verdict = "fail" if mismatches else "pass"
    report.detail = "; ".join(mismatches)
    report.elapsed_ms = round((time.monotonic() - start) * 1000)
    return report


# -- commands ----------------------------------------------------------------

def _config(args) -> FederationConfig:
    return FederationConfig(n_hospitals=args.hospitals, seed=args.seed,
                            records_per_hospital=args.records, base_port=args.base_port)


def cmd_up(args) -> int:
    try:
        fed = Federation.up(_config(args))
    except (BindError, RegistrationFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, url in fed.urls():
        print(f"{name:<12} {url}", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        stop.wait(args.duration if args.duration else None)
    finally:
        fed.down()
    return 0


def _gateway_url(args) -> str:
    if args.gateway:
        return args.gateway
    if args.base_port is not None:
        return f"http://127.0.0.1:{args.base_port + args.hospitals + 1}"
    return "http://" + os.environ.get("HYGEIA_GATEWAY_BIND", "127.0.0.1:7500")


def cmd_query(args) -> int:
    fields = {"kind": args.kind, "diagnosis": args.diagnosis}
    for name in ("region", "from_", "to"):
        value = getattr(args, name)
        if value is not None:
            fields[name.rstrip("_")] = value
    fields.update(timeout_ms=str(args.timeout_ms), policy=args.policy, format=args.format)
    url = f"{_gateway_url(args).rstrip('/')}/search?{urlencode(fields)}"
    try:
        status, body = _http.request("GET", url, timeout=args.timeout_ms / 1000 + 10)
    except (_http.Unreachable, TimeoutError) as exc:
        print(f"error: gateway unreachable: {exc}", file=sys.stderr)
        return 2
    if status != 200:
        print(f"error: gateway answered HTTP {status}: {body.decode(errors='replace')}",
              file=sys.stderr)
        return 1
    sys.stdout.write(body.decode("utf-8") + "\n")
    return 3 if _fault_count(body, args.format) else 0


def _fault_count(body: bytes, fmt: str) -> int:
    if fmt == "json":
        return len(json.loads(body)["faults"])
    root = ET.fromstring(body)
    faults = root.find("{urn:hygeia:gateway:1}Faults")
    return len(faults) if faults is not None else 0


def _bus_url(args) -> str:
    return (args.bus or os.environ.get("HYGEIA_BUS_URL") or "http://127.0.0.1:7000").rstrip("/")


def cmd_registry(args) -> int:
    bus = _bus_url(args)
    try:
        if args.action == "list":
            status, body = _http.request("GET", f"{bus}/registry/services")
            if status != 200:
                print(body.decode(errors="replace"), file=sys.stderr)
                return 1
            for e in parse_services(body):
                print(f"{e.sequence}\t{e.contract.name}\t{e.contract.version}\t{e.endpoint}"
                      f"\t{e.registration_id}")
            return 0
        if args.action == "register":
            try:
                with open(args.contract_file, "rb") as fh:
                    contract = parse_contract(fh.read())
            except (OSError, ValueError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 1
            violations = validate_contract(contract)
            if violations:
                for v in violations:
                    print(f"violation: {v}", file=sys.stderr)
                return 1
            status, body = _http.request("POST", register_url(bus),
                                         register_document(contract, args.endpoint))
            if status != 200:
                for el in ET.fromstring(body):
                    print(f"violation: {el.text}", file=sys.stderr)
                return 1
            reg = ET.fromstring(body).attrib
            print(f"{reg['sequence']}\t{reg['id']}")
            return 0
        status, body = _http.request("DELETE", deregister_url(bus, args.registration_id))
        removed = ET.fromstring(body).text == "true"
        print("removed" if removed else "not found")
        return 0 if removed else 1
    except (_http.Unreachable, TimeoutError) as exc:
        print(f"error: bus unreachable: {exc}", file=sys.stderr)
        return 2


def cmd_scenario(args) -> int:
    report = scenario_outbreak(_config(args))
    print(report.to_json())
    return 0 if report.verdict == "pass" else 1


def _serve_until_signal(close) -> int:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        stop.wait()
    finally:
        close()
    return 0


def cmd_bus(args) -> int:
    store = os.environ.get("HYGEIA_REGISTRY_STORE", "./registry.xml")
    bus = Bus(Registry.load(store), store_path=store)
    handle = bus.serve(os.environ.get("HYGEIA_BUS_BIND", "127.0.0.1:7000"))
    print(f"bus          {handle.url}", flush=True)
    return _serve_until_signal(handle.shutdown)


def cmd_gateway(args) -> int:
    gw = Gateway(os.environ.get("HYGEIA_BUS_URL", "http://127.0.0.1:7000"))
    handle = gw.serve(os.environ.get("HYGEIA_GATEWAY_BIND", "127.0.0.1:7500"))
    print(f"gateway      {handle.url}", flush=True)
    return _serve_until_signal(handle.close)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hygeia", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def federation_flags(sp, base_port_default=7000):
        sp.add_argument("--hospitals", type=int, default=3)
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--records", type=int, default=200)
        sp.add_argument("--base-port", type=int, default=base_port_default)

    up = sub.add_parser("up", help="boot bus, hospitals and gateway")
    federation_flags(up)
    up.add_argument("--duration", type=float, default=None,
                    help="stop after this many seconds (default: until interrupted)")
    up.set_defaults(func=cmd_up)

    q = sub.add_parser("query", help="search the federation through the gateway")
    q.add_argument("kind", choices=["cases", "region_counts", "treatments"])
    q.add_argument("diagnosis")
    q.add_argument("--region")
    q.add_argument("--from", dest="from_")
    q.add_argument("--to")
    q.add_argument("--format", choices=FORMATS, default="xml")
    q.add_argument("--timeout-ms", type=int, default=2000)
    q.add_argument("--policy", choices=["partial", "all"], default="partial")
    q.add_argument("--gateway", help="gateway URL (overrides --base-port)")
    q.add_argument("--hospitals", type=int, default=3)
    q.add_argument("--base-port", type=int, default=None)
    q.set_defaults(func=cmd_query)

    r = sub.add_parser("registry", help="inspect or edit the bus registry")
    r.add_argument("--bus", help="bus URL (default $HYGEIA_BUS_URL or http://127.0.0.1:7000)")
    rsub = r.add_subparsers(dest="action", required=True)
    rsub.add_parser("list")
    reg = rsub.add_parser("register")
    reg.add_argument("contract_file")
    reg.add_argument("endpoint")
    dereg = rsub.add_parser("deregister")
    dereg.add_argument("registration_id")
    r.set_defaults(func=cmd_registry)

    s = sub.add_parser("scenario", help="run the outbreak-tracing scenario")
    federation_flags(s)
    s.set_defaults(func=cmd_scenario)

    sub.add_parser("bus", help="serve a standalone bus").set_defaults(func=cmd_bus)
    sub.add_parser("gateway", help="serve a standalone gateway").set_defaults(func=cmd_gateway)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
