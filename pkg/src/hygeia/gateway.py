"""Consumer-facing search gateway.

Consumers never talk to the bus or to providers. They send one search here
(GET with query parameters or POST with a ``<Search>`` document); the
gateway turns it into a scatter over ``hospital.records``, decodes each
hospital's reply, and merges them into a federation-wide answer.
"""

from __future__ import annotations

import json
import logging
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from typing import Optional, Union
from urllib.parse import urlencode

from hygeia import _http, _xml
from hygeia.bus import DEFAULT_TIMEOUT_MS, FailurePolicy, parse_fault_lines, parse_gather_result
from hygeia.envelope import (Content, EnvelopeError, Fault, fault_xml, new_request, parse,
                             serialize)
from hygeia.errors import HygeiaError
from hygeia.provider import (HOSPITAL_RECORDS, CaseQuery, HealthRecord, InvalidQuery,
                             cases_from_xml, cases_xml, query_xml,
                             region_counts_from_xml, region_counts_xml, treatment_order,
                             treatments_from_xml, treatments_xml)

logger = logging.getLogger(__name__)

NAMESPACE = "urn:hygeia:gateway:1"

KINDS = {
    "cases": "FindCases",
    "region_counts": "CountCasesByRegion",
    "treatments": "ListTreatments",
}
# Optional filters each kind accepts, mirroring the provider operations.
_ALLOWED_FILTERS = {
    "cases": {"region_code", "date_from", "date_to"},
    "region_counts": {"date_from", "date_to"},
    "treatments": set(),
}
FORMATS = ("xml", "json")

Result = Union[list, dict]


class BadRequest(HygeiaError):
    pass


class BusUnreachable(HygeiaError):
    pass


class UnsupportedFormat(HygeiaError):
    pass


@dataclass(frozen=True)
class SearchRequest:
    kind: str
    diagnosis_code: str
    region_code: Optional[str] = None
    date_from: Optional[date] = None
    date_to: Optional[date] = None
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    policy: FailurePolicy = FailurePolicy.PARTIAL

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadRequest(f"kind must be one of {', '.join(KINDS)}")
        if not self.diagnosis_code:
            raise BadRequest("diagnosis is required")
        for name in ("region_code", "date_from", "date_to"):
            if getattr(self, name) is not None and name not in _ALLOWED_FILTERS[self.kind]:
                raise BadRequest(f"{name} does not apply to kind {self.kind}")
        if self.timeout_ms < 1:
            raise BadRequest("timeout_ms must be a positive integer")
        try:
            self.query.check()
        except InvalidQuery as exc:
            raise BadRequest(str(exc)) from None

    @property
    def operation(self) -> str:
        return KINDS[self.kind]

    @property
    def query(self) -> CaseQuery:
        return CaseQuery(self.diagnosis_code, self.region_code, self.date_from, self.date_to)

    @classmethod
    def from_fields(cls, fields: dict[str, str]) -> "SearchRequest":
        """Build from loose string fields (query parameters or ``<Search>`` children)."""
        def opt(name):
            value = fields.get(name)
            return value if value not in (None, "") else None

        try:
            kwargs = dict(
                kind=opt("kind") or "",
                diagnosis_code=opt("diagnosis") or "",
                region_code=opt("region"),
                date_from=date.fromisoformat(opt("from")) if opt("from") else None,
                date_to=date.fromisoformat(opt("to")) if opt("to") else None,
                timeout_ms=int(opt("timeout_ms") or DEFAULT_TIMEOUT_MS),
                policy=FailurePolicy(opt("policy") or "partial"),
            )
        except ValueError as exc:
            raise BadRequest(str(exc)) from None
        return cls(**kwargs)

    def to_fields(self) -> dict[str, str]:
        fields = {"kind": self.kind, "diagnosis": self.diagnosis_code}
        if self.region_code is not None:
            fields["region"] = self.region_code
        if self.date_from is not None:
            fields["from"] = self.date_from.isoformat()
        if self.date_to is not None:
            fields["to"] = self.date_to.isoformat()
        fields["timeout_ms"] = str(self.timeout_ms)
        fields["policy"] = self.policy.value
        return fields


@dataclass(frozen=True)
class FederatedAnswer:
    kind: str
    per_provider: tuple[tuple[str, Result], ...] = ()
    merged: Result = field(default_factory=dict)
    faults: tuple[tuple[str, Fault], ...] = ()

    @property
    def providers_answered(self) -> int:
        return len(self.per_provider)

    @property
    def providers_total(self) -> int:
        return len(self.per_provider) + len(self.faults)


# -- merging -----------------------------------------------------------------

def merge_region_counts(results) -> dict[str, int]:
    total: dict[str, int] = {}
    for counts in results:
        for code, n in counts.items():
            total[code] = total.get(code, 0) + n
    return dict(sorted(total.items()))


def merge_cases(results) -> list[HealthRecord]:
    merged = [r for records in results for r in records]
    merged.sort(key=lambda r: (r.report_date, r.facility_id, r.record_id))
    return merged


def merge_treatments(results) -> list[tuple[str, str, int]]:
    total = Counter()
    for items in results:
        for treatment, drug, count in items:
            total[(treatment, drug)] += count
    return sorted(((t, d, c) for (t, d), c in total.items()), key=treatment_order)


_MERGE = {"cases": merge_cases, "region_counts": merge_region_counts,
          "treatments": merge_treatments}
_DECODE = {"CaseList": cases_from_xml, "RegionCounts": region_counts_from_xml,
           "TreatmentList": treatments_from_xml}


def empty_result(kind: str) -> Result:
    return {} if kind == "region_counts" else []


def build_answer(kind: str, per_provider, faults) -> FederatedAnswer:
    per_provider = tuple(per_provider)
    merged = _MERGE[kind]([result for _, result in per_provider])
    return FederatedAnswer(kind, per_provider, merged, tuple(faults))


# -- formatting --------------------------------------------------------------

def _result_xml(kind: str, result: Result) -> str:
    if kind == "region_counts":
        return region_counts_xml(result)
    if kind == "cases":
        return cases_xml(result)
    return treatments_xml(result)


def _result_json(kind: str, result: Result):
    if kind == "region_counts":
        return dict(sorted(result.items()))
    if kind == "cases":
        return [{"record_id": r.record_id, "facility_id": r.facility_id,
                 "region_code": r.region_code, "diagnosis_code": r.diagnosis_code,
                 "treatment_code": r.treatment_code, "drug_code": r.drug_code,
                 "onset_date": r.onset_date.isoformat(),
                 "report_date": r.report_date.isoformat()} for r in result]
    return [{"treatment": t, "drug": d, "count": c} for t, d, c in result]


def format_answer(a: FederatedAnswer, fmt: str = "xml") -> bytes:
    if fmt == "xml":
        per = "".join(_xml.element("Provider", attrs={"endpoint": ep},
                                   children=_result_xml(a.kind, res))
                      for ep, res in a.per_provider)
        faults = "".join(_xml.element("ProviderFault", attrs={"endpoint": ep},
                                      children=fault_xml(f)) for ep, f in a.faults)
        doc = _xml.element("Answer", xmlns=NAMESPACE, children="".join([
            _xml.element("Kind", a.kind),
            _xml.element("ProvidersTotal", str(a.providers_total)),
            _xml.element("ProvidersAnswered", str(a.providers_answered)),
            _xml.element("PerProvider", children=per),
            _xml.element("Merged", children=_result_xml(a.kind, a.merged)),
            _xml.element("Faults", children=faults),
        ]))
        return (_xml.DECLARATION + doc).encode("utf-8")
    if fmt == "json":
        tree = {
            "kind": a.kind,
            "providers_total": a.providers_total,
            "providers_answered": a.providers_answered,
            "per_provider": [{"endpoint": ep, "result": _result_json(a.kind, res)}
                             for ep, res in a.per_provider],
            "merged": _result_json(a.kind, a.merged),
            "faults": [{"endpoint": ep, "code": f.code.value, "reason": f.reason,
                        "detail": f.detail} for ep, f in a.faults],
        }
        return json.dumps(tree, sort_keys=True, separators=(",", ":")).encode("utf-8")
    raise UnsupportedFormat(f"format must be one of {', '.join(FORMATS)}, not {fmt!r}")


# -- the gateway -------------------------------------------------------------

class Gateway:
    def __init__(self, bus_url: str):
        self.bus_url = bus_url.rstrip("/")

    def search(self, req: SearchRequest) -> FederatedAnswer:
        """Scatter ``req`` through the bus and merge the answers."""
        request = new_request(HOSPITAL_RECORDS.name, req.operation, Content(query_xml(req.query)))
        params = urlencode({"timeout_ms": req.timeout_ms, "policy": req.policy.value})
        url = f"{self.bus_url}/bus/scatter?{params}"
        try:
            status, body = _http.request("POST", url, serialize(request),
                                         timeout=req.timeout_ms / 1000 + 5)
        except (_http.Unreachable, TimeoutError) as exc:
            raise BusUnreachable(f"bus at {self.bus_url} unreachable: {exc}") from None
        if status != 200:
            raise BusUnreachable(f"bus answered HTTP {status}: {body[:200]!r}")
        return self._decode(req.kind, body)

    def _decode(self, kind: str, body: bytes) -> FederatedAnswer:
        try:
            root = ET.fromstring(body)
        except ET.ParseError as exc:
            raise BusUnreachable(f"bus sent an unreadable answer: {exc}") from None
        if _xml.split_tag(root.tag)[1] == "Envelope":
            # An overall fault: no provider, or the all-or-fault policy tripped.
            reply = parse(body)
            faults = parse_fault_lines(reply.body.detail) if reply.is_fault else []
            if reply.is_fault and not faults:
                faults = [("", reply.body)]
            return build_answer(kind, (), faults)
        try:
            result = parse_gather_result(body)
        except (ValueError, EnvelopeError) as exc:
            raise BusUnreachable(f"bus sent an unreadable answer: {exc}") from None
        per_provider = []
        for endpoint, env in result.replies:
            el = env.body.element()
            per_provider.append((endpoint, _DECODE[el.tag](el)))
        return build_answer(kind, per_provider, result.faults)

    def handle_search(self, method: str, params: dict[str, str],
                      body: bytes = b"") -> tuple[int, str, bytes]:
        """Serve one search; returns ``(status, content_type, body)``."""
        fields = dict(params)
        if method == "POST":
            try:
                fields.update(search_fields_from_xml(body))
            except ValueError as exc:
                return 400, "text/plain; charset=utf-8", str(exc).encode()
        fmt = fields.pop("format", None) or "xml"
        if fmt not in FORMATS:
            return 400, "text/plain; charset=utf-8", f"unsupported format {fmt!r}".encode()
        try:
            req = SearchRequest.from_fields(fields)
        except BadRequest as exc:
            return 400, "text/plain; charset=utf-8", str(exc).encode()
        try:
            answer = self.search(req)
        except BusUnreachable as exc:
            logger.warning("%s", exc)
            return 502, "text/plain; charset=utf-8", str(exc).encode()
        ctype = _http.XML_TYPE if fmt == "xml" else _http.JSON_TYPE
        return 200, ctype, format_answer(answer, fmt)

    def serve(self, bind: str) -> _http.ServerHandle:
        handler = type("GatewayHandler", (_GatewayHandler,), {"app": self})
        server = _http.start_server(bind, handler, "gateway")
        logger.info("gateway serving on %s (bus %s)", server.url, self.bus_url)
        return server


_SEARCH_ELEMENTS = {"Kind": "kind", "Diagnosis": "diagnosis", "Region": "region",
                    "From": "from", "To": "to", "TimeoutMs": "timeout_ms",
                    "Policy": "policy", "Format": "format"}


def search_xml(fields: dict[str, str]) -> bytes:
    names = {v: k for k, v in _SEARCH_ELEMENTS.items()}
    kids = "".join(_xml.element(names[k], v) for k, v in fields.items())
    return (_xml.DECLARATION + _xml.element("Search", children=kids)).encode("utf-8")


def search_fields_from_xml(body: bytes) -> dict[str, str]:
    try:
        root = ET.fromstring(body)
    except ET.ParseError as exc:
        raise ValueError(f"malformed Search document: {exc}") from None
    if _xml.split_tag(root.tag)[1] != "Search":
        raise ValueError("expected a <Search> document")
    fields = {}
    for kid in _xml.child_elements(root):
        name = _xml.split_tag(kid.tag)[1]
        if name not in _SEARCH_ELEMENTS:
            raise ValueError(f"unknown Search field {name!r}")
        fields[_SEARCH_ELEMENTS[name]] = _xml.leaf_text(kid)
    return fields


class _GatewayHandler(_http.Handler):
    app: Gateway

    def _search(self, method: str):
        path, query = self.route
        if path != "/search":
            return self.reply_text(404, "not found")
        body = self.read_body() if method == "POST" else b""
        status, ctype, payload = self.app.handle_search(method, query, body)
        self.reply(status, payload, ctype)

    def do_GET(self):
        self._search("GET")

    def do_POST(self):
        self._search("POST")
