"""Hospital information service: record stores behind ``hospital.records``.

A provider owns a :class:`RecordStore` (in memory or backed by an XML file)
and answers three query operations. How the records are kept is invisible
to callers: both backends encode identical answers byte for byte.
"""

from __future__ import annotations

import logging
import os
import re
import threading
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Iterable, Iterator, Optional, Sequence

from hygeia import _http, _xml
from hygeia.envelope import (Content, Envelope, EnvelopeError, Fault, FaultCode, new_reply,
                             parse, serialize)
from hygeia.errors import CorruptStore, HygeiaError
from hygeia.registry import OperationSpec, ServiceContract

logger = logging.getLogger(__name__)

NAMESPACE = "urn:hygeia:records:1"

HOSPITAL_RECORDS = ServiceContract("hospital.records", "1.0.0", (
    OperationSpec("FindCases", "Query", "CaseList"),
    OperationSpec("CountCasesByRegion", "Query", "RegionCounts"),
    OperationSpec("ListTreatments", "Query", "TreatmentList"),
))

LCG_MULTIPLIER = 1664525
LCG_INCREMENT = 1013904223
EPOCH = date(2024, 1, 1)

_REGION_RE = re.compile(r"[A-Z][A-Z0-9]{1,7}\Z")
_RECORD_FIELDS = ("RecordId", "FacilityId", "RegionCode", "DiagnosisCode", "TreatmentCode",
                  "DrugCode", "OnsetDate", "ReportDate")


class InvalidQuery(HygeiaError):
    pass


class EmptyCodeList(HygeiaError):
    pass


@dataclass(frozen=True)
class HealthRecord:
    record_id: str
    facility_id: str
    region_code: str
    diagnosis_code: str
    treatment_code: str
    drug_code: str
    onset_date: date
    report_date: date

    def __post_init__(self):
        for name in ("record_id", "facility_id", "diagnosis_code", "treatment_code", "drug_code"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ValueError(f"{name} must be a nonempty string")
        if not _REGION_RE.match(self.region_code):
            raise ValueError(f"region_code {self.region_code!r} must be 2-8 uppercase characters")
        if self.report_date < self.onset_date:
            raise ValueError(f"{self.record_id}: report_date precedes onset_date")

    @property
    def sort_key(self):
        return self.report_date, self.record_id


@dataclass(frozen=True)
class CaseQuery:
    diagnosis_code: str
    region_code: Optional[str] = None
    date_from: Optional[date] = None
    date_to: Optional[date] = None

    def check(self) -> None:
        if not self.diagnosis_code:
            raise InvalidQuery("diagnosis_code is required")
        if self.date_from and self.date_to and self.date_from > self.date_to:
            raise InvalidQuery(f"date_from {self.date_from} is after date_to {self.date_to}")

    def matches(self, r: HealthRecord) -> bool:
        return (r.diagnosis_code == self.diagnosis_code
                and (self.region_code is None or r.region_code == self.region_code)
                and (self.date_from is None or r.report_date >= self.date_from)
                and (self.date_to is None or r.report_date <= self.date_to))


# -- stores ------------------------------------------------------------------

class RecordStore:
    """Read-only access to one facility's records."""

    backend = "abstract"

    def __init__(self, facility_id: str):
        self.facility_id = facility_id

    def records(self) -> Sequence[HealthRecord]:
        raise NotImplementedError

    def __len__(self) -> int:
        return len(self.records())


class InMemoryStore(RecordStore):
    backend = "memory"

    def __init__(self, facility_id: str, records: Iterable[HealthRecord] = ()):
        super().__init__(facility_id)
        self._records = tuple(records)
        ids = {r.record_id for r in self._records}
        if len(ids) != len(self._records):
            raise ValueError("record_id values must be unique within a store")

    def records(self) -> Sequence[HealthRecord]:
        return self._records


class FileBackedStore(RecordStore):
    """Reads its records from a store file, re-parsing when the file changes."""

    backend = "file"

    def __init__(self, path):
        self.path = os.fspath(path)
        self._lock = threading.Lock()
        self._stamp = None
        self._cache: tuple[HealthRecord, ...] = ()
        super().__init__(self._load().facility_id)

    def _load(self) -> InMemoryStore:
        st = os.stat(self.path)
        stamp = (st.st_mtime_ns, st.st_size)
        with self._lock:
            if stamp != self._stamp:
                loaded = load_store(self.path)
                self._cache, self._stamp = tuple(loaded.records()), stamp
                self._facility = loaded.facility_id
            return InMemoryStore(self._facility, self._cache)

    def records(self) -> Sequence[HealthRecord]:
        return self._load().records()


def record_xml(r: HealthRecord) -> str:
    values = (r.record_id, r.facility_id, r.region_code, r.diagnosis_code, r.treatment_code,
              r.drug_code, r.onset_date.isoformat(), r.report_date.isoformat())
    return _xml.element("Record", children="".join(
        _xml.element(name, value) for name, value in zip(_RECORD_FIELDS, values)))


def record_from_element(el: ET.Element) -> HealthRecord:
    kids = _xml.child_elements(el)
    names = [_xml.split_tag(k.tag)[1] for k in kids]
    if names != list(_RECORD_FIELDS):
        raise ValueError(f"Record fields {names} do not match {list(_RECORD_FIELDS)}")
    v = [_xml.leaf_text(k) for k in kids]
    return HealthRecord(v[0], v[1], v[2], v[3], v[4], v[5],
                        date.fromisoformat(v[6]), date.fromisoformat(v[7]))


def store_xml(store: RecordStore) -> bytes:
    body = "".join(record_xml(r) for r in store.records())
    doc = _xml.element("Records", attrs={"facility": store.facility_id}, children=body,
                       xmlns=NAMESPACE)
    return (_xml.DECLARATION + doc).encode("utf-8")


def save_store(store: RecordStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(store_xml(store))


def load_store(path) -> InMemoryStore:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise CorruptStore(f"{path}: {exc}", getattr(exc, "position", None)) from None
    if root.tag != f"{{{NAMESPACE}}}Records":
        raise CorruptStore(f"{path}: unexpected root element {root.tag!r}")
    try:
        records = [record_from_element(el) for el in _xml.child_elements(root)]
        return InMemoryStore(root.attrib.get("facility", ""), records)
    except ValueError as exc:
        raise CorruptStore(f"{path}: {exc}") from None


# -- synthetic data ----------------------------------------------------------

def lcg(seed: int) -> Iterator[int]:
    """Successive values x_1, x_2, ... of the 32-bit Numerical Recipes LCG."""
    x = seed
    while True:
        x = (LCG_MULTIPLIER * x + LCG_INCREMENT) & 0xFFFFFFFF
        yield x


def generate_synthetic(seed: int, n: int, facility_id: str, regions: Sequence[str],
                       diagnoses: Sequence[str], treatments: Sequence[str],
                       drugs: Sequence[str]) -> list[HealthRecord]:
    if not 0 <= seed <= 0xFFFFFFFF:
        raise ValueError("seed must be a 32-bit unsigned integer")
    if n < 0:
        raise ValueError("n must be non-negative")
    for name, codes in (("regions", regions), ("diagnoses", diagnoses),
                        ("treatments", treatments), ("drugs", drugs)):
        if not codes:
            raise EmptyCodeList(f"{name} must not be empty")
    draws = lcg(seed)
    out = []
    for i in range(n):
        r1, r2, r3, r4 = next(draws), next(draws), next(draws), next(draws)
        onset = EPOCH + timedelta(days=r4 % 90)
        out.append(HealthRecord(
            record_id=f"F{facility_id}-R{i:06d}",
            facility_id=facility_id,
            region_code=regions[r1 % len(regions)],
            diagnosis_code=diagnoses[r2 % len(diagnoses)],
            treatment_code=treatments[r3 % len(treatments)],
            drug_code=drugs[r3 % len(drugs)],
            onset_date=onset,
            report_date=onset + timedelta(days=r4 % 7),
        ))
    return out


# -- queries -----------------------------------------------------------------

def find_cases(store: RecordStore, q: CaseQuery) -> list[HealthRecord]:
    q.check()
    return sorted((r for r in store.records() if q.matches(r)), key=lambda r: r.sort_key)


def count_cases_by_region(store: RecordStore, diagnosis_code: str,
                          date_from: Optional[date] = None,
                          date_to: Optional[date] = None) -> dict[str, int]:
    q = CaseQuery(diagnosis_code, None, date_from, date_to)
    q.check()
    counts = Counter(r.region_code for r in store.records() if q.matches(r))
    return dict(sorted(counts.items()))


def treatment_order(item):
    treatment, drug, count = item
    return -count, treatment, drug


def list_treatments(store: RecordStore, diagnosis_code: str) -> list[tuple[str, str, int]]:
    pairs = Counter((r.treatment_code, r.drug_code) for r in store.records()
                    if r.diagnosis_code == diagnosis_code)
    return sorted(((t, d, c) for (t, d), c in pairs.items()), key=treatment_order)


# -- body encodings ----------------------------------------------------------

def query_xml(q: CaseQuery) -> str:
    kids = _xml.element("Diagnosis", q.diagnosis_code)
    if q.region_code is not None:
        kids += _xml.element("Region", q.region_code)
    if q.date_from is not None:
        kids += _xml.element("From", q.date_from.isoformat())
    if q.date_to is not None:
        kids += _xml.element("To", q.date_to.isoformat())
    return _xml.element("Query", children=kids)


def query_from_xml(el: ET.Element) -> CaseQuery:
    """Decode ``<Query>``; raises :class:`InvalidQuery` on any defect."""
    try:
        kids = _xml.child_elements(el)
        fields = {}
        for kid in kids:
            name = _xml.split_tag(kid.tag)[1]
            if name not in ("Diagnosis", "Region", "From", "To") or name in fields:
                raise ValueError(f"unexpected element {name!r} in Query")
            fields[name] = _xml.leaf_text(kid)
        if [n for n in ("Diagnosis", "Region", "From", "To") if n in fields] != list(fields):
            raise ValueError("Query elements out of order")
        q = CaseQuery(
            fields.get("Diagnosis", ""),
            fields.get("Region"),
            date.fromisoformat(fields["From"]) if "From" in fields else None,
            date.fromisoformat(fields["To"]) if "To" in fields else None,
        )
    except ValueError as exc:
        raise InvalidQuery(str(exc)) from None
    q.check()
    return q


def cases_xml(records: Iterable[HealthRecord]) -> str:
    return _xml.element("CaseList", children="".join(record_xml(r) for r in records))


def cases_from_xml(el: ET.Element) -> list[HealthRecord]:
    return [record_from_element(kid) for kid in _xml.child_elements(el)]


def region_counts_xml(counts: dict[str, int]) -> str:
    return _xml.element("RegionCounts", children="".join(
        _xml.element("Region", str(counts[code]), {"code": code}) for code in sorted(counts)))


def region_counts_from_xml(el: ET.Element) -> dict[str, int]:
    out = {}
    for kid in _xml.child_elements(el):
        out[kid.attrib["code"]] = int(kid.text or "")
    return out


def treatments_xml(items: Iterable[tuple[str, str, int]]) -> str:
    return _xml.element("TreatmentList", children="".join(
        _xml.element("Treatment", str(c), {"code": t, "drug": d}) for t, d, c in items))


def treatments_from_xml(el: ET.Element) -> list[tuple[str, str, int]]:
    return [(kid.attrib["code"], kid.attrib["drug"], int(kid.text or ""))
            for kid in _xml.child_elements(el)]


def handle_operation(store: RecordStore, operation: str, body: Content) -> Content:
    """Run one contract operation against ``store`` and encode the result.

    Raises :class:`InvalidQuery` for bad input and ``KeyError`` for an
    operation the contract does not define.
    """
    spec = HOSPITAL_RECORDS.operation(operation)
    if spec is None:
        raise KeyError(operation)
    el = body.element()
    if el.tag != spec.input_root:
        raise InvalidQuery(f"{operation} expects <{spec.input_root}>, got <{el.tag}>")
    q = query_from_xml(el)
    if operation == "FindCases":
        return Content(cases_xml(find_cases(store, q)))
    if operation == "CountCasesByRegion":
        if q.region_code is not None:
            raise InvalidQuery("CountCasesByRegion does not take a Region filter")
        return Content(region_counts_xml(
            count_cases_by_region(store, q.diagnosis_code, q.date_from, q.date_to)))
    if q.region_code is not None or q.date_from is not None or q.date_to is not None:
        raise InvalidQuery("ListTreatments takes only a Diagnosis")
    return Content(treatments_xml(list_treatments(store, q.diagnosis_code)))


# -- service -----------------------------------------------------------------

class ProviderService:
    """Dispatches envelopes to a store and counts invocations per operation."""

    def __init__(self, store: RecordStore, contract: ServiceContract = HOSPITAL_RECORDS,
                 delay_ms: int = 0):
        if contract != HOSPITAL_RECORDS:
            raise ValueError("providers implement hospital.records 1.0.0 only")
        self.store = store
        self.contract = contract
        self.delay_ms = delay_ms
        self._stats = Counter()
        self._stats_lock = threading.Lock()
        self._stopping = threading.Event()

    def stats(self) -> dict[str, int]:
        with self._stats_lock:
            counts = dict(self._stats)
        return {op.name: counts.get(op.name, 0) for op in self.contract.operations}

    def invoke(self, request: Envelope) -> Envelope:
        with self._stats_lock:
            self._stats[request.operation] += 1
        if self.delay_ms:
            self._stopping.wait(self.delay_ms / 1000)
        if isinstance(request.body, Fault):
            return new_reply(request, Fault(FaultCode.SENDER_ERROR, "request body is a fault"))
        try:
            result = handle_operation(self.store, request.operation, request.body)
        except KeyError:
            return new_reply(request, Fault(FaultCode.SENDER_ERROR,
                                            f"unknown operation {request.operation!r}"))
        except InvalidQuery as exc:
            return new_reply(request, Fault(FaultCode.SENDER_ERROR, str(exc)))
        except Exception as exc:  # noqa: BLE001 - every outcome is reported in-band
            logger.exception("provider failure")
            return new_reply(request, Fault(FaultCode.INTERNAL_ERROR, type(exc).__name__))
        return new_reply(request, result)

    def stats_xml(self) -> bytes:
        body = "".join(_xml.element("Operation", str(n), {"name": name})
                       for name, n in self.stats().items())
        return (_xml.DECLARATION + _xml.element("Stats", children=body)).encode("utf-8")


class _ProviderHandler(_http.Handler):
    def do_POST(self):
        path, _ = self.route
        if path != "/service/invoke":
            return self.reply_text(404, "not found")
        try:
            request = parse(self.read_body())
        except EnvelopeError as exc:
            return self.reply_text(400, str(exc))
        self.reply(200, serialize(self.app.invoke(request)))

    def do_GET(self):
        path, _ = self.route
        if path != "/service/stats":
            return self.reply_text(404, "not found")
        self.reply(200, self.app.stats_xml())


class ProviderHandle:
    def __init__(self, service: ProviderService, server: _http.ServerHandle):
        self.service = service
        self._server = server

    @property
    def url(self) -> str:
        return self._server.url

    @property
    def port(self) -> int:
        return self._server.port

    def shutdown(self) -> None:
        self.service._stopping.set()
        self._server.close()


def serve_provider(bind: str, contract: ServiceContract, store: RecordStore,
                   delay_ms: int = 0) -> ProviderHandle:
    """Serve ``store`` over HTTP at ``bind`` (``host:port``; port 0 picks one).

    ``delay_ms`` holds every reply back, for exercising bus deadlines.
    """
    service = ProviderService(store, contract, delay_ms)
    handler = type("ProviderHandler", (_ProviderHandler,), {"app": service})
    server = _http.start_server(bind, handler, f"provider-{store.facility_id}")
    logger.info("provider %s serving on %s", store.facility_id, server.url)
    return ProviderHandle(service, server)
