"""The canonical bus message and its XML wire form.

Every party on the bus exchanges :class:`Envelope` values serialized with
:func:`serialize`. The wire grammar is fixed-order and whitespace-free so
that equal envelopes always produce identical bytes::

    <?xml version="1.0" encoding="UTF-8"?>
    <Envelope xmlns="urn:hygeia:bus:1"><Header><MessageId>..</MessageId>
    <CorrelationId>..</CorrelationId><Service>..</Service>
    <Operation>..</Operation><Timestamp>..</Timestamp><ReplyTo>..</ReplyTo>
    </Header><Body>..</Body></Envelope>

(shown wrapped; the real document has no whitespace between elements).
"""

from __future__ import annotations

import dataclasses
import enum
import re
import uuid
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Optional, Union
from urllib.parse import urlsplit

from hygeia import _xml
from hygeia.errors import HygeiaError

NAMESPACE = "urn:hygeia:bus:1"
MEDIA_TYPE = "application/xml; charset=utf-8"

SERVICE_RE = re.compile(r"[a-z][a-z0-9._-]{0,63}\Z")
OPERATION_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]{0,63}\Z")
_UUID_RE = re.compile(r"[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}\Z")
_TIMESTAMP_RE = re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z\Z")

HEADER_FIELDS = ("MessageId", "CorrelationId", "Service", "Operation", "Timestamp", "ReplyTo")


class EnvelopeError(HygeiaError):
    pass


class InvalidName(EnvelopeError):
    pass


class MalformedBody(EnvelopeError):
    pass


class InvariantViolation(EnvelopeError):
    pass


class MalformedXml(EnvelopeError):
    pass


class UnknownNamespace(EnvelopeError):
    def __init__(self, namespace: str):
        super().__init__(f"unknown namespace {namespace!r}")
        self.namespace = namespace


class MissingHeaderField(EnvelopeError):
    def __init__(self, name: str):
        super().__init__(f"missing header field {name}")
        self.name = name


class BadFieldSyntax(EnvelopeError):
    def __init__(self, name: str, detail: str = ""):
        super().__init__(f"bad syntax in {name}" + (f": {detail}" if detail else ""))
        self.name = name


class FaultCode(str, enum.Enum):
    SENDER_ERROR = "SenderError"
    SERVICE_UNAVAILABLE = "ServiceUnavailable"
    TIMEOUT = "Timeout"
    CONTRACT_MISMATCH = "ContractMismatch"
    INTERNAL_ERROR = "InternalError"


@dataclass(frozen=True)
class Content:
    """A payload holding exactly one XML element.

    The text is normalized on construction, so ``Content("<Query />")`` and
    ``Content("<Query/>")`` compare equal.
    """

    xml: str

    def __post_init__(self):
        try:
            el = ET.fromstring(self.xml)
        except ET.ParseError as exc:
            raise MalformedBody(f"body is not one well-formed element: {exc}") from None
        try:
            canonical = _xml.write_tree(el)
        except ValueError as exc:
            raise MalformedBody(str(exc)) from None
        if el.tag == "Fault":
            raise MalformedBody("a content payload may not use the reserved root 'Fault'")
        object.__setattr__(self, "xml", canonical)

    @property
    def root(self) -> str:
        return self.element().tag

    def element(self) -> ET.Element:
        return ET.fromstring(self.xml)


@dataclass(frozen=True)
class Fault:
    code: FaultCode
    reason: str
    detail: Optional[str] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "code", FaultCode(self.code))
        except ValueError:
            raise InvariantViolation(f"unknown fault code {self.code!r}") from None


Payload = Union[Content, Fault]


@dataclass(frozen=True)
class Envelope:
    message_id: str
    correlation_id: str
    service: str
    operation: str
    timestamp: str
    body: Payload
    reply_to: Optional[str] = None

    @property
    def is_fault(self) -> bool:
        return isinstance(self.body, Fault)

    def check(self) -> None:
        """Raise :class:`InvariantViolation` unless every invariant holds."""
        problems = envelope_violations(self)
        if problems:
            raise InvariantViolation("; ".join(problems))


def _valid_url(text: str) -> bool:
    try:
        parts = urlsplit(text)
    except ValueError:
        return False
    return bool(parts.scheme and parts.netloc) and _xml.is_xml_text(text)


def _valid_timestamp(text: str) -> bool:
    if not _TIMESTAMP_RE.match(text):
        return False
    try:
        datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ")
    except ValueError:
        return False
    return True


def envelope_violations(e: Envelope) -> list[str]:
    problems = []
    if not isinstance(e.message_id, str) or not _UUID_RE.match(e.message_id):
        problems.append("message_id is not a lowercase UUID")
    if not isinstance(e.correlation_id, str) or not _UUID_RE.match(e.correlation_id):
        problems.append("correlation_id is not a lowercase UUID")
    if not isinstance(e.service, str) or not SERVICE_RE.match(e.service):
        problems.append(f"service {e.service!r} violates the name grammar")
    if not isinstance(e.operation, str) or not OPERATION_RE.match(e.operation):
        problems.append(f"operation {e.operation!r} violates the name grammar")
    if not isinstance(e.timestamp, str) or not _valid_timestamp(e.timestamp):
        problems.append(f"timestamp {e.timestamp!r} is not RFC 3339 UTC seconds")
    if e.reply_to is not None and not _valid_url(e.reply_to):
        problems.append(f"reply_to {e.reply_to!r} is not an absolute URL")
    if isinstance(e.body, Fault):
        for name in ("reason", "detail"):
            value = getattr(e.body, name)
            if value is not None and (not isinstance(value, str) or not _xml.is_xml_text(value)):
                problems.append(f"fault {name} contains characters XML cannot carry")
    elif not isinstance(e.body, Content):
        problems.append("body must be Content or Fault")
    return problems


def new_message_id() -> str:
    return str(uuid.uuid4())


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def new_request(service: str, operation: str, body: Union[str, Payload],
                reply_to: Optional[str] = None) -> Envelope:
    """Build a fresh request whose correlation id is its own message id."""
    if not isinstance(service, str) or not SERVICE_RE.match(service):
        raise InvalidName(f"invalid service name {service!r}")
    if not isinstance(operation, str) or not OPERATION_RE.match(operation):
        raise InvalidName(f"invalid operation name {operation!r}")
    if isinstance(body, str):
        body = Content(body)
    message_id = new_message_id()
    e = Envelope(message_id, message_id, service, operation, utc_now(), body, reply_to)
    e.check()
    return e


def new_reply(request: Envelope, body: Payload) -> Envelope:
    request.check()
    if isinstance(body, str):
        body = Content(body)
    return Envelope(new_message_id(), request.message_id, request.service,
                    request.operation, utc_now(), body)


def fault_xml(fault: Fault) -> str:
    inner = _xml.element("Code", fault.code.value) + _xml.element("Reason", fault.reason)
    if fault.detail is not None:
        inner += _xml.element("Detail", fault.detail)
    return _xml.element("Fault", children=inner)


def envelope_xml(e: Envelope, xmlns: bool = True) -> str:
    """Serialized ``<Envelope>`` element without the XML declaration."""
    e.check()
    header = [
        _xml.element("MessageId", e.message_id),
        _xml.element("CorrelationId", e.correlation_id),
        _xml.element("Service", e.service),
        _xml.element("Operation", e.operation),
        _xml.element("Timestamp", e.timestamp),
    ]
    if e.reply_to is not None:
        header.append(_xml.element("ReplyTo", e.reply_to))
    body = fault_xml(e.body) if isinstance(e.body, Fault) else e.body.xml
    return _xml.element(
        "Envelope",
        xmlns=NAMESPACE if xmlns else None,
        children=_xml.element("Header", children="".join(header))
        + f"<Body>{body}</Body>",
    )


def serialize(e: Envelope) -> bytes:
    return (_xml.DECLARATION + envelope_xml(e)).encode("utf-8")


def parse(data: bytes) -> Envelope:
    """Parse wire bytes, rejecting anything outside the canonical grammar."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from None
    return from_element(root)


def _structure(el: ET.Element, name: str) -> list[ET.Element]:
    try:
        return _xml.child_elements(el)
    except ValueError as exc:
        raise BadFieldSyntax(name, str(exc)) from None


def from_element(root: ET.Element) -> Envelope:
    """Decode an already-parsed ``<Envelope>`` element."""
    ns, local = _xml.split_tag(root.tag)
    if ns != NAMESPACE:
        raise UnknownNamespace(ns)
    if local != "Envelope":
        raise MalformedXml(f"root element is {local!r}, expected 'Envelope'")
    if root.attrib:
        raise BadFieldSyntax("Envelope", "attributes are not allowed")
    parts = _structure(root, "Envelope")
    names = [_local(p) for p in parts]
    if "Header" not in names:
        raise MissingHeaderField("Header")
    if names != ["Header", "Body"]:
        raise BadFieldSyntax("Envelope", f"children {names}, expected Header then Body")
    header, body = parts
    fields = _parse_header(header)
    e = Envelope(
        message_id=fields["MessageId"],
        correlation_id=fields["CorrelationId"],
        service=fields["Service"],
        operation=fields["Operation"],
        timestamp=fields["Timestamp"],
        reply_to=fields.get("ReplyTo"),
        body=_parse_body(body),
    )
    for problem, name in (
        (not _UUID_RE.match(e.message_id), "MessageId"),
        (not _UUID_RE.match(e.correlation_id), "CorrelationId"),
        (not SERVICE_RE.match(e.service), "Service"),
        (not OPERATION_RE.match(e.operation), "Operation"),
        (not _valid_timestamp(e.timestamp), "Timestamp"),
        (e.reply_to is not None and not _valid_url(e.reply_to), "ReplyTo"),
    ):
        if problem:
            raise BadFieldSyntax(name)
    return e


def _local(el: ET.Element) -> str:
    ns, local = _xml.split_tag(el.tag)
    if ns != NAMESPACE:
        raise UnknownNamespace(ns)
    return local


def _parse_header(header: ET.Element) -> dict[str, str]:
    if header.attrib:
        raise BadFieldSyntax("Header", "attributes are not allowed")
    kids = _structure(header, "Header")
    names = [_local(k) for k in kids]
    for name in names:
        if name not in HEADER_FIELDS:
            raise BadFieldSyntax("Header", f"unknown element {name!r}")
    if len(set(names)) != len(names):
        raise BadFieldSyntax("Header", "duplicate element")
    for name in HEADER_FIELDS[:-1]:
        if name not in names:
            raise MissingHeaderField(name)
    if names != [n for n in HEADER_FIELDS if n in names]:
        raise BadFieldSyntax("Header", "elements out of order")
    fields = {}
    for name, kid in zip(names, kids):
        try:
            fields[name] = _xml.leaf_text(kid)
        except ValueError:
            raise BadFieldSyntax(name) from None
    return fields


def _parse_body(body: ET.Element) -> Payload:
    if body.attrib:
        raise BadFieldSyntax("Body", "attributes are not allowed")
    kids = _structure(body, "Body")
    if len(kids) != 1:
        raise BadFieldSyntax("Body", f"expected one payload element, found {len(kids)}")
    (payload,) = kids
    if payload.tag == f"{{{NAMESPACE}}}Fault":
        return fault_from_element(payload)
    try:
        return Content(_xml.write_tree(payload, strip_ns=NAMESPACE))
    except (ValueError, MalformedBody) as exc:
        raise BadFieldSyntax("Body", str(exc)) from None


def fault_from_element(el: ET.Element) -> Fault:
    if el.attrib:
        raise BadFieldSyntax("Fault", "attributes are not allowed")
    kids = _structure(el, "Fault")
    names = [_local(k) for k in kids]
    if names not in (["Code", "Reason"], ["Code", "Reason", "Detail"]):
        raise BadFieldSyntax("Fault", f"children {names}, expected Code, Reason[, Detail]")
    try:
        texts = [_xml.leaf_text(k) for k in kids]
    except ValueError as exc:
        raise BadFieldSyntax("Fault", str(exc)) from None
    try:
        code = FaultCode(texts[0])
    except ValueError:
        raise BadFieldSyntax("Code", f"unknown fault code {texts[0]!r}") from None
    return Fault(code, texts[1], texts[2] if len(texts) == 3 else None)


def with_correlation(e: Envelope, correlation_id: str) -> Envelope:
    return dataclasses.replace(e, correlation_id=correlation_id)
