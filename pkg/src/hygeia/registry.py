"""Service repository: versioned contracts bound to endpoints.

Discovery reads an immutable snapshot, so any number of threads may call
:meth:`Registry.discover` while another registers; mutations and saves are
serialized behind one lock.
"""

from __future__ import annotations

import logging
import os
import re
import tempfile
import threading
import uuid
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Iterable, Optional
from urllib.parse import urlsplit

from hygeia import _xml
from hygeia.envelope import OPERATION_RE, SERVICE_RE, utc_now
from hygeia.errors import CorruptStore, HygeiaError

logger = logging.getLogger(__name__)

NAMESPACE = "urn:hygeia:registry:1"

_VERSION_RE = re.compile(r"(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)\Z")
_SCHEME_RE = re.compile(r"[a-z][a-z0-9+.-]*\Z")


class InvalidContract(HygeiaError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class InvalidEndpoint(HygeiaError):
    pass


def parse_version(text: str) -> tuple[int, int, int]:
    m = _VERSION_RE.match(text) if isinstance(text, str) else None
    if not m:
        raise ValueError(f"{text!r} is not a major.minor.patch version")
    return int(m[1]), int(m[2]), int(m[3])


def version_satisfies(version: str, minimum: Optional[str]) -> bool:
    """Same major component and not older than ``minimum``."""
    if minimum is None:
        return True
    have, want = parse_version(version), parse_version(minimum)
    return have[0] == want[0] and have >= want


@dataclass(frozen=True)
class OperationSpec:
    name: str
    input_root: str
    output_root: str


@dataclass(frozen=True)
class ServiceContract:
    name: str
    version: str
    operations: tuple[OperationSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "operations", tuple(self.operations))

    def operation(self, name: str) -> Optional[OperationSpec]:
        for op in self.operations:
            if op.name == name:
                return op
        return None


@dataclass(frozen=True)
class RegistryEntry:
    registration_id: str
    contract: ServiceContract
    endpoint: str
    registered_at: str
    sequence: int


def validate_contract(c: ServiceContract) -> list[str]:
    """Return a list of violations; an empty list means the contract is valid."""
    violations = []
    if not isinstance(c.name, str) or not SERVICE_RE.match(c.name):
        violations.append(f"name: {c.name!r} violates the contract name grammar")
    try:
        parse_version(c.version)
    except ValueError:
        violations.append(f"version: {c.version!r} is not major.minor.patch")
    if not c.operations:
        violations.append("operations: a contract needs at least one operation")
    seen = set()
    for op in c.operations:
        for attr in ("name", "input_root", "output_root"):
            value = getattr(op, attr)
            if not isinstance(value, str) or not OPERATION_RE.match(value):
                violations.append(f"operations[{op.name}].{attr}: {value!r} violates the name grammar")
        if op.name in seen:
            violations.append(f"operations[{op.name}]: duplicate operation name")
        seen.add(op.name)
    return violations


def check_endpoint(endpoint: str) -> None:
    try:
        parts = urlsplit(endpoint)
        port = parts.port
    except (ValueError, TypeError):
        raise InvalidEndpoint(f"{endpoint!r} is not a URL") from None
    if not _SCHEME_RE.match(parts.scheme) or not parts.hostname or port is None:
        raise InvalidEndpoint(f"{endpoint!r} must be an absolute URL with host and port")
    if parts.query or parts.fragment or not _xml.is_xml_text(endpoint):
        raise InvalidEndpoint(f"{endpoint!r} may not carry a query or fragment")


# -- XML forms ---------------------------------------------------------------

def contract_xml(c: ServiceContract, xmlns: bool = False) -> str:
    ops = "".join(
        _xml.element("Operation", attrs={"name": op.name, "input": op.input_root,
                                         "output": op.output_root})
        for op in c.operations
    )
    return _xml.element("Contract", attrs={"name": c.name, "version": c.version},
                        children=ops, xmlns=NAMESPACE if xmlns else None)


def contract_from_element(el: ET.Element) -> ServiceContract:
    """Decode a ``<Contract>`` element; raises ``ValueError`` on bad structure.

    The result is not validated; pass it to :func:`validate_contract`.
    """
    if _xml.split_tag(el.tag)[1] != "Contract":
        raise ValueError(f"expected Contract, found {el.tag!r}")
    ops = []
    for kid in _xml.child_elements(el):
        if _xml.split_tag(kid.tag)[1] != "Operation":
            raise ValueError(f"unexpected element {kid.tag!r} in Contract")
        try:
            ops.append(OperationSpec(kid.attrib["name"], kid.attrib["input"], kid.attrib["output"]))
        except KeyError as exc:
            raise ValueError(f"Operation is missing attribute {exc}") from None
    try:
        return ServiceContract(el.attrib["name"], el.attrib["version"], tuple(ops))
    except KeyError as exc:
        raise ValueError(f"Contract is missing attribute {exc}") from None


def parse_contract(data: bytes) -> ServiceContract:
    """Parse a standalone contract document."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ValueError(f"malformed contract document: {exc}") from None
    return contract_from_element(root)


def entry_xml(entry: RegistryEntry) -> str:
    return _xml.element(
        "Entry",
        attrs={"id": entry.registration_id, "sequence": entry.sequence,
               "registeredAt": entry.registered_at},
        children=contract_xml(entry.contract) + _xml.element("Endpoint", entry.endpoint),
    )


def entry_from_element(el: ET.Element) -> RegistryEntry:
    if _xml.split_tag(el.tag)[1] != "Entry":
        raise ValueError(f"expected Entry, found {el.tag!r}")
    kids = _xml.child_elements(el)
    if [_xml.split_tag(k.tag)[1] for k in kids] != ["Contract", "Endpoint"]:
        raise ValueError("Entry must contain Contract then Endpoint")
    try:
        seq = int(el.attrib["sequence"])
        return RegistryEntry(el.attrib["id"], contract_from_element(kids[0]),
                             _xml.leaf_text(kids[1]), el.attrib["registeredAt"], seq)
    except KeyError as exc:
        raise ValueError(f"Entry is missing attribute {exc}") from None


def services_xml(entries: Iterable[RegistryEntry]) -> bytes:
    body = "".join(entry_xml(e) for e in entries)
    return (_xml.DECLARATION + _xml.element("Services", children=body, xmlns=NAMESPACE)).encode()


def parse_services(data: bytes) -> list[RegistryEntry]:
    root = ET.fromstring(data)
    return [entry_from_element(el) for el in _xml.child_elements(root)]


# -- the registry ------------------------------------------------------------

class Registry:
    def __init__(self):
        self._lock = threading.Lock()
        self._entries: tuple[RegistryEntry, ...] = ()
        self._next_sequence = 1

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> tuple[RegistryEntry, ...]:
        return self._entries

    def register(self, contract: ServiceContract, endpoint: str) -> RegistryEntry:
        violations = validate_contract(contract)
        if violations:
            raise InvalidContract(violations)
        check_endpoint(endpoint)
        with self._lock:
            entry = RegistryEntry(str(uuid.uuid4()), contract, endpoint, utc_now(),
                                  self._next_sequence)
            self._next_sequence += 1
            key = (contract.name, contract.version, endpoint)
            kept = tuple(e for e in self._entries
                         if (e.contract.name, e.contract.version, e.endpoint) != key)
            if len(kept) != len(self._entries):
                logger.info("replacing registration of %s %s at %s", *key)
            self._entries = kept + (entry,)
        return entry

    def deregister(self, registration_id: str) -> bool:
        with self._lock:
            kept = tuple(e for e in self._entries if e.registration_id != registration_id)
            removed = len(kept) != len(self._entries)
            self._entries = kept
        return removed

    def discover(self, name: str, min_version: Optional[str] = None) -> list[RegistryEntry]:
        if min_version is not None:
            parse_version(min_version)
        return [e for e in self._entries
                if e.contract.name == name and version_satisfies(e.contract.version, min_version)]

    def to_xml(self) -> bytes:
        with self._lock:
            return self._to_xml_locked()

    def save(self, path) -> None:
        """Write the store atomically (temp file then rename)."""
        with self._lock:
            data = self._to_xml_locked()
            directory = os.path.dirname(os.path.abspath(path))
            fd, tmp = tempfile.mkstemp(dir=directory, prefix=".registry-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise

    def _to_xml_locked(self) -> bytes:
        body = "".join(entry_xml(e) for e in self._entries)
        doc = _xml.element("Registry", attrs={"nextSequence": self._next_sequence},
                           children=body, xmlns=NAMESPACE)
        return (_xml.DECLARATION + doc).encode("utf-8")

    @classmethod
    def load(cls, path) -> "Registry":
        """Read a store written by :meth:`save`. A missing file is an empty registry."""
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except FileNotFoundError:
            return cls()
        return cls.from_xml(data)

    @classmethod
    def from_xml(cls, data: bytes) -> "Registry":
        try:
            root = ET.fromstring(data)
        except ET.ParseError as exc:
            raise CorruptStore(f"registry store is not well-formed: {exc}",
                               getattr(exc, "position", None)) from None
        if root.tag != f"{{{NAMESPACE}}}Registry":
            raise CorruptStore(f"unexpected root element {root.tag!r}")
        try:
            next_seq = int(root.attrib["nextSequence"])
            entries = [entry_from_element(el) for el in _xml.child_elements(root)]
        except (KeyError, ValueError) as exc:
            raise CorruptStore(f"registry store is damaged: {exc}") from None
        last = 0
        for e in entries:
            violations = validate_contract(e.contract)
            if violations:
                raise CorruptStore(f"entry {e.registration_id}: {'; '.join(violations)}")
            if not last < e.sequence < next_seq:
                raise CorruptStore(f"entry {e.registration_id}: sequence {e.sequence} out of order")
            last = e.sequence
        reg = cls()
        reg._entries = tuple(entries)
        reg._next_sequence = next_seq
        return reg
