"""Small XML helpers: canonical escaping and element writing.

Everything written by this package goes through ``escape`` so that the byte
form of a document is a pure function of its value. Only the five predefined
entities are ever produced.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET

DECLARATION = '<?xml version="1.0" encoding="UTF-8"?>\n'

_ESCAPES = {"&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;", "'": "&apos;"}
_ESCAPE_RE = re.compile(r"""[&<>"']""")

# XML 1.0 Char production minus CR, which parsers normalize away.
_INVALID_CHARS = re.compile("[^\t\n\x20-\ud7ff\ue000-\ufffd\U00010000-\U0010ffff]")


def escape(text: str) -> str:
    return _ESCAPE_RE.sub(lambda m: _ESCAPES[m.group()], text)


def is_xml_text(text: str) -> bool:
    """True if ``text`` survives an XML write/parse cycle unchanged."""
    return _INVALID_CHARS.search(text) is None


def split_tag(tag: str) -> tuple[str, str]:
    """Split an ElementTree ``{ns}local`` tag into ``(ns, local)``."""
    if tag.startswith("{"):
        ns, _, local = tag[1:].partition("}")
        return ns, local
    return "", tag


def element(tag: str, text: str | None = None, attrs: dict | None = None,
            children: str = "", xmlns: str | None = None) -> str:
    """Write one element. ``children`` is already-serialized inner markup."""
    parts = ["<", tag]
    if xmlns is not None:
        parts.append(f' xmlns="{escape(xmlns)}"')
    for key, value in (attrs or {}).items():
        parts.append(f' {key}="{escape(str(value))}"')
    inner = (escape(text) if text else "") + children
    if inner:
        parts.append(f">{inner}</{tag}>")
    else:
        parts.append("/>")
    return "".join(parts)


def write_tree(el: ET.Element, strip_ns: str = "") -> str:
    """Canonical text of an ElementTree element, ignoring its tail.

    Tags in namespace ``strip_ns`` are written unqualified; any other
    namespace raises ``ValueError`` because the canonical form has no way to
    declare it.
    """
    ns, local = split_tag(el.tag)
    if not isinstance(el.tag, str):
        raise ValueError("comments and processing instructions are not allowed")
    if ns and ns != strip_ns:
        raise ValueError(f"element {local!r} uses foreign namespace {ns!r}")
    attrs = {}
    for key, value in el.attrib.items():
        if key.startswith("{"):
            raise ValueError(f"namespaced attribute {key!r} on {local!r}")
        attrs[key] = value
    inner = []
    for child in el:
        inner.append(write_tree(child, strip_ns))
        if child.tail:
            inner.append(escape(child.tail))
    return element(local, el.text, attrs, "".join(inner))


def child_elements(el: ET.Element) -> list[ET.Element]:
    """Children of ``el``, rejecting stray non-whitespace text between them."""
    if el.text and el.text.strip():
        raise ValueError(f"unexpected text in {split_tag(el.tag)[1]}")
    kids = list(el)
    for kid in kids:
        if kid.tail and kid.tail.strip():
            raise ValueError(f"unexpected text in {split_tag(el.tag)[1]}")
    return kids


def leaf_text(el: ET.Element) -> str:
    """Text of a leaf element; raises ``ValueError`` if it has children/attrs."""
    if len(el) or el.attrib:
        raise ValueError(f"{split_tag(el.tag)[1]} must be a simple text element")
    return el.text or ""
