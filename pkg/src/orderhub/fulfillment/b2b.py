"""B2B gateway envelope used for partner traffic and B2B channel orders."""

from __future__ import annotations

import base64
import binascii
import itertools
import xml.etree.ElementTree as ET
from dataclasses import dataclass

from ..errors import BadEnvelope

SIGNATURE_PLACEHOLDER = "UNSIGNED"

_ids = itertools.count(1)


@dataclass(frozen=True)
class B2BEnvelope:
    partner_id: str
    message_id: str
    ts: float
    body: bytes
    signature: str = SIGNATURE_PLACEHOLDER

    def to_bytes(self) -> bytes:
        el = ET.Element("envelope", partner_id=self.partner_id, message_id=self.message_id, ts=repr(self.ts))
        ET.SubElement(el, "signature").text = self.signature
        # base64 keeps the body bit-exact; XML text would normalize line endings
        ET.SubElement(el, "body", encoding="base64").text = base64.b64encode(self.body).decode("ascii")
        return ET.tostring(el, encoding="utf-8", xml_declaration=False)

    @classmethod
    def from_bytes(cls, data: bytes | str) -> "B2BEnvelope":
        try:
            el = ET.fromstring(data)
        except ET.ParseError as exc:
            raise BadEnvelope(f"not an envelope: {exc}") from None
        body = el.find("body")
        if el.tag != "envelope" or body is None:
            raise BadEnvelope("missing <envelope>/<body>")
        try:
            payload = base64.b64decode((body.text or "").encode("ascii"), validate=True)
            return cls(
                partner_id=el.attrib["partner_id"],
                message_id=el.attrib["message_id"],
                ts=float(el.attrib.get("ts", "0")),
                body=payload,
                signature=el.findtext("signature") or "",
            )
        except (KeyError, ValueError, binascii.Error) as exc:
            raise BadEnvelope(f"bad envelope field: {exc}") from None


def b2b_wrap(partner_id: str, body: bytes | str, message_id: str | None = None, ts: float = 0.0) -> B2BEnvelope:
    if isinstance(body, str):
        body = body.encode("utf-8")
    return B2BEnvelope(partner_id, message_id or f"B2B-{next(_ids)}", ts, bytes(body))


def b2b_unwrap(envelope: B2BEnvelope | bytes | str) -> bytes:
    if not isinstance(envelope, B2BEnvelope):
        envelope = B2BEnvelope.from_bytes(envelope)
    return envelope.body
