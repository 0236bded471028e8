"""JSON-lines run transcripts.

Line types: ``header`` first, then ``event`` and ``observe`` in delivery
order, then ``seal`` and ``accept`` from the provenance ledger, and a final
``outcome``. Every line is serialised with sorted keys, so identical runs give
identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from src.protocol.errors import MalformedTranscript
from src.sim.terms import AcceptRecord, AttackerKnowledge, ProvenanceLedger, term_from_json, term_to_json

TRANSCRIPT_VERSION = 1
LINE_TYPES = ("header", "event", "observe", "seal", "accept", "outcome")


def dumps_line(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def ledger_lines(ledger: ProvenanceLedger) -> list[dict]:
    lines = [
        {"type": "seal", "digest": r.digest, "sealer": r.sealer, "term": term_to_json(r.term)}
        for r in ledger.order
    ]
    lines += [
        {"type": "accept", "acceptor": a.acceptor, "what": a.what, "digest": a.digest, "presenter": a.presenter}
        for a in ledger.accepts
    ]
    return lines


def render(header: dict, body: list[dict], outcome: dict) -> bytes:
    lines = [{"type": "header", "version": TRANSCRIPT_VERSION, **header}, *body, {"type": "outcome", **outcome}]
    return ("\n".join(dumps_line(line) for line in lines) + "\n").encode("utf-8")


def write_transcript(path: Path, data: bytes) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


@dataclass
class Transcript:
    header: dict
    events: list[dict] = field(default_factory=list)
    observes: list[dict] = field(default_factory=list)
    seals: list[dict] = field(default_factory=list)
    accepts: list[dict] = field(default_factory=list)
    outcome: dict | None = None

    def knowledge(self) -> AttackerKnowledge:
        k = AttackerKnowledge()
        for line in self.observes:
            k.update(term_from_json(t) for t in line["terms"])
        return k

    def sealers(self) -> dict[str, str]:
        return {line["digest"]: line["sealer"] for line in self.seals}

    def accept_records(self) -> list[AcceptRecord]:
        return [AcceptRecord(a["acceptor"], a["what"], a["digest"], a["presenter"]) for a in self.accepts]

    def secrets(self) -> list[tuple[str, str]]:
        return [(s["label"], s["ref"]) for s in self.header.get("secrets", [])]


def read_transcript(path: Path) -> Transcript:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedTranscript(f"cannot read {path}") from exc
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows:
        raise MalformedTranscript("empty transcript")
    transcript: Transcript | None = None
    for number, row in enumerate(rows, start=1):
        try:
            doc = json.loads(row)
        except json.JSONDecodeError as exc:
            raise MalformedTranscript(f"line {number}: not JSON") from exc
        kind = doc.get("type") if isinstance(doc, dict) else None
        if kind not in LINE_TYPES:
            raise MalformedTranscript(f"line {number}: unknown line type {kind!r}")
        if transcript is None:
            if kind != "header" or doc.get("version") != TRANSCRIPT_VERSION:
                raise MalformedTranscript("first line must be a supported header")
            transcript = Transcript(header=doc)
            continue
        if transcript.outcome is not None:
            raise MalformedTranscript(f"line {number}: content after the outcome")
        try:
            if kind == "event":
                transcript.events.append(doc)
            elif kind == "observe":
                for term in doc["terms"]:
                    term_from_json(term)
                transcript.observes.append(doc)
            elif kind == "seal":
                term_from_json(doc["term"])
                transcript.seals.append({"digest": doc["digest"], "sealer": doc["sealer"]})
            elif kind == "accept":
                transcript.accepts.append({k: doc[k] for k in ("acceptor", "what", "digest", "presenter")})
            elif kind == "outcome":
                transcript.outcome = doc
            else:
                raise MalformedTranscript(f"line {number}: second header")
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTranscript(f"line {number}: bad {kind} line") from exc
    if transcript.outcome is None:
        raise MalformedTranscript("transcript ends without an outcome line")
    return transcript
