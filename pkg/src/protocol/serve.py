"""Verifier server over standard input/output, one JSON document per line.

Request:  ``{"now_ms": 1200, "message": {...encoded ProtocolMessage...}}``
Response: ``{"now_ms": 1200, "replies": [{...}, ...]}``

A request that is not valid JSON or carries a malformed message gets
``{"error": {"code": ..., "detail": ...}}`` and the loop keeps reading.
Sessions past their deadline are closed before each request is handled.

    python -m src.protocol.serve --seed 7 --store data/store
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import IO, Iterable

import structlog

from src.config import PWD_HASH_ITERATIONS, SESSION_DEADLINE_MS, STORE_DIR
from src.log import configure_logging
from src.protocol.biometric import EmbeddingStore
from src.protocol.crypto_core import SecretKey, SeededRandom, SystemRandom, gen_secret
from src.protocol.errors import MalformedMessage, ProtocolError
from src.protocol.messages import decode_message, encode_message
from src.protocol.server import ServerEndpoint, ServerSettings, VerifierServer
from src.protocol.store import ServerStore

logger = structlog.get_logger()


def build_endpoint(
    sk: SecretKey | None = None,
    seed: int | None = None,
    store_dir: Path | None = None,
    settings: ServerSettings | None = None,
) -> ServerEndpoint:
    rng = SystemRandom() if seed is None else SeededRandom(seed)
    if sk is None:
        sk = gen_secret(rng.fork("sk"))
    if store_dir is None:
        store = ServerStore()
        embeddings = EmbeddingStore(rng.fork("embeddings"))
    else:
        store = ServerStore.load(store_dir)
        embeddings = EmbeddingStore.load(rng.fork("embeddings"), Path(store_dir) / "embeddings")
    server = VerifierServer(
        sk,
        rng.fork("server"),
        settings=settings,
        store=store,
        embeddings=embeddings,
    )
    return ServerEndpoint(server)


def _error(code: str, detail: str) -> dict:
    return {"error": {"code": code, "detail": detail}}


def handle_line(endpoint: ServerEndpoint, line: str) -> dict:
    try:
        request = json.loads(line)
    except json.JSONDecodeError:
        return _error(MalformedMessage.code, "$: not JSON")
    if not isinstance(request, dict) or set(request) != {"now_ms", "message"}:
        return _error(MalformedMessage.code, "$: expected keys now_ms and message")
    now = request["now_ms"]
    if not isinstance(now, int) or isinstance(now, bool) or now < 0:
        return _error(MalformedMessage.code, "now_ms: must be a non-negative integer")
    try:
        msg = decode_message(json.dumps(request["message"]).encode("utf-8"))
    except ProtocolError as exc:
        return _error(exc.code, str(exc))
    endpoint.expire_sessions(now)
    replies = endpoint.handle(msg, now)
    return {"now_ms": now, "replies": [json.loads(encode_message(r)) for r in replies]}


def serve(endpoint: ServerEndpoint, lines: Iterable[str], out: IO[str]) -> int:
    count = 0
    for line in lines:
        if not line.strip():
            continue
        out.write(json.dumps(handle_line(endpoint, line), sort_keys=True, separators=(",", ":")) + "\n")
        out.flush()
        count += 1
    logger.info("serve_finished", requests=count)
    return count


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Verifier server over stdin/stdout")
    parser.add_argument("--seed", type=int, default=None, help="deterministic randomness (testing only)")
    parser.add_argument("--sk-hex", default=None, help="pre-shared app secret, 64 hex digits")
    parser.add_argument("--store", type=Path, default=None, help=f"store directory, e.g. {STORE_DIR}")
    parser.add_argument("--session-deadline-ms", type=int, default=SESSION_DEADLINE_MS)
    parser.add_argument("--pwd-hash-iterations", type=int, default=PWD_HASH_ITERATIONS)
    args = parser.parse_args(argv)
    configure_logging()

    sk = None
    if args.sk_hex:
        try:
            sk = SecretKey(bytes.fromhex(args.sk_hex))
        except ValueError:
            parser.error("--sk-hex must be 64 hex digits")
    settings = ServerSettings(
        session_deadline_ms=args.session_deadline_ms,
        pwd_hash_iterations=args.pwd_hash_iterations,
    )
    endpoint = build_endpoint(sk, args.seed, args.store, settings)
    serve(endpoint, sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
