#!/usr/bin/env python3
"""
Oracle API

HTTP front for an OracleSession. Every frame is one JSON document ending in
a newline; floats travel with 17 significant digits.

Endpoints:
- POST /query  - body {"x": [[...]]}, answer {"y": [[...]], "queries_used": n}
- GET  /stats  - queries used, budget, estimated cost, detector state
- GET  /health - liveness plus the victim's input shape and class count
"""

import logging
import sys
import threading
from pathlib import Path
from typing import Tuple

from flask import Flask, Response, jsonify, request
from werkzeug.serving import BaseWSGIServer, make_server

# Ensure the parent directory is on sys.path when running this file directly
PARENT_DIR = Path(__file__).resolve().parents[1]
if str(PARENT_DIR) not in sys.path:
    sys.path.append(str(PARENT_DIR))

from src.config import Config
from src.errors import BudgetExhaustedError, DimensionError, OracleProtocolError
from src.oracle import OracleSession, decode_request, encode_error, encode_response

logger = logging.getLogger(__name__)

SERVICE_NAME = "es-oracle"
SERVICE_VERSION = "1.0.0"


def _frame(body: bytes, status: int = 200) -> Response:
    return Response(body, status=status, mimetype="application/json")


def create_app(session: OracleSession) -> Flask:
    app = Flask(__name__)

    @app.route(f"/{Config.HEALTH_ENDPOINT}", methods=["GET"])
    def health_check():
        """Health check endpoint"""
        return jsonify({
            "status": "healthy",
            "service": SERVICE_NAME,
            "version": SERVICE_VERSION,
            "input_shape": list(session.input_shape),
            "class_count": session.class_count,
        })

    @app.route(f"/{Config.STATS_ENDPOINT}", methods=["GET"])
    def stats():
        return jsonify(session.stats())

    @app.route(f"/{Config.QUERY_ENDPOINT}", methods=["POST"])
    def query():
        try:
            x = decode_request(request.get_data())
            y, used = session.answer(x)
        except OracleProtocolError as e:
            logger.warning("Malformed query frame: %s", e)
            return _frame(encode_error(e.code), 400)
        except DimensionError as e:
            logger.warning("Query with wrong shape: %s", e)
            return _frame(encode_error("bad_shape"), 400)
        except BudgetExhaustedError as e:
            logger.warning("%s", e)
            return _frame(encode_error("budget_exhausted"), 402)
        return _frame(encode_response(y, used))

    @app.errorhandler(404)
    def not_found(error):
        return _frame(encode_error("not_found"), 404)

    @app.errorhandler(405)
    def method_not_allowed(error):
        return _frame(encode_error("bad_request"), 405)

    @app.errorhandler(500)
    def internal_error(error):
        logger.error("Internal error: %s", error)
        return _frame(encode_error("internal"), 500)

    return app


def serve(session: OracleSession, host: str = Config.ORACLE_HOST, port: int = Config.ORACLE_PORT) -> None:
    """Blocking threaded server; returns on Ctrl-C."""
    server = make_server(host, port, create_app(session), threaded=True)
    logger.info("🚀 Oracle serving on http://%s:%d (defense: %s, budget: %s)",
                host, server.server_port, session.defense.describe(), session.budget)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("Oracle stopped after %d queries", session.query_count)
    finally:
        server.server_close()


def start_background(
    session: OracleSession, host: str = "127.0.0.1", port: int = 0
) -> Tuple[BaseWSGIServer, threading.Thread]:
    """Serve on a daemon thread; port 0 picks a free port (see server.server_port)."""
    server = make_server(host, port, create_app(session), threaded=True)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    logger.info("Oracle listening on http://%s:%d", host, server.server_port)
    return server, thread


if __name__ == "__main__":
    from src.models import load_checkpoint

    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout), logging.FileHandler("oracle_api.log")],
    )
    if len(sys.argv) != 2:
        logger.error("usage: python api/oracle_api.py <victim.ckpt>")
        sys.exit(1)
    serve(OracleSession(load_checkpoint(sys.argv[1])))
