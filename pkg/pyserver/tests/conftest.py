import os
import socket
import sys
import threading

import pytest

from pyserver.model import StubModel
from pyserver.server import ServerConfig, make_server

# the engine's backend conformance checks run here unmodified
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "..", "tests"))


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="session")
def stub_server_url():
    cfg = ServerConfig(model="stub", port=free_port())
    server = make_server(StubModel(), cfg)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://{cfg.host}:{cfg.port}"
    server.shutdown()
    server.server_close()
