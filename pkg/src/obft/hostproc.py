"""Standalone host-zone server: python -m obft.hostproc --port 0 --auth-hex <hex>

Speaks the framed protocol from wire.py on a localhost TCP socket. Prints
"PORT <n>" on stdout once listening. Serves connections sequentially; each
connection must HELLO (version check) and AUTH before uploading tensors or
computing. Protocol violations are answered with an ERROR frame and the
connection is closed; the server keeps accepting.
"""

from __future__ import annotations

import argparse
import hmac
import socket

from . import wire
from .errors import ProtocolError
from .zones import HostZone


class _Session:
    def __init__(self, expected_token: bytes):
        self.expected_token = expected_token
        self.precision = None
        self.authed = False
        self.weights = {}
        self.dims = None
        self.host = None
        self.call_payload = {}

    def ensure_host(self):
        if self.host is None:
            if self.dims is None:
                raise ProtocolError("COMPUTE before the __dims__ tensor was uploaded")
            self.host = HostZone(self.dims, self.weights)
        return self.host


def _dims_from_vector(vec) -> dict:
    if vec.size != 6:
        raise ProtocolError("__dims__ tensor must have 6 entries")
    names = ("n_layer", "n_head", "d_model", "d_ff", "lora_rank", "lora_scaling")
    return dict(zip(names, (float(x) for x in vec)))


def serve_connection(conn: socket.socket, expected_token: bytes):
    stream = conn.makefile("rwb")

    def send(msg_type, payload=b""):
        stream.write(wire.pack_frame(msg_type, payload))
        stream.flush()

    session = _Session(expected_token)
    try:
        while True:
            try:
                msg_type, payload = wire.read_frame(stream)
            except ProtocolError as exc:
                if str(exc) != "connection closed":
                    try:
                        send(wire.MSG_ERROR, wire.encode_error(wire.ERR_MALFORMED_FRAME, str(exc)))
                    except OSError:
                        pass
                return

            if msg_type == wire.MSG_HELLO:
                version, precision = wire.decode_hello(payload)
                if version != wire.PROTOCOL_VERSION:
                    send(wire.MSG_ERROR, wire.encode_error(
                        wire.ERR_VERSION, f"protocol version {version} not supported"))
                    return
                session.precision = precision
            elif msg_type == wire.MSG_AUTH:
                token = wire.decode_auth(payload)
                if session.precision is None or not hmac.compare_digest(token, session.expected_token):
                    send(wire.MSG_ERROR, wire.encode_error(wire.ERR_AUTH, "authentication failed"))
                    return
                session.authed = True
            elif msg_type == wire.MSG_TENSOR:
                if not session.authed:
                    send(wire.MSG_ERROR, wire.encode_error(wire.ERR_AUTH, "not authenticated"))
                    return
                ident, arr = wire.decode_tensor(payload, session.precision)
                if ident == "__dims__":
                    session.dims = _dims_from_vector(arr)
                elif ident.startswith("w."):
                    session.weights[ident[2:]] = arr
                elif ident.startswith("call."):
                    session.call_payload[ident[5:]] = arr
                else:
                    send(wire.MSG_ERROR, wire.encode_error(
                        wire.ERR_MALFORMED_FRAME, f"unknown tensor namespace {ident!r}"))
                    return
            elif msg_type == wire.MSG_COMPUTE:
                if not session.authed:
                    send(wire.MSG_ERROR, wire.encode_error(wire.ERR_AUTH, "not authenticated"))
                    return
                op_code, block = wire.decode_compute(payload)
                op = {wire.OP_ATTENTION: "attention", wire.OP_MLP: "mlp"}.get(op_code)
                if op is None:
                    send(wire.MSG_ERROR, wire.encode_error(
                        wire.ERR_COMPUTE, f"unknown op code {op_code:#x}"))
                    return
                try:
                    host = session.ensure_host()
                    result = host.compute(op, block, session.call_payload)
                except Exception as exc:
                    send(wire.MSG_ERROR, wire.encode_error(wire.ERR_COMPUTE, str(exc)))
                    return
                finally:
                    session.call_payload = {}
                send(wire.MSG_RESULT, wire.encode_tensor("y", result, session.precision))
            elif msg_type == wire.MSG_BYE:
                return
            else:
                send(wire.MSG_ERROR, wire.encode_error(
                    wire.ERR_UNKNOWN_MESSAGE, f"unknown message type {msg_type:#x}"))
                return
    except (OSError, ProtocolError):
        return
    finally:
        try:
            stream.close()
            conn.close()
        except OSError:
            pass


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="obft-hostproc", description=__doc__)
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--auth-hex", required=True, help="expected session token, hex-encoded")
    parser.add_argument("--once", action="store_true", help="serve a single connection, then exit")
    args = parser.parse_args(argv)

    expected = bytes.fromhex(args.auth_hex)
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((args.host, args.port))
    server.listen(4)
    print(f"PORT {server.getsockname()[1]}", flush=True)

    try:
        while True:
            conn, _ = server.accept()
            conn.settimeout(120.0)
            serve_connection(conn, expected)
            if args.once:
                return 0
    except KeyboardInterrupt:
        return 0
    finally:
        server.close()


if __name__ == "__main__":
    raise SystemExit(main())
