"""Payload-side access to the task API.

Connected mode is used when SPADA_TASK_API is set; otherwise the module
runs standalone, returning seeded random signal values (SPADA_DUMMY_SEED)
and printing side effects.
"""

import base64
import json
import os
import random
import socket

_API = os.environ.get("SPADA_TASK_API")
_conn = None
_next_id = 0
_dummy_rng = random.Random(os.environ.get("SPADA_DUMMY_SEED"))
_dummy_state = None
_params_loaded = False
_params = None


class TaskApiError(Exception):
    def __init__(self, code, msg):
        super().__init__(f"{code}: {msg}")
        self.code = code


def _encode(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _call(method, **params):
    global _conn, _next_id
    if _conn is None:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.connect(_API)
        _conn = (sock, sock.makefile("rb"))
    _next_id += 1
    line = _encode({"id": _next_id, "method": method, "params": params}) + "\n"
    _conn[0].sendall(line.encode("utf-8"))
    reply = _conn[1].readline()
    if not reply:
        raise ConnectionError("task API closed the connection")
    msg = json.loads(reply)
    if "err" in msg:
        raise TaskApiError(msg["err"]["code"], msg["err"]["msg"])
    return msg["ok"]


def _load_parameters():
    global _params_loaded, _params
    if not _params_loaded:
        if _API:
            try:
                _params = _call("get_parameters")["value"]
            except TaskApiError as e:
                if e.code != "no-parameters":
                    raise
                _params = None
        else:
            path = os.environ.get("SPADA_PARAMETERS")
            if path:
                with open(path) as f:
                    _params = json.load(f)
        _params_loaded = True
    return _params


def __getattr__(name):
    if name == "parameters":
        return _load_parameters()
    raise AttributeError(name)


def publish(value):
    if _API:
        return _call("publish", value=value)["seq"]
    print("publish:", _encode(value), flush=True)
    return None


def next_signal(name, timeout_ms=None):
    if _API:
        params = {"name": name}
        if timeout_ms is not None:
            params["timeout_ms"] = int(timeout_ms)
        return _call("next_signal", **params)["value"]
    return _dummy_rng.random()


def get_signal(name):
    if _API:
        return _call("get_signal", name=name)["value"]
    return _dummy_rng.random()


def put_state(blob):
    global _dummy_state
    if _API:
        _call("put_state", data=base64.b64encode(bytes(blob)).decode("ascii"))
    else:
        _dummy_state = bytes(blob)
        print("put_state:", len(_dummy_state), "bytes", flush=True)


def get_state():
    if _API:
        data = _call("get_state")["data"]
        return None if data is None else base64.b64decode(data)
    return _dummy_state
