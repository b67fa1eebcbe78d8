"""Bit-exact, byte-stable json checkpoint container."""

import base64
import json

import numpy as np

from .optim import Parameter

FORMAT = "seqtta-checkpoint"
VERSION = 1


def _encode(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return base64.b64encode(a.tobytes()).decode("ascii")


def _decode(s, shape):
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


def dump_params(params, meta=None):
    """Serialize a ``name -> Parameter`` dict (plus json metadata) to a string."""
    body = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "params": {}}
    for name in sorted(params):
        p = params[name]
        body["params"][name] = {
            "shape": list(p.shape),
            "step_count": int(p.step_count),
            "frozen_rows": [int(r) for r in p.frozen_rows],
            "value": _encode(p.value),
            "m1": _encode(p.m1),
            "m2": _encode(p.m2),
        }
    return json.dumps(body, sort_keys=True, indent=1)


def load_params(text):
    body = json.loads(text)
    if body.get("format") != FORMAT:
        raise ValueError("not a seqtta checkpoint")
    if body.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {body.get('version')}")
    params = {}
    for name, rec in body["params"].items():
        shape = tuple(rec["shape"])
        params[name] = Parameter(
            _decode(rec["value"], shape), None,
            _decode(rec["m1"], shape), _decode(rec["m2"], shape),
            rec["step_count"], tuple(rec["frozen_rows"]))
    return params, body["meta"]


def save_checkpoint(path, params, meta=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_params(params, meta))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return load_params(fh.read())
