"""Plain-text interchange for externally computed states and prediction heads.

States file: JSON lines, one object per sentence::

    {"tokens": [ids or strings], "lang": "A", "states": [[f32, ...], ...]}

``lang`` may also be a per-token list. Head file: one JSON object with keys
``vocab``, ``unembedding`` and ``bias``, plus an optional ``transform``
holding a dense + LayerNorm block applied before the unembedding.

Floats are written as the shortest decimal that reproduces the 32-bit value,
read back as float32 and widened to float64.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import FormatError, NonFiniteEmbedding
from .toymlm import Head, HeadTransform, StateBundle, log_softmax


def _f32_row(row) -> str:
    return "[" + ",".join(str(np.float32(x)) for x in row) + "]"


def _f32_matrix(mat) -> str:
    return "[" + ",".join(_f32_row(r) for r in mat) + "]"


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteEmbedding(f"{what} contains non-finite values")
    return arr


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def export_states(bundles: Iterable[StateBundle], path) -> int:
    """Write one JSON line per bundle; returns the number of lines written."""
    path = Path(path)
    lines = []
    for b in bundles:
        states = _check_finite(b.states, "states")
        tokens = [t if isinstance(t, str) else int(t) for t in b.tokens]
        lang = b.lang if b.lang is None or isinstance(b.lang, str) else list(b.lang)
        head = json.dumps({"tokens": tokens, "lang": lang}, ensure_ascii=False)
        lines.append(head[:-1] + ', "states": ' + _f32_matrix(states) + "}")
    _write_atomic(path, "".join(line + "\n" for line in lines))
    return len(lines)


def _parse_states_line(text: str, path, lineno: int, dim: Optional[int]) -> StateBundle:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON at column {exc.colno}: {exc.msg}", path=path, line=lineno) from exc
    if not isinstance(obj, dict):
        raise FormatError("expected a JSON object", path=path, line=lineno)
    missing = {"tokens", "states"} - obj.keys()
    if missing:
        raise FormatError(f"missing keys {sorted(missing)}", path=path, line=lineno)
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, (str, int)) and not isinstance(t, bool) for t in tokens):
        raise FormatError("tokens must be a list of ids or strings", path=path, line=lineno)
    try:
        states = np.asarray(obj["states"], dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"states are not a rectangular numeric matrix: {exc}", path=path, line=lineno) from exc
    if states.ndim != 2 or states.shape[0] != len(tokens):
        raise FormatError(f"{len(tokens)} tokens but states of shape {states.shape}", path=path, line=lineno)
    if dim is not None and states.shape[1] != dim:
        raise FormatError(f"state dimension {states.shape[1]} differs from earlier lines ({dim})", path=path, line=lineno)
    if not np.all(np.isfinite(states)):
        raise FormatError("non-finite state value", path=path, line=lineno)
    lang = obj.get("lang")
    if isinstance(lang, list) and len(lang) != len(tokens):
        raise FormatError(f"{len(lang)} language tags for {len(tokens)} tokens", path=path, line=lineno)
    return StateBundle(tokens, states.astype(np.float64), lang)


def import_states(path) -> List[StateBundle]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text and not text.endswith("\n"):
        # a writer that was cut off leaves a partial last line
        last = text.count("\n") + 1
        try:
            json.loads(text.rsplit("\n", 1)[-1])
        except json.JSONDecodeError as exc:
            raise FormatError(f"truncated record ({exc.msg})", path=path, line=last) from exc
    out: List[StateBundle] = []
    dim = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        bundle = _parse_states_line(line, path, lineno, dim)
        dim = bundle.dim
        out.append(bundle)
    return out


def head_to_dict(head: Head) -> dict:
    obj = {
        "vocab": list(head.vocab),
        "unembedding": head.unembedding.astype(np.float32),
        "bias": head.bias.astype(np.float32),
    }
    if head.transform is not None:
        t = head.transform
        obj["transform"] = {
            "weight": t.weight.astype(np.float32),
            "bias": t.bias.astype(np.float32),
            "ln_weight": t.ln_weight.astype(np.float32),
            "ln_bias": t.ln_bias.astype(np.float32),
            "eps": float(t.eps),
        }
    return obj


def _dump(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ", ".join(json.dumps(k) + ": " + _dump(v) for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        _check_finite(obj, "head parameters")
        return _f32_matrix(obj) if obj.ndim == 2 else _f32_row(obj)
    return json.dumps(obj, ensure_ascii=False)


def export_head(model_or_head, path) -> None:
    head = model_or_head if isinstance(model_or_head, Head) else model_or_head.head()
    _write_atomic(Path(path), _dump(head_to_dict(head)) + "\n")


def _f32(obj, key, path, ndim):
    try:
        arr = np.asarray(obj[key], dtype=np.float32)
    except KeyError:
        raise FormatError(f"missing key {key!r}", path=path) from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{key!r} is not numeric: {exc}", path=path) from exc
    if arr.ndim != ndim:
        raise FormatError(f"{key!r} should have {ndim} dimension(s), got shape {arr.shape}", path=path)
    return arr.astype(np.float64)


def import_head(path) -> Head:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON at column {exc.colno}: {exc.msg}", path=path, line=exc.lineno) from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("vocab"), list):
        raise FormatError("head file needs a 'vocab' list", path=path)
    transform = None
    if obj.get("transform") is not None:
        t = obj["transform"]
        transform = HeadTransform(
            _f32(t, "weight", path, 2), _f32(t, "bias", path, 1),
            _f32(t, "ln_weight", path, 1), _f32(t, "ln_bias", path, 1), float(t.get("eps", 1e-5)),
        )
    try:
        return Head([str(v) for v in obj["vocab"]], _f32(obj, "unembedding", path, 2),
                    _f32(obj, "bias", path, 1), transform)
    except FormatError as exc:
        if exc.path is None:
            raise FormatError(str(exc), path=path) from exc
        raise


def bundle_logprobs(bundle: StateBundle, head: Head, positions: Optional[Sequence[int]] = None) -> np.ndarray:
    """Head log-probabilities for the listed positions (all by default)."""
    if bundle.dim != head.dim:
        raise FormatError(f"states have dimension {bundle.dim} but the head expects {head.dim}")
    states = bundle.states if positions is None else bundle.states[list(positions)]
    if head.transform is not None:
        states = head.transform(states)
    return log_softmax(states @ head.unembedding.T + head.bias)
