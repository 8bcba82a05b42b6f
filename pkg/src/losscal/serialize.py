"""Versioned JSON envelopes for chains, model checkpoints, and tables.

All float payloads are base64-encoded little-endian float64, so files are
exact and portable. Every envelope carries ``format_version`` (currently 1)
and a ``kind`` tag.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .calibration import CorrectionModel
from .errors import ContractError
from .models import MlpSpec
from .predictive import PredictiveTable, StudentModel
from .samplers import ChainStore, ViPosterior

FORMAT_VERSION = 1

Array = np.ndarray


def encode_f64(arr: Array) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def decode_f64(blob: str, shape=None) -> Array:
    arr = np.frombuffer(base64.b64decode(blob), dtype="<f8").astype(np.float64)
    return arr if shape is None else arr.reshape(shape)


def _envelope(kind: str, meta: dict | None = None, **payload) -> dict:
    doc = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta or {}}
    doc.update(payload)
    return doc


def _load(path, kind: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractError(
            f"{path}: format_version {doc.get('format_version')} "
            f"(supported: {FORMAT_VERSION})")
    if doc.get("kind") != kind:
        raise ContractError(f"{path}: kind {doc.get('kind')!r}, expected {kind!r}")
    return doc


def _dump(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh)


# ---------------------------------------------------------------------------
# chains

def save_chain(path, chain: ChainStore) -> None:
    doc = _envelope("chain", meta=chain.meta,
                    samples=[encode_f64(s) for s in chain.samples])
    _dump(path, doc)


def load_chain(path) -> ChainStore:
    doc = _load(path, "chain")
    return ChainStore([decode_f64(s) for s in doc["samples"]], doc["meta"])


# ---------------------------------------------------------------------------
# parameterized models

def _save_params(path, kind: str, spec: MlpSpec, params: Array,
                 meta: dict | None = None) -> None:
    _dump(path, _envelope(kind, meta=meta, layer_sizes=list(spec.layer_sizes),
                          params=encode_f64(params)))


def _load_params(path, kind: str) -> tuple[MlpSpec, Array, dict]:
    doc = _load(path, kind)
    spec = MlpSpec(tuple(doc["layer_sizes"]))
    return spec, decode_f64(doc["params"]), doc["meta"]


def save_student(path, student: StudentModel, meta: dict | None = None) -> None:
    _save_params(path, "student", student.spec, student.omega, meta)


def load_student(path) -> StudentModel:
    spec, params, _ = _load_params(path, "student")
    return StudentModel(spec, params)


def save_correction(path, model: CorrectionModel, meta: dict | None = None) -> None:
    _save_params(path, "correction", model.spec, model.lam, meta)


def load_correction(path) -> CorrectionModel:
    spec, params, _ = _load_params(path, "correction")
    return CorrectionModel(spec, params)


def save_map(path, spec: MlpSpec, theta: Array, meta: dict | None = None) -> None:
    _save_params(path, "map", spec, theta, meta)


def load_map(path) -> tuple[MlpSpec, Array]:
    spec, params, _ = _load_params(path, "map")
    return spec, params


def save_vi(path, spec: MlpSpec, post: ViPosterior, meta: dict | None = None) -> None:
    _dump(path, _envelope("vi", meta=meta, layer_sizes=list(spec.layer_sizes),
                          mean=encode_f64(post.mean), log_std=encode_f64(post.log_std)))


def load_vi(path) -> tuple[MlpSpec, ViPosterior]:
    doc = _load(path, "vi")
    return (MlpSpec(tuple(doc["layer_sizes"])),
            ViPosterior(decode_f64(doc["mean"]), decode_f64(doc["log_std"])))


# ---------------------------------------------------------------------------
# predictive tables

def save_table(path, table: PredictiveTable, meta: dict | None = None) -> None:
    _dump(path, _envelope("predictive_table", meta=meta,
                          shape=list(table.probs.shape),
                          source=table.source, probs=encode_f64(table.probs)))


def load_table(path) -> PredictiveTable:
    doc = _load(path, "predictive_table")
    return PredictiveTable(decode_f64(doc["probs"], tuple(doc["shape"])),
                           doc.get("source", ""))
