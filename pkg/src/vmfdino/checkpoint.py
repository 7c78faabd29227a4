"""Single-file checkpoints: a JSON document with base64-embedded arrays.

Arrays are stored as little-endian float64 bytes. Serialization is
canonical (sorted keys, fixed indentation), so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import base64
import json
import logging
from pathlib import Path

import numpy as np

from vmfdino import __version__
from vmfdino.head import CenterState, PrototypeBank
from vmfdino.movmf import MixtureModel
from vmfdino.trainer import EncoderParams
from vmfdino.vmf import VmfComponent

log = logging.getLogger(__name__)

FORMAT = "vmfdino-checkpoint"
FORMAT_VERSION = 1
RENORM_WARN = 1e-9


class CheckpointError(ValueError):
    pass


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported array dtype {d.get('dtype')!r}")
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return a.reshape(d["shape"])


def _unit_rows(a, name):
    norms = np.linalg.norm(a, axis=1)
    drift = float(np.abs(norms - 1.0).max()) if a.size else 0.0
    if drift > RENORM_WARN:
        log.warning("checkpoint integrity: %s drifted from unit norm by %.3g; renormalized", name, drift)
    if drift > 1e-12:
        a = a / norms[:, None]
    return a


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def encoder_document(teacher: EncoderParams, student: EncoderParams, center: CenterState, step: int, seed: int, config: dict) -> dict:
    arrays = {}
    for role, enc in (("teacher", teacher), ("student", student)):
        arrays[f"{role}.weight"] = encode_array(enc.weight)
        arrays[f"{role}.bias"] = encode_array(enc.bias)
        arrays[f"{role}.directions"] = encode_array(enc.bank.directions)
        arrays[f"{role}.log_magnitudes"] = encode_array(enc.bank.log_magnitudes)
    arrays["center.c"] = encode_array(center.c)
    return {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": "encoder",
        "library_version": __version__,
        "dims": {"d_in": teacher.d_in, "p": teacher.proj_dim, "K": teacher.bank.n_prototypes},
        "l2_normalized": bool(teacher.bank.l2_normalized),
        "center": {"momentum": center.momentum, "variant": center.variant},
        "step": int(step),
        "seed": int(seed),
        "config": config,
        "arrays": arrays,
    }


def mixture_document(model: MixtureModel, seed: int, config: dict, n_iter: int = 0) -> dict:
    return {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": "movmf",
        "library_version": __version__,
        "dims": {"p": model.dim, "K": model.n_components},
        "step": int(n_iter),
        "seed": int(seed),
        "config": config,
        "arrays": {
            "means": encode_array(model.means),
            "kappas": encode_array(model.kappas),
            "proportions": encode_array(model.proportions),
        },
    }


def save(path, doc: dict):
    Path(path).write_text(dumps(doc), encoding="utf-8")


def read_document(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc.msg})") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {doc.get('format_version')!r}")
    return doc


def _encoder(arrays, role, l2):
    v = _unit_rows(arrays[f"{role}.directions"], f"{role}.directions")
    bank = PrototypeBank(v, arrays[f"{role}.log_magnitudes"], l2)
    return EncoderParams(arrays[f"{role}.weight"], arrays[f"{role}.bias"], bank)


def load_encoder(doc_or_path):
    """Return (teacher, student, center, document)."""
    doc = doc_or_path if isinstance(doc_or_path, dict) else read_document(doc_or_path)
    if doc["kind"] != "encoder":
        raise CheckpointError(f"expected an encoder checkpoint, got {doc['kind']!r}")
    arrays = {k: decode_array(v) for k, v in doc["arrays"].items()}
    l2 = bool(doc["l2_normalized"])
    teacher = _encoder(arrays, "teacher", l2)
    student = _encoder(arrays, "student", l2)
    center = CenterState(arrays["center.c"], doc["center"]["momentum"], doc["center"]["variant"])
    return teacher, student, center, doc


def load_mixture(doc_or_path):
    doc = doc_or_path if isinstance(doc_or_path, dict) else read_document(doc_or_path)
    if doc["kind"] != "movmf":
        raise CheckpointError(f"expected a movmf checkpoint, got {doc['kind']!r}")
    a = {k: decode_array(v) for k, v in doc["arrays"].items()}
    means = _unit_rows(a["means"], "means")
    comps = tuple(VmfComponent(m, float(k)) for m, k in zip(means, a["kappas"]))
    return MixtureModel(comps, a["proportions"]), doc


def resave(doc: dict) -> dict:
    """Re-encode a loaded document from its decoded arrays."""
    if doc["kind"] == "encoder":
        teacher, student, center, _ = load_encoder(doc)
        return encoder_document(teacher, student, center, doc["step"], doc["seed"], doc["config"])
    model, _ = load_mixture(doc)
    return mixture_document(model, doc["seed"], doc["config"], doc["step"])
