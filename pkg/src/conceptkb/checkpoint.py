"""Self-describing checkpoint container.

A checkpoint is a single ``.npz`` archive holding every parameter array
plus a JSON metadata record (format version, hyperparameters, vocab
hashes, and any extra run information).  Arrays are stored as float64 and
reload bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Vocab
from .model import Hyperparams, ModelParams

FORMAT_VERSION = 1

_ARRAY_FIELDS = (
    "entity_emb",
    "relation_emb",
    "concept_tensor",
    "head_scores",
    "tail_scores",
    "head_assign",
    "tail_assign",
)


class CheckpointError(Exception):
    """Unreadable, incompatible, or mismatched checkpoint."""


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    hp: Hyperparams,
    vocab: Vocab | None = None,
    extra: dict | None = None,
) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "hyperparams": hp.to_dict(),
        "entity_hash": vocab.entity_hash() if vocab is not None else None,
        "relation_hash": vocab.relation_hash() if vocab is not None else None,
        "n_entities": params.n_entities,
        "n_relations": params.n_relations,
    }
    if extra:
        meta["extra"] = extra
    arrays = {name: getattr(params, name) for name in _ARRAY_FIELDS}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, Hyperparams, dict]:
    """Read a checkpoint back; returns (params, hyperparams, metadata)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as archive:
            meta = json.loads(bytes(archive["meta"]).decode("utf-8"))
            arrays = {name: archive[name] for name in _ARRAY_FIELDS}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}")
    params = ModelParams(**arrays)
    hp = Hyperparams.from_dict(meta["hyperparams"])
    return params, hp, meta


def check_vocab(meta: dict, vocab: Vocab) -> None:
    """Raise unless the checkpoint was trained against this exact vocab."""
    if meta.get("entity_hash") is None:
        return
    if meta["entity_hash"] != vocab.entity_hash() or meta["relation_hash"] != vocab.relation_hash():
        raise CheckpointError(
            "vocabulary mismatch between checkpoint and data "
            "(different entity or relation inventories)"
        )
