import numpy as np
import pytest

from conceptkb.checkpoint import (
    CheckpointError,
    check_vocab,
    load_checkpoint,
    save_checkpoint,
)
from conceptkb.data import Vocab
from conceptkb.model import Hyperparams, init_params


@pytest.fixture
def vocab():
    v = Vocab()
    for i in range(9):
        v.add_entity(f"e{i}")
    for i in range(3):
        v.add_relation(f"r{i}")
    return v


def test_round_trip_bit_exact(tmp_path, vocab):
    hp = Hyperparams(n=6, m=4, k=2, epochs=5)
    params = init_params(9, 3, hp, seed=3)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, params, hp, vocab, extra={"seed": 3})
    loaded, hp2, meta = load_checkpoint(path)
    assert hp2 == hp
    assert meta["extra"]["seed"] == 3
    for field in ("entity_emb", "relation_emb", "concept_tensor",
                  "head_scores", "tail_scores", "head_assign", "tail_assign"):
        np.testing.assert_array_equal(getattr(loaded, field), getattr(params, field))
        assert getattr(loaded, field).dtype == getattr(params, field).dtype


def test_vocab_hash_check(tmp_path, vocab):
    hp = Hyperparams(n=4, m=2, k=1, epochs=1)
    params = init_params(9, 3, hp, seed=0)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, params, hp, vocab)
    _, _, meta = load_checkpoint(path)
    check_vocab(meta, vocab)  # same vocab passes

    other = Vocab()
    for i in range(9):
        other.add_entity(f"x{i}")
    for i in range(3):
        other.add_relation(f"r{i}")
    with pytest.raises(CheckpointError, match="mismatch"):
        check_vocab(meta, other)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.npz")


def test_version_guard(tmp_path, vocab):
    hp = Hyperparams(n=4, m=2, k=1, epochs=1)
    params = init_params(9, 3, hp, seed=0)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, params, hp, vocab)

    import json

    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    meta = json.loads(bytes(arrays["meta"]).decode())
    meta["format_version"] = 999
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
