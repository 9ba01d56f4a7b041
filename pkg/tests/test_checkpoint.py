import numpy as np
import pytest

from kgrec.backbone import GRBackbone, BackboneConfig
from kgrec.checkpoint import (CheckpointError, file_checksum,
                              load_checkpoint, restore, save_checkpoint)
from kgrec.sid import load_catalog_npz, save_catalog_npz

from helpers import small_catalog, small_world


def tiny_backbone(seed=0):
    return GRBackbone(np.random.default_rng(seed), [8, 8],
                      BackboneConfig(d_model=16, heads=2, enc_layers=1,
                                     dec_layers=1, d_ff=32, t_max=8))


def test_roundtrip_restores_every_parameter(tmp_path):
    src = tiny_backbone(0)
    path = str(tmp_path / "bb.npz")
    save_checkpoint(path, src, meta={"step": 3})
    dst = tiny_backbone(1)
    meta = restore(dst, path)
    assert meta == {"step": 3}
    for (na, a), (nb, b) in zip(sorted(src.named_parameters()),
                                sorted(dst.named_parameters())):
        assert na == nb
        np.testing.assert_array_equal(a.data, b.data)


def test_missing_file_raises(tmp_path):
    with pytest.raises(CheckpointError, match="missing checkpoint"):
        load_checkpoint(str(tmp_path / "nope.npz"))


def test_missing_array_detected(tmp_path):
    src = tiny_backbone(0)
    path = str(tmp_path / "bb.npz")
    save_checkpoint(path, src, meta={})
    data = dict(np.load(path, allow_pickle=False).items())
    dropped = next(n for n in data if n != "__header__")
    del data[dropped]
    np.savez(path, **data)
    with pytest.raises(CheckpointError, match="missing arrays"):
        load_checkpoint(path)


def test_checksum_detects_change(tmp_path):
    a, b = str(tmp_path / "a.npz"), str(tmp_path / "b.npz")
    save_checkpoint(a, tiny_backbone(0), meta={})
    save_checkpoint(b, tiny_backbone(1), meta={})
    assert file_checksum(a) != file_checksum(b)
    save_checkpoint(b, tiny_backbone(0), meta={})
    assert file_checksum(a) == file_checksum(b)


def test_catalog_npz_roundtrip(tmp_path):
    world = small_world(0)
    catalog = small_catalog(world)
    path = str(tmp_path / "catalog.npz")
    save_catalog_npz(path, catalog)
    loaded = load_catalog_npz(path)
    assert loaded.item_ids == catalog.item_ids
    assert loaded.text_tokens == catalog.text_tokens
    assert loaded.vocab_sizes == catalog.vocab_sizes
    for a, b in zip(catalog.sids, loaded.sids):
        assert a.as_sequence() == b.as_sequence()
    np.testing.assert_allclose(loaded.content, catalog.content)
