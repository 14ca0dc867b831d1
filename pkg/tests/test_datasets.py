import numpy as np
import pytest

from paircfr.datasets import COUNTERFACTUAL, ORIGINAL, BlockLayout, DatasetError, PairedDataset, read_tsv, write_tsv
from paircfr.feature_model import canonical_spec, generate_paircad


def small():
    lay = BlockLayout(1, 1, 0)
    x = np.array([[1.0, 2.0], [-1.0, 2.0], [0.5, 0.1], [-0.5, 0.1]])
    return PairedDataset(lay, x, [1, 0, 0, 1], [ORIGINAL, COUNTERFACTUAL, ORIGINAL, COUNTERFACTUAL], [7, 7, 9, 9])


def test_pair_index():
    ds = small()
    assert dict(ds.pair_index) == {7: (0, (1,)), 9: (2, (3,))}
    assert ds.source_labels.tolist() == [1, 1, 0, 0]


def test_immutable():
    ds = small()
    with pytest.raises(ValueError):
        ds.x[0, 0] = 5.0
    with pytest.raises(Exception):
        ds.layout = BlockLayout(2, 0, 0)


def test_dangling_counterfactual():
    with pytest.raises(DatasetError, match="without an original"):
        PairedDataset(BlockLayout(1, 0, 0), np.zeros((1, 1)), [0], [COUNTERFACTUAL], [3])


def test_duplicate_original():
    with pytest.raises(DatasetError, match="more than one original"):
        PairedDataset(BlockLayout(1, 0, 0), np.zeros((2, 1)), [0, 1], [ORIGINAL, ORIGINAL], [3, 3])


def test_counterfactual_keeps_label_rejected():
    with pytest.raises(DatasetError):
        PairedDataset(BlockLayout(1, 0, 0), np.zeros((2, 1)), [1, 1], [ORIGINAL, COUNTERFACTUAL], [3, 3])


def test_subset_groups_and_originals():
    ds = small()
    sub = ds.subset_groups([9])
    assert len(sub) == 2 and sub.pair_ids.tolist() == [9, 9]
    assert ds.originals_only().roles.tolist() == [ORIGINAL, ORIGINAL]


def test_tsv_roundtrip(tmp_path):
    ds = generate_paircad(canonical_spec(), 25, seed=3)
    path = write_tsv(ds, tmp_path / "d.tsv")
    assert (tmp_path / "d.tsv.json").exists()
    back = read_tsv(path)
    assert back.content_hash() == ds.content_hash()
    assert np.array_equal(back.x, ds.x)
    assert back.layout == ds.layout
    header = path.read_text().splitlines()[0].split("\t")
    assert header[:4] == ["pair_id", "role", "label", "x_0"]
