import json

import pytest
from hypothesis import given, strategies as st

from hiercascade.taxonomy import (
    Taxonomy,
    TaxonomyError,
    coarse_of,
    fine_set,
    load_taxonomy,
    nw45_path,
    save_taxonomy,
    synthetic_taxonomy,
    taxonomy_from_dict,
)


def _write(tmp_path, doc):
    p = tmp_path / "t.json"
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return p


def test_shipped_nw45_shape(nw45):
    assert nw45.n_coarse == 5
    sizes = {c.name: len(nw45.fine_set(c.id)) for c in nw45.coarse}
    assert sizes["Buildings"] == 9
    assert sizes["Transportation"] == 12
    assert sizes["Natural Lands"] == 8
    assert sizes["Constructed Lands"] == 5
    # 'snowberg wetlands' is read as two classes
    assert sizes["Water Areas"] == 10
    assert sum(sizes.values()) == nw45.n_fine == 44


def test_shipped_file_documents_missing_class():
    doc = json.loads(nw45_path().read_text())
    assert "45" in doc["note"] and "44" in doc["note"]


@pytest.mark.parametrize("fine,coarse", [
    ("river", "Water Areas"),
    ("bridge", "Transportation"),
    ("church", "Buildings"),
    ("terrace", "Natural Lands"),
])
def test_coarse_of_nw45(nw45, fine, coarse):
    assert nw45.coarse[coarse_of(nw45, nw45.fine_id(fine))].name == coarse


def test_constructed_lands_fine_set(nw45):
    ids = fine_set(nw45, nw45.coarse_id("Constructed Lands"))
    names = [nw45.fine[i].name for i in ids]
    assert len(names) == 5
    assert names[:3] == ["baseball court", "basketball court", "golf course"]
    assert names[-1] == "tennis court"
    assert ids == sorted(ids)


def test_minimal_tree(tmp_path):
    t = load_taxonomy(_write(tmp_path, {"coarse": [{"name": "A", "fine": ["a"]}]}))
    assert t.parent == (0,)
    assert t.coarse_of(0) == 0
    assert t.fine_set(0) == [0]


def test_duplicate_fine_label(tmp_path):
    doc = {"coarse": [{"name": "Water", "fine": ["river", "lake"]},
                      {"name": "Land", "fine": ["river"]}]}
    with pytest.raises(TaxonomyError, match="duplicate fine label.*river"):
        load_taxonomy(_write(tmp_path, doc))


def test_empty_coarse_category(tmp_path):
    doc = {"coarse": [{"name": "Water", "fine": ["river"]}, {"name": "Empty", "fine": []}]}
    with pytest.raises(TaxonomyError, match="empty coarse category.*Empty"):
        load_taxonomy(_write(tmp_path, doc))


def test_orphan_fine_label():
    with pytest.raises(TaxonomyError, match="orphan"):
        taxonomy_from_dict({"coarse": [{"name": "A", "fine": ["x", ""]}]})
    from hiercascade.taxonomy import CoarseLabel, FineLabel
    with pytest.raises(TaxonomyError, match="orphan.*y"):
        Taxonomy.from_parts([CoarseLabel(0, "A")], [FineLabel(0, "x"), FineLabel(1, "y")], [0, 3])


def test_duplicate_coarse_and_parse_error(tmp_path):
    doc = {"coarse": [{"name": "A", "fine": ["x"]}, {"name": "A", "fine": ["y"]}]}
    with pytest.raises(TaxonomyError, match="duplicate coarse"):
        taxonomy_from_dict(doc)
    with pytest.raises(TaxonomyError, match="parse error"):
        load_taxonomy(_write(tmp_path, "{not json"))


def test_out_of_range_ids(nw45):
    with pytest.raises(IndexError):
        nw45.coarse_of(nw45.n_fine)
    with pytest.raises(IndexError):
        nw45.fine_set(-1)


def test_name_lookup_normalizes(nw45):
    assert nw45.fine_id("Dense_Residential") == nw45.fine_id("dense residential")
    with pytest.raises(KeyError):
        nw45.fine_id("volcano")


sizes = st.lists(st.integers(1, 6), min_size=1, max_size=6)


@given(sizes)
def test_partition_and_consistency(sz):
    t = synthetic_taxonomy(sz)
    seen = []
    for c in range(t.n_coarse):
        seen.extend(t.fine_set(c))
    assert sorted(seen) == list(range(t.n_fine))
    assert len(set(seen)) == len(seen)
    for f in range(t.n_fine):
        assert f in t.fine_set(t.coarse_of(f))


@given(sizes)
def test_round_trip(tmp_path_factory, sz):
    t = synthetic_taxonomy(sz)
    p = tmp_path_factory.mktemp("tx") / "t.json"
    save_taxonomy(t, p)
    assert load_taxonomy(p) == t


def test_round_trip_nw45(tmp_path, nw45):
    save_taxonomy(nw45, tmp_path / "n.json")
    back = load_taxonomy(tmp_path / "n.json")
    assert back == nw45
    assert back.digest() == nw45.digest()
