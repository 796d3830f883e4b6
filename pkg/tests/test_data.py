"""Record file grammar, generator determinism and separability properties,
stratified splitting, and the demo text embedder."""

import json

import numpy as np
import pytest

from emofuse.data import (
    Dataset,
    FeatureRecord,
    decode_share,
    embed_text_demo,
    gen_blobs,
    gen_shares,
    load_jsonl,
    save_jsonl,
    share_block_width,
    split,
)
from emofuse.errors import InputError

SMALL_DIMS = {"face": 256, "body": 256, "text": 200}


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class TestJsonl:
    def write_lines(self, tmp_path, lines):
        path = tmp_path / "data.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_happy_label_maps_to_index_two(self, tmp_path):
        vec = [0.0] * 768
        path = self.write_lines(
            tmp_path, [json.dumps({"id": "r1", "label": "happy", "text": vec})]
        )
        ds = load_jsonl(path)
        assert ds.label_index(ds.records[0].label) == 2

    def test_wrong_face_length_cites_2048(self, tmp_path):
        path = self.write_lines(
            tmp_path, [json.dumps({"id": "r1", "label": "sad", "face": [0.0] * 2047})]
        )
        with pytest.raises(InputError, match="2048"):
            load_jsonl(path)

    def test_unknown_label(self, tmp_path):
        path = self.write_lines(
            tmp_path, [json.dumps({"id": "r1", "label": "surprise", "text": [0.0] * 768})]
        )
        with pytest.raises(InputError, match="surprise"):
            load_jsonl(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = self.write_lines(
            tmp_path,
            [json.dumps({"id": "r1", "label": "sad", "text": [0.0] * 768, "mood": 3})],
        )
        with pytest.raises(InputError, match="mood"):
            load_jsonl(path)

    def test_malformed_line_reports_line_number(self, tmp_path):
        good = json.dumps({"id": "r1", "label": "sad", "text": [0.0] * 768})
        path = self.write_lines(tmp_path, [good, "{not json"])
        with pytest.raises(InputError, match=":2"):
            load_jsonl(path)

    def test_record_without_modalities_rejected(self, tmp_path):
        path = self.write_lines(tmp_path, [json.dumps({"id": "r1", "label": "sad"})])
        with pytest.raises(InputError, match="no modality"):
            load_jsonl(path)

    def test_text_raw_only_is_a_valid_record(self, tmp_path):
        path = self.write_lines(
            tmp_path, [json.dumps({"id": "r1", "label": "sad", "text_raw": "gloomy day"})]
        )
        ds = load_jsonl(path)
        assert ds.records[0].text_raw == "gloomy day"

    def test_save_load_identity(self, tmp_path):
        ds = gen_blobs(seed=9, n_per_class=3, input_dims=SMALL_DIMS)
        path = tmp_path / "ds.jsonl"
        save_jsonl(ds, path)
        again = load_jsonl(path, expected_dims=SMALL_DIMS)
        assert len(again) == len(ds)
        for a, b in zip(ds.records, again.records):
            assert a.id == b.id and a.label == b.label
            assert a.face.tobytes() == b.face.tobytes()
            assert a.body.tobytes() == b.body.tobytes()
            assert a.text.tobytes() == b.text.tobytes()

    def test_save_bytes_deterministic(self, tmp_path):
        ds = gen_blobs(seed=9, n_per_class=2, input_dims=SMALL_DIMS)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_jsonl(ds, p1)
        save_jsonl(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestGenBlobs:
    def test_counts(self):
        ds = gen_blobs(seed=7, n_per_class=4, input_dims=SMALL_DIMS)
        assert len(ds) == 20
        per_label = {name: 0 for name in ds.label_names}
        for rec in ds:
            per_label[rec.label] += 1
        assert set(per_label.values()) == {4}

    def test_same_seed_identical(self):
        a = gen_blobs(seed=3, n_per_class=3, input_dims=SMALL_DIMS)
        b = gen_blobs(seed=3, n_per_class=3, input_dims=SMALL_DIMS)
        for ra, rb in zip(a.records, b.records):
            assert ra.face.tobytes() == rb.face.tobytes()
            assert ra.text.tobytes() == rb.text.tobytes()

    def test_different_seed_differs(self):
        a = gen_blobs(seed=3, n_per_class=3, input_dims=SMALL_DIMS)
        b = gen_blobs(seed=4, n_per_class=3, input_dims=SMALL_DIMS)
        assert a.records[0].face.tobytes() != b.records[0].face.tobytes()

    def test_each_modality_linearly_separable(self):
        # least-squares probe on one-hot targets as the linear oracle
        ds = gen_blobs(seed=7, n_per_class=40, input_dims=SMALL_DIMS)
        labels = np.array([ds.label_index(r.label) for r in ds])
        onehot = np.eye(5)[labels]
        for m in ("face", "body", "text"):
            x = np.stack([getattr(r, m) for r in ds])
            x1 = np.hstack([x, np.ones((len(ds), 1))])
            w, *_ = np.linalg.lstsq(x1, onehot, rcond=None)
            acc = float(((x1 @ w).argmax(axis=1) == labels).mean())
            assert acc >= 0.9, f"{m} probe accuracy {acc}"


class TestGenShares:
    def test_label_is_modular_sum_of_decoded_shares(self):
        ds = gen_shares(seed=11, n=200, input_dims=SMALL_DIMS)
        width = share_block_width(5, SMALL_DIMS)
        for rec in ds:
            total = sum(
                decode_share(getattr(rec, m), 5, width) for m in ("face", "body", "text")
            )
            assert ds.label_names[total % 5] == rec.label

    def test_single_share_tells_nothing_about_label(self):
        ds = gen_shares(seed=11, n=5000, input_dims=SMALL_DIMS)
        width = share_block_width(5, SMALL_DIMS)
        table = np.zeros((5, 5))
        for rec in ds:
            s_face = decode_share(rec.face, 5, width)
            table[s_face, ds.label_index(rec.label)] += 1
        # conditional label distribution stays uniform within sampling error
        cond = table / table.sum(axis=1, keepdims=True)
        assert np.abs(cond - 0.2).max() < 0.06

    def test_same_seed_identical(self):
        a = gen_shares(seed=2, n=20, input_dims=SMALL_DIMS)
        b = gen_shares(seed=2, n=20, input_dims=SMALL_DIMS)
        for ra, rb in zip(a.records, b.records):
            assert ra.body.tobytes() == rb.body.tobytes()


class TestSplit:
    def test_80_20(self):
        ds = gen_blobs(seed=1, n_per_class=20, input_dims=SMALL_DIMS)
        train, test = split(ds, 0.2, seed=5)
        assert len(train) == 80 and len(test) == 20

    def test_partition_covers_original_ids(self):
        ds = gen_blobs(seed=1, n_per_class=10, input_dims=SMALL_DIMS)
        train, test = split(ds, 0.3, seed=5)
        ids = sorted(r.id for r in train.records) + sorted(r.id for r in test.records)
        assert sorted(ids) == sorted(r.id for r in ds.records)

    def test_stratified(self):
        ds = gen_blobs(seed=1, n_per_class=20, input_dims=SMALL_DIMS)
        _, test = split(ds, 0.25, seed=9)
        counts = {name: 0 for name in ds.label_names}
        for rec in test:
            counts[rec.label] += 1
        assert set(counts.values()) == {5}

    def test_same_seed_same_membership(self):
        ds = gen_blobs(seed=1, n_per_class=10, input_dims=SMALL_DIMS)
        t1, _ = split(ds, 0.2, seed=4)
        t2, _ = split(ds, 0.2, seed=4)
        assert [r.id for r in t1.records] == [r.id for r in t2.records]

    def test_tiny_class_rejected(self):
        records = [
            FeatureRecord(id="a", label="angry", text=np.zeros(768, np.float32)),
            FeatureRecord(id="b", label="happy", text=np.zeros(768, np.float32)),
            FeatureRecord(id="c", label="happy", text=np.zeros(768, np.float32)),
        ]
        with pytest.raises(InputError, match="angry"):
            split(Dataset(records), 0.5, seed=0)

    def test_bad_fraction(self):
        ds = gen_blobs(seed=1, n_per_class=5, input_dims=SMALL_DIMS)
        with pytest.raises(InputError):
            split(ds, 1.5, seed=0)


class TestEmbedTextDemo:
    def test_empty_string_is_zero_vector(self):
        out = embed_text_demo("")
        assert out.shape == (768,)
        assert not out.any()

    def test_deterministic(self):
        a = embed_text_demo("A cheerful crowd waves")
        b = embed_text_demo("A cheerful crowd waves")
        assert a.tobytes() == b.tobytes()

    def test_single_token_lands_on_fnv_index(self):
        h = fnv1a64(b"happy")
        out = embed_text_demo("happy")
        idx = h % 768
        sign = 1.0 if (h >> 32) & 1 else -1.0
        assert out[idx] == np.float32(sign)
        assert np.count_nonzero(out) == 1
        assert abs(np.linalg.norm(out) - 1.0) < 1e-6

    def test_case_and_punctuation_folding(self):
        assert np.array_equal(embed_text_demo("Happy!!"), embed_text_demo("happy"))
