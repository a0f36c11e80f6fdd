import json

import numpy as np
import pandas as pd
import pytest

from loan_ate.embed import load_embeddings, loan_sequences, loan_vectors
from loan_ate.errors import IngestError, IoFailure
from loan_ate.ingest import ingest_files
from loan_ate.workspace import Workspace, read_config_hash, read_csv, write_csv


@pytest.fixture
def workspace(tmp_path):
    return Workspace(tmp_path / "ws", config_hash="abc123", verbose=True)


class TestListRawFiles:

    def test_single_file(self, sample_ndjson):
        assert Workspace.list_raw_files(sample_ndjson) == [sample_ndjson.resolve()]

    def test_directory_skips_ignored(self, tmp_path):
        (tmp_path / "a.ndjson").write_text("{}\n")
        (tmp_path / "b.json").write_text('{"loans": []}')
        (tmp_path / "notes.txt").write_text("x")
        (tmp_path / ".git").mkdir()
        (tmp_path / ".git" / "c.json").write_text("{}")

        found = Workspace.list_raw_files(tmp_path)

        assert [p.name for p in found] == ["a.ndjson", "b.json"]

    def test_missing_path(self, tmp_path):
        with pytest.raises(IngestError):
            Workspace.list_raw_files(tmp_path / "nope")


class TestArtifacts:

    def test_json_is_stamped(self, workspace):
        path = workspace.write_json("reports", "x.json", {"b": 1, "a": np.float64(2.5)})

        payload = json.loads(path.read_text())
        assert payload == {"a": 2.5, "b": 1, "config_hash": "abc123"}
        assert read_config_hash(path) == "abc123"

    def test_csv_is_stamped(self, workspace):
        frame = pd.DataFrame({"x": [1, 2], "y": [0.5, 1.5]})

        path = workspace.write_frame("reports", "t.csv", frame)

        assert path.read_text().splitlines()[0] == "# config_hash=abc123"
        assert read_config_hash(path) == "abc123"
        pd.testing.assert_frame_equal(workspace.read_frame("reports", "t.csv"), frame)

    def test_csv_without_hash(self, tmp_path):
        path = tmp_path / "plain.csv"
        write_csv(path, pd.DataFrame({"x": [1]}))
        assert read_config_hash(path) == ""
        assert read_csv(path)["x"].tolist() == [1]

    def test_missing_artifact(self, workspace):
        with pytest.raises(IoFailure):
            workspace.read_json("reports", "missing.json")
        with pytest.raises(IoFailure):
            workspace.load_loan_vectors()


class TestDatasetPersistence:

    def test_save_and_load(self, workspace, sample_ndjson):
        result = ingest_files([sample_ndjson], seed=5)

        workspace.save_dataset(result.dataset, result.filter_counts, result.parse_failures)
        loaded = workspace.load_dataset()

        assert loaded.records == result.dataset.records
        assert loaded.split == result.dataset.split
        assert loaded.normalization == pytest.approx(result.dataset.normalization)
        np.testing.assert_allclose(loaded.x_matrix, result.dataset.x_matrix)
        metadata = workspace.read_json("dataset", "metadata.json")
        assert metadata["filter_counts"]["never_funded"] == 1
        assert metadata["split_seed"] == 5

    def test_embeddings(self, workspace, sample_ndjson, small_vectors):
        dataset = ingest_files([sample_ndjson]).dataset
        table = load_embeddings(small_vectors, expected_dim=4)
        vectors, matched = loan_vectors(dataset.token_lists, table)
        sequences = loan_sequences(dataset.token_lists, table, max_len=50)

        workspace.save_embeddings(vectors, matched, sequences, {"n": len(dataset)})

        np.testing.assert_array_equal(workspace.load_loan_vectors(), vectors)
        restored = workspace.load_sequences()
        assert len(restored) == len(sequences)
        for got, expected in zip(restored, sequences):
            np.testing.assert_array_equal(got, expected)
        assert workspace.read_json("embeddings", "summary.json")["n"] == 3
