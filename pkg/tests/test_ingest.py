"""
Unit tests for the ingest module.

Run with: pytest tests/test_ingest.py -v
"""

import json
from datetime import datetime, timezone

import numpy as np
import pytest

from loan_ate.errors import DegenerateColumn, EmptyInput, IngestError, ParseFailure
from loan_ate.ingest import (
    COVARIATE_COLUMNS,
    DUMMY_SECTORS,
    Borrower,
    Dataset,
    Filtered,
    FilterReason,
    LoanRecord,
    RawLoan,
    assign_splits,
    build_dataset,
    dataset_frame,
    dataset_from_frame,
    descriptive_stats,
    flatten_archive,
    ingest_files,
    majority_gender,
    parse_loan,
    read_raw_lines,
    transform,
)


# =============================================================================
# Fixtures - Reusable test data
# =============================================================================

def _line(path, loan_id):
    for line in path.read_text(encoding="utf-8").splitlines():
        if f'"id": {loan_id},' in line:
            return line
    raise KeyError(loan_id)


@pytest.fixture
def sample_record_json(sample_ndjson):
    """The Mahesh loan (id 853701) used throughout the docs."""
    return _line(sample_ndjson, 853701)


def _raw(**overrides) -> RawLoan:
    values = dict(
        loan_id=1,
        posted_date=datetime(2015, 1, 1, tzinfo=timezone.utc),
        funded_date=datetime(2015, 1, 3, tzinfo=timezone.utc),
        loan_amount=100.0,
        borrowers=(Borrower("F"),),
        description_texts={"en": "a small loan"},
        sector="Food",
        nonpayment="partner",
    )
    values.update(overrides)
    return RawLoan(**values)


def _record(loan_id: int, y: float, w: int, amount: float, sector: str = "Food") -> LoanRecord:
    return LoanRecord(
        loan_id=loan_id, y=y, w=w, loan_amount=amount, gender=1, risker=0,
        sector=sector, sector_dummies=tuple(int(sector == s) for s in DUMMY_SECTORS), tokens=("loan",),
    )


# =============================================================================
# Parsing
# =============================================================================

class TestParseLoan:
    """parse_loan extracts the fields the pipeline uses."""

    def test_sample_record(self, sample_record_json):
        raw = parse_loan(sample_record_json)

        assert raw.loan_id == 853701
        assert raw.loan_amount == 1150
        assert raw.sector == "Education"
        assert len(raw.borrowers) == 1
        assert raw.nonpayment == "lender"
        assert "en" in raw.description_texts

    def test_empty_object_names_posted_date(self):
        with pytest.raises(ParseFailure) as exc:
            parse_loan("{}")
        assert str(exc.value) == "missing_required_field: posted_date"
        assert exc.value.field == "posted_date"

    def test_malformed_json(self):
        with pytest.raises(ParseFailure) as exc:
            parse_loan("{not json")
        assert exc.value.reason == "malformed_json"

    def test_utf8_bytes_are_decoded(self, sample_record_json):
        raw = parse_loan(sample_record_json.encode("utf-8"))
        assert raw.loan_id == 853701

    def test_invalid_utf8(self):
        with pytest.raises(ParseFailure) as exc:
            parse_loan(b'{"id": 2, "x": "\xff"}')
        assert exc.value.reason == "invalid_utf8"

    def test_missing_funded_date_is_absent(self, sample_record_json):
        obj = json.loads(sample_record_json)
        del obj["funded_date"]

        raw = parse_loan(json.dumps(obj))

        assert raw.funded_date is None

    def test_flat_description_texts_are_accepted(self, sample_record_json):
        obj = json.loads(sample_record_json)
        obj["description_texts"] = obj.pop("description")["texts"]

        raw = parse_loan(json.dumps(obj))

        assert raw.description_texts["en"].startswith("Extra efforts")

    def test_negative_amount_is_invalid(self, sample_record_json):
        obj = json.loads(sample_record_json)
        obj["loan_amount"] = -5
        with pytest.raises(ParseFailure) as exc:
            parse_loan(json.dumps(obj))
        assert str(exc.value) == "invalid_field: loan_amount"


# =============================================================================
# Cleaning rules
# =============================================================================

class TestTransform:
    """transform applies the cleaning rules in order."""

    def test_sample_record(self, sample_record_json):
        record = transform(parse_loan(sample_record_json))

        assert isinstance(record, LoanRecord)
        assert record.w == 0
        assert record.risker == 1
        assert record.gender == 0
        # 2015-03-18T18:20:05Z -> 2015-03-24T06:06:28Z
        assert record.y == pytest.approx(474383 / 86400, abs=1e-9)
        assert record.y == pytest.approx(5.490544, abs=1e-6)
        assert record.sector_dummies[DUMMY_SECTORS.index("Education")] == 1
        assert sum(record.sector_dummies) == 1

    def test_funded_before_posted(self):
        raw = _raw(posted_date=datetime(2015, 1, 1, 1, tzinfo=timezone.utc),
                   funded_date=datetime(2015, 1, 1, 0, tzinfo=timezone.utc))
        assert transform(raw) == Filtered(1, FilterReason.FUNDED_BEFORE_POSTED)

    def test_three_borrowers_are_treated(self):
        record = transform(_raw(borrowers=(Borrower("F"), Borrower("M"), Borrower("F"))))
        assert record.w == 1

    def test_no_english_description(self):
        assert transform(_raw(description_texts={"es": "hola"})).reason == FilterReason.NO_ENGLISH_DESCRIPTION
        assert transform(_raw(description_texts=None)).reason == FilterReason.NO_ENGLISH_DESCRIPTION

    def test_empty_description(self):
        assert transform(_raw(description_texts={"en": " ... "})).reason == FilterReason.EMPTY_DESCRIPTION

    def test_no_borrowers(self):
        assert transform(_raw(borrowers=())).reason == FilterReason.NO_BORROWERS

    def test_never_funded(self):
        assert transform(_raw(funded_date=None)).reason == FilterReason.NEVER_FUNDED

    def test_unknown_sector(self):
        assert transform(_raw(sector="Space Travel")).reason == FilterReason.UNKNOWN_SECTOR

    def test_reference_sector_has_no_dummy(self):
        record = transform(_raw(sector="Wholesale"))
        assert sum(record.sector_dummies) == 0

    def test_gender_tie_resolves_to_female(self):
        assert majority_gender((Borrower("M"), Borrower("F"))) == 1
        assert majority_gender((Borrower("M"), Borrower("M"), Borrower("F"))) == 0

    def test_transform_is_repeatable(self, sample_record_json):
        assert transform(parse_loan(sample_record_json)) == transform(parse_loan(sample_record_json))


# =============================================================================
# Dataset assembly
# =============================================================================

class TestBuildDataset:
    """build_dataset standardizes the amount and assigns splits."""

    def test_symmetric_amounts(self):
        records = [_record(i, 1.0 + i, i % 2, amount) for i, amount in enumerate((0.0, 25.0, 50.0))]

        dataset = build_dataset(records, seed=3)

        column = dataset.x_matrix[:, 0]
        assert column == pytest.approx([-1.224744871, 0.0, 1.224744871], abs=1e-9)
        assert dataset.x_matrix.shape == (3, 17)
        assert dataset.column_names == COVARIATE_COLUMNS

    def test_standardized_moments(self):
        rng = np.random.default_rng(0)
        records = [_record(i, 1.0, i % 2, float(a)) for i, a in enumerate(rng.uniform(25, 5000, 200))]

        dataset = build_dataset(records)

        assert dataset.x_matrix[:, 0].mean() == pytest.approx(0.0, abs=1e-9)
        assert dataset.x_matrix[:, 0].var() == pytest.approx(1.0, abs=1e-6)
        assert dataset.destandardized_loan_amount() == pytest.approx([r.loan_amount for r in records], abs=1e-9)

    def test_splits_are_deterministic(self):
        records = [_record(i, 1.0, i % 2, float(10 * i)) for i in range(50)]

        first = build_dataset(records, seed=7)
        second = build_dataset(records, seed=7)

        assert first.split == second.split
        assert set(first.split) == {"train", "validation", "test"}
        assert first.split.count("train") == 30
        assert first.split.count("validation") == 10

    def test_single_record_is_degenerate(self):
        with pytest.raises(DegenerateColumn):
            build_dataset([_record(1, 1.0, 0, 100.0)])

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            build_dataset([])

    def test_bad_fractions(self):
        with pytest.raises(IngestError):
            assign_splits(10, (0.5, 0.5, 0.5), seed=0)

    def test_matrix_is_read_only(self):
        dataset = build_dataset([_record(1, 1.0, 0, 10.0), _record(2, 2.0, 1, 20.0)])
        with pytest.raises(ValueError):
            dataset.x_matrix[0, 0] = 5.0

    def test_frame_round_trip(self):
        records = [_record(i, 1.5 * (i + 1), i % 2, float(100 + 7 * i), "Retail") for i in range(6)]
        dataset = build_dataset(records, seed=1)
        metadata = {
            "normalization": {"mean": dataset.normalization[0], "std": dataset.normalization[1]},
            "split_seed": 1,
            "split_fractions": list(dataset.split_fractions),
            "column_names": list(dataset.column_names),
        }

        restored = dataset_from_frame(dataset_frame(dataset), dataset.token_lists, metadata)

        assert isinstance(restored, Dataset)
        assert restored.records == dataset.records
        assert restored.split == dataset.split
        np.testing.assert_allclose(restored.x_matrix, dataset.x_matrix)


# =============================================================================
# Raw files
# =============================================================================

class TestIngestFiles:
    """End-to-end cleaning of raw files."""

    def test_counts_every_outcome(self, sample_ndjson):
        result = ingest_files([sample_ndjson], seed=0)

        assert result.n_input == 10
        assert result.n_retained == 3
        assert dict(result.filter_counts) == {
            "funded_before_posted": 1,
            "no_english_description": 1,
            "never_funded": 1,
            "no_borrowers": 1,
            "empty_description": 1,
        }
        assert dict(result.parse_failures) == {"malformed_json": 1, "missing_required_field: posted_date": 1}
        total = result.n_retained + sum(result.filter_counts.values()) + sum(result.parse_failures.values())
        assert total == result.n_input

    def test_retained_records(self, sample_ndjson):
        dataset = ingest_files([sample_ndjson]).dataset

        by_id = {r.loan_id: r for r in dataset.records}
        assert set(by_id) == {853701, 900001, 900007}
        assert by_id[900001].w == 1
        assert by_id[900001].y == pytest.approx(2.0)
        assert by_id[900001].gender == 1
        assert by_id[900001].risker == 0
        assert by_id[900007].y == pytest.approx(0.5)
        assert by_id[900007].gender == 1

    def test_everything_filtered(self, tmp_path):
        path = tmp_path / "loans.ndjson"
        path.write_text('{"id": 1, "posted_date": "2015-01-01T00:00:00Z"}\n')

        result = ingest_files([path])

        assert result.dataset is None
        assert result.summary()["n_retained"] == 0

    def test_bad_byte_only_costs_its_line(self, sample_ndjson, tmp_path):
        path = tmp_path / "loans.ndjson"
        path.write_bytes(sample_ndjson.read_bytes() + b'{"id": 2, "x": "\xff"}\n')

        result = ingest_files([path], seed=0)

        assert result.n_input == 11
        assert result.n_retained == 3
        assert result.parse_failures["invalid_utf8"] == 1

    def test_truncated_archive(self, resources_dir, tmp_path):
        text = (resources_dir / "loans_archive.json").read_text(encoding="utf-8")
        path = tmp_path / "broken.json"
        path.write_text(text[: len(text) // 2], encoding="utf-8")

        with pytest.raises(ParseFailure) as exc:
            ingest_files([path])
        assert exc.value.reason == "malformed_archive"

    def test_ndjson_named_like_an_archive(self, sample_ndjson, tmp_path):
        path = tmp_path / "loans.json"
        path.write_bytes(sample_ndjson.read_bytes())

        with pytest.raises(ParseFailure) as exc:
            list(read_raw_lines(path))
        assert exc.value.reason == "malformed_archive"

    def test_archive_is_streamed(self, resources_dir, tmp_path):
        docs = list(read_raw_lines(resources_dir / "loans_archive.json"))
        assert [json.loads(d)["id"] for d in docs] == [910001, 910002]
        assert json.loads(docs[0])["loan_amount"] == pytest.approx(325.5)

        dest = tmp_path / "flat.ndjson"
        assert flatten_archive(resources_dir / "loans_archive.json", dest) == 2
        assert len(dest.read_text().splitlines()) == 2


# =============================================================================
# Descriptive statistics
# =============================================================================

class TestDescriptiveStats:

    def test_two_records(self):
        dataset = build_dataset([_record(1, 2.0, 1, 50.0), _record(2, 4.0, 0, 100.0)])

        stats = descriptive_stats(dataset)

        assert stats.n == 2
        assert stats.treated_share == pytest.approx(0.5)
        assert stats.y_by_arm["treated"]["mean"] == pytest.approx(2.0)
        assert stats.y_by_arm["control"]["mean"] == pytest.approx(4.0)

    def test_ratio_in_25_dollar_units(self):
        dataset = build_dataset([_record(1, 1.0, 1, 50.0), _record(2, 4.0, 0, 100.0)])

        cdf = descriptive_stats(dataset).ratio_cdf

        treated = cdf[cdf["arm"] == "treated"]
        assert treated["ratio"].tolist() == pytest.approx([0.5])
        assert treated["cdf"].tolist() == pytest.approx([1.0])

    def test_sector_table(self):
        dataset = build_dataset([
            _record(1, 2.0, 1, 50.0, "Food"),
            _record(2, 4.0, 0, 100.0, "Food"),
            _record(3, 6.0, 0, 150.0, "Retail"),
        ])

        table = descriptive_stats(dataset).sector_table

        food_control = table[(table["sector"] == "Food") & (table["arm"] == "control")]
        assert food_control["count"].item() == 1
        assert food_control["mean_y"].item() == pytest.approx(4.0)
