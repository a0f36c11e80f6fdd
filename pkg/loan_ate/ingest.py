"""
Raw Kiva loan records -> cleaned LoanRecords -> immutable Dataset.

Cleaning follows the data-manipulation rules: drop loans funded before posting,
keep English descriptions only, derive W from the borrower count, Y as
funding time in days, gender as the borrowers' majority, risker from the
non-payment liability and 14 sector dummies.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import ijson
import numpy as np
import pandas as pd
from tqdm import tqdm

from .embed import tokenize
from .errors import DegenerateColumn, EmptyInput, IngestError, ParseFailure

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400.0

SECTORS: Tuple[str, ...] = (
    "Agriculture", "Arts", "Clothing", "Construction", "Education",
    "Entertainment", "Food", "Health", "Housing", "Manufacturing",
    "Personal Use", "Retail", "Services", "Transportation", "Wholesale",
)
# The alphabetically last sector is the reference level (all dummies zero).
REFERENCE_SECTOR = sorted(SECTORS)[-1]
DUMMY_SECTORS: Tuple[str, ...] = tuple(s for s in sorted(SECTORS) if s != REFERENCE_SECTOR)

COVARIATE_COLUMNS: Tuple[str, ...] = (
    ("loan_amount", "gender", "risker")
    + tuple("sector_" + s.lower().replace(" ", "_") for s in DUMMY_SECTORS)
)

SPLITS: Tuple[str, ...] = ("train", "validation", "test")


# =============================================================================
# Types
# =============================================================================

@dataclass(frozen=True)
class Borrower:
    gender: Optional[str]
    name: str = ""


@dataclass(frozen=True)
class RawLoan:
    """Fields of one raw loan JSON object that the pipeline uses."""
    loan_id: int
    posted_date: datetime
    funded_date: Optional[datetime]
    loan_amount: float
    borrowers: Tuple[Borrower, ...]
    description_texts: Optional[Dict[str, str]]
    sector: str
    nonpayment: str


class FilterReason(str, Enum):
    FUNDED_BEFORE_POSTED = "funded_before_posted"
    NO_ENGLISH_DESCRIPTION = "no_english_description"
    EMPTY_DESCRIPTION = "empty_description"
    NO_BORROWERS = "no_borrowers"
    NEVER_FUNDED = "never_funded"
    UNKNOWN_SECTOR = "unknown_sector"


@dataclass(frozen=True)
class Filtered:
    loan_id: int
    reason: FilterReason


@dataclass(frozen=True)
class LoanRecord:
    loan_id: int
    y: float
    w: int
    loan_amount: float
    gender: int
    risker: int
    sector: str
    sector_dummies: Tuple[int, ...]
    tokens: Tuple[str, ...]

    def __post_init__(self):
        assert self.y > 0, "y must be positive"
        assert self.w in (0, 1), "w must be binary"
        assert sum(self.sector_dummies) <= 1, "at most one sector dummy can be set"
        assert self.tokens, "tokens must not be empty"


@dataclass(frozen=True)
class Dataset:
    """
    Design matrix (n x 17) with outcome/treatment vectors and split labels.

    `x_matrix` column 0 holds the standardized loan amount; `normalization`
    keeps the (mean, std) that standardized it.
    """
    records: Tuple[LoanRecord, ...]
    x_matrix: np.ndarray
    normalization: Tuple[float, float]
    split: Tuple[str, ...]
    split_seed: int
    split_fractions: Tuple[float, float, float]
    column_names: Tuple[str, ...] = COVARIATE_COLUMNS

    def __post_init__(self):
        assert self.x_matrix.shape == (len(self.records), len(self.column_names)), "x_matrix shape mismatch"
        assert len(self.split) == len(self.records), "one split label per record"
        assert set(self.split) <= set(SPLITS), "unknown split label"
        self.x_matrix.setflags(write=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def y(self) -> np.ndarray:
        return np.array([r.y for r in self.records], dtype=np.float64)

    @property
    def w(self) -> np.ndarray:
        return np.array([r.w for r in self.records], dtype=np.int64)

    @property
    def unit_ids(self) -> np.ndarray:
        return np.array([r.loan_id for r in self.records], dtype=np.int64)

    @property
    def token_lists(self) -> List[Tuple[str, ...]]:
        return [r.tokens for r in self.records]

    def split_mask(self, *names: str) -> np.ndarray:
        return np.isin(np.array(self.split), names)

    def destandardized_loan_amount(self) -> np.ndarray:
        mean, std = self.normalization
        return self.x_matrix[:, 0] * std + mean


@dataclass
class IngestResult:
    dataset: Optional[Dataset]
    n_input: int
    filter_counts: Counter = field(default_factory=Counter)
    parse_failures: Counter = field(default_factory=Counter)

    @property
    def n_retained(self) -> int:
        return 0 if self.dataset is None else len(self.dataset)

    def summary(self) -> Dict[str, Any]:
        return {
            "n_input": self.n_input,
            "n_retained": self.n_retained,
            "filtered": dict(sorted(self.filter_counts.items())),
            "parse_failures": dict(sorted(self.parse_failures.items())),
        }


# =============================================================================
# Parsing
# =============================================================================

def _parse_timestamp(value: Any, name: str) -> datetime:
    if not isinstance(value, str):
        raise ParseFailure("invalid_field", name)
    try:
        ts = datetime.fromisoformat(value)
    except ValueError as e:
        raise ParseFailure("invalid_field", name) from e
    # Kiva timestamps are UTC ("Z"); naive values are read as UTC too
    return ts.replace(tzinfo=timezone.utc) if ts.tzinfo is None else ts


def _dig(obj: Dict[str, Any], path: str) -> Any:
    current: Any = obj
    for key in path.split("."):
        if not isinstance(current, dict) or key not in current:
            raise ParseFailure("missing_required_field", path)
        current = current[key]
    return current


def parse_loan(json_text: str | bytes) -> RawLoan:
    """
    Extracts a RawLoan from one loan JSON object (text or UTF-8 bytes).

    Raises:
        ParseFailure: `invalid_utf8`, `malformed_json`,
            `missing_required_field: <name>` or `invalid_field: <name>`.
    """
    if isinstance(json_text, bytes):
        try:
            json_text = json_text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseFailure("invalid_utf8") from e
    try:
        obj = json.loads(json_text)
    except (json.JSONDecodeError, TypeError) as e:
        raise ParseFailure("malformed_json") from e
    if not isinstance(obj, dict):
        raise ParseFailure("malformed_json")

    posted = _parse_timestamp(_dig(obj, "posted_date"), "posted_date")
    loan_id = _dig(obj, "id")
    amount = _dig(obj, "loan_amount")
    borrowers_raw = _dig(obj, "borrowers")
    sector = _dig(obj, "sector")
    nonpayment = _dig(obj, "terms.loss_liability.nonpayment")

    if not isinstance(loan_id, int) or isinstance(loan_id, bool):
        raise ParseFailure("invalid_field", "id")
    if not isinstance(amount, (int, float)) or isinstance(amount, bool) or amount < 0:
        raise ParseFailure("invalid_field", "loan_amount")
    if not isinstance(borrowers_raw, list):
        raise ParseFailure("invalid_field", "borrowers")

    funded_raw = obj.get("funded_date")
    funded = None if funded_raw in (None, "") else _parse_timestamp(funded_raw, "funded_date")

    borrowers = tuple(
        Borrower(gender=b.get("gender"), name=b.get("first_name") or b.get("name") or "")
        for b in borrowers_raw if isinstance(b, dict)
    )

    description = obj.get("description")
    texts = description.get("texts") if isinstance(description, dict) else None
    if texts is None:
        texts = obj.get("description_texts")
    if texts is not None and not isinstance(texts, dict):
        raise ParseFailure("invalid_field", "description_texts")

    return RawLoan(
        loan_id=loan_id,
        posted_date=posted,
        funded_date=funded,
        loan_amount=float(amount),
        borrowers=borrowers,
        description_texts=texts,
        sector=str(sector),
        nonpayment=str(nonpayment),
    )


# =============================================================================
# Cleaning
# =============================================================================

def majority_gender(borrowers: Sequence[Borrower]) -> int:
    """1 (female) when female borrowers are at least as many as male ones."""
    females = sum(1 for b in borrowers if b.gender == "F")
    males = sum(1 for b in borrowers if b.gender == "M")
    return 1 if females >= males else 0


def sector_dummies(sector: str) -> Tuple[int, ...]:
    return tuple(int(sector == s) for s in DUMMY_SECTORS)


def transform(raw: RawLoan) -> LoanRecord | Filtered:
    """Applies the cleaning rules in order; the first failing rule names the reason."""
    if raw.funded_date is not None and raw.funded_date <= raw.posted_date:
        return Filtered(raw.loan_id, FilterReason.FUNDED_BEFORE_POSTED)

    text = (raw.description_texts or {}).get("en")
    if text is None:
        return Filtered(raw.loan_id, FilterReason.NO_ENGLISH_DESCRIPTION)
    tokens = tokenize(text) if isinstance(text, str) else []
    if not tokens:
        return Filtered(raw.loan_id, FilterReason.EMPTY_DESCRIPTION)

    if not raw.borrowers:
        return Filtered(raw.loan_id, FilterReason.NO_BORROWERS)
    w = 1 if len(raw.borrowers) > 1 else 0

    if raw.funded_date is None:
        return Filtered(raw.loan_id, FilterReason.NEVER_FUNDED)
    y = (raw.funded_date - raw.posted_date).total_seconds() / SECONDS_PER_DAY

    if raw.sector not in SECTORS:
        return Filtered(raw.loan_id, FilterReason.UNKNOWN_SECTOR)

    return LoanRecord(
        loan_id=raw.loan_id,
        y=y,
        w=w,
        loan_amount=raw.loan_amount,
        gender=majority_gender(raw.borrowers),
        risker=1 if raw.nonpayment == "lender" else 0,
        sector=raw.sector,
        sector_dummies=sector_dummies(raw.sector),
        tokens=tuple(tokens),
    )


# =============================================================================
# Dataset assembly
# =============================================================================

def assign_splits(n: int, split_fractions: Sequence[float], seed: int) -> Tuple[str, ...]:
    """Random, seed-deterministic partition into train/validation/test."""
    fractions = tuple(float(f) for f in split_fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise IngestError("split fractions must be three positive numbers summing to 1")
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_val]] = "validation"
    labels[order[n_train + n_val:]] = "test"
    return tuple(labels.tolist())


def build_dataset(
    records: Sequence[LoanRecord],
    split_fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> Dataset:
    """
    Assembles the 17-column covariate matrix and assigns splits.

    The loan amount is standardized with the population mean/std of all
    records.

    Raises:
        EmptyInput: no records
        DegenerateColumn: loan amount has zero variance
    """
    if not records:
        raise EmptyInput("no records to build a dataset from")
    amounts = np.array([r.loan_amount for r in records], dtype=np.float64)
    mean, std = float(amounts.mean()), float(amounts.std())
    if not std > 0:
        raise DegenerateColumn("loan_amount has zero variance", column="loan_amount")

    x = np.empty((len(records), len(COVARIATE_COLUMNS)), dtype=np.float64)
    x[:, 0] = (amounts - mean) / std
    x[:, 1] = [r.gender for r in records]
    x[:, 2] = [r.risker for r in records]
    x[:, 3:] = np.array([r.sector_dummies for r in records], dtype=np.float64)

    split = assign_splits(len(records), split_fractions, seed)
    return Dataset(
        records=tuple(records),
        x_matrix=x,
        normalization=(mean, std),
        split=split,
        split_seed=seed,
        split_fractions=tuple(float(f) for f in split_fractions),
    )


# =============================================================================
# Raw files
# =============================================================================

def read_raw_lines(path: str | Path, archive_prefix: str = "loans.item") -> Iterator[str | bytes]:
    """
    Yields one JSON document per loan.

    `.json` files are Kiva archives (`{"loans": [...]}`) streamed with ijson;
    anything else is read as newline-delimited JSON, one undecoded line at a
    time so that a bad byte only costs its own line.

    Raises:
        ParseFailure: `malformed_archive: <path>` when the archive itself
            cannot be read past some point.
    """
    path = Path(path)
    if path.suffix == ".json":
        with open(path, "rb") as fp:
            try:
                for obj in ijson.items(fp, archive_prefix, use_float=True):
                    yield json.dumps(obj)
            except (ijson.JSONError, UnicodeDecodeError) as e:
                raise ParseFailure("malformed_archive", str(path)) from e
        return
    with open(path, "rb") as fp:
        for line in fp:
            if line.strip():
                yield line


def flatten_archive(src: str | Path, dest: str | Path, archive_prefix: str = "loans.item") -> int:
    """Rewrites a list-of-loans archive as NDJSON. Returns the number of loans written."""
    count = 0
    with open(dest, "wb") as out:
        for doc in read_raw_lines(src, archive_prefix):
            data = doc if isinstance(doc, bytes) else doc.encode("utf-8")
            out.write(data.rstrip(b"\r\n") + b"\n")
            count += 1
    logger.debug("Flattened %d loans from %s into %s", count, src, dest)
    return count


def clean_lines(lines: Iterable[str | bytes], verbose: bool = False) -> Tuple[List[LoanRecord], Counter, Counter, int]:
    """Parses and transforms every line; returns (records, filter counts, parse failures, n_input)."""
    records: List[LoanRecord] = []
    filtered: Counter = Counter()
    failures: Counter = Counter()
    n_input = 0
    for line in tqdm(lines, unit="loan", disable=not verbose):
        n_input += 1
        try:
            raw = parse_loan(line)
        except ParseFailure as e:
            failures[str(e)] += 1
            continue
        outcome = transform(raw)
        if isinstance(outcome, Filtered):
            filtered[outcome.reason.value] += 1
        else:
            records.append(outcome)
    return records, filtered, failures, n_input


def ingest_files(
    paths: Sequence[str | Path],
    split_fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    verbose: bool = False,
) -> IngestResult:
    """
    Reads raw files, cleans every loan and builds the Dataset.

    The dataset is None when every loan was filtered out; the counters still
    describe why.
    """
    def _all_lines() -> Iterator[str | bytes]:
        for p in paths:
            yield from read_raw_lines(p)

    records, filtered, failures, n_input = clean_lines(_all_lines(), verbose=verbose)
    logger.info("Ingested %d loans: %d retained, %d filtered, %d unparsable",
                n_input, len(records), sum(filtered.values()), sum(failures.values()))
    dataset = build_dataset(records, split_fractions, seed) if records else None
    return IngestResult(dataset=dataset, n_input=n_input, filter_counts=filtered, parse_failures=failures)


# =============================================================================
# Tabular form (used by the workspace to persist datasets)
# =============================================================================

def dataset_frame(dataset: Dataset) -> pd.DataFrame:
    frame = pd.DataFrame(dataset.x_matrix, columns=list(dataset.column_names))
    frame.insert(0, "unit_id", dataset.unit_ids)
    frame.insert(1, "sector", [r.sector for r in dataset.records])
    frame.insert(2, "loan_amount_raw", [r.loan_amount for r in dataset.records])
    frame.insert(3, "y", dataset.y)
    frame.insert(4, "w", dataset.w)
    frame.insert(5, "split", list(dataset.split))
    return frame


def dataset_from_frame(frame: pd.DataFrame, tokens: Sequence[Sequence[str]], metadata: Dict[str, Any]) -> Dataset:
    """Inverse of `dataset_frame` given the token file and metadata."""
    columns = tuple(metadata.get("column_names", COVARIATE_COLUMNS))
    x = frame[list(columns)].to_numpy(dtype=np.float64)
    records = tuple(
        LoanRecord(
            loan_id=int(row.unit_id),
            y=float(row.y),
            w=int(row.w),
            loan_amount=float(row.loan_amount_raw),
            gender=int(round(x[i, 1])),
            risker=int(round(x[i, 2])),
            sector=str(row.sector),
            sector_dummies=tuple(int(round(v)) for v in x[i, 3:]),
            tokens=tuple(toks),
        )
        for i, (row, toks) in enumerate(zip(frame.itertuples(index=False), tokens))
    )
    norm = metadata["normalization"]
    return Dataset(
        records=records,
        x_matrix=np.ascontiguousarray(x),
        normalization=(float(norm["mean"]), float(norm["std"])),
        split=tuple(frame["split"].astype(str)),
        split_seed=int(metadata["split_seed"]),
        split_fractions=tuple(metadata["split_fractions"]),
        column_names=columns,
    )


# =============================================================================
# Descriptive statistics
# =============================================================================

@dataclass
class SummaryReport:
    n: int
    treated_share: float
    y_overall: Dict[str, float]
    y_by_arm: Dict[str, Dict[str, float]]
    mean_loan_amount_by_arm: Dict[str, float]
    sector_table: pd.DataFrame
    gender_sector_counts: pd.DataFrame
    ratio_cdf: pd.DataFrame

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "treated_share": self.treated_share,
            "y_overall": self.y_overall,
            "y_by_arm": self.y_by_arm,
            "mean_loan_amount_by_arm": self.mean_loan_amount_by_arm,
        }


def _describe(values: pd.Series) -> Dict[str, float]:
    if values.empty:
        return {"mean": float("nan"), "median": float("nan"), "min": float("nan"), "max": float("nan")}
    return {
        "mean": float(values.mean()),
        "median": float(values.median()),
        "min": float(values.min()),
        "max": float(values.max()),
    }


def descriptive_stats(dataset: Dataset) -> SummaryReport:
    """
    Corpus statistics: treated share, funding-time summaries overall and per
    arm, per-sector tables, and the per-arm empirical CDF of
    funding time over loan amount in $25 units.

    Loans with a zero amount have no ratio and are left out of the CDF.
    """
    if len(dataset) == 0:
        raise EmptyInput("dataset is empty")
    frame = pd.DataFrame({
        "y": dataset.y,
        "w": dataset.w,
        "loan_amount": [r.loan_amount for r in dataset.records],
        "sector": [r.sector for r in dataset.records],
        "gender": [r.gender for r in dataset.records],
    })
    frame["arm"] = np.where(frame["w"] == 1, "treated", "control")

    arms = ("treated", "control")
    y_by_arm = {arm: _describe(frame.loc[frame["arm"] == arm, "y"]) for arm in arms}
    mean_amount = {arm: float(frame.loc[frame["arm"] == arm, "loan_amount"].mean()) for arm in arms}

    sector_table = (
        frame.groupby(["sector", "arm"], sort=True)
        .agg(count=("y", "size"), mean_y=("y", "mean"), mean_loan_amount=("loan_amount", "mean"))
        .reset_index()
    )
    gender_counts = (
        frame.assign(gender=np.where(frame["gender"] == 1, "F", "M"))
        .groupby(["sector", "gender"], sort=True).size().rename("count").reset_index()
    )

    cdf_parts = []
    for arm in arms:
        sub = frame[(frame["arm"] == arm) & (frame["loan_amount"] > 0)]
        ratio = np.sort((sub["y"] / (sub["loan_amount"] / 25.0)).to_numpy())
        cdf_parts.append(pd.DataFrame({
            "arm": arm,
            "ratio": ratio,
            "cdf": np.arange(1, len(ratio) + 1) / max(len(ratio), 1),
        }))
    ratio_cdf = pd.concat(cdf_parts, ignore_index=True)

    return SummaryReport(
        n=len(frame),
        treated_share=float(frame["w"].mean()),
        y_overall=_describe(frame["y"]),
        y_by_arm=y_by_arm,
        mean_loan_amount_by_arm=mean_amount,
        sector_table=sector_table,
        gender_sector_counts=gender_counts,
        ratio_cdf=ratio_cdf,
    )
