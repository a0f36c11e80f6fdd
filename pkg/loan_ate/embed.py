"""
Pretrained word vectors and loan-description vectorization.

Two representations are produced from one EmbeddingTable:

- loan vectors: the mean of the matched word vectors (bag-of-embeddings),
  used by the linear and MLP nuisance models;
- loan sequences: the matched word vectors in order, used by the LSTM.

Vectors are read once and never updated.
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, IoFailure

logger = logging.getLogger(__name__)

DEFAULT_DIM = 100
DEFAULT_MAX_LEN = 200

# Anything that is not a letter, digit, apostrophe or whitespace becomes a separator.
_SEPARATOR_RE = re.compile(r"[^\w'\s]|_")


# =============================================================================
# Types
# =============================================================================

@dataclass(frozen=True)
class EmbeddingTable:
    """Token -> d-dimensional vector map. Row i of `vectors` belongs to tokens[i]."""
    dim: int
    tokens: Tuple[str, ...]
    vectors: np.ndarray
    _index: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        assert self.vectors.shape == (len(self.tokens), self.dim), "vectors must be (len(tokens), dim)"
        if not self._index:
            object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})
        self.vectors.setflags(write=False)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def get(self, token: str) -> Optional[np.ndarray]:
        i = self._index.get(token)
        return None if i is None else self.vectors[i]

    def indices(self, tokens: Iterable[str]) -> List[int]:
        """Row indices of the in-vocabulary tokens, in order."""
        return [self._index[t] for t in tokens if t in self._index]


@dataclass(frozen=True)
class LoanVector:
    values: np.ndarray
    n_matched: int


# =============================================================================
# Loading / writing
# =============================================================================

def load_embeddings(path: str | Path, expected_dim: int = DEFAULT_DIM) -> EmbeddingTable:
    """
    Reads the GloVe text layout: `token v1 v2 ... vd`, one token per line.

    Duplicate tokens keep their first occurrence. Blank lines are skipped.

    Raises:
        DimensionMismatch: a line carries a number of values other than expected_dim
        IoFailure: the file cannot be read, is not UTF-8 or holds a non-numeric value
    """
    tokens: List[str] = []
    rows: List[np.ndarray] = []
    seen = set()
    try:
        with open(path, "rb") as fp:
            for line_no, raw in enumerate(fp, start=1):
                try:
                    line = raw.decode("utf-8")
                except UnicodeDecodeError as e:
                    raise IoFailure(f"line {line_no}: invalid UTF-8", line_no=line_no) from e
                parts = line.rstrip().split(" ")
                if not parts or parts == [""]:
                    continue
                token, values = parts[0], parts[1:]
                if len(values) != expected_dim:
                    raise DimensionMismatch(line_no, expected_dim, len(values))
                if token in seen:
                    continue
                try:
                    row = np.asarray(values, dtype=np.float64)
                except ValueError as e:
                    raise IoFailure(f"line {line_no}: non-numeric value", line_no=line_no) from e
                seen.add(token)
                tokens.append(token)
                rows.append(row)
    except OSError as e:
        raise IoFailure(f"cannot read embeddings file {path}: {e}", path=str(path)) from e

    vectors = np.vstack(rows) if rows else np.zeros((0, expected_dim))
    logger.debug("Loaded %d vectors of dim %d from %s", len(tokens), expected_dim, path)
    return EmbeddingTable(dim=expected_dim, tokens=tuple(tokens), vectors=vectors)


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Writes the table back in the GloVe text layout (repr floats, exact round-trip)."""
    with open(path, "w", encoding="utf-8") as fp:
        for token, row in zip(table.tokens, table.vectors):
            fp.write(token + " " + " ".join(repr(float(v)) for v in row) + "\n")


def toy_embedding_table(vocab_size: int = 500, dim: int = 8, seed: int = 20160510) -> EmbeddingTable:
    """
    Fixed synthetic vocabulary for text-pipeline tests and the planted-text DGP.

    Token k ("tok000", ...) has first coordinate `signal[k]`, evenly spaced in
    [-1, 1]; the remaining coordinates are small fixed noise.
    """
    rng = np.random.default_rng(seed)
    signal = np.linspace(-1.0, 1.0, vocab_size)
    vectors = np.empty((vocab_size, dim))
    vectors[:, 0] = signal
    vectors[:, 1:] = 0.1 * rng.standard_normal((vocab_size, dim - 1))
    width = len(str(vocab_size - 1))
    tokens = tuple(f"tok{k:0{width}d}" for k in range(vocab_size))
    return EmbeddingTable(dim=dim, tokens=tokens, vectors=vectors)


# =============================================================================
# Text -> tokens -> vectors
# =============================================================================

def tokenize(text: str) -> List[str]:
    """
    Lowercases, turns every character outside letters/digits/apostrophes into
    a separator, splits on whitespace and trims apostrophes from token edges.

    Example:
        >>> tokenize("KES 18,000.")
        ['kes', '18', '000']
    """
    cleaned = _SEPARATOR_RE.sub(" ", text.lower())
    stripped = (tok.strip("'") for tok in cleaned.split())
    return [tok for tok in stripped if tok]


def loan_vector(tokens: Sequence[str], table: EmbeddingTable) -> LoanVector:
    """Mean of the matched word vectors; zero vector when nothing matches."""
    # sorted rows make the sum order, and so the result, independent of token order
    rows = sorted(table.indices(tokens))
    if not rows:
        return LoanVector(values=np.zeros(table.dim), n_matched=0)
    return LoanVector(values=table.vectors[rows].mean(axis=0), n_matched=len(rows))


def loan_sequence(tokens: Sequence[str], table: EmbeddingTable, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    """Matched word vectors in order, truncated to max_len. Shape (k, dim), k may be 0."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    rows = table.indices(tokens)[:max_len]
    return table.vectors[rows].copy() if rows else np.zeros((0, table.dim))


def loan_vectors(token_lists: Sequence[Sequence[str]], table: EmbeddingTable) -> Tuple[np.ndarray, np.ndarray]:
    """Stacks loan_vector over many descriptions: (n x dim matrix, n_matched per row)."""
    out = np.zeros((len(token_lists), table.dim))
    matched = np.zeros(len(token_lists), dtype=np.int64)
    for i, tokens in enumerate(token_lists):
        lv = loan_vector(tokens, table)
        out[i] = lv.values
        matched[i] = lv.n_matched
    n_empty = int(np.sum(matched == 0))
    if n_empty:
        logger.info("%d of %d descriptions have no in-vocabulary token", n_empty, len(token_lists))
    return out, matched


def loan_sequences(
    token_lists: Sequence[Sequence[str]],
    table: EmbeddingTable,
    max_len: int = DEFAULT_MAX_LEN,
) -> List[np.ndarray]:
    return [loan_sequence(tokens, table, max_len) for tokens in token_lists]


def pack_sequences(sequences: Sequence[np.ndarray], dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Ragged list -> (concatenated rows, offsets of length n+1)."""
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    data = np.vstack([s for s in sequences if len(s)]) if lengths.sum() else np.zeros((0, dim))
    return data, offsets


def unpack_sequences(data: np.ndarray, offsets: np.ndarray) -> List[np.ndarray]:
    return [data[offsets[i]:offsets[i + 1]] for i in range(len(offsets) - 1)]
