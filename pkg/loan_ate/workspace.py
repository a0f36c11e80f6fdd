import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .embed import pack_sequences, unpack_sequences
from .errors import IngestError, IoFailure
from .ingest import Dataset, dataset_frame, dataset_from_frame

logger = logging.getLogger(__name__)

RAW_SUFFIXES = {".json", ".jsonl", ".ndjson"}
IGNORED_DIRS = {".venv", "venv", "env", "__pycache__", ".git"}

SUBDIRS = ("dataset", "embeddings", "models", "predictions", "reports")


class Workspace:
    """
    Fixed on-disk layout shared by every CLI stage.

    Every artifact written through a Workspace carries the config hash of
    the run that produced it: CSV files as a `# config_hash=<hash>` first line,
    JSON files as a `config_hash` key, npz files inside their metadata.
    """

    def __init__(self, root: Path, config_hash: str = "", verbose: bool = False):
        self.root = Path(root).resolve()
        self.config_hash = config_hash
        self.verbose = verbose

    def _log(self, msg: str):
        if self.verbose:
            logger.debug(msg)

    # ------------------------------------------------------------
    # Paths
    # ------------------------------------------------------------
    def dir(self, kind: str) -> Path:
        assert kind in SUBDIRS, f"unknown workspace directory: {kind}"
        path = self.root / kind
        path.mkdir(parents=True, exist_ok=True)
        return path

    def path(self, kind: str, name: str) -> Path:
        return self.dir(kind) / name

    def predictions_path(self, kind: str, features: str) -> Path:
        return self.path("predictions", f"nuisance_{kind}_{features}.csv")

    @staticmethod
    def list_raw_files(source: Path) -> List[Path]:
        """A raw file, or every .json/.jsonl/.ndjson file below a directory."""
        target = Path(source).resolve()
        if not target.exists():
            raise IngestError(f"Path not found: {target}", path=str(target))

        if target.is_file():
            return [target]
        found = []
        for p in target.rglob("*"):
            if any(ignored in p.parts for ignored in IGNORED_DIRS):
                continue
            if p.is_file() and p.suffix in RAW_SUFFIXES:
                found.append(p)
        return sorted(found)

    # ------------------------------------------------------------
    # Generic artifact writers
    # ------------------------------------------------------------
    def write_json(self, kind: str, name: str, payload: Dict[str, Any]) -> Path:
        path = self.path(kind, name)
        body = dict(payload)
        body["config_hash"] = self.config_hash
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default), encoding="utf-8")
        self._log(f"Wrote {path}")
        return path

    def read_json(self, kind: str, name: str) -> Dict[str, Any]:
        path = self.root / kind / name
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise IoFailure(f"cannot read {path}: {e}", path=str(path)) from e

    def write_frame(self, kind: str, name: str, frame: pd.DataFrame) -> Path:
        path = self.path(kind, name)
        write_csv(path, frame, self.config_hash)
        self._log(f"Wrote {path} ({len(frame)} rows)")
        return path

    def read_frame(self, kind: str, name: str) -> pd.DataFrame:
        return read_csv(self.root / kind / name)

    # ------------------------------------------------------------
    # Dataset
    # ------------------------------------------------------------
    def save_dataset(
        self,
        dataset: Dataset,
        filter_counts: Optional[Dict[str, int]] = None,
        parse_failures: Optional[Dict[str, int]] = None,
    ) -> Path:
        self.write_frame("dataset", "covariates.csv", dataset_frame(dataset))
        mean, std = dataset.normalization
        self.write_json("dataset", "metadata.json", {
            "normalization": {"mean": mean, "std": std},
            "split_seed": dataset.split_seed,
            "split_fractions": list(dataset.split_fractions),
            "column_names": list(dataset.column_names),
            "filter_counts": dict(filter_counts or {}),
            "parse_failures": dict(parse_failures or {}),
            "n": len(dataset),
        })
        tokens_path = self.path("dataset", "tokens.txt")
        with open(tokens_path, "w", encoding="utf-8") as fp:
            for record in dataset.records:
                fp.write(" ".join(record.tokens) + "\n")
        return self.dir("dataset")

    def save_empty_dataset(
        self,
        filter_counts: Dict[str, int],
        parse_failures: Optional[Dict[str, int]] = None,
    ) -> Path:
        """Records a run where every loan was filtered: counts only, no rows."""
        for name in ("covariates.csv", "tokens.txt"):
            self.path("dataset", name).unlink(missing_ok=True)
        self.write_json("dataset", "metadata.json", {
            "column_names": [],
            "filter_counts": dict(filter_counts),
            "parse_failures": dict(parse_failures or {}),
            "n": 0,
        })
        return self.dir("dataset")

    def load_dataset(self) -> Dataset:
        frame = self.read_frame("dataset", "covariates.csv")
        metadata = self.read_json("dataset", "metadata.json")
        tokens_path = self.root / "dataset" / "tokens.txt"
        try:
            lines = tokens_path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise IoFailure(f"cannot read {tokens_path}: {e}", path=str(tokens_path)) from e
        return dataset_from_frame(frame, [line.split() for line in lines], metadata)

    # ------------------------------------------------------------
    # Embeddings
    # ------------------------------------------------------------
    def save_embeddings(
        self,
        loan_vectors: np.ndarray,
        n_matched: np.ndarray,
        sequences: Sequence[np.ndarray],
        summary: Dict[str, Any],
    ) -> Path:
        emb = self.dir("embeddings")
        np.save(emb / "loan_vectors.npy", loan_vectors)
        np.save(emb / "n_matched.npy", n_matched)
        data, offsets = pack_sequences(sequences, loan_vectors.shape[1])
        np.savez(emb / "sequences.npz", data=data, offsets=offsets)
        self.write_json("embeddings", "summary.json", summary)
        return emb

    def load_loan_vectors(self) -> np.ndarray:
        return self._load_npy("loan_vectors.npy")

    def load_sequences(self) -> List[np.ndarray]:
        path = self.root / "embeddings" / "sequences.npz"
        try:
            with np.load(path) as archive:
                return unpack_sequences(archive["data"], archive["offsets"])
        except OSError as e:
            raise IoFailure(f"cannot read {path}: {e}", path=str(path)) from e

    def _load_npy(self, name: str) -> np.ndarray:
        path = self.root / "embeddings" / name
        try:
            return np.load(path)
        except OSError as e:
            raise IoFailure(f"cannot read {path}: {e}", path=str(path)) from e


# ------------------------------------------------------------
# CSV helpers (config hash header)
# ------------------------------------------------------------

def write_csv(path: Path, frame: pd.DataFrame, config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fp:
        fp.write(f"# config_hash={config_hash}\n")
        frame.to_csv(fp, index=False)


def read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#", float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IoFailure(f"cannot read {path}: {e}", path=str(path)) from e


def read_config_hash(path: Path) -> Optional[str]:
    """The hash stamped on a CSV (first line) or JSON artifact, if any."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text).get("config_hash")
    first = text.split("\n", 1)[0]
    prefix = "# config_hash="
    return first[len(prefix):] if first.startswith(prefix) else None


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
