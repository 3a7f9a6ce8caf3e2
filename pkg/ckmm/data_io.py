"""
Dataset ingestion and result files: long-format CSV datasets, `.ts` files
from the time series classification archive, simulation manifests and the
versioned text model format.
"""

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .errors import CkmmError

# Configure logging
logger = logging.getLogger(__name__)

CSV_COLUMNS = ["subject", "feature", "time", "value"]
MODEL_FORMAT_VERSION = 1
MODEL_HEADER = "# ckmm model"
MANIFEST_FORMAT_VERSION = 1

PathLike = Union[str, Path]


class DataFormatError(CkmmError):
    """Raised when an input file is malformed; ``line`` is 1-based when known."""
    code = "FORMAT_ERROR"

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        self.detail = message
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnbalancedDataError(DataFormatError):
    """Raised for ragged or missing observations, which the model does not support."""
    code = "UNBALANCED_DATA"


class ModelFormatError(DataFormatError):
    """Raised when a model file is unreadable or has an unknown version."""
    code = "MODEL_FORMAT_ERROR"


@dataclass
class LongitudinalDataset:
    """Balanced data: ``values[n, d, t]`` is subject n, feature d, time t."""
    values: np.ndarray
    subject_ids: List[str] = field(default_factory=list)
    feature_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise UnbalancedDataError(f"Dataset must be an (N, D, T) array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise UnbalancedDataError("Dataset contains missing or non-finite values")
        N, D, _ = self.values.shape
        if not self.subject_ids:
            self.subject_ids = [f"s{n:04d}" for n in range(N)]
        if not self.feature_names:
            self.feature_names = [f"x{d + 1}" for d in range(D)]
        if len(self.subject_ids) != N or len(self.feature_names) != D:
            raise UnbalancedDataError("Subject ids and feature names must match the array shape")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> int:
        return self.values.shape[2]

    def flattened(self) -> np.ndarray:
        """(N, D*T) feature-major rows."""
        return self.values.reshape(self.N, self.D * self.T)


def to_long_frame(dataset: LongitudinalDataset) -> pd.DataFrame:
    N, D, T = dataset.values.shape
    subject, feature, time = np.meshgrid(np.arange(N), np.arange(D), np.arange(T), indexing="ij")
    return pd.DataFrame({
        "subject": np.asarray(dataset.subject_ids, dtype=object)[subject.ravel()],
        "feature": np.asarray(dataset.feature_names, dtype=object)[feature.ravel()],
        "time": time.ravel(),
        "value": dataset.values.ravel(),
    })


def write_dataset_csv(dataset: LongitudinalDataset, path: PathLike) -> None:
    """Write the long-format CSV ``subject,feature,time,value``."""
    to_long_frame(dataset).to_csv(path, index=False, lineterminator="\n")


def read_dataset_csv(path: PathLike) -> LongitudinalDataset:
    """
    Read a long-format CSV dataset.

    Subjects and features keep their order of first appearance; times are
    sorted.

    Raises:
        DataFormatError: On a missing column or a non-numeric value (with line number)
        UnbalancedDataError: If some (subject, feature, time) cell is missing or repeated
    """
    try:
        frame = pd.read_csv(path, dtype={"subject": str, "feature": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"Cannot read {path}: {e}")
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise DataFormatError(f"Missing columns {missing}; expected header {','.join(CSV_COLUMNS)}", line=1)

    # header is line 1
    for column in ("time", "value"):
        numeric = pd.to_numeric(frame[column], errors="coerce")
        bad = ~np.isfinite(numeric.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataFormatError(f"Invalid {column} {frame[column].iloc[row]!r}", line=row + 2)
        frame[column] = numeric
    empty = frame["subject"].isna() | frame["feature"].isna()
    if empty.any():
        raise DataFormatError("Empty subject or feature", line=int(np.flatnonzero(empty)[0]) + 2)

    duplicated = frame.duplicated(subset=["subject", "feature", "time"])
    if duplicated.any():
        raise UnbalancedDataError("Repeated (subject, feature, time)", line=int(np.flatnonzero(duplicated)[0]) + 2)

    subjects = list(pd.unique(frame["subject"]))
    features = list(pd.unique(frame["feature"]))
    times = np.sort(pd.unique(frame["time"]))
    expected = len(subjects) * len(features) * len(times)
    if len(frame) != expected:
        counts = frame.groupby("subject", sort=False).size()
        short = counts[counts != len(features) * len(times)]
        offender = short.index[0] if len(short) else subjects[0]
        line = int(np.flatnonzero(frame["subject"].to_numpy() == offender)[-1]) + 2
        raise UnbalancedDataError(
            f"Expected {expected} rows for {len(subjects)} subjects x {len(features)} features x "
            f"{len(times)} times, got {len(frame)}; subject {offender!r} is incomplete", line=line)

    s_index = pd.Index(subjects).get_indexer(frame["subject"])
    f_index = pd.Index(features).get_indexer(frame["feature"])
    t_index = np.searchsorted(times, frame["time"].to_numpy())
    values = np.empty((len(subjects), len(features), len(times)))
    values[s_index, f_index, t_index] = frame["value"].to_numpy(dtype=float)
    logger.info(f"Read {path}: N={len(subjects)}, D={len(features)}, T={len(times)}")
    return LongitudinalDataset(values=values, subject_ids=[str(s) for s in subjects],
                               feature_names=[str(f) for f in features])


_TS_BOOLEAN_TAGS = ("@timestamps", "@missing", "@univariate", "@equallength")


def _parse_ts_header(tag: str, value: str, line_num: int, meta: dict) -> None:
    if tag == "@problemname":
        if not value:
            raise DataFormatError("problemname tag requires an associated value", line=line_num)
        meta["problem_name"] = value
    elif tag in _TS_BOOLEAN_TAGS:
        if value not in ("true", "false"):
            raise DataFormatError(f"{tag} expects true or false, got {value!r}", line=line_num)
        meta[tag[1:]] = value == "true"
    elif tag in ("@dimensions", "@serieslength"):
        try:
            meta[tag[1:]] = int(value)
        except ValueError:
            raise DataFormatError(f"{tag} expects an integer, got {value!r}", line=line_num)
    elif tag == "@classlabel":
        tokens = value.split()
        if not tokens or tokens[0].lower() not in ("true", "false"):
            raise DataFormatError("classlabel tag expects true or false", line=line_num)
        if tokens[0].lower() == "true" and len(tokens) == 1:
            raise DataFormatError("classlabel tag requires the list of labels", line=line_num)
        meta["class_labels"] = tokens[1:] if tokens[0].lower() == "true" else None
    elif tag == "@targetlabel":
        raise DataFormatError("Regression targets are not supported", line=line_num)
    else:
        raise DataFormatError(f"Unknown header tag {tag}", line=line_num)


def parse_ts_file(path: PathLike) -> Tuple[LongitudinalDataset, Optional[np.ndarray]]:
    """
    Parse a `.ts` file into a balanced dataset and optional class labels.

    Each data line holds one case: dimensions separated by ``:``, values
    within a dimension separated by ``,``, and the class label after the
    final ``:`` when ``@classLabel true``. Labels map to 0.. in the order the
    header declares them.

    Raises:
        DataFormatError: On malformed headers or data (with line number)
        UnbalancedDataError: On missing values, ragged lengths or timestamps
    """
    meta: Dict[str, object] = {"class_labels": None}
    cases: List[List[List[float]]] = []
    labels: List[str] = []
    data_started = False
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataFormatError(f"Cannot read {path}: {e}")

    with handle:
        for line_num, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not data_started:
                if not line.startswith("@"):
                    raise DataFormatError("Data found before the @data tag", line=line_num)
                tag, _, value = line.partition(" ")
                tag = tag.lower()
                if tag == "@data":
                    if value.strip():
                        raise DataFormatError("data tag should not have an associated value", line=line_num)
                    if meta.get("timestamps"):
                        raise UnbalancedDataError("Timestamped series are not supported", line=line_num)
                    data_started = True
                else:
                    value = value.strip()
                    if tag not in ("@problemname", "@classlabel"):
                        value = value.lower()
                    _parse_ts_header(tag, value, line_num, meta)
                continue

            parts = line.split(":")
            class_labels = meta["class_labels"]
            if class_labels is not None:
                label = parts.pop().strip()
                if label not in class_labels:
                    raise DataFormatError(f"Class label {label!r} not declared in the header", line=line_num)
                labels.append(label)
            expected_dims = meta.get("dimensions")
            if expected_dims is not None and len(parts) != expected_dims:
                raise DataFormatError(f"Expected {expected_dims} dimensions, found {len(parts)}", line=line_num)
            case = []
            for part in parts:
                tokens = [t.strip() for t in part.split(",")]
                if any(t == "?" or t.lower() == "nan" for t in tokens):
                    raise UnbalancedDataError("Missing values are not supported", line=line_num)
                try:
                    case.append([float(t) for t in tokens])
                except ValueError:
                    raise DataFormatError(f"Non-numeric value in series: {part[:40]!r}", line=line_num)
            if cases and (len(case) != len(cases[0]) or any(len(s) != len(cases[0][0]) for s in case)):
                raise UnbalancedDataError("Series lengths or dimension counts differ between cases",
                                          line=line_num)
            if any(len(s) != len(case[0]) for s in case):
                raise UnbalancedDataError("Dimensions of one case have different lengths", line=line_num)
            cases.append(case)

    if not data_started:
        raise DataFormatError("Reached end of file without a @data tag")
    if not cases:
        raise DataFormatError("No data lines after @data")

    values = np.array(cases, dtype=float)
    dataset = LongitudinalDataset(values=values)
    label_array = None
    if meta["class_labels"] is not None:
        mapping = {label: i for i, label in enumerate(meta["class_labels"])}
        label_array = np.array([mapping[label] for label in labels], dtype=int)
    logger.info(f"Parsed {meta.get('problem_name', path)}: N={dataset.N}, D={dataset.D}, T={dataset.T}")
    return dataset, label_array


def read_dataset(path: PathLike) -> Tuple[LongitudinalDataset, Optional[np.ndarray]]:
    """Read a `.ts` or CSV dataset; CSV files carry no labels."""
    if str(path).lower().endswith(".ts"):
        return parse_ts_file(path)
    return read_dataset_csv(path), None


def difference(dataset: LongitudinalDataset) -> LongitudinalDataset:
    """First differences along time (T becomes T - 1)."""
    if dataset.T < 2:
        raise UnbalancedDataError("Differencing needs at least two time points")
    return LongitudinalDataset(values=np.diff(dataset.values, axis=2), subject_ids=list(dataset.subject_ids),
                               feature_names=list(dataset.feature_names))


def standardize(dataset: LongitudinalDataset) -> LongitudinalDataset:
    """Per-feature z-scores pooled over subjects and times."""
    mean = dataset.values.mean(axis=(0, 2), keepdims=True)
    std = dataset.values.std(axis=(0, 2), keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return LongitudinalDataset(values=(dataset.values - mean) / std, subject_ids=list(dataset.subject_ids),
                               feature_names=list(dataset.feature_names))


def write_json(data: dict, path: PathLike) -> None:
    """Deterministic JSON (sorted keys, trailing newline)."""
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(path: PathLike, scenario: dict, seed: int, datasets: List[dict]) -> None:
    """Record scenario, seed and per-dataset file names and true labels."""
    write_json({"format_version": MANIFEST_FORMAT_VERSION, "scenario": scenario, "seed": seed,
                "datasets": datasets}, path)


def read_manifest(path: PathLike) -> dict:
    """
    Read a simulation manifest.

    Raises:
        DataFormatError: If the file is missing, not JSON or lacks required keys
    """
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataFormatError(f"Cannot read manifest {path}: {e}")
    except json.JSONDecodeError as e:
        raise DataFormatError(f"Manifest is not valid JSON: {e.msg}", line=e.lineno)
    missing = [key for key in ("format_version", "scenario", "seed", "datasets") if key not in manifest]
    if missing:
        raise DataFormatError(f"Manifest lacks keys {missing}")
    if manifest["format_version"] != MANIFEST_FORMAT_VERSION:
        raise DataFormatError(f"Unsupported manifest version {manifest['format_version']}")
    return manifest


def _encode_array(array: np.ndarray) -> str:
    array = np.asarray(array)
    dtype = "<c16" if np.iscomplexobj(array) else "<f8"
    payload = base64.b64encode(np.ascontiguousarray(array, dtype=dtype).tobytes()).decode("ascii")
    shape = ",".join(str(s) for s in array.shape)
    return f"array:{dtype}:{shape}:{payload}"


def _decode_array(text: str, line_num: int) -> np.ndarray:
    try:
        _, dtype, shape, payload = text.split(":", 3)
        if dtype not in ("<f8", "<c16"):
            raise ValueError(f"unsupported dtype {dtype}")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        return np.frombuffer(base64.b64decode(payload), dtype=dtype).reshape(dims).copy()
    except ValueError as e:
        raise ModelFormatError(f"Corrupt array: {e}", line=line_num)


def save_model(model, path: PathLike) -> None:
    """
    Write a fitted CkmmModel as versioned UTF-8 ``key = value`` lines.

    Scalars and the configuration are JSON; arrays are little-endian base64.
    """
    entries = {
        "format_version": json.dumps(MODEL_FORMAT_VERSION),
        "G": json.dumps(model.G),
        "D": json.dumps(model.D),
        "T": json.dumps(model.T),
        "config": json.dumps(model.config.to_dict(), sort_keys=True),
        "pis": _encode_array(model.pis),
        "reference_bandwidths": _encode_array(model.reference_bandwidths),
    }
    for d in range(model.D):
        entries[f"points.{d}"] = _encode_array(model.kdes[0][d].points)
    for g in range(model.G):
        entries[f"corr.{g}.blocks"] = _encode_array(model.corr[g].blocks)
        entries[f"corr.{g}.ridge"] = json.dumps(model.corr[g].ridge)
        for d in range(model.D):
            entries[f"kde.{g}.{d}.bandwidth"] = json.dumps(model.kdes[g][d].bandwidth)
            entries[f"kde.{g}.{d}.weights"] = _encode_array(model.kdes[g][d].weights)
    lines = [MODEL_HEADER] + [f"{key} = {value}" for key, value in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: PathLike):
    """
    Read a model written by save_model.

    Raises:
        ModelFormatError: On a missing file, unknown version or corrupt entry
    """
    from .margins import WeightedKde
    from .mixture import CkmmModel, FitConfig
    from .spectral import SpectralCorrelation

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ModelFormatError(f"Cannot read model {path}: {e}")
    entries: Dict[str, Tuple[str, int]] = {}
    for line_num, line in enumerate(text.splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ModelFormatError("Expected 'key = value'", line=line_num)
        entries[key] = (value, line_num)

    def scalar(key: str):
        if key not in entries:
            raise ModelFormatError(f"Missing entry {key}")
        value, line_num = entries[key]
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            raise ModelFormatError(f"Invalid value for {key}", line=line_num)

    def array(key: str) -> np.ndarray:
        if key not in entries:
            raise ModelFormatError(f"Missing entry {key}")
        return _decode_array(*entries[key])

    version = scalar("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"Unsupported model format version {version}")
    G, D = scalar("G"), scalar("D")
    points = [array(f"points.{d}") for d in range(D)]
    kdes = [[WeightedKde(points=points[d], weights=array(f"kde.{g}.{d}.weights"),
                         bandwidth=scalar(f"kde.{g}.{d}.bandwidth")) for d in range(D)] for g in range(G)]
    corr = [SpectralCorrelation(blocks=array(f"corr.{g}.blocks"), ridge=scalar(f"corr.{g}.ridge"))
            for g in range(G)]
    model = CkmmModel(pis=array("pis"), corr=corr, kdes=kdes,
                      reference_bandwidths=array("reference_bandwidths"),
                      config=FitConfig.from_dict(scalar("config")))
    if model.T != scalar("T"):
        raise ModelFormatError("Stored T disagrees with the correlation blocks")
    return model
