"""Round-level metrics and their CSV serialization.

Detection precision/recall treat "flagged as noisy" (confident mask 0)
as the positive class, judged against the ground-truth corruption flags.
CSV output is byte-stable across runs and machines: fixed column order,
repr-based float formatting, LF line endings, no timestamps.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

CSV_HEADER_TAG = "# fednoise-v1"

CSV_COLUMNS = (
    "round",
    "test_accuracy",
    "mean_train_loss",
    "confident_fraction",
    "mask_precision",
    "mask_recall",
    "weight_divergence",
    "r_t",
)

_INT_COLUMNS = {"round"}


@dataclass
class MetricsRecord:
    """One federated round's summary row.

    wall_ms is informational only and never serialized; everything else
    must be a pure function of (config, seed).
    """

    round: int
    test_accuracy: float
    mean_train_loss: float
    confident_fraction: float
    mask_precision: float
    mask_recall: float
    weight_divergence: float
    r_t: float
    wall_ms: float = 0.0


def detection_metrics(
    mask: np.ndarray, given_labels: np.ndarray, true_labels: np.ndarray
) -> tuple[float, float]:
    """(precision, recall) of noisy-sample detection.

    An example counts as detected when its confident mask is 0 and as
    actually noisy when its given label differs from its true label.
    Degenerate denominators yield 1.0: flagging nothing means no false
    positives, and a clean shard has nothing to miss.
    """
    mask = np.asarray(mask)
    given_labels = np.asarray(given_labels)
    true_labels = np.asarray(true_labels)
    if not (mask.shape == given_labels.shape == true_labels.shape):
        raise ContractViolation("detection_metrics: input arrays must align")
    detected = mask == 0
    actual = given_labels != true_labels
    return detection_from_counts(
        int((detected & actual).sum()), int(detected.sum()), int(actual.sum())
    )


def detection_from_counts(
    detected_true_noisy: int, detected_noisy: int, actual_noisy: int
) -> tuple[float, float]:
    """Same metrics from pre-aggregated counts (for multi-client rounds)."""
    if not 0 <= detected_true_noisy <= detected_noisy:
        raise ContractViolation("detection metrics: true positives exceed detections")
    if detected_true_noisy > actual_noisy:
        raise ContractViolation("detection metrics: true positives exceed actual noise")
    precision = detected_true_noisy / detected_noisy if detected_noisy else 1.0
    recall = detected_true_noisy / actual_noisy if actual_noisy else 1.0
    return precision, recall


def weight_divergence(client_flats: list[np.ndarray]) -> float:
    """Scale-free dispersion of client weight vectors.

    Mean pairwise euclidean distance divided by the mean vector norm, so
    the value is invariant to a global rescaling of the weights. All-zero
    inputs return 0.0.
    """
    if len(client_flats) < 2:
        raise ContractViolation("weight_divergence: needs at least two clients")
    stacked = np.stack(client_flats)
    n = stacked.shape[0]
    dists = []
    for i in range(n):
        for j in range(i + 1, n):
            dists.append(float(np.linalg.norm(stacked[i] - stacked[j])))
    mean_norm = float(np.linalg.norm(stacked, axis=1).mean())
    if mean_norm < 1e-12:
        return 0.0
    return float(np.mean(dists)) / mean_norm


def _fmt(value: float | int) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def records_to_csv(records: list[MetricsRecord]) -> str:
    """Render rows to the deterministic CSV format (tag line + header)."""
    buf = io.StringIO()
    buf.write(CSV_HEADER_TAG + "\n")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for rec in records:
        buf.write(",".join(_fmt(getattr(rec, col)) for col in CSV_COLUMNS) + "\n")
    return buf.getvalue()


def write_csv(path: str, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(records_to_csv(records))


def read_csv(path: str) -> list[MetricsRecord]:
    """Parse a file written by write_csv back into records (wall_ms = 0)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CSV_HEADER_TAG:
        raise ContractViolation(f"{path}: missing {CSV_HEADER_TAG!r} header line")
    if len(lines) < 2 or lines[1] != ",".join(CSV_COLUMNS):
        raise ContractViolation(f"{path}: unexpected column header")
    out = []
    for line in lines[2:]:
        parts = line.split(",")
        if len(parts) != len(CSV_COLUMNS):
            raise ContractViolation(f"{path}: malformed row {line!r}")
        kwargs = {
            col: int(raw) if col in _INT_COLUMNS else float(raw)
            for col, raw in zip(CSV_COLUMNS, parts)
        }
        out.append(MetricsRecord(**kwargs))
    return out
