"""Per-block usage heatmap, fine-tuned-block histogram, and the Visual Decathlon score."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format(float(v), ".17g") if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _bits(decisions) -> np.ndarray:
    bits = np.asarray(decisions)
    if bits.ndim != 2:
        raise ValueError(f"decision log must be (examples, blocks), got shape {bits.shape}")
    return bits


def policy_heatmap(decisions, first_block: int = 0) -> list[tuple[int, float]]:
    """(block index, fraction of examples routed through its tuned copy) per routable block."""
    bits = _bits(decisions)
    if bits.shape[0] == 0:
        return [(first_block + l, 0.0) for l in range(bits.shape[1])]
    v = bits.mean(axis=0)
    return [(first_block + l, float(v[l])) for l in range(bits.shape[1])]


def usage_histogram(decisions) -> list[tuple[int, int]]:
    """(number of fine-tuned blocks, example count) for 0..routable blocks."""
    bits = _bits(decisions)
    counts = np.bincount(bits.sum(axis=1).astype(np.intp), minlength=bits.shape[1] + 1)
    return [(i, int(c)) for i, c in enumerate(counts)]


def export_policy_heatmap(decisions, first_block: int = 0) -> str:
    return _csv(("block", "v"), policy_heatmap(decisions, first_block))


def export_usage_histogram(decisions) -> str:
    return _csv(("num_fine_tuned_blocks", "count"), usage_histogram(decisions))


@dataclass(frozen=True)
class DomainError:
    error: float
    baseline_error: float

    def __post_init__(self):
        if not self.baseline_error > 0:
            raise ValueError(f"baseline error must be positive, got {self.baseline_error}")
        if not 0.0 <= self.error <= 1.0:
            raise ValueError(f"error must lie in [0, 1], got {self.error}")
        if self.baseline_error > 1.0:
            raise ValueError(f"baseline error must be <= 1, got {self.baseline_error}")

    @property
    def score(self) -> float:
        # ratio first, so a perfect domain scores exactly 1000
        ratio = max(0.0, self.baseline_error - self.error) / self.baseline_error
        return 1000.0 * ratio * ratio


def decathlon_score(domains: Sequence[DomainError]) -> tuple[list[float], float]:
    scores = [d.score for d in domains]
    return scores, float(sum(scores))


def read_domain_errors(text: str) -> list[DomainError]:
    """Two-column CSV (error, baseline error); a non-numeric first row is a header."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    out = []
    for i, row in enumerate(rows):
        if len(row) != 2:
            raise ValueError(f"row {i + 1}: expected 2 columns, got {len(row)}")
        try:
            e, emax = float(row[0]), float(row[1])
        except ValueError:
            if i == 0:
                continue
            raise ValueError(f"row {i + 1}: non-numeric value {row!r}") from None
        out.append(DomainError(e, emax))
    return out


def export_decathlon(domains: Sequence[DomainError]) -> str:
    scores, total = decathlon_score(domains)
    rows = [(i, d.error, d.baseline_error, s) for i, (d, s) in enumerate(zip(domains, scores))]
    return _csv(("domain", "error", "baseline_error", "score"), rows) + f"total,,,{format(total, '.17g')}\n"
