"""Word error rate and the three sequence-level summary metrics.

The evaluation grid R is lower-triangular: R[i][j] (1-based) is the
error rate on task j's test split measured right after task i was
learned, so it is defined for j <= i. From the grid:

  AVG  mean of the final row: performance over every task on the last
       model
  BWT  mean over tasks 1..T-1 of R[j][j] - R[T][j]: how much previous
       tasks moved since they were first learned; negative values mean
       forgetting
  FWT  mean over tasks 2..T of ft[j] - R[j][j] against a fine-tuning
       reference diagonal ft: positive values mean the strategy learns
       new tasks better than plain fine-tuning does

Task 1 is excluded from FWT because every strategy trains it
identically to fine-tuning, making the difference identically zero.
The functions are unit-agnostic (fractions and percentages both work).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def edit_distance(hyp, ref) -> int:
    """Minimum number of substitutions, deletions and insertions."""
    hyp = list(hyp)
    ref = list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hyp, ref) -> float:
    """Edit distance normalized by the reference length (may exceed 1)."""
    ref = list(ref)
    if not ref:
        raise ValueError("reference sequence must be non-empty")
    return edit_distance(hyp, ref) / len(ref)


class WerMatrix:
    """T x T grid of error rates, defined on the lower triangle."""

    def __init__(self, T: int):
        if T < 1:
            raise ValueError(f"task count must be >= 1, got {T}")
        self.T = T
        self.R = np.full((T, T), np.nan)

    @classmethod
    def from_array(cls, values) -> "WerMatrix":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {arr.shape}")
        m = cls(arr.shape[0])
        m.R = arr.copy()
        return m

    @classmethod
    def from_final_row(cls, values) -> "WerMatrix":
        """Grid with only the last row defined (enough for AVG)."""
        vals = np.asarray(values, dtype=np.float64)
        m = cls(len(vals))
        m.R[-1, :] = vals
        return m

    def set(self, i: int, j: int, value: float) -> None:
        """1-based assignment; only cells with j <= i are meaningful."""
        if not (1 <= j <= i <= self.T):
            raise ValueError(f"cell ({i}, {j}) outside the lower triangle of T={self.T}")
        self.R[i - 1, j - 1] = value

    def get(self, i: int, j: int) -> float:
        return float(self.R[i - 1, j - 1])

    def defined(self, i: int, j: int) -> bool:
        return bool(np.isfinite(self.R[i - 1, j - 1]))

    def final_row(self) -> np.ndarray:
        return self.R[-1, :].copy()

    def diagonal(self) -> np.ndarray:
        return np.diag(self.R).copy()

    def to_csv(self, path) -> None:
        """Header row of task ids; row i prefixed by after_task_i; blanks undefined."""
        lines = ["," + ",".join(str(j) for j in range(1, self.T + 1))]
        for i in range(self.T):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in self.R[i]]
            lines.append(f"after_task_{i + 1}," + ",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "WerMatrix":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty WER matrix file")
        header = lines[0].split(",")
        T = len(header) - 1
        if T < 1 or header[1:] != [str(j) for j in range(1, T + 1)]:
            raise ValueError(f"{path}: malformed header row {lines[0]!r}")
        if len(lines) != T + 1:
            raise ValueError(f"{path}: expected {T} rows, found {len(lines) - 1}")
        m = cls(T)
        for i, line in enumerate(lines[1:], start=1):
            cells = line.split(",")
            if cells[0] != f"after_task_{i}" or len(cells) != T + 1:
                raise ValueError(f"{path}: malformed row {i}: {line!r}")
            for j, cell in enumerate(cells[1:]):
                if cell:
                    m.R[i - 1, j] = float(cell)
        return m


@dataclass(frozen=True)
class SummaryMetrics:
    avg: float
    bwt: float | None
    fwt: float | None

    def as_dict(self) -> dict:
        return {"avg": self.avg, "bwt": self.bwt, "fwt": self.fwt}


def avg(matrix: WerMatrix) -> float:
    """Mean error rate over all tasks, evaluated on the final model."""
    row = matrix.final_row()
    if not np.all(np.isfinite(row)):
        raise ValueError("incomplete matrix: final row has undefined entries")
    return float(row.mean())


def bwt(matrix: WerMatrix) -> float:
    """Mean decrease in error on tasks 1..T-1 since they were learned."""
    if matrix.T < 2:
        raise ValueError("backward transfer is undefined for fewer than 2 tasks")
    diag = matrix.diagonal()[:-1]
    final = matrix.final_row()[:-1]
    if not (np.all(np.isfinite(diag)) and np.all(np.isfinite(final))):
        raise ValueError("incomplete matrix: diagonal or final row has undefined entries")
    return float((diag - final).mean())


def fwt(matrix: WerMatrix, ft_diag) -> float:
    """Mean improvement over the fine-tuning diagonal on tasks 2..T."""
    ref = np.asarray(ft_diag, dtype=np.float64)
    if len(ref) != matrix.T:
        raise ValueError(f"reference diagonal has {len(ref)} entries, need {matrix.T}")
    diag = matrix.diagonal()[1:]
    ref = ref[1:]
    if not (np.all(np.isfinite(diag)) and np.all(np.isfinite(ref))):
        raise ValueError("missing reference or matrix diagonal entries for tasks 2..T")
    return float((ref - diag).mean())


def summarize(matrix: WerMatrix, ft_diag=None) -> SummaryMetrics:
    return SummaryMetrics(
        avg=avg(matrix),
        bwt=bwt(matrix) if matrix.T >= 2 else None,
        fwt=fwt(matrix, ft_diag) if ft_diag is not None else None,
    )
