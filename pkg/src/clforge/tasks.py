"""Deterministic synthetic benchmark suites.

Two suite kinds stand in for real sequence-transduction corpora:

  dialect_continuum  all tasks share one vocabulary and one decoding
                     head; task t's token prototypes are a convex blend
                     ``normalize(s * base + (1 - s) * perturbation_t)``
                     of a common base matrix and a per-task
                     perturbation, so ``similarity`` s in [0, 1] moves
                     the tasks from identical (1) to independent (0)

  language_family    every task draws an independent prototype matrix
                     and owns its decoding head

An utterance is built by sampling a target length, sampling tokens
uniformly over [0, V), and emitting between f_min and f_max frames per
token, each equal to the token's prototype row plus iid Gaussian noise.
Tokens that repeat their predecessor emit at least two frames so that a
blank-separated alignment always exists.

All randomness is keyed by (seed, split, utterance index), so any
single utterance is reproducible in isolation and the three splits use
disjoint streams by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .model import Utterance
from .rng import derive_seed, generator

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SuiteConfig:
    kind: str = "dialect_continuum"  # | "language_family"
    T: int = 4
    V: int = 20
    d_i: int = 8
    similarity: float = 0.8  # dialect_continuum only
    n_train: object = None  # int, per-task tuple, or None for the default skew
    n_val: int = 150
    n_test: int = 200
    noise_sigma: float = 0.3
    noise_sigma_per_task: tuple | None = None
    frames_per_token: tuple = (1, 3)
    target_len: tuple = (3, 8)
    master_seed: int = 7

    def __post_init__(self):
        if self.kind not in ("dialect_continuum", "language_family"):
            raise ConfigError(f"suite.kind must be dialect_continuum or language_family, got {self.kind!r}")
        if self.T < 2:
            raise ConfigError(f"suite.T must be >= 2, got {self.T}")
        if self.V < 1 or self.d_i < 1:
            raise ConfigError("suite.V and suite.d_i must be >= 1")
        if not (0.0 <= self.similarity <= 1.0):
            raise ConfigError(f"suite.similarity must lie in [0, 1], got {self.similarity}")
        if self.noise_sigma < 0:
            raise ConfigError("suite.noise_sigma must be >= 0")
        f_lo, f_hi = self.frames_per_token
        if f_lo < 1 or f_hi < f_lo:
            raise ConfigError(f"suite.frames_per_token must satisfy 1 <= lo <= hi, got {self.frames_per_token}")
        t_lo, t_hi = self.target_len
        if t_lo < 1 or t_hi < t_lo:
            raise ConfigError(f"suite.target_len must satisfy 1 <= lo <= hi, got {self.target_len}")
        if self.n_val < 1 or self.n_test < 1:
            raise ConfigError("suite.n_val and suite.n_test must be >= 1")
        if self.noise_sigma_per_task is not None and len(self.noise_sigma_per_task) != self.T:
            raise ConfigError("suite.noise_sigma_per_task must list one value per task")

    def train_counts(self) -> tuple:
        """Per-task training-set sizes; default skews mass to task 1."""
        if self.n_train is None:
            return (2000,) + (500,) * (self.T - 1)
        if isinstance(self.n_train, int):
            return (self.n_train,) * self.T
        counts = tuple(int(n) for n in self.n_train)
        if len(counts) != self.T:
            raise ConfigError(f"suite.n_train must list one size per task, got {len(counts)} for T={self.T}")
        if any(n < 1 for n in counts):
            raise ConfigError("suite.n_train entries must be >= 1")
        return counts

    def as_dict(self) -> dict:
        d = {
            "kind": self.kind, "T": self.T, "V": self.V, "d_i": self.d_i,
            "similarity": self.similarity, "n_train": list(self.train_counts()),
            "n_val": self.n_val, "n_test": self.n_test,
            "noise_sigma": self.noise_sigma,
            "noise_sigma_per_task": list(self.noise_sigma_per_task) if self.noise_sigma_per_task else None,
            "frames_per_token": list(self.frames_per_token),
            "target_len": list(self.target_len), "master_seed": self.master_seed,
        }
        return d


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    prototypes: np.ndarray  # (V, d_i), unit-norm rows
    vocab_size: int
    head_mode: str  # "shared" | "own"
    n_train: int
    n_val: int
    n_test: int
    noise_sigma: float
    frames_per_token: tuple
    target_len: tuple
    seed: int

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        protos.flags.writeable = False
        object.__setattr__(self, "prototypes", protos)

    def count(self, split: str) -> int:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, 1e-12)


def gen_task_suite(config: SuiteConfig) -> list[TaskSpec]:
    """Materialize the T task definitions of a suite, deterministically."""
    counts = config.train_counts()
    base = generator("suite-base", config.master_seed).standard_normal((config.V, config.d_i))
    suite = []
    for t in range(1, config.T + 1):
        pert = generator("suite-task", config.master_seed, t).standard_normal((config.V, config.d_i))
        if config.kind == "dialect_continuum":
            s = config.similarity
            protos = _unit_rows(s * base + (1.0 - s) * pert)
            head_mode = "shared"
        else:
            protos = _unit_rows(pert)
            head_mode = "own"
        sigma = config.noise_sigma
        if config.noise_sigma_per_task is not None:
            sigma = float(config.noise_sigma_per_task[t - 1])
        suite.append(TaskSpec(
            task_id=t, prototypes=protos, vocab_size=config.V, head_mode=head_mode,
            n_train=counts[t - 1], n_val=config.n_val, n_test=config.n_test,
            noise_sigma=sigma, frames_per_token=tuple(config.frames_per_token),
            target_len=tuple(config.target_len),
            seed=derive_seed(config.master_seed, "task", t),
        ))
    return suite


def synthesize_utterance(spec: TaskSpec, split: str, index: int) -> Utterance:
    """Single utterance, reproducible from (task seed, split, index) alone."""
    rng = generator("utt", spec.seed, split, index)
    t_lo, t_hi = spec.target_len
    f_lo, f_hi = spec.frames_per_token
    n_tokens = int(rng.integers(t_lo, t_hi + 1))
    tokens = rng.integers(0, spec.vocab_size, size=n_tokens)
    frames = rng.integers(f_lo, f_hi + 1, size=n_tokens)
    # a repeated token needs a blank in between: give it >= 2 frames
    for k in range(1, n_tokens):
        if tokens[k] == tokens[k - 1] and frames[k] < 2:
            frames[k] = 2
    feats = spec.prototypes[np.repeat(tokens, frames)]
    if spec.noise_sigma > 0:
        feats = feats + spec.noise_sigma * rng.standard_normal(feats.shape)
    else:
        feats = feats.copy()
    return Utterance(features=feats, target=tokens, task_id=spec.task_id)


def synthesize(spec: TaskSpec, split: str) -> list[Utterance]:
    """Full split for a task; splits use disjoint seed streams."""
    return [synthesize_utterance(spec, split, i) for i in range(spec.count(split))]


def save_dataset(utterances, path, header: dict) -> None:
    """One file per (task, split): a JSON header line, then binary records.

    Per utterance (little-endian): u32 token count, u32 tokens, u32 L,
    u32 d_i, then L*d_i f64 features in row-major order.
    """
    head = dict(header)
    head["count"] = len(utterances)
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode("utf-8") + b"\n")
        for utt in utterances:
            y = np.asarray(utt.target, dtype="<u4")
            feats = np.ascontiguousarray(utt.features, dtype="<f8")
            fh.write(struct.pack("<I", len(y)))
            fh.write(y.tobytes())
            fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
            fh.write(feats.tobytes())


def load_dataset(path):
    """Inverse of save_dataset; returns (utterances, header)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    task_id = int(header.get("task_id", 0))
    off = nl + 1
    utterances = []
    for _ in range(int(header["count"])):
        (n_tok,) = struct.unpack_from("<I", raw, off)
        off += 4
        tokens = np.frombuffer(raw, dtype="<u4", count=n_tok, offset=off).astype(np.int64)
        off += 4 * n_tok
        L, d = struct.unpack_from("<II", raw, off)
        off += 8
        feats = np.frombuffer(raw, dtype="<f8", count=L * d, offset=off).reshape(L, d)
        off += 8 * L * d
        utterances.append(Utterance(features=feats, target=tokens, task_id=task_id))
    if off != len(raw):
        raise ConfigError(f"{path}: {len(raw) - off} trailing bytes")
    return utterances, header


def dataset_header(spec: TaskSpec, split: str) -> dict:
    return {
        "task_id": spec.task_id, "V": spec.vocab_size,
        "d_i": int(spec.prototypes.shape[1]), "split": split, "seed": spec.seed,
    }
