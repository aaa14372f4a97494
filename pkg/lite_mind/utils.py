"""Utility functions for seeding, sampling, serialization and output directories"""
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

import numpy as np
import torch

from lite_mind.constants import EPS, INCOMPLETE_MARKER

logger = logging.getLogger(__name__)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S27, _S30, _S31 = np.uint64(27), np.uint64(30), np.uint64(31)


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 output finalizer over uint64 arrays (wrapping arithmetic)"""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def splitmix64_next(state: np.ndarray):
    """Advance SplitMix64 states; returns (new_state, output)"""
    state = np.asarray(state, dtype=np.uint64) + _GOLDEN
    return state, mix64(state)


def fisher_yates_prefix(n_rows: int, n_items: int, prefix: int, seed: int) -> np.ndarray:
    """First `prefix` entries of an independent Fisher-Yates shuffle of range(n_items) per row.

    Row r draws from its own SplitMix64 stream started at mix64(mix64(seed) + r).
    Bounded draws use `output % remaining`.
    """
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    if not 0 <= prefix <= n_items:
        raise ValueError(f"prefix {prefix} outside [0, {n_items}]")
    rows = np.arange(n_rows)
    state = mix64(mix64(np.uint64(seed)) + rows.astype(np.uint64))
    order = np.tile(np.arange(n_items, dtype=np.int64), (n_rows, 1))
    for j in range(prefix):
        state, out = splitmix64_next(state)
        pick = (out % np.uint64(n_items - j)).astype(np.int64) + j
        head = order[rows, j].copy()
        order[rows, j] = order[rows, pick]
        order[rows, pick] = head
    return order[:, :prefix]


def seed_everything(seed: int, threads: Optional[int] = None) -> torch.Generator:
    """Seed torch/numpy, pin threads if asked, and return a dedicated torch generator"""
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    if threads is not None:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    logger.debug(f"Seeded run with seed={seed}, threads={threads}")
    return torch.Generator().manual_seed(seed)


def l2_normalize(matrix: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unit-normalize along axis; zero rows stay zero"""
    norms = np.linalg.norm(matrix, axis=axis, keepdims=True)
    return matrix / np.maximum(norms, EPS)


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    """Write JSON with sorted keys so reruns are byte-identical"""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


@contextmanager
def output_directory(path: Path) -> Iterator[Path]:
    """Create an output directory flagged INCOMPLETE until the block finishes"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    marker = path / INCOMPLETE_MARKER
    marker.write_text("run did not finish\n", encoding="utf-8")
    yield path
    marker.unlink()
    logger.info(f"Finished writing {path}")


def create_colorbar_dict(min_val: float, max_val: float, title: str,
                         x_position: float = 1.02) -> dict:
    """Create colorbar configuration dictionary"""
    return {
        'title': dict(text=title, side='right', font=dict(size=10)),
        'thickness': 12,
        'x': x_position,
        'tickfont': dict(size=9),
        'ticks': 'outside',
        'ticklen': 2,
        'tickmode': 'array',
        'tickvals': [min_val, (min_val + max_val) / 2, max_val],
        'ticktext': [f'{min_val:.2f}', f'{(min_val + max_val) / 2:.2f}', f'{max_val:.2f}'],
    }
