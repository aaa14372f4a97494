"""Cosine retrieval, the candidate-pool evaluation protocol, and retrieval-based zero-shot classification"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.linear_model import Ridge

from lite_mind.constants import EPS, N_SEEDS, POOL_SIZE, TOP_K, UNIT_NORM_TOL
from lite_mind.errors import ConfigError, DataError, ShapeError
from lite_mind.utils import fisher_yates_prefix, l2_normalize

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingStore:
    """Id-indexed embedding rows; item_shape keeps the unflattened per-item shape"""
    ids: List[str]
    matrix: np.ndarray
    normalized: bool = False
    item_shape: Tuple[int, ...] = ()

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2:
            raise ShapeError(f"embedding matrix must be 2-D, got shape {self.matrix.shape}")
        if len(self.ids) != self.matrix.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids for {self.matrix.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding store ids must be unique")
        if not np.isfinite(self.matrix).all():
            raise DataError("embedding rows must be finite")
        if not self.item_shape:
            self.item_shape = (self.matrix.shape[1],)
        if self.normalized and len(self.ids):
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
                raise DataError("store flagged normalized but rows are not unit length")
        self._positions = {item: pos for pos, item in enumerate(self.ids)}

    @classmethod
    def from_array(cls, ids: Sequence[str], array: np.ndarray, normalized: bool = False) -> "EmbeddingStore":
        array = np.asarray(array)
        return cls(ids=list(ids), matrix=array.reshape(array.shape[0], -1),
                   normalized=normalized, item_shape=tuple(array.shape[1:]))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __contains__(self, item: str) -> bool:
        return item in self._positions

    def position(self, item: str) -> int:
        try:
            return self._positions[item]
        except KeyError:
            raise DataError(f"id {item!r} not found in embedding store") from None

    def row(self, item: str) -> np.ndarray:
        return self.matrix[self.position(item)]

    def take(self, items: Sequence[str]) -> "EmbeddingStore":
        rows = [self.position(item) for item in items]
        return EmbeddingStore(ids=list(items), matrix=self.matrix[rows],
                              normalized=self.normalized, item_shape=self.item_shape)

    def as_normalized(self) -> "EmbeddingStore":
        if self.normalized:
            return self
        return EmbeddingStore(ids=self.ids, matrix=l2_normalize(self.matrix.astype(np.float64)),
                              normalized=True, item_shape=self.item_shape)

    def items(self) -> np.ndarray:
        """Rows reshaped back to the per-item shape"""
        return self.matrix.reshape(len(self.ids), *self.item_shape)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim needs equal lengths, got {a.shape} and {b.shape}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a < EPS and norm_b < EPS:
        logger.warning("cosine similarity of two zero vectors; returning 0")
        return 0.0
    return float(a @ b / (max(norm_a, EPS) * max(norm_b, EPS)))


def similarity_matrix(queries: EmbeddingStore, targets: EmbeddingStore) -> np.ndarray:
    """Cosine similarity of every query row against every target row"""
    if queries.dim != targets.dim:
        raise ShapeError(f"query dim {queries.dim} does not match target dim {targets.dim}")
    return queries.as_normalized().matrix @ targets.as_normalized().matrix.T


def chance_level(candidates: int, k: int = 1) -> float:
    return min(k, candidates) / candidates


@dataclass
class RetrievalProtocol:
    """Candidate-pool protocol: pool size, seeds, reported top-k"""
    pool_size: int = POOL_SIZE
    n_seeds: int = N_SEEDS
    base_seed: int = 0
    top_k: Tuple[int, ...] = TOP_K

    def __post_init__(self):
        self.top_k = tuple(int(k) for k in self.top_k)
        if self.pool_size < 2:
            raise ConfigError(f"pool_size must be >= 2, got {self.pool_size}")
        if self.n_seeds < 1:
            raise ConfigError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if self.base_seed < 0:
            raise ConfigError(f"base_seed must be >= 0, got {self.base_seed}")

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['top_k'] = list(self.top_k)
        return values

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RetrievalProtocol":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown protocol fields: {sorted(unknown)}")
        return cls(**values)


@dataclass
class DirectionReport:
    direction: str
    pool_size: int
    n_seeds: int
    acc_mean: float
    acc_per_seed: List[float]
    topk: Dict[int, float]

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['topk'] = {str(k): v for k, v in self.topk.items()}
        return values


@dataclass
class RetrievalReport:
    """Image retrieval queries by voxel embedding; brain retrieval queries by image embedding"""
    image: DirectionReport
    brain: DirectionReport

    @property
    def image_retrieval_acc(self) -> float:
        return self.image.acc_mean

    @property
    def brain_retrieval_acc(self) -> float:
        return self.brain.acc_mean

    def to_dict(self) -> Dict[str, Any]:
        return {'directions': [self.image.to_dict(), self.brain.to_dict()]}

    def save_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _check_aligned(voxels: EmbeddingStore, images: EmbeddingStore) -> None:
    if voxels.ids != images.ids:
        raise ShapeError("voxel and image stores must hold the same ids in the same order")


def _pool_ranks(similarity: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Rank of the paired item inside each pool; ties count against the query"""
    rows = np.arange(similarity.shape[0])
    paired = similarity[rows, rows]
    distractors = similarity[rows[:, None], candidates]
    return 1 + (distractors >= paired[:, None]).sum(axis=1)


def eval_pool_retrieval(voxels: EmbeddingStore, images: EmbeddingStore,
                        protocol: Optional[RetrievalProtocol] = None) -> RetrievalReport:
    """Paired item vs pool_size-1 random distractors, averaged over samples then seeds"""
    protocol = protocol or RetrievalProtocol()
    _check_aligned(voxels, images)
    count = len(voxels)
    if protocol.pool_size > count:
        raise ShapeError(f"pool of {protocol.pool_size} is larger than the {count} stored items")
    # pools are drawn over ids in sorted order so row order never changes a pool
    canonical = np.argsort(np.array(voxels.ids), kind='stable')
    similarity = similarity_matrix(voxels, images)[np.ix_(canonical, canonical)]
    rows = np.arange(count)
    per_seed = {'image': [], 'brain': []}
    topk = {'image': {k: 0.0 for k in protocol.top_k}, 'brain': {k: 0.0 for k in protocol.top_k}}
    for offset in range(protocol.n_seeds):
        positions = fisher_yates_prefix(count, count - 1, protocol.pool_size - 1,
                                        protocol.base_seed + offset)
        # positions index the other count-1 items in ascending order, skipping the query itself
        candidates = positions + (positions >= rows[:, None])
        for direction, matrix in (('image', similarity), ('brain', similarity.T)):
            ranks = _pool_ranks(matrix, candidates)
            per_seed[direction].append(float(np.mean(ranks == 1)))
            for k in protocol.top_k:
                topk[direction][k] += float(np.mean(ranks <= k)) / protocol.n_seeds
    reports = {}
    for direction in ('image', 'brain'):
        accs = per_seed[direction]
        reports[direction] = DirectionReport(
            direction=direction, pool_size=protocol.pool_size, n_seeds=protocol.n_seeds,
            acc_mean=float(np.mean(accs)), acc_per_seed=accs, topk=topk[direction])
    logger.info(f"Pool-{protocol.pool_size} retrieval over {protocol.n_seeds} seeds: "
                f"image {reports['image'].acc_mean:.4f}, brain {reports['brain'].acc_mean:.4f}")
    return RetrievalReport(image=reports['image'], brain=reports['brain'])


@dataclass
class FullRankReport:
    ids: List[str]
    similarity: np.ndarray
    ranks_image: np.ndarray
    ranks_brain: np.ndarray
    topk: Dict[str, Dict[int, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'count': len(self.ids),
            'topk': {d: {str(k): v for k, v in table.items()} for d, table in self.topk.items()},
            'ranks_image': self.ranks_image.tolist(),
            'ranks_brain': self.ranks_brain.tolist(),
        }

    def save_similarity_csv(self, path: Path) -> None:
        frame = pd.DataFrame(self.similarity, index=self.ids, columns=self.ids)
        frame.index.name = 'id'
        frame.to_csv(path)
        logger.info(f"Wrote {len(self.ids)}x{len(self.ids)} similarity matrix to {path}")


def full_rank_retrieval(voxels: EmbeddingStore, images: EmbeddingStore,
                        top_k: Sequence[int] = TOP_K) -> FullRankReport:
    """Rank of the paired item against every stored item"""
    _check_aligned(voxels, images)
    similarity = similarity_matrix(voxels, images)
    ranks = {}
    for direction, matrix in (('image', similarity), ('brain', similarity.T)):
        paired = np.diag(matrix)
        beaten = (matrix >= paired[:, None]).sum(axis=1) - 1
        ranks[direction] = 1 + beaten
    topk = {d: {int(k): float(np.mean(r <= k)) for k in top_k} for d, r in ranks.items()}
    return FullRankReport(ids=list(voxels.ids), similarity=similarity,
                          ranks_image=ranks['image'], ranks_brain=ranks['brain'], topk=topk)


def zero_shot_classify(query, images: EmbeddingStore, classes: EmbeddingStore,
                       class_space: Optional[EmbeddingStore] = None,
                       k: Optional[int] = None) -> List[str]:
    """Retrieve the top-1 image for a voxel embedding, then rank class prompts against that image.

    class_space holds the retrieved image's embedding in the prompt space when it differs
    from the retrieval space (hidden-layer retrieval, CLS-level prompts).
    """
    if len(classes) == 0:
        raise DataError("zero-shot classification needs at least one class prompt")
    if len(images) == 0:
        raise DataError("zero-shot classification needs at least one candidate image")
    query = l2_normalize(np.asarray(query, dtype=np.float64).ravel())
    retrieved = images.ids[int(np.argmax(images.as_normalized().matrix @ query))]
    space = class_space if class_space is not None else images
    image_vec = l2_normalize(space.row(retrieved).astype(np.float64))
    scores = classes.as_normalized().matrix @ image_vec
    order = np.argsort(-scores, kind='stable')
    ranking = [classes.ids[i] for i in order]
    return ranking if k is None else ranking[:k]


@dataclass
class ZeroShotReport:
    count: int
    n_classes: int
    topk: Dict[int, float]
    predictions: List[str]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'count': self.count,
            'n_classes': self.n_classes,
            'chance_top1': chance_level(self.n_classes, 1),
            'topk': {str(k): v for k, v in self.topk.items()},
            'predictions': self.predictions,
        }


def evaluate_zero_shot(voxels: EmbeddingStore, images: EmbeddingStore, classes: EmbeddingStore,
                       labels: Mapping[str, str], class_space: Optional[EmbeddingStore] = None,
                       top_k: Sequence[int] = TOP_K) -> ZeroShotReport:
    """Top-k zero-shot accuracy over every voxel query, labelled by stimulus id"""
    hits = {int(k): 0 for k in top_k}
    predictions = []
    for item, row in zip(voxels.ids, voxels.matrix):
        ranking = zero_shot_classify(row, images, classes, class_space)
        predictions.append(ranking[0])
        truth = labels[item]
        for k in hits:
            hits[k] += truth in ranking[:k]
    topk = {k: hits[k] / max(len(voxels), 1) for k in hits}
    logger.info(f"Zero-shot over {len(voxels)} queries, {len(classes)} classes: {topk}")
    return ZeroShotReport(count=len(voxels), n_classes=len(classes), topk=topk, predictions=predictions)


def ridge_oracle(train_voxels: np.ndarray, train_targets: np.ndarray, test_voxels: np.ndarray,
                 test_targets: EmbeddingStore, protocol: Optional[RetrievalProtocol] = None,
                 alpha: float = 1.0) -> RetrievalReport:
    """Linear ridge decoder from voxels to flattened embeddings, scored with the pool protocol"""
    model = Ridge(alpha=alpha, fit_intercept=True)
    model.fit(train_voxels, np.asarray(train_targets).reshape(len(train_targets), -1))
    predicted = EmbeddingStore(ids=test_targets.ids, matrix=model.predict(test_voxels))
    return eval_pool_retrieval(predicted, test_targets, protocol)


def export_embeddings(path: Path, voxels: EmbeddingStore, images: EmbeddingStore) -> None:
    """Long CSV of both modalities for external T-SNE plotting"""
    frames = []
    for modality, store in (('voxel', voxels), ('image', images)):
        frame = pd.DataFrame(store.matrix, columns=[f'e{i}' for i in range(store.dim)])
        frame.insert(0, 'modality', modality)
        frame.insert(0, 'id', store.ids)
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    logger.info(f"Exported {len(voxels)} voxel and {len(images)} image embeddings to {path}")
