"""CLS projector, exact cosine KNN index, the KNN wire protocol, and two-stage retrieval"""
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import requests
import torch
import torch.nn as nn
import torch.nn.functional as F
from flask import Flask, jsonify, request

from lite_mind.constants import (
    ACTIVATION_SLOPE, KNN_CANDIDATES, KNN_TIMEOUT, LAION_ALPHA, NORM_EPS, PROJECTOR_BLOCKS,
    PROJECTOR_LEARNING_RATE, PROJECTOR_WEIGHT_DECAY, UNIT_NORM_TOL,
)
from lite_mind.data_handler import (
    read_ids, read_parameters, read_tensor, write_ids, write_parameters, write_tensor,
)
from lite_mind.errors import (
    ConfigError, DataError, KnnQueryError, RemoteError, RemoteHTTPError, RemoteProtocolError,
    RemoteTimeoutError, ShapeError,
)
from lite_mind.retrieval import EmbeddingStore
from lite_mind.training import OptimizerConfig, build_optimizer, mse_loss, optimizer_step
from lite_mind.utils import l2_normalize, read_json, seed_everything, write_json

logger = logging.getLogger(__name__)


class ClsProjector(nn.Module):
    """Residual stack x <- x + W2 leaky_relu(LN(W1 x + b1)) + b2; W2, b2 start at zero"""

    def __init__(self, dim: int, blocks: int = PROJECTOR_BLOCKS, activation_slope: float = ACTIVATION_SLOPE,
                 use_norm: bool = True, seed: int = 0):
        super().__init__()
        if dim < 1 or blocks < 0:
            raise ConfigError(f"projector needs dim >= 1 and blocks >= 0, got {dim}, {blocks}")
        generator = torch.Generator().manual_seed(seed)
        bound = 1.0 / dim ** 0.5
        self.dim = dim
        self.activation_slope = activation_slope
        self.use_norm = use_norm
        self.w1 = nn.ParameterList(
            [nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound, generator=generator)) for _ in range(blocks)])
        self.b1 = nn.ParameterList([nn.Parameter(torch.zeros(dim)) for _ in range(blocks)])
        self.norm_gain = nn.ParameterList([nn.Parameter(torch.ones(dim)) for _ in range(blocks)])
        self.norm_bias = nn.ParameterList([nn.Parameter(torch.zeros(dim)) for _ in range(blocks)])
        self.w2 = nn.ParameterList([nn.Parameter(torch.zeros(dim, dim)) for _ in range(blocks)])
        self.b2 = nn.ParameterList([nn.Parameter(torch.zeros(dim)) for _ in range(blocks)])

    @property
    def blocks(self) -> int:
        return len(self.w1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"projector expects dim {self.dim}, got {x.shape[-1]}")
        for i in range(self.blocks):
            h = x @ self.w1[i] + self.b1[i]
            if self.use_norm:
                h = F.layer_norm(h, (self.dim,), self.norm_gain[i], self.norm_bias[i], NORM_EPS)
            x = x + F.leaky_relu(h, self.activation_slope) @ self.w2[i] + self.b2[i]
        return x

    def settings(self) -> Dict[str, Any]:
        return {'dim': self.dim, 'blocks': self.blocks,
                'activation_slope': self.activation_slope, 'use_norm': self.use_norm}


def project_cls(f_cls, projector: ClsProjector) -> np.ndarray:
    """Map voxel CLS embeddings (one vector or a batch) into image CLS space; not normalized"""
    dtype = next(projector.parameters()).dtype if projector.blocks else torch.float64
    with torch.no_grad():
        out = projector(torch.as_tensor(np.asarray(f_cls), dtype=dtype))
    return out.numpy().astype(np.float64)


@dataclass
class ProjectorConfig:
    """Projector architecture, its own optimizer settings, and the stage-1 shortlist size"""
    blocks: int = PROJECTOR_BLOCKS
    use_norm: bool = True
    candidates: int = KNN_CANDIDATES
    epochs: int = 100
    batch_size: int = 256
    lr: float = PROJECTOR_LEARNING_RATE
    weight_decay: float = PROJECTOR_WEIGHT_DECAY
    alpha: float = LAION_ALPHA
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("projector.alpha must be > 0: with alpha = 0 the projector receives no gradient")
        if self.epochs < 1 or self.batch_size < 1 or self.candidates < 1:
            raise ConfigError("projector.epochs, batch_size and candidates must be >= 1")
        if self.blocks < 0:
            raise ConfigError(f"projector.blocks must be >= 0, got {self.blocks}")

    def build(self, dim: int, activation_slope: float = ACTIVATION_SLOPE) -> ClsProjector:
        return ClsProjector(dim, self.blocks, activation_slope, self.use_norm, self.seed)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ProjectorConfig":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown projector fields: {sorted(unknown)}")
        return cls(**values)


def fit_projector(projector: ClsProjector, f: np.ndarray, v: np.ndarray,
                  config: Optional[ProjectorConfig] = None) -> List[float]:
    """Train on frozen voxel CLS outputs; only alpha * MSE reaches projector weights"""
    config = config or ProjectorConfig()
    if f.shape != v.shape or f.ndim != 2:
        raise ShapeError(f"projector pairs must be matching 2-D arrays, got {f.shape} and {v.shape}")
    if projector.blocks == 0:
        raise ConfigError("a projector with zero blocks has no parameters to fit")
    generator = seed_everything(config.seed)
    dtype = next(projector.parameters()).dtype
    named = list(projector.named_parameters())
    optimizer, scheduler = build_optimizer(
        [p for _, p in named], OptimizerConfig(lr=config.lr, weight_decay=config.weight_decay))
    inputs = torch.as_tensor(f, dtype=dtype)
    targets = torch.as_tensor(v, dtype=dtype)
    history = []
    for epoch in range(config.epochs):
        order = torch.randperm(len(inputs), generator=generator)
        total = 0.0
        for start in range(0, len(inputs), config.batch_size):
            rows = order[start:start + config.batch_size]
            loss = config.alpha * mse_loss(projector(inputs[rows]), targets[rows])
            grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
            # norm gain/bias sit outside the graph when use_norm is off
            grads = {name: torch.zeros_like(p) if g is None else g for (name, p), g in zip(named, grads)}
            optimizer_step(named, grads, optimizer, scheduler)
            total += float(loss.detach()) * len(rows)
        history.append(total / len(inputs))
        logger.debug(f"projector epoch {epoch + 1}: alpha*mse {history[-1]:.6f}")
    logger.info(f"Fitted CLS projector over {config.epochs} epochs, final alpha*mse {history[-1]:.6f}")
    return history


def save_projector(directory: Path, projector: ClsProjector) -> None:
    directory = Path(directory)
    entries = write_parameters(projector, directory)
    write_json(directory / 'projector.json', {'settings': projector.settings(), 'parameters': entries})


def load_projector(directory: Path) -> ClsProjector:
    directory = Path(directory)
    manifest = read_json(directory / 'projector.json')
    projector = ClsProjector(**manifest['settings'])
    read_parameters(projector, directory, manifest['parameters'])
    return projector


@dataclass
class KnnResult:
    """(id, score) pairs, scores non-increasing"""
    neighbors: List[Tuple[str, float]]

    @property
    def ids(self) -> List[str]:
        return [item for item, _ in self.neighbors]

    def to_dict(self) -> Dict[str, Any]:
        return {'results': [{'id': item, 'score': score} for item, score in self.neighbors]}

    @classmethod
    def from_dict(cls, payload: Any, k: int) -> "KnnResult":
        if not isinstance(payload, dict) or not isinstance(payload.get('results'), list):
            raise RemoteProtocolError("response must be an object with a 'results' list")
        neighbors = []
        for entry in payload['results']:
            if (not isinstance(entry, dict) or not isinstance(entry.get('id'), str)
                    or not isinstance(entry.get('score'), (int, float)) or isinstance(entry.get('score'), bool)):
                raise RemoteProtocolError(f"malformed result entry {entry!r}")
            neighbors.append((entry['id'], float(entry['score'])))
        if not neighbors:
            raise RemoteProtocolError("endpoint returned no neighbors")
        if len(neighbors) > k:
            raise RemoteProtocolError(f"endpoint returned {len(neighbors)} neighbors for k={k}")
        scores = [score for _, score in neighbors]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise RemoteProtocolError("endpoint scores are not sorted descending")
        return cls(neighbors=neighbors)


@dataclass
class KnnIndex:
    """Exact cosine index over unit-normalized rows"""
    ids: List[str]
    matrix: np.ndarray
    metric: str = 'cosine'

    def __post_init__(self):
        self.ids = [str(item) for item in self.ids]
        if self.metric != 'cosine':
            raise ConfigError(f"only the cosine metric is supported, got {self.metric!r}")
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ShapeError(f"index matrix {self.matrix.shape} does not match {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("index ids must be unique")
        if len(self.ids) and np.abs(np.linalg.norm(self.matrix, axis=1) - 1.0).max() > UNIT_NORM_TOL:
            raise DataError("index rows must be unit length")
        self._id_keys = np.array(self.ids)

    @classmethod
    def build(cls, ids: Sequence[str], vectors: np.ndarray) -> "KnnIndex":
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ShapeError(f"index vectors must be 2-D, got shape {vectors.shape}")
        if (np.linalg.norm(vectors, axis=1) == 0).any():
            raise DataError("cannot index a zero vector under the cosine metric")
        return cls(ids=list(ids), matrix=l2_normalize(vectors))

    @classmethod
    def from_store(cls, store: EmbeddingStore) -> "KnnIndex":
        return cls.build(store.ids, store.matrix)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def search(self, query, k: int = KNN_CANDIDATES) -> KnnResult:
        return knn_search(self, query, k)

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_tensor(directory / 'matrix.lmnd', self.matrix.astype(np.float64))
        write_ids(directory / 'ids.txt', self.ids)
        write_json(directory / 'manifest.json', {
            'metric': self.metric, 'count': len(self), 'dim': self.dim,
            'matrix_file': 'matrix.lmnd', 'ids_file': 'ids.txt',
        })
        logger.info(f"Saved KNN index of {len(self)} rows to {directory}")

    @classmethod
    def load(cls, directory: Path) -> "KnnIndex":
        directory = Path(directory)
        try:
            manifest = read_json(directory / 'manifest.json')
            index = cls(ids=read_ids(directory / manifest['ids_file']),
                        matrix=read_tensor(directory / manifest['matrix_file']),
                        metric=manifest['metric'])
        except Exception as e:
            logger.error(f"Error loading KNN index {directory}: {str(e)}")
            raise
        logger.info(f"Loaded KNN index of {len(index)} rows from {directory}")
        return index


def knn_search(index: KnnIndex, query, k: int = KNN_CANDIDATES) -> KnnResult:
    """Exact top-k by cosine; equal scores ordered by ascending id"""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
        raise KnnQueryError(f"k must be a positive integer, got {k!r}")
    if len(index) == 0:
        raise DataError("cannot search an empty index")
    query = np.asarray(query, dtype=np.float64).ravel()
    if query.shape[0] != index.dim:
        raise ShapeError(f"query dim {query.shape[0]} does not match index dim {index.dim}")
    scores = index.matrix @ l2_normalize(query)
    order = np.lexsort((index._id_keys, -scores))[:k]
    return KnnResult(neighbors=[(index.ids[i], float(scores[i])) for i in order])


class KnnSearcher(Protocol):
    def search(self, query, k: int = KNN_CANDIDATES) -> KnnResult: ...


class RemoteKnnClient:
    """Client for POST <endpoint>/knn with the same result contract as knn_search"""

    def __init__(self, endpoint: str, timeout: float = KNN_TIMEOUT, session: Optional[requests.Session] = None):
        self.endpoint = endpoint.rstrip('/')
        self.timeout = timeout
        self.session = session or requests.Session()

    def search(self, query, k: int = KNN_CANDIDATES) -> KnnResult:
        if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
            raise KnnQueryError(f"k must be a positive integer, got {k!r}")
        body = {'embedding': [float(x) for x in np.asarray(query, dtype=np.float64).ravel()],
                'k': int(k), 'metric': 'cosine'}
        url = f"{self.endpoint}/knn"
        try:
            response = self.session.post(url, json=body, timeout=self.timeout)
        except requests.Timeout as e:
            raise RemoteTimeoutError(f"KNN request to {url} timed out after {self.timeout}s") from e
        except requests.RequestException as e:
            raise RemoteError(f"KNN request to {url} failed: {e}") from e
        if response.status_code >= 400:
            raise RemoteHTTPError(response.status_code, response.text)
        try:
            payload = json.loads(response.text)
        except json.JSONDecodeError as e:
            raise RemoteProtocolError(f"malformed JSON from {url}: {e.msg}", offset=e.pos) from e
        result = KnnResult.from_dict(payload, int(k))
        logger.debug(f"Remote KNN returned {len(result.neighbors)} neighbors from {url}")
        return result


def remote_knn_client(endpoint: str, query, k: int = KNN_CANDIDATES, timeout: float = KNN_TIMEOUT) -> KnnResult:
    return RemoteKnnClient(endpoint, timeout).search(query, k)


def create_knn_app(index: KnnIndex) -> Flask:
    """Flask app serving the KNN wire protocol over an immutable index"""
    app = Flask(__name__)

    @app.post('/knn')
    def knn():
        payload = request.get_json(silent=True)
        if not isinstance(payload, dict):
            return jsonify({'error': 'body must be a JSON object'}), 400
        if payload.get('metric', 'cosine') != 'cosine':
            return jsonify({'error': f"unsupported metric {payload.get('metric')!r}"}), 400
        embedding = payload.get('embedding')
        if not isinstance(embedding, list):
            return jsonify({'error': 'embedding must be a list of numbers'}), 400
        try:
            result = knn_search(index, embedding, payload.get('k', KNN_CANDIDATES))
        except (KnnQueryError, ShapeError, ValueError, TypeError) as e:
            return jsonify({'error': str(e)}), 400
        return jsonify(result.to_dict())

    @app.get('/health')
    def health():
        return jsonify({'count': len(index), 'dim': index.dim, 'metric': index.metric})

    return app


def serve_knn(index: KnnIndex, host: str = '127.0.0.1', port: int = 8050) -> None:
    logger.info(f"Serving KNN index of {len(index)} rows on http://{host}:{port}/knn")
    create_knn_app(index).run(host=host, port=port, threaded=True)


@dataclass
class TwoStageResult:
    best_id: str
    candidates: KnnResult
    hidden_scores: Dict[str, float]


def two_stage_retrieve(f_hidden, f_cls, projector: Optional[ClsProjector], searcher: KnnSearcher,
                       hidden_store: EmbeddingStore, k: int = KNN_CANDIDATES) -> TwoStageResult:
    """Shortlist k candidates in CLS space, then pick the best by hidden-layer cosine"""
    query = project_cls(f_cls, projector) if projector is not None else np.asarray(f_cls, dtype=np.float64)
    candidates = searcher.search(query, k)
    f_hidden = l2_normalize(np.asarray(f_hidden, dtype=np.float64).ravel())
    if f_hidden.shape[0] != hidden_store.dim:
        raise ShapeError(f"hidden query dim {f_hidden.shape[0]} does not match store dim {hidden_store.dim}")
    scores = {}
    for item in candidates.ids:
        if item not in hidden_store:
            raise DataError(f"candidate {item!r} has no hidden-layer embedding")
        scores[item] = float(l2_normalize(hidden_store.row(item).astype(np.float64)) @ f_hidden)
    # max keeps the first candidate on ties, i.e. the higher CLS rank
    best = max(candidates.ids, key=lambda item: scores[item])
    return TwoStageResult(best_id=best, candidates=candidates, hidden_scores=scores)
