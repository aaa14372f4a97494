"""Tensor container, dataset manifests, trial averaging and the synthetic pair generator"""
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from lite_mind.constants import TENSOR_DTYPES, TENSOR_MAGIC, TENSOR_VERSION
from lite_mind.errors import (
    BadMagicError, ConfigError, DataError, ShapeError, TruncatedTensorError,
    UnsupportedDtypeError, UnsupportedVersionError,
)
from lite_mind.retrieval import EmbeddingStore
from lite_mind.utils import l2_normalize, read_json, write_json

logger = logging.getLogger(__name__)

# magic, version u16, dtype u8, ndim u8
_HEADER = struct.Struct('<4sHBB')
_DTYPE_CODES = {np.dtype(v): k for k, v in TENSOR_DTYPES.items()}


def write_tensor(path: Path, array: np.ndarray) -> None:
    """Write a float32/float64 array as a TensorFile (little-endian, row-major)"""
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder('<')
    if dtype not in _DTYPE_CODES:
        raise UnsupportedDtypeError(f"TensorFile stores float32 or float64, got {array.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, _DTYPE_CODES[dtype], array.ndim)
    dims = struct.pack(f'<{array.ndim}Q', *array.shape)
    with open(path, 'wb') as handle:
        handle.write(header + dims)
        handle.write(np.ascontiguousarray(array, dtype=dtype).tobytes(order='C'))


def read_tensor(path: Path) -> np.ndarray:
    """Read a TensorFile, validating every header field"""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedTensorError(path, _HEADER.size, len(raw))
    magic, version, code, ndim = _HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, expected {TENSOR_VERSION}")
    if code not in TENSOR_DTYPES:
        raise UnsupportedDtypeError(f"{path}: unknown dtype code {code}")
    dims_end = _HEADER.size + 8 * ndim
    if len(raw) < dims_end:
        raise TruncatedTensorError(path, dims_end, len(raw))
    shape = struct.unpack_from(f'<{ndim}Q', raw, _HEADER.size)
    dtype = np.dtype(TENSOR_DTYPES[code])
    expected = dims_end + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise TruncatedTensorError(path, expected, len(raw))
    logger.debug(f"Read {path.name}: dtype={dtype}, shape={shape}")
    return np.frombuffer(raw, dtype=dtype, offset=dims_end).reshape(shape).copy()


def write_ids(path: Path, ids: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{item}\n" for item in ids), encoding="utf-8")


def read_ids(path: Path) -> List[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def average_trials(trials: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of repeated trials of one stimulus"""
    if len(trials) == 0:
        raise DataError("cannot average zero trials")
    lengths = {np.asarray(trial).shape for trial in trials}
    if len(lengths) != 1:
        raise ShapeError(f"trials have mismatched shapes {sorted(lengths)}")
    return np.mean(np.stack(trials), axis=0)


@dataclass
class RecordEntry:
    stimulus_id: str
    voxel_file: str
    trial_index: int = 0


@dataclass
class EmbeddingFiles:
    tensor_file: str
    ids_file: str


@dataclass
class DatasetManifest:
    """One subject/split: voxel trial records plus the embedding files they pair with"""
    subject: str
    split: str
    voxel_len: int
    records: List[RecordEntry]
    embeddings: Dict[str, EmbeddingFiles] = field(default_factory=dict)
    labels_file: Optional[str] = None

    def __post_init__(self):
        if self.split not in ('train', 'test'):
            raise DataError(f"manifest split must be 'train' or 'test', got {self.split!r}")
        unknown = set(self.embeddings) - {'hidden', 'cls', 'text'}
        if unknown:
            raise DataError(f"unknown embedding kinds in manifest: {sorted(unknown)}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "DatasetManifest":
        try:
            return cls(
                subject=str(values['subject']),
                split=values['split'],
                voxel_len=int(values['voxel_len']),
                records=[RecordEntry(**record) for record in values['records']],
                embeddings={kind: EmbeddingFiles(**files)
                            for kind, files in values.get('embeddings', {}).items()},
                labels_file=values.get('labels_file'),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed manifest field: {e}") from e


@dataclass
class VoxelSet:
    """Voxel vectors with their stimulus ids (repeats allowed for train trials)"""
    ids: List[str]
    matrix: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Dataset:
    manifest: DatasetManifest
    voxels: VoxelSet
    hidden: Optional[EmbeddingStore] = None
    cls: Optional[EmbeddingStore] = None
    text: Optional[EmbeddingStore] = None
    labels: Optional[Dict[str, str]] = None

    def targets(self, kind: str) -> EmbeddingStore:
        """Embeddings of `kind` aligned row-for-row with the voxel vectors"""
        store = getattr(self, kind)
        if store is None:
            raise DataError(f"manifest for {self.manifest.subject}/{self.manifest.split} has no {kind} embeddings")
        if self.manifest.split == 'test':
            return store.take(self.voxels.ids)
        # train ids repeat across trials, so gather rows without building a store
        rows = [store.position(item) for item in self.voxels.ids]
        return EmbeddingStore(ids=[f"{item}#{i}" for i, item in enumerate(self.voxels.ids)],
                              matrix=store.matrix[rows], item_shape=store.item_shape)


class DataLoader:
    """Handles loading and validation of the files a manifest points at"""

    def __init__(self, data_dir: Path):
        self.data_dir = Path(data_dir)
        self._voxel_cache: Dict[str, np.ndarray] = {}
        logger.info(f"Initialized DataLoader with directory: {data_dir}")

    def load_manifest(self, manifest_path: Path) -> DatasetManifest:
        try:
            return DatasetManifest.from_dict(read_json(manifest_path))
        except Exception as e:
            logger.error(f"Error loading manifest {manifest_path}: {str(e)}")
            raise

    def load_voxel_file(self, name: str, voxel_len: int) -> np.ndarray:
        """Load a trials x voxel_len tensor (1-D files hold a single trial)"""
        if name not in self._voxel_cache:
            path = self._resolve(name, 'voxel_file')
            matrix = read_tensor(path)
            if matrix.ndim == 1:
                matrix = matrix[None, :]
            if matrix.ndim != 2 or matrix.shape[1] != voxel_len:
                raise ShapeError(f"{name}: field voxel_len expects rows of {voxel_len}, file has shape {matrix.shape}")
            self._voxel_cache[name] = matrix
        return self._voxel_cache[name]

    def load_embeddings(self, kind: str, files: EmbeddingFiles) -> EmbeddingStore:
        tensor_path = self._resolve(files.tensor_file, f'embeddings.{kind}.tensor_file')
        ids_path = self._resolve(files.ids_file, f'embeddings.{kind}.ids_file')
        try:
            array = read_tensor(tensor_path)
            ids = read_ids(ids_path)
            if array.ndim < 2 or array.shape[0] != len(ids):
                raise DataError(f"{files.tensor_file}: shape {array.shape} does not match {len(ids)} ids in {files.ids_file}")
            logger.debug(f"Loaded {kind} embeddings {array.shape} from {tensor_path}")
            return EmbeddingStore.from_array(ids, array)
        except Exception as e:
            logger.error(f"Error loading {kind} embeddings: {str(e)}")
            raise

    def load_labels(self, name: str) -> Dict[str, str]:
        frame = pd.read_csv(self._resolve(name, 'labels_file'), dtype=str)
        if list(frame.columns) != ['stimulus_id', 'label']:
            raise DataError(f"{name}: expected columns stimulus_id,label, got {list(frame.columns)}")
        return dict(zip(frame['stimulus_id'], frame['label']))

    def _resolve(self, name: str, field_name: str) -> Path:
        path = self.data_dir / name
        if not path.exists():
            raise DataError(f"manifest field {field_name}: file {path} does not exist")
        return path


def load_dataset(manifest_path: Path) -> Dataset:
    """Load one split: test trials averaged per stimulus, train trials kept individually"""
    manifest_path = Path(manifest_path)
    loader = DataLoader(manifest_path.parent)
    manifest = loader.load_manifest(manifest_path)
    trials: Dict[str, List[np.ndarray]] = {}
    for record in manifest.records:
        matrix = loader.load_voxel_file(record.voxel_file, manifest.voxel_len)
        if not 0 <= record.trial_index < matrix.shape[0]:
            raise DataError(f"{record.voxel_file}: trial_index {record.trial_index} outside {matrix.shape[0]} rows")
        trials.setdefault(record.stimulus_id, []).append(matrix[record.trial_index])
    if manifest.split == 'test':
        ids = list(trials)
        voxels = np.stack([average_trials(trials[item]) for item in ids])
    else:
        ids = [record.stimulus_id for record in manifest.records]
        voxels = np.stack([loader.load_voxel_file(r.voxel_file, manifest.voxel_len)[r.trial_index]
                           for r in manifest.records]) if ids else np.zeros((0, manifest.voxel_len))
    stores = {kind: loader.load_embeddings(kind, files) for kind, files in manifest.embeddings.items()}
    for kind in ('hidden', 'cls'):
        store = stores.get(kind)
        if store is not None:
            missing = [item for item in set(ids) if item not in store]
            if missing:
                raise DataError(f"embeddings.{kind}: {len(missing)} stimulus ids missing, e.g. {sorted(missing)[0]}")
    labels = loader.load_labels(manifest.labels_file) if manifest.labels_file else None
    logger.info(f"Loaded {manifest.subject}/{manifest.split}: {len(ids)} voxel vectors "
                f"from {len(manifest.records)} trials, embeddings {sorted(stores)}")
    return Dataset(manifest=manifest, voxels=VoxelSet(ids=ids, matrix=voxels), labels=labels, **stores)


MAP_KINDS = ('dense', 'patch')


@dataclass
class SyntheticSpec:
    """Seeded linear-map pairs: x = A . flatten(V) + noise.

    map_kind 'dense' draws A entrywise Gaussian. 'patch' builds A from two orthogonalised
    Gaussian factors, one mixing tokens into voxel patches of map_patch voxels and one mixing
    channels within a patch, scaled so each voxel carries unit signal variance.
    """
    n_pairs: int = 500
    n_test: int = 100
    voxel_len: int = 2000
    embed_shape: Tuple[int, int] = (16, 64)
    noise_sigma: float = 0.1
    map_seed: int = 0
    noise_seed: int = 1
    class_count: int = 0
    class_spread: float = 0.5
    test_trials: int = 1
    map_kind: str = 'dense'
    map_patch: int = 64

    def __post_init__(self):
        self.embed_shape = tuple(int(v) for v in self.embed_shape)
        for name in ('n_pairs', 'n_test', 'voxel_len', 'test_trials'):
            if getattr(self, name) < 1:
                raise ConfigError(f"synthetic.{name} must be >= 1")
        if len(self.embed_shape) != 2 or min(self.embed_shape) < 1:
            raise ConfigError(f"synthetic.embed_shape must be two positive extents, got {self.embed_shape}")
        if self.noise_sigma < 0:
            raise ConfigError("synthetic.noise_sigma must be >= 0")
        if self.class_count < 0:
            raise ConfigError("synthetic.class_count must be >= 0")
        if self.map_kind not in MAP_KINDS:
            raise ConfigError(f"synthetic.map_kind must be one of {MAP_KINDS}, got {self.map_kind!r}")
        if self.map_kind == 'patch':
            tokens, width = self.embed_shape
            patches = -(-self.voxel_len // self.map_patch) if self.map_patch > 0 else 0
            if self.map_patch < width or patches < tokens:
                raise ConfigError(
                    f"synthetic patch map needs map_patch >= {width} and at least {tokens} patches, "
                    f"got map_patch={self.map_patch} over {self.voxel_len} voxels")

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['embed_shape'] = list(self.embed_shape)
        return values

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "SyntheticSpec":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synthetic fields: {sorted(unknown)}")
        return cls(**values)


@dataclass
class SyntheticLatents:
    embeddings: np.ndarray
    mapping: np.ndarray
    labels: Optional[np.ndarray]
    prototypes: Optional[np.ndarray]
    token_mix: Optional[np.ndarray] = None
    channel_mix: Optional[np.ndarray] = None


def _orthonormal_columns(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def patch_map_scale(spec: SyntheticSpec) -> float:
    return float(np.sqrt(-(-spec.voxel_len // spec.map_patch) * spec.map_patch))


def _patch_map(spec: SyntheticSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A[(patch i, offset k), (token j, channel c)] = s * T[i, j] * Q[k, c], cut to voxel_len rows"""
    tokens, width = spec.embed_shape
    patches = -(-spec.voxel_len // spec.map_patch)
    token_mix = _orthonormal_columns(patches, tokens, rng)
    channel_mix = _orthonormal_columns(spec.map_patch, width, rng)
    mapping = patch_map_scale(spec) * np.kron(token_mix, channel_mix)[:spec.voxel_len]
    return mapping, token_mix, channel_mix


def synthetic_latents(spec: SyntheticSpec) -> SyntheticLatents:
    """Regenerate the latent embeddings and voxel map from map_seed alone"""
    rng = np.random.default_rng(spec.map_seed)
    total = spec.n_pairs + spec.n_test
    size = spec.embed_shape[0] * spec.embed_shape[1]
    labels = prototypes = None
    if spec.class_count:
        prototypes = rng.standard_normal((spec.class_count, size))
        labels = np.arange(total) % spec.class_count
        latents = prototypes[labels] + spec.class_spread * rng.standard_normal((total, size))
    else:
        latents = rng.standard_normal((total, size))
    token_mix = channel_mix = None
    if spec.map_kind == 'dense':
        mapping = rng.standard_normal((spec.voxel_len, size))
    else:
        mapping, token_mix, channel_mix = _patch_map(spec, rng)
    return SyntheticLatents(embeddings=l2_normalize(latents), mapping=mapping,
                            labels=labels, prototypes=prototypes,
                            token_mix=token_mix, channel_mix=channel_mix)


@dataclass
class SyntheticOutput:
    train_manifest: Path
    test_manifest: Path


def generate_synthetic(spec: SyntheticSpec, out_dir: Path) -> SyntheticOutput:
    """Write voxel/embedding TensorFiles and train/test manifests for a synthetic subject"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latents = synthetic_latents(spec)
    noise_rng = np.random.default_rng(spec.noise_seed)
    tokens, width = spec.embed_shape
    total = spec.n_pairs + spec.n_test
    ids = [f"stim{i:05d}" for i in range(total)]
    signal = latents.embeddings @ latents.mapping.T

    train_voxels = signal[:spec.n_pairs] + spec.noise_sigma * noise_rng.standard_normal((spec.n_pairs, spec.voxel_len))
    test_signal = np.repeat(signal[spec.n_pairs:], spec.test_trials, axis=0)
    test_voxels = test_signal + spec.noise_sigma * noise_rng.standard_normal(test_signal.shape)
    write_tensor(out_dir / 'voxels_train.lmnd', train_voxels.astype(np.float32))
    write_tensor(out_dir / 'voxels_test.lmnd', test_voxels.astype(np.float32))

    hidden = latents.embeddings.reshape(total, tokens, width)
    write_tensor(out_dir / 'hidden.lmnd', hidden.astype(np.float32))
    write_tensor(out_dir / 'cls.lmnd', l2_normalize(hidden.mean(axis=1)).astype(np.float32))
    write_ids(out_dir / 'stimulus_ids.txt', ids)
    embeddings = {
        'hidden': EmbeddingFiles('hidden.lmnd', 'stimulus_ids.txt'),
        'cls': EmbeddingFiles('cls.lmnd', 'stimulus_ids.txt'),
    }
    labels_file = None
    if spec.class_count:
        class_ids = [f"class{c:03d}" for c in range(spec.class_count)]
        prompts = l2_normalize(latents.prototypes.reshape(spec.class_count, tokens, width).mean(axis=1))
        write_tensor(out_dir / 'text.lmnd', prompts.astype(np.float32))
        write_ids(out_dir / 'class_ids.txt', class_ids)
        pd.DataFrame({'stimulus_id': ids, 'label': [class_ids[c] for c in latents.labels]}).to_csv(
            out_dir / 'labels.csv', index=False)
        embeddings['text'] = EmbeddingFiles('text.lmnd', 'class_ids.txt')
        labels_file = 'labels.csv'

    train = DatasetManifest(
        subject='synthetic', split='train', voxel_len=spec.voxel_len,
        records=[RecordEntry(ids[i], 'voxels_train.lmnd', i) for i in range(spec.n_pairs)],
        embeddings=embeddings, labels_file=labels_file)
    test = DatasetManifest(
        subject='synthetic', split='test', voxel_len=spec.voxel_len,
        records=[RecordEntry(ids[spec.n_pairs + i // spec.test_trials], 'voxels_test.lmnd', i)
                 for i in range(spec.n_test * spec.test_trials)],
        embeddings=embeddings, labels_file=labels_file)
    output = SyntheticOutput(train_manifest=out_dir / 'train.json', test_manifest=out_dir / 'test.json')
    write_json(output.train_manifest, train.to_dict())
    write_json(output.test_manifest, test.to_dict())
    write_json(out_dir / 'synthetic_spec.json', spec.to_dict())
    logger.info(f"Generated synthetic subject in {out_dir}: {spec.n_pairs} train / {spec.n_test} test pairs")
    return output


def write_parameters(module: torch.nn.Module, directory: Path) -> List[Dict[str, Any]]:
    """Write every learnable tensor as params/NNN_<name>.lmnd; returns the ordered entries"""
    directory = Path(directory)
    entries = []
    for index, (name, param) in enumerate(module.named_parameters()):
        file_name = f"params/{index:03d}_{name}.lmnd"
        write_tensor(directory / file_name, param.detach().cpu().numpy())
        entries.append({'name': name, 'file': file_name, 'shape': list(param.shape)})
    return entries


def read_parameters(module: torch.nn.Module, directory: Path, entries: Sequence[Dict[str, Any]]) -> None:
    """Load tensors written by write_parameters into a freshly built module of the same shape"""
    named = dict(module.named_parameters())
    expected = [name for name in named]
    listed = [entry['name'] for entry in entries]
    if listed != expected:
        raise DataError(f"checkpoint parameter order {listed[:3]}... does not match model {expected[:3]}...")
    with torch.no_grad():
        for entry in entries:
            array = read_tensor(Path(directory) / entry['file'])
            param = named[entry['name']]
            if tuple(array.shape) != tuple(param.shape):
                raise ShapeError(f"{entry['file']}: shape {array.shape}, model expects {tuple(param.shape)}")
            param.copy_(torch.from_numpy(array).to(param.dtype))
