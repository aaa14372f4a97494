"""Main application entry point"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import torch

from lite_mind.backbone import DftBackbone, flops_estimate, param_count
from lite_mind.config import RunConfig, load_run_config
from lite_mind.constants import EXIT_OK, GRAD_CHECK_TOLERANCE
from lite_mind.data_handler import Dataset, generate_synthetic, load_dataset, read_ids, read_tensor
from lite_mind.errors import ConfigError, DataError, LiteMindError, VerificationError
from lite_mind.projector import (
    KnnIndex, RemoteKnnClient, fit_projector, load_projector, save_projector,
    serve_knn, two_stage_retrieve,
)
from lite_mind.retrieval import (
    EmbeddingStore, eval_pool_retrieval, evaluate_zero_shot, export_embeddings, full_rank_retrieval,
)
from lite_mind.training import Batch, PairedSet, encode, grad_check, load_checkpoint, train
from lite_mind.utils import output_directory, write_json
from lite_mind.visualization import (
    filter_library_figure, loss_curve_figure, similarity_heatmap, write_figure,
)

logger = logging.getLogger(__name__)


def _require(value: Optional[str], name: str) -> Path:
    if not value:
        raise ConfigError(f"paths.{name} is required for this command")
    return Path(value)


def _out_dir(config: RunConfig) -> Path:
    return _require(config.paths.out_dir, 'out_dir')


def _encode_store(model: DftBackbone, dataset: Dataset, batch_size: int) -> EmbeddingStore:
    outputs = encode(model, dataset.voxels.matrix, batch_size)
    return EmbeddingStore.from_array(dataset.voxels.ids, outputs)


def cmd_synth(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    with output_directory(_out_dir(config)) as out:
        config.save(out)
        output = generate_synthetic(config.synthetic, out)
    return {'train_manifest': str(output.train_manifest), 'test_manifest': str(output.test_manifest)}


def cmd_train(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    kind = config.train.embedding_kind
    joint = config.loss.alpha > 0 and config.backbone.variant == 'cls'
    train_data = load_dataset(_require(config.paths.train_manifest, 'train_manifest'))
    train_set = PairedSet.from_dataset(train_data, kind, mse_kind='cls' if joint else None)
    eval_set = None
    if config.paths.test_manifest:
        test_data = load_dataset(Path(config.paths.test_manifest))
        eval_set = PairedSet.from_dataset(test_data, kind, mse_kind='cls' if joint else None)
    model = DftBackbone(config.backbone, seed=config.seed)
    projector = config.projector.build(config.backbone.out_dim, config.backbone.activation_slope) if joint else None
    with output_directory(_out_dir(config)) as out:
        config.save(out)
        result = train(train_set, model, config.loss, config.optimizer, config.train,
                       eval_set=eval_set, out_dir=out, projector=projector)
        write_figure(loss_curve_figure(result.curve), out / 'loss_curve.html')
        if projector is None and args.fit_projector and config.backbone.variant == 'cls':
            projector = config.projector.build(config.backbone.out_dim, config.backbone.activation_slope)
            cls_targets = train_data.targets('cls').matrix
            fit_projector(projector, encode(model, train_data.voxels.matrix, config.train.batch_size),
                          cls_targets, config.projector)
        projector_dir = None
        if projector is not None:
            projector_dir = out / 'projector'
            save_projector(projector_dir, projector)
    return {'best_epoch': result.best_epoch, 'best_score': result.best_score,
            'checkpoint': str(result.checkpoint_dir),
            'projector': str(projector_dir) if projector_dir else None}


def _eval_stores(config: RunConfig, args: argparse.Namespace):
    if args.voxel_embeddings or args.image_embeddings:
        if not (args.voxel_embeddings and args.image_embeddings and args.ids):
            raise ConfigError("--voxel-embeddings, --image-embeddings and --ids go together")
        ids = read_ids(Path(args.ids))
        return (EmbeddingStore.from_array(ids, read_tensor(Path(args.voxel_embeddings))),
                EmbeddingStore.from_array(ids, read_tensor(Path(args.image_embeddings))))
    model, manifest = load_checkpoint(_require(config.paths.checkpoint, 'checkpoint'))
    dataset = load_dataset(_require(config.paths.test_manifest, 'test_manifest'))
    kind = manifest['train']['embedding_kind']
    return _encode_store(model, dataset, config.train.batch_size), dataset.targets(kind)


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    voxels, images = _eval_stores(config, args)
    report = eval_pool_retrieval(voxels, images, config.protocol)
    full = full_rank_retrieval(voxels, images, config.protocol.top_k)
    payload = {'pool': report.to_dict(), 'full_rank': full.to_dict()['topk'],
               'image_retrieval_acc': report.image_retrieval_acc,
               'brain_retrieval_acc': report.brain_retrieval_acc}
    if config.paths.out_dir:
        with output_directory(Path(config.paths.out_dir)) as out:
            config.save(out)
            report.save_json(out / 'retrieval_report.json')
            write_json(out / 'full_rank.json', full.to_dict())
    if args.similarity_csv:
        full.save_similarity_csv(Path(args.similarity_csv))
    if args.heatmap:
        write_figure(similarity_heatmap(full.similarity, full.ids, block=args.heatmap_block), Path(args.heatmap))
    return payload


def _searcher(config: RunConfig, args: argparse.Namespace, dataset: Dataset):
    if args.endpoint:
        return RemoteKnnClient(args.endpoint)
    if config.paths.index:
        return KnnIndex.load(Path(config.paths.index))
    if dataset.cls is None:
        raise DataError("no KNN index given and the test manifest has no cls embeddings to build one")
    return KnnIndex.from_store(dataset.cls)


def cmd_retrieve(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    dataset = load_dataset(_require(config.paths.test_manifest, 'test_manifest'))
    hidden_model, _ = load_checkpoint(_require(config.paths.checkpoint, 'checkpoint'))
    cls_model, _ = load_checkpoint(_require(config.paths.cls_checkpoint, 'cls_checkpoint'))
    projector = load_projector(Path(config.paths.projector)) if config.paths.projector else None
    if dataset.hidden is None:
        raise DataError("two-stage retrieval needs hidden embeddings in the test manifest")
    searcher = _searcher(config, args, dataset)
    f_hidden = encode(hidden_model, dataset.voxels.matrix, config.train.batch_size)
    f_cls = encode(cls_model, dataset.voxels.matrix, config.train.batch_size)
    queries = []
    for item, hidden, cls in zip(dataset.voxels.ids, f_hidden, f_cls):
        result = two_stage_retrieve(hidden, cls, projector, searcher, dataset.hidden, config.projector.candidates)
        queries.append({'id': item, 'best_id': result.best_id, 'candidates': result.candidates.ids})
    accuracy = float(np.mean([q['id'] == q['best_id'] for q in queries]))
    payload = {'count': len(queries), 'candidates': config.projector.candidates,
               'top1': accuracy, 'queries': queries}
    if config.paths.out_dir:
        with output_directory(Path(config.paths.out_dir)) as out:
            config.save(out)
            write_json(out / 'two_stage.json', payload)
    return {key: payload[key] for key in ('count', 'candidates', 'top1')}


def cmd_classify(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    model, manifest = load_checkpoint(_require(config.paths.checkpoint, 'checkpoint'))
    dataset = load_dataset(_require(config.paths.test_manifest, 'test_manifest'))
    if dataset.text is None or dataset.labels is None:
        raise DataError("zero-shot classification needs text embeddings and a labels file")
    kind = manifest['train']['embedding_kind']
    images = dataset.targets(kind)
    class_space = dataset.targets('cls') if kind != 'cls' else None
    report = evaluate_zero_shot(_encode_store(model, dataset, config.train.batch_size), images,
                                dataset.text, dataset.labels, class_space, config.protocol.top_k)
    if config.paths.out_dir:
        with output_directory(Path(config.paths.out_dir)) as out:
            config.save(out)
            write_json(out / 'zero_shot.json', report.to_dict())
    summary = report.to_dict()
    summary.pop('predictions')
    return summary


def cmd_gradcheck(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    generator = torch.Generator().manual_seed(config.seed)
    model = DftBackbone(config.backbone, seed=config.seed).double()
    batch = Batch(
        voxels=torch.randn(args.batch, config.backbone.voxel_len, generator=generator, dtype=torch.float64),
        targets=torch.randn(args.batch, *config.backbone.output_shape, generator=generator, dtype=torch.float64))
    report = grad_check(model, batch, config.loss, tolerance=args.tolerance)
    if config.paths.out_dir:
        with output_directory(Path(config.paths.out_dir)) as out:
            config.save(out)
            write_json(out / 'gradcheck.json', report.to_dict())
    if not report.passed:
        raise VerificationError(f"gradient check failed: error {report.max_error:.3e} at "
                                f"{report.worst_parameter}{list(report.worst_index)} exceeds {report.tolerance:g}")
    return report.to_dict()


def cmd_params(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    model = DftBackbone(config.backbone, seed=config.seed)
    return {'parameters': param_count(model), 'flops': flops_estimate(config.backbone).to_dict()}


def cmd_serve_knn(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    if config.paths.index:
        index = KnnIndex.load(Path(config.paths.index))
    else:
        dataset = load_dataset(_require(config.paths.test_manifest, 'test_manifest'))
        index = KnnIndex.from_store(dataset.cls if dataset.cls is not None else dataset.targets('hidden'))
    if args.save_index:
        index.save(Path(args.save_index))
    if not args.dry_run:
        serve_knn(index, args.host, args.port)
    return {'count': len(index), 'dim': index.dim}


def cmd_inspect(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    target = Path(args.target)
    if target.is_file():
        array = read_tensor(target)
        return {'file': str(target), 'dtype': str(array.dtype), 'shape': list(array.shape)}
    model, manifest = load_checkpoint(target)
    if args.figure:
        if not len(model.blocks):
            raise DataError("checkpoint has no filter blocks to plot")
        write_figure(filter_library_figure(model.blocks[args.block], args.block), Path(args.figure))
    return {'backbone': manifest['backbone'], 'loss': manifest['loss'], 'seed': manifest['seed'],
            'best_epoch': manifest.get('best_epoch'), 'parameters': param_count(model)}


def cmd_export(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    model, manifest = load_checkpoint(_require(config.paths.checkpoint, 'checkpoint'))
    dataset = load_dataset(_require(config.paths.test_manifest, 'test_manifest'))
    voxels = _encode_store(model, dataset, config.train.batch_size)
    path = Path(args.csv)
    path.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(path, voxels, dataset.targets(manifest['train']['embedding_kind']))
    return {'csv': str(path), 'count': len(voxels)}


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'retrieve': cmd_retrieve,
    'classify': cmd_classify,
    'gradcheck': cmd_gradcheck,
    'params': cmd_params,
    'serve-knn': cmd_serve_knn,
    'inspect': cmd_inspect,
    'export': cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='JSON run config')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE')
    common.add_argument('--seed', type=int)
    common.add_argument('--out', help='output directory')
    common.add_argument('--checkpoint')
    common.add_argument('--train-manifest')
    common.add_argument('--test-manifest')
    common.add_argument('--verbose', action='store_true')

    parser = argparse.ArgumentParser(prog='lite-mind', description='DFT backbone for fMRI-to-embedding retrieval')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('synth', parents=[common], help='generate a synthetic subject')

    train_parser = sub.add_parser('train', parents=[common], help='train a backbone')
    train_parser.add_argument('--epochs', type=int)
    train_parser.add_argument('--fit-projector', action='store_true', help='fit the CLS projector on the trained backbone (cls variant)')

    eval_parser = sub.add_parser('eval', parents=[common], help='pool retrieval evaluation')
    eval_parser.add_argument('--pool', type=int)
    eval_parser.add_argument('--seeds', type=int)
    eval_parser.add_argument('--voxel-embeddings')
    eval_parser.add_argument('--image-embeddings')
    eval_parser.add_argument('--ids')
    eval_parser.add_argument('--heatmap', help='write the similarity heatmap HTML here')
    eval_parser.add_argument('--heatmap-block', type=int, default=None)
    eval_parser.add_argument('--similarity-csv')

    retrieve_parser = sub.add_parser('retrieve', parents=[common], help='two-stage retrieval')
    retrieve_parser.add_argument('--cls-checkpoint')
    retrieve_parser.add_argument('--projector')
    retrieve_parser.add_argument('--index')
    retrieve_parser.add_argument('--endpoint', help='remote KNN endpoint instead of a local index')

    sub.add_parser('classify', parents=[common], help='zero-shot classification')

    grad_parser = sub.add_parser('gradcheck', parents=[common], help='finite-difference gradient check')
    grad_parser.add_argument('--tolerance', type=float, default=GRAD_CHECK_TOLERANCE)
    grad_parser.add_argument('--batch', type=int, default=4)

    sub.add_parser('params', parents=[common], help='parameter count and flops estimate')

    serve_parser = sub.add_parser('serve-knn', parents=[common], help='serve the KNN wire protocol')
    serve_parser.add_argument('--index')
    serve_parser.add_argument('--host', default='127.0.0.1')
    serve_parser.add_argument('--port', type=int, default=8050)
    serve_parser.add_argument('--save-index')
    serve_parser.add_argument('--dry-run', action='store_true', help='build the index without serving')

    inspect_parser = sub.add_parser('inspect', parents=[common], help='describe a checkpoint or TensorFile')
    inspect_parser.add_argument('target')
    inspect_parser.add_argument('--figure', help='write the filter library of --block as HTML')
    inspect_parser.add_argument('--block', type=int, default=0)

    export_parser = sub.add_parser('export', parents=[common], help='export embeddings as CSV')
    export_parser.add_argument('--csv', required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    flags = {
        'train.seed': args.seed,
        'train.epochs': getattr(args, 'epochs', None),
        'protocol.pool_size': getattr(args, 'pool', None),
        'protocol.n_seeds': getattr(args, 'seeds', None),
        'paths.out_dir': args.out,
        'paths.checkpoint': args.checkpoint,
        'paths.train_manifest': args.train_manifest,
        'paths.test_manifest': args.test_manifest,
        'paths.cls_checkpoint': getattr(args, 'cls_checkpoint', None),
        'paths.projector': getattr(args, 'projector', None),
        'paths.index': getattr(args, 'index', None),
    }
    return load_run_config(args.config, args.overrides, flags)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        config = resolve_config(args)
        logger.info(f"Running {args.command}")
        result = COMMANDS[args.command](config, args)
        print(json.dumps(result, indent=2, sort_keys=True))
        return EXIT_OK
    except LiteMindError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {str(e)}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
