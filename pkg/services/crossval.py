"""Stratified k-fold cross-validation with a pooled confusion matrix."""
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from sklearn.model_selection import StratifiedKFold

from models.clip_info import TRI_LABELS, ManifestEntry, SamplingPolicy
from models.configs import TrainConfig, config_digest
from models.errors import ValidationError
from models.report_info import EvalReport, FoldResult
from services.backbones import display_name
from services.clip_pipeline import ClipLoaderService, HFlip
from services.dataset import load_manifest
from services.metrics import compute_metrics, pool, tally
from services.runtracker import RunTrackerService
from services.trainer import fit, predict_classes

logger = logging.getLogger(__name__)

DEFAULT_K = 10


def stratified_kfold(labels: Sequence[int], k: int = 10, seed: int = 0) -> List[np.ndarray]:
    """
    Split positions 0..n-1 into ``k`` disjoint folds (sorted index arrays).

    Each fold's class counts are within one of the stratified ideal; the split
    depends only on (labels, k, seed).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    counts = np.bincount(labels, minlength=2)
    minority = int(counts.min())
    if k > minority:
        raise ValidationError(f"k={k} exceeds the minority class count {minority}")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [np.sort(test) for _, test in splitter.split(np.zeros(len(labels)), labels)]


def manifest_folds(entries: Sequence[ManifestEntry]) -> Optional[List[np.ndarray]]:
    """Folds fixed by the manifest's ``fold`` fields, or None when any entry lacks one."""
    if not entries or any(e.fold is None for e in entries):
        return None
    assigned = np.array([e.fold for e in entries])
    k = int(assigned.max()) + 1
    if assigned.min() < 0 or len(set(assigned.tolist())) != k:
        raise ValidationError(f"Manifest folds must cover 0..{k - 1} without gaps")
    return [np.flatnonzero(assigned == f) for f in range(k)]


def resolve_folds(entries: Sequence[ManifestEntry], k: Optional[int] = None, seed: int = 0) -> List[np.ndarray]:
    """
    Folds from the manifest when every entry carries one, stratified folds otherwise.

    ``k`` defaults to 10 for stratified folds; with manifest folds it must be
    None or equal to the number of folds the manifest defines.
    """
    folds = manifest_folds(entries)
    if folds is None:
        return stratified_kfold([e.binary_label for e in entries], DEFAULT_K if k is None else k, seed)
    if len(folds) < 2:
        raise ValidationError(f"Manifest defines {len(folds)} fold; cross-validation needs at least 2")
    if k is not None and k != len(folds):
        raise ValidationError(f"k={k} disagrees with the {len(folds)} folds fixed in the manifest")
    return folds


def _view_seed(seed, position):
    return seed * 100003 + position


def load_training_clips(entries: Sequence[ManifestEntry], config: TrainConfig, seed: int, loader=None):
    """Random placement and a clip-level flip, both seeded from ``seed`` and the entry position."""
    loader = loader or ClipLoaderService(config.clip_size, (config.norm_mean, config.norm_std))
    count, stride = config.sampling["count"], config.sampling["stride"]
    return loader.load_entries(
        entries,
        lambda i, e: SamplingPolicy(count, stride, placement="random", seed=_view_seed(seed, i)),
        lambda i, e: HFlip(config.hflip_p, seed=_view_seed(seed, i) + 50021) if config.hflip_p > 0 else None)


def load_eval_clips(entries: Sequence[ManifestEntry], config: TrainConfig, loader=None):
    """Center placement, no flip."""
    loader = loader or ClipLoaderService(config.clip_size, (config.norm_mean, config.norm_std))
    count, stride = config.sampling["count"], config.sampling["stride"]
    return loader.load_entries(entries, lambda i, e: SamplingPolicy(count, stride, placement="center"))


def _run_fold(fold, train_clips, test_clips, config: TrainConfig):
    params, trace = fit(train_clips, config)
    predictions = predict_classes(params, test_clips, config.batch_size)
    return fold, predictions, trace


def per_class_breakdown(entries, predictions_by_index: Dict[int, int]):
    breakdown = {}
    for label in TRI_LABELS:
        idx = [i for i, e in enumerate(entries) if e.tri_label == label]
        correct = sum(int(predictions_by_index[i] == entries[i].binary_label) for i in idx)
        breakdown[label] = {"count": len(idx), "correct": correct,
                            "accuracy": correct / len(idx) if idx else None}
    return breakdown


def run_crossval(manifest: Union[str, Sequence[ManifestEntry]], train_config: TrainConfig, k: Optional[int] = None,
                 seed: Optional[int] = None, jobs: int = 1, loader: Optional[ClipLoaderService] = None,
                 tracker: Optional[RunTrackerService] = None,
                 on_fold: Optional[Callable[[FoldResult, int, int], None]] = None) -> EvalReport:
    """
    Train on k-1 folds and evaluate on the held-out one, for every fold.

    Fold ``f`` trains with seed ``seed + f``, so results do not depend on
    ``jobs``. Metrics are computed on the pooled (summed) confusion matrix.
    """
    entries = load_manifest(manifest) if isinstance(manifest, str) else list(manifest)
    seed = train_config.seed if seed is None else int(seed)
    labels = [e.binary_label for e in entries]
    folds = resolve_folds(entries, k, seed)
    k = len(folds)

    run_digest = config_digest({"config": train_config.to_dict(), "k": k, "seed": seed,
                                "entries": [[e.id, e.tri_label] for e in entries]})
    tracker = tracker or RunTrackerService()
    logged = {f for f in range(k) if tracker.has_been_run(run_digest, f)}
    if logged:
        logger.info("Folds %s of run %s are already in the run log", sorted(logged), run_digest[:12])
    owned_loader = loader is None
    loader = loader or ClipLoaderService(train_config.clip_size, (train_config.norm_mean, train_config.norm_std))
    train_view = load_training_clips(entries, train_config, seed, loader)
    eval_view = load_eval_clips(entries, train_config, loader)
    if owned_loader:
        loader.clear_cache()

    tasks = []
    for f, test in enumerate(folds):
        held = set(test.tolist())
        train_idx = [i for i in range(len(entries)) if i not in held]
        fold_config = dataclasses.replace(train_config, seed=seed + f)
        tasks.append((f, [train_view[i] for i in train_idx], [eval_view[i] for i in test], fold_config))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool_:
            futures = [pool_.submit(_run_fold, *task) for task in tasks]
            outcomes = [future.result() for future in futures]
    else:
        outcomes = [_run_fold(*task) for task in tasks]

    results = []
    predictions_by_index = {}
    for fold, predictions, trace in outcomes:
        test = folds[fold]
        confusion = tally([labels[i] for i in test], predictions, train_config.positive_class)
        for i, p in zip(test.tolist(), predictions.tolist()):
            predictions_by_index[i] = int(p)
        result = FoldResult(fold=fold, confusion=confusion, metrics=compute_metrics(confusion),
                            test_indices=test.tolist(), loss_trace=[float(v) for v in trace])
        results.append(result)
        if fold not in logged:
            tracker.log_fold(run_digest, train_config.backbone, fold, confusion.to_dict(), result.loss_trace[-1])
        logger.info("Fold %d/%d %s: %s", fold + 1, k, train_config.backbone, confusion.to_dict())
        if on_fold is not None:
            on_fold(result, fold + 1, k)

    pooled = pool(r.confusion for r in results)
    if pooled.total != len(entries):
        raise ValidationError(f"Pooled matrix counts {pooled.total} clips, manifest has {len(entries)}")
    return EvalReport(backbone=train_config.backbone, display_name=display_name(train_config.backbone),
                      config_digest=train_config.digest(), folds=results, pooled=pooled,
                      metrics=compute_metrics(pooled), k=k, seed=seed,
                      positive_class=train_config.positive_class,
                      per_class=per_class_breakdown(entries, predictions_by_index))
