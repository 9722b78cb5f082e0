"""Frame-mean color baseline: logistic regression on each clip's mean RGB, same folds as the backbones."""
import logging
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from models.clip_info import ManifestEntry, SamplingPolicy
from models.configs import TrainConfig
from models.report_info import EvalReport, FoldResult
from services.clip_pipeline import ClipLoaderService
from services.crossval import per_class_breakdown, resolve_folds
from services.dataset import load_manifest
from services.metrics import compute_metrics, pool, tally

logger = logging.getLogger(__name__)

BASELINE_ID = "frame_mean"


def frame_mean_features(clips) -> np.ndarray:
    """[N, 3]: mean of every channel over all frames and pixels of each clip."""
    return np.stack([clip.data.data.reshape(clip.data.shape[0], -1).mean(axis=1) for clip in clips]).astype(np.float64)


def run_baseline(manifest: Union[str, Sequence[ManifestEntry]], train_config: TrainConfig, k: Optional[int] = None,
                 seed: Optional[int] = None, loader: Optional[ClipLoaderService] = None) -> EvalReport:
    entries = load_manifest(manifest) if isinstance(manifest, str) else list(manifest)
    seed = train_config.seed if seed is None else int(seed)
    labels = np.array([e.binary_label for e in entries])
    folds = resolve_folds(entries, k, seed)

    loader = loader or ClipLoaderService(train_config.clip_size, (train_config.norm_mean, train_config.norm_std))
    count, stride = train_config.sampling["count"], train_config.sampling["stride"]
    clips = loader.load_entries(entries, lambda i, e: SamplingPolicy(count, stride, placement="center"))
    features = frame_mean_features(clips)

    results = []
    predictions_by_index = {}
    for f, test in enumerate(folds):
        train = np.setdiff1d(np.arange(len(entries)), test)
        scaler = StandardScaler().fit(features[train])
        model = LogisticRegression(random_state=seed + f).fit(scaler.transform(features[train]), labels[train])
        predictions = model.predict(scaler.transform(features[test]))
        for i, p in zip(test.tolist(), predictions.tolist()):
            predictions_by_index[i] = int(p)
        confusion = tally(labels[test], predictions, train_config.positive_class)
        results.append(FoldResult(fold=f, confusion=confusion, metrics=compute_metrics(confusion),
                                  test_indices=test.tolist()))

    pooled = pool(r.confusion for r in results)
    logger.info("Frame-mean baseline: %s", compute_metrics(pooled))
    return EvalReport(backbone=BASELINE_ID, display_name="Frame-mean baseline",
                      config_digest=train_config.digest(), folds=results, pooled=pooled,
                      metrics=compute_metrics(pooled), k=len(folds), seed=seed,
                      positive_class=train_config.positive_class,
                      per_class=per_class_breakdown(entries, predictions_by_index))
