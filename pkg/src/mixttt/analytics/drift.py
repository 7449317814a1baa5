"""
Embedding drift diagnostics
Davies-Bouldin index of test-set features across adaptation steps and a
deterministic 2-D projection for export.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA
from sklearn.metrics import davies_bouldin_score

from ..data.datasets import Dataset
from ..models.network import SplitNetwork
from ..ttt.aux_tasks import TrainFeatureStats
from ..ttt.engine import EpisodeConfig, run_episodes
from ..ttt.mixup import TrainPartnerPool
from ..utils.errors import InputError

logger = logging.getLogger(__name__)

DEFAULT_CHECKPOINTS = (10, 20, 30)
DEGENERATE_VARIANCE = 1e-12


def project_2d(features: np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates; each component's largest-magnitude loading is positive"""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise InputError(f"projection needs at least 2 points in at least 2 dims, got {x.shape}")

    pca = PCA(n_components=2, svd_solver="full").fit(x)
    components = pca.components_.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return (x - pca.mean_) @ components.T


def is_degenerate(features: np.ndarray) -> bool:
    return float(np.asarray(features).var(axis=0).sum()) <= DEGENERATE_VARIANCE


@dataclass
class DriftReport:
    """Cluster validity of test embeddings per checkpoint step"""

    steps: List[int]
    db_index: List[float]
    degenerate: List[bool]
    coordinates: pd.DataFrame = field(default_factory=pd.DataFrame)
    excluded_classes: List[int] = field(default_factory=list)

    @property
    def any_degenerate(self) -> bool:
        return any(self.degenerate)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"step": self.steps, "davies_bouldin": self.db_index, "degenerate": self.degenerate})


def drift_delta(report: DriftReport) -> float:
    """Index at the last checkpoint minus the index before adaptation"""
    return float(report.db_index[-1] - report.db_index[0])


def drift_analysis(snapshots: Mapping[int, np.ndarray], labels) -> DriftReport:
    """
    Davies-Bouldin index and 2-D coordinates for each feature snapshot.

    Args:
        snapshots: step -> features [N, D] (same N rows in every snapshot)
        labels: true main-task label per row

    Returns:
        DriftReport with steps ascending
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    singletons = [int(c) for c, n in zip(classes, counts) if n < 2]
    for label in singletons:
        logger.warning(f"Class {label} has a single point; excluded from the drift index")
    keep = ~np.isin(labels, singletons)
    if len(classes) - len(singletons) < 2:
        raise InputError("drift analysis needs at least 2 classes with 2 or more points")

    steps = sorted(snapshots)
    db_values, flags, frames = [], [], []
    ids = np.flatnonzero(keep)
    for step in steps:
        features = np.asarray(snapshots[step], dtype=np.float64)
        if features.shape[0] != labels.shape[0]:
            raise InputError(f"step {step}: {features.shape[0]} feature rows for {labels.shape[0]} labels")
        kept = features[keep]
        degenerate = is_degenerate(kept)
        if degenerate:
            logger.warning(f"Embeddings at step {step} have no spread")
        db_values.append(float(davies_bouldin_score(kept, labels[keep])))
        flags.append(degenerate)

        coords = np.zeros((len(kept), 2)) if degenerate or kept.shape[1] < 2 else project_2d(kept)
        frames.append(pd.DataFrame({"id": ids, "label": labels[keep], "pc1": coords[:, 0], "pc2": coords[:, 1], "step": step}))

    coordinates = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    return DriftReport(steps=steps, db_index=db_values, degenerate=flags, coordinates=coordinates, excluded_classes=singletons)


def drift_experiment(
    network: SplitNetwork,
    dataset: Dataset,
    config: EpisodeConfig,
    pool: Optional[TrainPartnerPool] = None,
    feature_stats: Optional[TrainFeatureStats] = None,
    checkpoints: Sequence[int] = DEFAULT_CHECKPOINTS,
    threads: int = 1,
) -> DriftReport:
    """Per-sample episodes with feature recording; test features collected at step 0 and each checkpoint"""
    if not checkpoints or min(checkpoints) < 1:
        raise InputError("drift checkpoints must be positive steps")
    recording = config.model_copy(update={"steps": max(checkpoints), "record_features": True})
    results = run_episodes(network, dataset.images, recording, pool, feature_stats, threads)

    snapshots: Dict[int, np.ndarray] = {0: np.concatenate([r.features_at(0) for r in results])}
    for step in sorted(set(checkpoints)):
        snapshots[step] = np.concatenate([r.features_at(step) for r in results])
    return drift_analysis(snapshots, dataset.labels.numpy())
