"""Dataset ingestion, statistics, augmentation, and enhancement."""

from .augment import TRANSFORM_KINDS, apply_transforms, augment, validate_transform
from .boxes import BBox
from .coco import AnnotatedImage, Dataset, dataset_to_coco, load_coco, parse_coco, save_dataset
from .enhance import (
    METHODS,
    adaptive_equalize,
    contrast_stretch,
    enhance,
    hist_equalize,
    msrcp,
)
from .imageio import read_pnm, write_pnm
from .planner import AugmentPlan, SynthRecord, plan_and_execute_augmentation, replay_plan, split_train_val
from .stats import (
    COCO_MEDIUM_AREA_PX,
    COCO_MEDIUM_RATIO,
    COCO_SMALL_AREA_PX,
    COCO_SMALL_RATIO,
    SMALL_SIZE_RATIO,
    CategoryStats,
    category_stats,
    classify_small,
    stats_to_csv,
)

__all__ = [
    "AnnotatedImage", "AugmentPlan", "BBox", "CategoryStats", "Dataset",
    "SynthRecord", "METHODS", "TRANSFORM_KINDS",
    "COCO_MEDIUM_AREA_PX", "COCO_MEDIUM_RATIO", "COCO_SMALL_AREA_PX",
    "COCO_SMALL_RATIO", "SMALL_SIZE_RATIO",
    "adaptive_equalize", "apply_transforms", "augment", "category_stats",
    "classify_small", "contrast_stretch", "dataset_to_coco", "enhance",
    "hist_equalize", "load_coco", "msrcp", "parse_coco",
    "plan_and_execute_augmentation", "read_pnm", "replay_plan",
    "save_dataset", "split_train_val", "stats_to_csv", "validate_transform",
    "write_pnm",
]
