"""Synthetic shapes, cloud files, dataset splits, checkpoints and metrics."""
from .checkpoint import (CheckpointError, CorruptCheckpointError, NotACheckpointError,
                         UnsupportedVersionError, checkpoint_load, checkpoint_save)
from .cloudio import CloudFormatError, load_cloud, save_cloud
from .dataset import (ShapeDataset, dataset_split, load_dataset_dir, make_classification_dataset,
                      make_segmentation_dataset, save_dataset_dir)
from .metrics import accuracy, miou, per_category_iou, per_shape_ious, shape_iou
from .synthetic import (CLASSIFICATION_FAMILIES, SEGMENTATION_FAMILIES, SyntheticShapeSpec,
                        generate_primitive_cloud, parts_per_category)

__all__ = [
    "CLASSIFICATION_FAMILIES", "SEGMENTATION_FAMILIES", "CheckpointError", "CloudFormatError",
    "CorruptCheckpointError", "NotACheckpointError", "ShapeDataset", "SyntheticShapeSpec",
    "UnsupportedVersionError", "accuracy", "checkpoint_load", "checkpoint_save", "dataset_split",
    "generate_primitive_cloud", "load_cloud", "load_dataset_dir", "make_classification_dataset",
    "make_segmentation_dataset", "miou", "parts_per_category", "per_category_iou", "per_shape_ious",
    "save_cloud", "save_dataset_dir", "shape_iou",
]
