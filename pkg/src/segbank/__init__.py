"""Semi-supervised semantic segmentation with a teacher-student scheme,
pseudo-labeling, entropy minimization and a class-wise feature memory bank
driving positive-only pixel contrastive learning."""

__version__ = "0.1.0"
