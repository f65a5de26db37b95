"""Multimodal training with per-sample batch augmentation."""
