"""Manifests, preprocessing, augmentation and synthetic scenes."""
from .manifest import DatasetManifest, LabeledImage, load_manifest, save_manifest, split_dataset
from .synth import SynthConfig, render_scene, synth_generate, synth_scenes
from .transforms import (AugmentationConfig, augment_brightness, read_image, resize_image,
                         to_network_input, write_image)

__all__ = [
    "DatasetManifest", "LabeledImage", "load_manifest", "save_manifest", "split_dataset",
    "SynthConfig", "render_scene", "synth_generate", "synth_scenes", "AugmentationConfig",
    "augment_brightness", "read_image", "resize_image", "to_network_input", "write_image",
]
