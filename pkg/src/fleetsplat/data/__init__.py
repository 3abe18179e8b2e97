from .formats import (BadMagic, ChecksumMismatch, FormatError, ShapeMismatch, Truncated, load_depth,
                      load_image, load_model, load_pairpred, load_pfm, load_ppm, save_depth, save_image,
                      save_model, save_pairpred, save_pfm, save_ppm)
from .synthetic import SceneParams, SyntheticScene, partition_scene, synth_scene
