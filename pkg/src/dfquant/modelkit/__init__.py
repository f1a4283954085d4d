"""Model substrate: classifiers with BN taps, the conditional generator,
fake-quantized model wrappers, teacher training and checkpoints."""
from .bn import BNLayerParams, DegenerateBatchError, bn_forward, channel_stats
from .checkpoint import (Container, CheckpointError, load_classifier, load_container,
                         save_classifier, save_container)
from .classifier import (ARCHITECTURES, Classifier, Tap, TapOutput, UnknownArchitectureError,
                         build_classifier, forward_with_taps)
from .fakequant import FakeQuantModel, QuantAct, load_quantized, quantize_model, save_quantized
from .generator import (Generator, SyntheticBatch, balanced_labels, build_generator, load_generator,
                        sample_synthetic)
from .train import TeacherSchedule, TrainingDivergedError, train_teacher

__all__ = [
    "ARCHITECTURES", "BNLayerParams", "CheckpointError", "Classifier", "Container",
    "DegenerateBatchError", "FakeQuantModel", "Generator", "QuantAct", "SyntheticBatch", "Tap",
    "TapOutput", "TeacherSchedule", "TrainingDivergedError", "UnknownArchitectureError",
    "balanced_labels", "bn_forward", "build_classifier", "build_generator", "channel_stats",
    "forward_with_taps", "load_classifier", "load_container", "load_generator", "load_quantized",
    "quantize_model", "sample_synthetic", "save_classifier", "save_container", "save_quantized", "train_teacher",
]
