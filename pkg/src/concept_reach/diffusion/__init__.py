from .encoder import FrozenCaptionEncoder, T5Encoder, encode_text, get_encoder
from .model import ArchConfig, Denoiser, DiffusionModel, IntegrityError, h_activation
from .sampling import sample
from .schedule import NoiseSchedule, forward_noise
from .train import TrainConfig, from_model_space, noise_matching_loss, to_model_space, train

__all__ = [
    "ArchConfig",
    "Denoiser",
    "DiffusionModel",
    "FrozenCaptionEncoder",
    "IntegrityError",
    "NoiseSchedule",
    "T5Encoder",
    "TrainConfig",
    "encode_text",
    "forward_noise",
    "from_model_space",
    "get_encoder",
    "h_activation",
    "noise_matching_loss",
    "sample",
    "to_model_space",
    "train",
]
