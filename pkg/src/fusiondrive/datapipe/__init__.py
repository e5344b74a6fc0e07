"""Recording, cleaning, balancing and preprocessing of demonstration data."""

from .balance import BalanceConfig, balance
from .record import Dataset, NoiseSchedule, Sample, record_episode, strip_noise
from .storage import load_dataset, read_episode, read_manifest, write_episode, write_manifest
from .transforms import AUGMENTATIONS, AugmentConfig, augment, preprocess, preprocess_labels
