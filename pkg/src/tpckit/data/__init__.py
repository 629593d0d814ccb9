"""Synthetic cohort generation, preprocessing, batching and dataset I/O."""

from .batching import Batch, batch_stays, collate
from .cohort import Cohort, PatientStay, RawEvent, generate_cohort, generate_stays
from .io import Dataset, build_dataset, load_dataset, read_cohort, save_dataset, write_cohort
from .preprocess import Preprocessor, ProcessedStay, split_patients

__all__ = [
    "Batch", "batch_stays", "collate", "Cohort", "PatientStay", "RawEvent", "generate_cohort", "generate_stays",
    "Dataset", "build_dataset", "load_dataset", "read_cohort", "save_dataset", "write_cohort",
    "Preprocessor", "ProcessedStay", "split_patients",
]
