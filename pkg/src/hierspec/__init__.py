"""Layer-wise spectral learning of power-law compositional targets."""
from .spectral import FitOptions, ReadoutHyper, SpectralFit, fit, fit_path, predict
from .teacher import Dataset, Teacher, TeacherSpec, sample_dataset, sample_teacher
from .tensor_hermite import MultiIndexBasis, SymTensor, multi_index_basis

__all__ = [
    "Dataset",
    "FitOptions",
    "MultiIndexBasis",
    "ReadoutHyper",
    "SpectralFit",
    "SymTensor",
    "Teacher",
    "TeacherSpec",
    "fit",
    "fit_path",
    "multi_index_basis",
    "predict",
    "sample_dataset",
    "sample_teacher",
]
