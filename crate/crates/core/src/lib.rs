pub mod caputo;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod flux;
pub mod forward;
pub mod inversion;
pub mod field;
pub mod mesh;
pub mod solver;
pub mod uq;
pub mod validate;

pub use caputo::{caputo_apply, caputo_weights, CaputoWeights, TemporalGrid};
pub use error::{Error, Result};
pub use fem::{assemble_fem, DiffusionTensor, FemOperators, FemSpace};
pub use field::{CoefficientField, FieldKind, SpaceTimeField};
pub use mesh::{build_mesh, Dimension, Segment, SpatialMesh};
pub use solver::{solve_tfde, Dirichlet, Load, TfdeSolution, TfdeSolver};
pub use flux::{boundary_flux, variational_flux, FluxMethod};
pub use forward::{
    add_noise, direct_flux_data, BasisKind, ForwardModel, MeasurementMatrix, NoiseRecord,
    Observation, ObservationKind, SourceSystem, StateBundle, TemporalProfile, WeightFunction,
};
pub use inversion::{
    evaluate, gradient, objective, relative_error, run_cgm, sensitivity_directional, CgmOptions,
    CgmRecord, CgmResult, Evaluation, MuRule, ObjectiveConfig,
};
pub use uq::{
    assemble_jacobian, assemble_jacobian_by_columns, chi_square_quantile, confidence_interval,
    posterior_covariance, sample_posterior, sample_posterior_with, skewness, ConfidenceReport,
    EnsembleOptions, PosteriorEnsemble, PosteriorModel, SkewnessReport,
};
pub use experiment::{
    compare_data_types, exact_coefficient, run_experiment, run_job, ArtifactMeta, ComparisonReport,
    ExperimentConfig, ExperimentReport, JobResult, JobSpec, Setup, TrendCheck,
};
pub use validate::{validate_suite, validate_with, Mutations, ValidationCheck, ValidationReport};
