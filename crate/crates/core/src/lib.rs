//! Monte-Carlo-dropout classification of mass lesions with BI-RADS scoring
//! from predictive entropy, plus the stratified evaluation protocol used to
//! audit radiologist and model scores against pathology.

pub mod config;
pub mod eval;
pub mod io;
pub mod mlp;
pub mod model;
pub mod pipeline;
pub mod resample;
pub mod scalar;
pub mod synth;
pub mod uncertainty;

pub use scalar::Scalar;

/// Double-precision instantiations used by the pipeline and the CLI.
pub type Classifier = mlp::BayesianClassifier<f64>;
pub type Distribution = mlp::PredictiveDistribution<f64>;
pub type Samples = mlp::PredictiveSamples<f64>;
pub type Params = mlp::NetworkParams<f64>;
pub type Features = model::FeatureVector<f64>;
pub type Mapper = uncertainty::MapperConfig<f64>;
pub type Thresholds = uncertainty::BandThresholds<f64>;
