//! Labeled sample sets, the planted synthetic problem and file loaders.

mod loaders;
mod planted;
mod set;
mod synth;

pub use loaders::{load_csv, load_idx, parse_csv, parse_idx};
pub use planted::{
    build_planted_problem, inverse_propagate, planted_instance, random_decoder, relabel,
    ridge_head, DecoderInverse, PlantedConfig, PlantedInstance, PlantedProblem, RidgeHead,
};
pub use set::{Label, LabeledSet, Space};
pub use synth::{
    generate_feature_space, FeatureSpaceSample, PlantedDistribution, SynthConfig, FEATURE_BOUND,
};
