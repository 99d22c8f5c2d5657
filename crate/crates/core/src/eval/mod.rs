//! Accuracy metric, harmonic-gain benchmark and experiment drivers.

mod experiments;
mod gain;
mod zeta;

pub use experiments::{
    experiment_fig3, experiment_fig4, experiment_table1, ExperimentConfig, Fig3Row, Fig3Table, Fig3Values, Fig4Row,
    Fig4Table, Fig4Values, GainValues, ModelKind, ProxySource, Table1Output, Table1Row,
};
pub use gain::{coordinate_ascent_gain, gain_of, GainConfig, GainResult};
pub use zeta::{evaluation_patterns, zeta, EvalModel, EvaluationSet, ZetaReport, DEFAULT_EVAL_PATTERNS};
