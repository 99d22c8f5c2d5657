//! Accuracy metric: ratio of the spread of true observables to the spread of prediction errors.

use rayon::prelude::*;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::estimation::predict_channel;
use crate::floquet::{self, assemble_phi, FloquetChannel, LoadSet, ModulationPattern, NetworkBlocks};
use crate::gauge::ProxySet;
use crate::grid::HarmonicGrid;
use crate::json;
use crate::measurement::{project, random_patterns, MeasurementMode};
use crate::rng::{self, Stream};
use crate::scenario::Scenario;

/// Number of unseen patterns used by default.
pub const DEFAULT_EVAL_PATTERNS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ZetaReport {
    pub mode: MeasurementMode,
    pub patterns: usize,
    /// `+inf` when every prediction error vanishes.
    pub zeta_linear: f64,
    pub zeta_db: f64,
    /// Frobenius norm of the projected error of each pattern.
    pub error_norms: Vec<f64>,
}

impl ZetaReport {
    pub fn is_infinite(&self) -> bool {
        self.zeta_linear.is_infinite()
    }

    pub fn to_json(&self) -> Value {
        let finite = |x: f64| if x.is_finite() { Value::from(x) } else { Value::Null };
        json::object(vec![
            ("mode", self.mode.name().into()),
            ("patterns", self.patterns.into()),
            ("zeta_linear", finite(self.zeta_linear)),
            ("zeta_db", finite(self.zeta_db)),
            ("infinite", self.is_infinite().into()),
            ("error_norms", self.error_norms.clone().into()),
        ])
    }
}

/// Population standard deviation.
fn sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Accuracy of `predicted` against `truth` under the observable of `mode`. Complex
/// entries count as two real scalars.
pub fn zeta(truth: &[FloquetChannel], predicted: &[FloquetChannel], mode: MeasurementMode) -> Result<ZetaReport> {
    if truth.len() != predicted.len() {
        return Err(Error::dim(format!(
            "{} true channels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::Validation("zeta needs at least two patterns".into()));
    }
    let mut t_stack = Vec::new();
    let mut e_stack = Vec::new();
    let mut error_norms = Vec::with_capacity(truth.len());
    for (t, p) in truth.iter().zip(predicted) {
        if t.matrix().shape() != p.matrix().shape() || t.grid() != p.grid() {
            return Err(Error::dim("true and predicted channels differ in shape or grid"));
        }
        let t = project(mode, t)?.real_scalars();
        let p = project(mode, p)?.real_scalars();
        let e: Vec<f64> = p.iter().zip(&t).map(|(a, b)| a - b).collect();
        error_norms.push(e.iter().map(|v| v * v).sum::<f64>().sqrt());
        t_stack.extend(t);
        e_stack.extend(e);
    }
    let sd_t = sd(&t_stack);
    if sd_t == 0.0 {
        return Err(Error::ZeroNorm(0));
    }
    let sd_e = sd(&e_stack);
    let zeta_linear = if sd_e == 0.0 { f64::INFINITY } else { sd_t / sd_e };
    Ok(ZetaReport {
        mode,
        patterns: truth.len(),
        zeta_linear,
        zeta_db: 20.0 * zeta_linear.log10(),
        error_norms,
    })
}

/// A channel model evaluated against the ground truth.
#[derive(Debug, Clone)]
pub enum EvalModel {
    /// The scenario itself, on the full comb.
    GroundTruth,
    /// Ground-truth blocks and loads restricted to the retained grid (delays kept).
    TruncatedGt {
        grid: HarmonicGrid,
        blocks: Vec<NetworkBlocks>,
        loads: LoadSet,
        delays: Vec<f64>,
    },
    Proxies(ProxySet),
}

impl EvalModel {
    pub fn truncated_gt(scenario: &Scenario, retained: &HarmonicGrid, mc_aware: bool) -> Result<Self> {
        let (model, loads) = scenario.truncated(retained)?;
        Ok(Self::TruncatedGt {
            grid: retained.clone(),
            blocks: model.all_blocks(mc_aware),
            loads,
            delays: scenario.delays.clone(),
        })
    }

    /// Channel of `pattern` on `retained`.
    pub fn channel(
        &self,
        scenario: &Scenario,
        pattern: &ModulationPattern,
        retained: &HarmonicGrid,
    ) -> Result<FloquetChannel> {
        let p = scenario.partition();
        match self {
            Self::GroundTruth => scenario.channel(pattern, retained),
            Self::TruncatedGt { grid, .. } => {
                self.require_grid(grid, retained)?;
                let cols = floquet::all_columns(grid.len(), p.n_t());
                let m = self.response(pattern, &cols)?;
                FloquetChannel::new(grid.clone(), p.n_r(), p.n_t(), m)
            }
            Self::Proxies(proxies) => {
                self.require_grid(proxies.grid(), retained)?;
                predict_channel(proxies, pattern)
            }
        }
    }

    fn require_grid(&self, own: &HarmonicGrid, retained: &HarmonicGrid) -> Result<()> {
        if own != retained {
            return Err(Error::Validation(format!(
                "model covers harmonics {:?}, evaluation asks for {:?}",
                own.harmonics(),
                retained.harmonics()
            )));
        }
        Ok(())
    }

    /// Truncated-model response columns; all output rows.
    pub(crate) fn response(&self, pattern: &ModulationPattern, cols: &[(usize, usize)]) -> Result<crate::CMatrix> {
        match self {
            Self::TruncatedGt {
                grid,
                blocks,
                loads,
                delays,
            } => {
                let phi = assemble_phi(&pattern.clone().with_delays(delays)?, loads, grid)?;
                floquet::floquet_response(blocks, &phi, cols)
            }
            _ => unreachable!("response is only used for truncated models"),
        }
    }
}

/// Unseen patterns for evaluation at `q` slots; disjoint from every campaign stream.
pub fn evaluation_patterns(scenario: &Scenario, q: usize, count: usize, seed: u64) -> Result<Vec<ModulationPattern>> {
    let c = &scenario.config;
    let mut rng = rng::stream(seed, Stream::Evaluation, q as u64);
    random_patterns(count, c.n_s, q, c.n_states, &mut rng)
}

/// Evaluation patterns together with their ground-truth channels on the retained grid.
#[derive(Debug, Clone)]
pub struct EvaluationSet {
    pub grid: HarmonicGrid,
    pub patterns: Vec<ModulationPattern>,
    pub truth: Vec<FloquetChannel>,
}

impl EvaluationSet {
    pub fn new(scenario: &Scenario, retained: &HarmonicGrid, q: usize, count: usize, seed: u64) -> Result<Self> {
        let patterns = evaluation_patterns(scenario, q, count, seed)?;
        let truth = patterns
            .par_iter()
            .map(|p| scenario.channel(p, retained))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: retained.clone(),
            patterns,
            truth,
        })
    }

    pub fn zeta(&self, scenario: &Scenario, model: &EvalModel, mode: MeasurementMode) -> Result<ZetaReport> {
        let predicted = self
            .patterns
            .par_iter()
            .map(|p| model.channel(scenario, p, &self.grid))
            .collect::<Result<Vec<_>>>()?;
        zeta(&self.truth, &predicted, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::truth_proxies;
    use crate::measurement::add_noise;
    use crate::scenario::ScenarioConfig;

    fn small(delay_scale: f64) -> Scenario {
        Scenario::generate(&ScenarioConfig {
            gt_harmonics: 7,
            retained_harmonics: 3,
            n_t: 2,
            n_r: 2,
            n_s: 3,
            n_states: 4,
            delay_scale,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn perfect_zero_and_noisy_predictions() {
        let s = small(0.05);
        let g = s.retained_grid().unwrap();
        let set = EvaluationSet::new(&s, &g, 3, 100, 1).unwrap();
        for mode in MeasurementMode::ALL {
            let exact = set.zeta(&s, &EvalModel::GroundTruth, mode).unwrap();
            assert!(exact.is_infinite());
            assert!(exact.to_json()["zeta_db"].is_null());

            let zero: Vec<_> = set
                .truth
                .iter()
                .map(|t| FloquetChannel::new(g.clone(), 2, 2, t.matrix() * crate::C64::new(0.0, 0.0)).unwrap())
                .collect();
            let z = zeta(&set.truth, &zero, mode).unwrap();
            assert!((z.zeta_linear - 1.0).abs() < 1e-12, "{mode}: {}", z.zeta_linear);
        }
        // circular noise with a tenth of the truth spread
        let power = set
            .truth
            .iter()
            .flat_map(|t| t.matrix().iter().map(|z| z.norm_sqr()).collect::<Vec<_>>())
            .sum::<f64>()
            / (set.truth.len() * set.truth[0].matrix().len()) as f64;
        let mut rng = rng::stream(2, Stream::Noise, 0);
        let noisy: Vec<_> = set
            .truth
            .iter()
            .map(|t| add_noise(t, 20.0, power, &mut rng).unwrap())
            .collect();
        let z = zeta(&set.truth, &noisy, MeasurementMode::M3).unwrap();
        assert!((z.zeta_db - 20.0).abs() < 0.5, "{}", z.zeta_db);
    }

    #[test]
    fn doubling_the_error_costs_six_db() {
        let s = small(0.0);
        let g = s.retained_grid().unwrap();
        let set = EvaluationSet::new(&s, &g, 2, 10, 1).unwrap();
        let shift = |f: f64| -> Vec<FloquetChannel> {
            set.truth
                .iter()
                .map(|t| {
                    let m = t.matrix().map(|z| z * crate::C64::new(1.0 + 0.1 * f, 0.05 * f));
                    FloquetChannel::new(g.clone(), 2, 2, m).unwrap()
                })
                .collect()
        };
        let a = zeta(&set.truth, &shift(1.0), MeasurementMode::M3).unwrap();
        let b = zeta(&set.truth, &shift(2.0), MeasurementMode::M3).unwrap();
        assert!((a.zeta_db - b.zeta_db - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn truncated_gt_is_exact_without_truncation_at_q1() {
        let mut cfg = small(0.05).config;
        cfg.retained_harmonics = cfg.gt_harmonics;
        let s = Scenario::generate(&cfg).unwrap();
        let g = s.retained_grid().unwrap();
        let set = EvaluationSet::new(&s, &g, 1, 5, 3).unwrap();
        let m = EvalModel::truncated_gt(&s, &g, true).unwrap();
        let z = set.zeta(&s, &m, MeasurementMode::M3).unwrap();
        assert!(z.zeta_db > 250.0 || z.is_infinite(), "{}", z.zeta_db);
        // zero-delay proxies agree with the model at Q = 1
        let p = EvalModel::Proxies(truth_proxies(&s, &g, true).unwrap());
        assert!(set.zeta(&s, &p, MeasurementMode::M2).unwrap().zeta_db > 250.0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let s = small(0.0);
        let g = s.retained_grid().unwrap();
        let set = EvaluationSet::new(&s, &g, 1, 2, 1).unwrap();
        assert!(zeta(&set.truth[..1], &set.truth[..1], MeasurementMode::M1).is_err());
        assert!(zeta(&set.truth, &set.truth[..1], MeasurementMode::M1).is_err());
        let zero: Vec<_> = set
            .truth
            .iter()
            .map(|t| FloquetChannel::new(g.clone(), 2, 2, t.matrix().map(|_| crate::C64::new(0.0, 0.0))).unwrap())
            .collect();
        assert!(matches!(
            zeta(&zero, &set.truth, MeasurementMode::M3),
            Err(Error::ZeroNorm(_))
        ));
    }
}
