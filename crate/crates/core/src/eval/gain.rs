//! Coordinate-ascent maximization of one frequency-converting SISO channel gain.

use rand::Rng;
use rayon::prelude::*;
use serde_json::Value;

use super::zeta::EvalModel;
use crate::error::{Error, Result};
use crate::estimation::predict::forward;
use crate::floquet::{ModulationPattern, WeightTable};
use crate::grid::HarmonicGrid;
use crate::json;
use crate::rng::{self, Stream};
use crate::scenario::Scenario;
use crate::C64;

#[derive(Debug, Clone, PartialEq)]
pub struct GainConfig {
    pub tx: usize,
    pub rx: usize,
    /// Output harmonic of the objective; the input is always the fundamental.
    pub harmonic: i32,
    pub q: usize,
    pub restarts: usize,
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            tx: 0,
            rx: 0,
            harmonic: 1,
            q: 3,
            restarts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainResult {
    pub pattern: ModulationPattern,
    pub predicted_gain_db: f64,
    pub true_gain_db: f64,
    /// Objective (linear power) at the start and after every sweep, per restart.
    pub traces: Vec<Vec<f64>>,
    pub restarts: usize,
    pub best_restart: usize,
}

impl GainResult {
    pub fn to_json(&self) -> Value {
        json::object(vec![
            ("states", Value::from(self.pattern.rows())),
            ("predicted_gain_db", finite(self.predicted_gain_db)),
            ("true_gain_db", finite(self.true_gain_db)),
            (
                "traces",
                Value::Array(self.traces.iter().map(|t| t.clone().into()).collect()),
            ),
            ("restarts", self.restarts.into()),
            ("best_restart", self.best_restart.into()),
        ])
    }
}

/// JSON has no infinities; `-inf` dB (a null channel entry) becomes `null`.
fn finite(x: f64) -> Value {
    if x.is_finite() {
        x.into()
    } else {
        Value::Null
    }
}

fn db(power: f64) -> f64 {
    10.0 * power.log10()
}

/// Evaluates `|H(harmonic <- 0)[rx, tx]|^2` of one model.
struct Objective<'a> {
    model: &'a EvalModel,
    scenario: &'a Scenario,
    grid: &'a HarmonicGrid,
    weights: Option<WeightTable>,
    out: usize,
    fund: usize,
    tx: usize,
    rx: usize,
}

impl<'a> Objective<'a> {
    fn new(model: &'a EvalModel, scenario: &'a Scenario, retained: &'a HarmonicGrid, cfg: &GainConfig) -> Result<Self> {
        let p = scenario.partition();
        if cfg.tx >= p.n_t() || cfg.rx >= p.n_r() {
            return Err(Error::Validation(format!(
                "ports tx {} / rx {} outside {} x {}",
                cfg.tx,
                cfg.rx,
                p.n_t(),
                p.n_r()
            )));
        }
        if cfg.q == 0 {
            return Err(Error::Validation("Q must be at least 1".into()));
        }
        let grid = match model {
            EvalModel::GroundTruth => scenario.gt_grid(),
            _ => retained,
        };
        retained.require_index(cfg.harmonic)?;
        let weights = matches!(model, EvalModel::Proxies(_)).then(|| WeightTable::new(grid, cfg.q));
        Ok(Self {
            model,
            scenario,
            grid,
            weights,
            out: grid.require_index(cfg.harmonic)?,
            fund: grid.require_index(0)?,
            tx: cfg.tx,
            rx: cfg.rx,
        })
    }

    fn entry(&self, pattern: &ModulationPattern) -> Result<C64> {
        let cols = [(self.fund, self.tx)];
        let n_r = self.scenario.partition().n_r();
        Ok(match self.model {
            EvalModel::GroundTruth => self.scenario.response(pattern, &[self.out], &cols)?[(self.rx, 0)],
            EvalModel::TruncatedGt { .. } => self.model.response(pattern, &cols)?[(self.out * n_r + self.rx, 0)],
            EvalModel::Proxies(p) => {
                let w = self.weights.as_ref().expect("proxy weights");
                forward(p.params(), self.grid, w, pattern, &[self.out], &cols)?.h[(self.rx, 0)]
            }
        })
    }

    fn power(&self, pattern: &ModulationPattern) -> Result<f64> {
        Ok(self.entry(pattern)?.norm_sqr())
    }
}

/// One ascent from `pattern`: element-major, slot-minor sweeps, each coordinate set to
/// its best state (lowest index on ties), until a sweep brings no improvement.
fn ascend(obj: &Objective, mut pattern: ModulationPattern, n_states: usize) -> Result<(ModulationPattern, Vec<f64>)> {
    let mut value = obj.power(&pattern)?;
    let mut trace = vec![value];
    loop {
        let start = value;
        for i in 0..pattern.n_s() {
            for q in 0..pattern.slots() {
                let current = pattern.state(i, q);
                let mut best = (current, value);
                for s in 0..n_states {
                    let v = if s == current {
                        value
                    } else {
                        pattern.set_state(i, q, s);
                        obj.power(&pattern)?
                    };
                    if v > best.1 || (v == best.1 && s < best.0) {
                        best = (s, v);
                    }
                }
                pattern.set_state(i, q, best.0);
                value = best.1;
            }
        }
        trace.push(value);
        if value <= start {
            return Ok((pattern, trace));
        }
    }
}

/// Maximizes the fundamental-to-`harmonic` gain under `model` with random-restart
/// coordinate ascent and reports the ground-truth gain of the winning pattern.
pub fn coordinate_ascent_gain(
    model: &EvalModel,
    scenario: &Scenario,
    retained: &HarmonicGrid,
    cfg: &GainConfig,
    seed: u64,
) -> Result<GainResult> {
    if cfg.restarts == 0 {
        return Err(Error::Validation("at least one restart is required".into()));
    }
    let obj = Objective::new(model, scenario, retained, cfg)?;
    let c = &scenario.config;
    let runs = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, Stream::Restarts, r as u64);
            let states = (0..c.n_s * cfg.q).map(|_| rng.random_range(0..c.n_states)).collect();
            ascend(&obj, ModulationPattern::from_flat(c.n_s, cfg.q, states), c.n_states)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best_restart = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.1.last() > runs[best_restart].1.last() {
            best_restart = r;
        }
    }
    let pattern = runs[best_restart].0.clone();
    let predicted = *runs[best_restart]
        .1
        .last()
        .expect("trace starts with the initial value");
    let truth = match model {
        EvalModel::GroundTruth => predicted,
        _ => Objective::new(&EvalModel::GroundTruth, scenario, retained, cfg)?.power(&pattern)?,
    };
    Ok(GainResult {
        pattern,
        predicted_gain_db: db(predicted),
        true_gain_db: db(truth),
        traces: runs.into_iter().map(|r| r.1).collect(),
        restarts: cfg.restarts,
        best_restart,
    })
}

/// Power objective of every pattern, for brute-force comparisons.
pub fn gain_of(
    model: &EvalModel,
    scenario: &Scenario,
    retained: &HarmonicGrid,
    cfg: &GainConfig,
    pattern: &ModulationPattern,
) -> Result<f64> {
    Objective::new(model, scenario, retained, cfg)?.power(pattern)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{surrogate_step1, truth_proxies};
    use crate::scenario::ScenarioConfig;

    fn scenario(n_s: usize, n_states: usize) -> Scenario {
        Scenario::generate(&ScenarioConfig {
            gt_harmonics: 5,
            retained_harmonics: 3,
            n_t: 2,
            n_r: 2,
            n_s,
            n_states,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    fn exhaustive(s: &Scenario, model: &EvalModel, cfg: &GainConfig) -> f64 {
        let g = s.retained_grid().unwrap();
        let n = s.config.n_s * cfg.q;
        let p = s.config.n_states;
        (0..p.pow(n as u32))
            .map(|mut code| {
                let states = (0..n)
                    .map(|_| {
                        let v = code % p;
                        code /= p;
                        v
                    })
                    .collect();
                gain_of(
                    model,
                    s,
                    &g,
                    cfg,
                    &ModulationPattern::from_flat(s.config.n_s, cfg.q, states),
                )
                .unwrap()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn matches_exhaustive_search_on_tiny_instances() {
        for n_s in [1, 2] {
            let s = scenario(n_s, 2);
            let g = s.retained_grid().unwrap();
            let cfg = GainConfig {
                q: 2,
                restarts: 32,
                ..Default::default()
            };
            for model in [EvalModel::GroundTruth, EvalModel::truncated_gt(&s, &g, true).unwrap()] {
                let r = coordinate_ascent_gain(&model, &s, &g, &cfg, 5).unwrap();
                assert_eq!(r.predicted_gain_db, 10.0 * exhaustive(&s, &model, &cfg).log10());
                assert!(r.traces.iter().all(|t| t.windows(2).all(|w| w[1] >= w[0])));
            }
        }
    }

    #[test]
    fn ground_truth_gain_is_self_consistent() {
        let s = scenario(3, 4);
        let g = s.retained_grid().unwrap();
        let r = coordinate_ascent_gain(&EvalModel::GroundTruth, &s, &g, &GainConfig::default(), 1).unwrap();
        assert_eq!(r.true_gain_db, r.predicted_gain_db);
        assert_eq!(r.traces.len(), 4);
        let again = coordinate_ascent_gain(&EvalModel::GroundTruth, &s, &g, &GainConfig::default(), 1).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn single_state_returns_the_unique_pattern() {
        let mut s = scenario(2, 2);
        let one: Vec<Vec<C64>> = s.loads.rows().iter().map(|r| r[..1].to_vec()).collect();
        s.loads = crate::floquet::LoadSet::new(s.gt_grid().clone(), one).unwrap();
        s.config.n_states = 1;
        let g = s.retained_grid().unwrap();
        let m = EvalModel::Proxies(truth_proxies(&s, &g, true).unwrap());
        let r = coordinate_ascent_gain(&m, &s, &g, &GainConfig::default(), 0).unwrap();
        assert!(r.pattern.rows().iter().flatten().all(|&v| v == 0));
        let direct = gain_of(&m, &s, &g, &GainConfig::default(), &r.pattern).unwrap();
        assert_eq!(r.predicted_gain_db, 10.0 * direct.log10());
    }

    #[test]
    fn proxy_objective_matches_full_prediction() {
        let s = scenario(3, 4);
        let g = s.retained_grid().unwrap();
        let proxies = surrogate_step1(&s, &g, 0.3, 2, true).unwrap();
        let pattern = ModulationPattern::from_flat(3, 3, vec![0, 1, 2, 3, 0, 1, 2, 3, 0]);
        let cfg = GainConfig {
            tx: 1,
            rx: 0,
            ..Default::default()
        };
        let m = EvalModel::Proxies(proxies);
        let full = m.channel(&s, &pattern, &g).unwrap().block(1, 0).unwrap()[(0, 1)].norm_sqr();
        let fast = gain_of(&m, &s, &g, &cfg, &pattern).unwrap();
        assert!((full - fast).abs() <= 1e-14 * full);
        let t = EvalModel::truncated_gt(&s, &g, false).unwrap();
        let full = t.channel(&s, &pattern, &g).unwrap().block(1, 0).unwrap()[(0, 1)].norm_sqr();
        assert!((full - gain_of(&t, &s, &g, &cfg, &pattern).unwrap()).abs() <= 1e-14 * full);
    }

    #[test]
    fn invalid_ports_are_rejected() {
        let s = scenario(2, 2);
        let g = s.retained_grid().unwrap();
        let cfg = GainConfig {
            tx: 5,
            ..Default::default()
        };
        assert!(coordinate_ascent_gain(&EvalModel::GroundTruth, &s, &g, &cfg, 0).is_err());
        let cfg = GainConfig {
            harmonic: 4,
            ..Default::default()
        };
        assert!(coordinate_ascent_gain(&EvalModel::GroundTruth, &s, &g, &cfg, 0).is_err());
    }
}
