//! Synthetic ground truth and its file format.
//!
//! A scenario bundles a passive (optionally reciprocal) static scattering model over
//! the ground-truth harmonic comb, a dispersive set of load states and the control
//! delays of the RIS elements.
//!
//! Scenario JSON layout:
//!
//! ```text
//! {
//!   "config":       { ScenarioConfig fields },
//!   "static_model": [ per ground-truth harmonic: N x N rows of [re, im] ],
//!   "loads":        [ per ground-truth harmonic: P x [re, im] ],
//!   "delays_s":     [ N_S control delays in seconds ]
//! }
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::floquet::{self, assemble_phi, FloquetChannel, LoadSet, ModulationPattern, StaticScatterModel};
use crate::grid::{HarmonicGrid, PortPartition};
use crate::json::{self, Node};
use crate::linalg::{self, CMatrix, C64};
use crate::rng::{self, Stream};

/// Generator settings. Defaults follow the reference D-band setup (135 GHz carrier,
/// 125 MHz modulation, 4 + 4 antennas, 10 three-bit RIS elements, 3 slots).
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub f0: f64,
    pub fm: f64,
    pub gt_harmonics: usize,
    pub retained_harmonics: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub n_s: usize,
    pub n_states: usize,
    pub q: usize,
    pub reciprocal: bool,
    pub passivity_margin: f64,
    pub dispersion_scale: f64,
    pub delay_scale: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            f0: 135e9,
            fm: 125e6,
            gt_harmonics: 201,
            retained_harmonics: 11,
            n_t: 4,
            n_r: 4,
            n_s: 10,
            n_states: 8,
            q: 3,
            reciprocal: true,
            passivity_margin: 0.05,
            dispersion_scale: 1.0,
            delay_scale: 0.05,
            seed: 0,
        }
    }
}

const CONFIG_KEYS: [&str; 14] = [
    "f0_hz",
    "fm_hz",
    "gt_harmonics",
    "retained_harmonics",
    "n_t",
    "n_r",
    "n_s",
    "n_states",
    "q",
    "reciprocal",
    "passivity_margin",
    "dispersion_scale",
    "delay_scale",
    "seed",
];

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        for (name, n) in [
            ("gt_harmonics", self.gt_harmonics),
            ("retained_harmonics", self.retained_harmonics),
        ] {
            if n.is_multiple_of(2) {
                return bad(format!("{name} must be odd, got {n}"));
            }
        }
        if self.retained_harmonics > self.gt_harmonics {
            return bad(format!(
                "retained_harmonics ({}) exceeds gt_harmonics ({})",
                self.retained_harmonics, self.gt_harmonics
            ));
        }
        if self.n_t == 0 || self.n_r == 0 || self.n_s == 0 {
            return bad(format!(
                "n_t, n_r and n_s must be at least 1, got {}, {} and {}",
                self.n_t, self.n_r, self.n_s
            ));
        }
        if self.n_states < 2 {
            return bad(format!("n_states must be at least 2, got {}", self.n_states));
        }
        if self.q == 0 {
            return bad("q must be at least 1".into());
        }
        if !(self.passivity_margin >= 0.0 && self.passivity_margin < 1.0) {
            return bad(format!(
                "passivity_margin must lie in [0, 1), got {}",
                self.passivity_margin
            ));
        }
        if !(self.dispersion_scale >= 0.0) {
            return bad(format!(
                "dispersion_scale must be non-negative, got {}",
                self.dispersion_scale
            ));
        }
        if !(0.0..=1.0).contains(&self.delay_scale) {
            return bad(format!("delay_scale must lie in [0, 1], got {}", self.delay_scale));
        }
        self.gt_grid()?;
        Ok(())
    }

    pub fn gt_grid(&self) -> Result<HarmonicGrid> {
        HarmonicGrid::symmetric(self.f0, self.fm, self.gt_harmonics)
    }

    pub fn retained_grid(&self) -> Result<HarmonicGrid> {
        HarmonicGrid::symmetric(self.f0, self.fm, self.retained_harmonics)
    }

    pub fn partition(&self) -> Result<PortPartition> {
        PortPartition::contiguous(self.n_t, self.n_r, self.n_s)
    }

    pub fn to_json(&self) -> Value {
        json::object(vec![
            ("f0_hz", self.f0.into()),
            ("fm_hz", self.fm.into()),
            ("gt_harmonics", self.gt_harmonics.into()),
            ("retained_harmonics", self.retained_harmonics.into()),
            ("n_t", self.n_t.into()),
            ("n_r", self.n_r.into()),
            ("n_s", self.n_s.into()),
            ("n_states", self.n_states.into()),
            ("q", self.q.into()),
            ("reciprocal", self.reciprocal.into()),
            ("passivity_margin", self.passivity_margin.into()),
            ("dispersion_scale", self.dispersion_scale.into()),
            ("delay_scale", self.delay_scale.into()),
            ("seed", self.seed.into()),
        ])
    }

    /// Reads a config object; absent fields keep their default.
    pub fn from_json(node: &Node) -> Result<Self> {
        node.only_keys(&CONFIG_KEYS)?;
        let mut c = Self::default();
        macro_rules! field {
            ($key:literal, $slot:expr, $get:ident) => {
                if let Some(n) = node.opt($key)? {
                    $slot = n.$get()?;
                }
            };
        }
        field!("f0_hz", c.f0, f64);
        field!("fm_hz", c.fm, f64);
        field!("gt_harmonics", c.gt_harmonics, usize);
        field!("retained_harmonics", c.retained_harmonics, usize);
        field!("n_t", c.n_t, usize);
        field!("n_r", c.n_r, usize);
        field!("n_s", c.n_s, usize);
        field!("n_states", c.n_states, usize);
        field!("q", c.q, usize);
        field!("reciprocal", c.reciprocal, bool);
        field!("passivity_margin", c.passivity_margin, f64);
        field!("dispersion_scale", c.dispersion_scale, f64);
        field!("delay_scale", c.delay_scale, f64);
        field!("seed", c.seed, u64);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let v = json::read_file(path)?;
        Self::from_json(&Node::root(&v))
    }
}

/// Complete synthetic ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: StaticScatterModel,
    pub loads: LoadSet,
    pub delays: Vec<f64>,
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn random_matrix<R: Rng + ?Sized>(n: usize, symmetric: bool, rng: &mut R) -> CMatrix {
    let m = CMatrix::from_fn(n, n, |_, _| complex_normal(rng));
    if symmetric {
        (&m + m.transpose()) * C64::new(0.5, 0.0)
    } else {
        m
    }
}

/// Draws a scenario from `config` using `rng`.
pub fn generate_scenario<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Scenario> {
    config.validate()?;
    let grid = config.gt_grid()?;
    let partition = config.partition()?;
    let n = partition.n_ports();
    let sigma_max = 1.0 - config.passivity_margin;

    let base = random_matrix(n, config.reciprocal, rng);
    let base = &base * C64::new(sigma_max / linalg::spectral_norm(&base), 0.0);
    let drift = random_matrix(n, config.reciprocal, rng);
    let drift = &drift * C64::new(base.norm() / drift.norm(), 0.0);
    let ratio = config.fm / config.f0;
    let matrices = grid
        .harmonics()
        .iter()
        .map(|&h| {
            let x = h as f64 * ratio * config.dispersion_scale;
            let s = &base + &drift * C64::new(x, 0.0);
            let sigma = linalg::spectral_norm(&s);
            let s = if sigma > sigma_max {
                s * C64::new(sigma_max / sigma, 0.0)
            } else {
                s
            };
            if config.reciprocal {
                // exact symmetry, independent of rounding in the scaling above
                (&s + s.transpose()) * C64::new(0.5, 0.0)
            } else {
                s
            }
        })
        .collect();
    let model = StaticScatterModel::new(grid.clone(), partition, matrices, config.reciprocal)?;

    let p = config.n_states;
    let states: Vec<(f64, f64, f64, f64)> = (0..p)
        .map(|k| {
            let jitter: f64 = rng.random_range(-0.25..0.25);
            let phase = 2.0 * PI * (k as f64 + jitter) / p as f64;
            let mag: f64 = rng.random_range(0.7..=0.95);
            let phase_rate: f64 = rng.random_range(0.5..1.5);
            let mag_rate: f64 = StandardNormal.sample(rng);
            (phase, mag, phase_rate, mag_rate)
        })
        .collect();
    let rho = grid
        .harmonics()
        .iter()
        .map(|&h| {
            let x = h as f64 * ratio * config.dispersion_scale;
            states
                .iter()
                .map(|&(phase, mag, phase_rate, mag_rate)| {
                    let m = (mag + 0.5 * x * mag_rate).clamp(0.7, 0.95);
                    C64::from_polar(m, phase - 2.0 * PI * x * phase_rate)
                })
                .collect()
        })
        .collect();
    let loads = LoadSet::new(grid.clone(), rho)?;

    let period = grid.period();
    let delays = (0..config.n_s)
        .map(|_| {
            if config.delay_scale == 0.0 {
                0.0
            } else {
                let t = rng.random::<f64>() * config.delay_scale * period;
                t.min(period * (1.0 - f64::EPSILON))
            }
        })
        .collect();
    Ok(Scenario {
        config: config.clone(),
        model,
        loads,
        delays,
    })
}

impl Scenario {
    /// Scenario drawn from the config's own seed.
    pub fn generate(config: &ScenarioConfig) -> Result<Self> {
        let mut rng = rng::stream(config.seed, Stream::Scenario, 0);
        generate_scenario(config, &mut rng)
    }

    pub fn gt_grid(&self) -> &HarmonicGrid {
        self.model.grid()
    }

    pub fn retained_grid(&self) -> Result<HarmonicGrid> {
        self.config.retained_grid()
    }

    pub fn partition(&self) -> &PortPartition {
        self.model.partition()
    }

    /// `pattern` with this scenario's control delays attached.
    pub fn delayed(&self, pattern: &ModulationPattern) -> Result<ModulationPattern> {
        pattern.clone().with_delays(&self.delays)
    }

    /// Ground-truth channel of a (delay-free) pattern evaluated on the full comb and
    /// restricted to `retained` harmonics.
    pub fn channel(&self, pattern: &ModulationPattern, retained: &HarmonicGrid) -> Result<FloquetChannel> {
        let pos = self.gt_grid().positions_of(retained)?;
        let p = self.partition();
        let cols: Vec<(usize, usize)> = pos.iter().flat_map(|&n| (0..p.n_t()).map(move |t| (n, t))).collect();
        let m = self.response(pattern, &pos, &cols)?;
        FloquetChannel::new(retained.clone(), p.n_r(), p.n_t(), m)
    }

    /// Ground-truth response columns `(ground-truth harmonic position, tx port)` at the
    /// output harmonic positions `rows`, stacked harmonic-major.
    pub(crate) fn response(
        &self,
        pattern: &ModulationPattern,
        rows: &[usize],
        cols: &[(usize, usize)],
    ) -> Result<CMatrix> {
        let grid = self.gt_grid();
        let phi = assemble_phi(&self.delayed(pattern)?, &self.loads, grid)?;
        let blocks = self.model.all_blocks(true);
        let full = floquet::floquet_response(&blocks, &phi, cols)?;
        let idx = floquet::stacked_indices(rows, self.partition().n_r());
        Ok(CMatrix::from_fn(idx.len(), cols.len(), |r, c| full[(idx[r], c)]))
    }

    /// Ground-truth static model and loads truncated to `retained`.
    pub fn truncated(&self, retained: &HarmonicGrid) -> Result<(StaticScatterModel, LoadSet)> {
        Ok((self.model.truncate(retained)?, self.loads.truncate(retained)?))
    }

    pub fn to_json(&self) -> Value {
        json::object(vec![
            ("config", self.config.to_json()),
            (
                "static_model",
                Value::Array(self.model.matrices().iter().map(json::cmatrix).collect()),
            ),
            (
                "loads",
                Value::Array(self.loads.rows().iter().map(|r| json::cvec(r)).collect()),
            ),
            ("delays_s", Value::from(self.delays.clone())),
        ])
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let root = Node::root(v);
        root.only_keys(&["config", "static_model", "loads", "delays_s"])?;
        let config = ScenarioConfig::from_json(&root.key("config")?)?;
        let grid = config.gt_grid()?;
        let partition = config.partition()?;
        let n = partition.n_ports();
        let sm = root.key("static_model")?;
        let mats = sm.items()?;
        if mats.len() != grid.len() {
            return Err(sm.error(format!(
                "expected {} per-harmonic matrices (config.gt_harmonics), found {}",
                grid.len(),
                mats.len()
            )));
        }
        let matrices = mats.iter().map(|m| m.cmatrix(n, n)).collect::<Result<Vec<_>>>()?;
        let ln = root.key("loads")?;
        let rows = ln.items()?;
        if rows.len() != grid.len() {
            return Err(ln.error(format!(
                "expected {} per-harmonic load rows (config.gt_harmonics), found {}",
                grid.len(),
                rows.len()
            )));
        }
        let mut rho = Vec::with_capacity(rows.len());
        for r in &rows {
            let v = r.cvec()?;
            if v.len() != config.n_states {
                return Err(r.error(format!(
                    "expected {} load states (config.n_states), found {}",
                    config.n_states,
                    v.len()
                )));
            }
            rho.push(v);
        }
        let dn = root.key("delays_s")?;
        let delays = dn.f64_vec()?;
        if delays.len() != config.n_s {
            return Err(Error::Validation(format!(
                "delays_s has {} entries but static_model has N_S = {} RIS ports (config.n_s)",
                delays.len(),
                config.n_s
            )));
        }
        let period = grid.period();
        if let Some((i, t)) = delays.iter().enumerate().find(|(_, t)| !(**t >= 0.0 && **t < period)) {
            return Err(Error::parse(
                format!("{}/{i}", dn.pointer()),
                format!("delay {t} s outside [0, {period})"),
            ));
        }
        let model = StaticScatterModel::new(grid.clone(), partition, matrices, config.reciprocal)
            .map_err(|e| Error::Validation(format!("static_model: {e}")))?;
        let loads = LoadSet::new(grid, rho).map_err(|e| Error::Validation(format!("loads: {e}")))?;
        Ok(Self {
            config,
            model,
            loads,
            delays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        json::write_file(path, &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&json::read_file(path)?)
    }
}
