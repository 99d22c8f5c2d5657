//! Measurement operators, noise injection and simulated campaigns.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::floquet::{FloquetChannel, ModulationPattern};
use crate::grid::HarmonicGrid;
use crate::json::{self, Node};
use crate::linalg::{CMatrix, C64};
use crate::rng::{self, Stream};
use crate::scenario::Scenario;

/// Patterns in the pilot ensemble that fixes the SNR reference power.
pub const PILOT_PATTERNS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MeasurementMode {
    /// Complex fundamental-to-fundamental block.
    M1,
    /// Magnitudes of the full multi-harmonic channel.
    M2,
    /// Full complex multi-harmonic channel.
    M3,
}

impl MeasurementMode {
    pub const ALL: [MeasurementMode; 3] = [Self::M1, Self::M2, Self::M3];

    pub fn name(self) -> &'static str {
        match self {
            Self::M1 => "m1",
            Self::M2 => "m2",
            Self::M3 => "m3",
        }
    }

    /// Real scalars carried by one measurement.
    pub fn real_scalars(self, n_harmonics: usize, n_r: usize, n_t: usize) -> usize {
        match self {
            Self::M1 => 2 * n_r * n_t,
            Self::M2 => n_harmonics * n_harmonics * n_r * n_t,
            Self::M3 => 2 * n_harmonics * n_harmonics * n_r * n_t,
        }
    }
}

impl fmt::Display for MeasurementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MeasurementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Self::M1),
            "m2" => Ok(Self::M2),
            "m3" => Ok(Self::M3),
            _ => Err(Error::Validation(format!(
                "unknown measurement mode `{s}` (m1, m2, m3)"
            ))),
        }
    }
}

/// A projected channel.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Complex(CMatrix),
    Magnitude(DMatrix<f64>),
}

impl Observation {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Self::Complex(m) => m.shape(),
            Self::Magnitude(m) => m.shape(),
        }
    }

    /// Entrywise l1 norm.
    pub fn l1(&self) -> f64 {
        match self {
            Self::Complex(m) => m.iter().map(|z| z.norm()).sum(),
            Self::Magnitude(m) => m.iter().map(|x| x.abs()).sum(),
        }
    }

    /// Entries as real scalars (re/im interleaved for complex data).
    pub fn real_scalars(&self) -> Vec<f64> {
        match self {
            Self::Complex(m) => m.iter().flat_map(|z| [z.re, z.im]).collect(),
            Self::Magnitude(m) => m.iter().copied().collect(),
        }
    }

    pub fn as_complex(&self) -> Option<&CMatrix> {
        match self {
            Self::Complex(m) => Some(m),
            Self::Magnitude(_) => None,
        }
    }

    pub fn as_magnitude(&self) -> Option<&DMatrix<f64>> {
        match self {
            Self::Magnitude(m) => Some(m),
            Self::Complex(_) => None,
        }
    }
}

/// Applies the measurement operator of `mode`.
pub fn project(mode: MeasurementMode, channel: &FloquetChannel) -> Result<Observation> {
    let f = channel
        .grid()
        .index_of(0)
        .ok_or_else(|| Error::Validation("channel grid lacks the fundamental harmonic".into()))?;
    Ok(match mode {
        MeasurementMode::M1 => Observation::Complex(channel.block_at(f, f)),
        MeasurementMode::M2 => Observation::Magnitude(channel.matrix().map(|z| z.norm())),
        MeasurementMode::M3 => Observation::Complex(channel.matrix().clone()),
    })
}

/// Per-entry noise variance for `snr_db` relative to `reference_power`.
pub fn noise_variance(snr_db: f64, reference_power: f64) -> Result<f64> {
    if !(reference_power > 0.0 && reference_power.is_finite()) {
        return Err(Error::Validation(format!(
            "reference power must be positive, got {reference_power}"
        )));
    }
    if snr_db.is_nan() {
        return Err(Error::Validation("SNR is NaN".into()));
    }
    Ok(reference_power * 10f64.powf(-snr_db / 10.0))
}

/// Adds i.i.d. circular complex Gaussian noise of variance `variance` to every entry.
pub fn add_noise_matrix<R: Rng + ?Sized>(m: &mut CMatrix, variance: f64, rng: &mut R) {
    if variance == 0.0 {
        return;
    }
    let s = (variance / 2.0).sqrt();
    for z in m.iter_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *z += C64::new(s * re, s * im);
    }
}

/// Noisy copy of `channel` at `snr_db` (an infinite SNR leaves it unchanged).
pub fn add_noise<R: Rng + ?Sized>(
    channel: &FloquetChannel,
    snr_db: f64,
    reference_power: f64,
    rng: &mut R,
) -> Result<FloquetChannel> {
    let variance = noise_variance(snr_db, reference_power)?;
    let mut m = channel.matrix().clone();
    add_noise_matrix(&mut m, variance, rng);
    FloquetChannel::new(channel.grid().clone(), channel.n_r(), channel.n_t(), m)
}

/// `k` patterns with i.i.d. uniform states (no delays).
pub fn random_patterns<R: Rng + ?Sized>(
    k: usize,
    n_s: usize,
    q: usize,
    p: usize,
    rng: &mut R,
) -> Result<Vec<ModulationPattern>> {
    if n_s == 0 || q == 0 || p == 0 {
        return Err(Error::Validation("pattern sizes must be at least 1".into()));
    }
    Ok((0..k)
        .map(|_| {
            let states = (0..n_s * q).map(|_| rng.random_range(0..p)).collect();
            ModulationPattern::from_flat(n_s, q, states)
        })
        .collect())
}

fn record_pattern(seed: u64, index: usize, n_s: usize, q: usize, p: usize) -> ModulationPattern {
    let mut r = rng::stream(seed, Stream::Patterns, index as u64);
    let states = (0..n_s * q).map(|_| r.random_range(0..p)).collect();
    ModulationPattern::from_flat(n_s, q, states)
}

/// Mean per-entry power of the noiseless retained channel over a pilot ensemble.
pub fn reference_power(scenario: &Scenario, retained: &HarmonicGrid, q: usize, seed: u64) -> Result<f64> {
    let c = &scenario.config;
    let mut rng = rng::stream(seed, Stream::Pilot, q as u64);
    let patterns = random_patterns(PILOT_PATTERNS, c.n_s, q, c.n_states, &mut rng)?;
    let powers = patterns
        .par_iter()
        .map(|p| {
            let h = scenario.channel(p, retained)?;
            let m = h.matrix();
            Ok(m.iter().map(|z| z.norm_sqr()).sum::<f64>() / m.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(powers.iter().sum::<f64>() / powers.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub pattern: ModulationPattern,
    pub observation: Observation,
}

/// Measurements of `K` random patterns on the retained grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub mode: MeasurementMode,
    /// `None` for noiseless data.
    pub snr_db: Option<f64>,
    pub reference_power: Option<f64>,
    pub grid: HarmonicGrid,
    pub n_r: usize,
    pub n_t: usize,
    pub q: usize,
    pub seed: u64,
    pub records: Vec<Record>,
}

/// Simulates a campaign of `k` patterns with `q` slots against the ground truth.
///
/// The channel is computed on the full ground-truth comb and truncated to `retained`;
/// record `k` draws its pattern and noise from its own streams.
pub fn simulate_campaign(
    scenario: &Scenario,
    retained: &HarmonicGrid,
    k: usize,
    q: usize,
    mode: MeasurementMode,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Campaign> {
    if k == 0 || q == 0 {
        return Err(Error::Validation("campaign needs K >= 1 and Q >= 1".into()));
    }
    let c = &scenario.config;
    let gt = scenario.gt_grid();
    let pos = gt.positions_of(retained)?;
    let fund = retained
        .index_of(0)
        .ok_or_else(|| Error::Validation("retained grid lacks the fundamental harmonic".into()))?;
    let (p_ref, variance) = match snr_db {
        Some(s) if s.is_finite() => {
            let p = reference_power(scenario, retained, q, seed)?;
            (Some(p), noise_variance(s, p)?)
        }
        Some(s) if s.is_nan() || s == f64::NEG_INFINITY => {
            return Err(Error::Validation(format!("invalid SNR {s} dB")))
        }
        _ => (None, 0.0),
    };
    // M1 only sees the fundamental block, so only those columns are solved for
    let (rows, cols): (Vec<usize>, Vec<usize>) = match mode {
        MeasurementMode::M1 => (vec![pos[fund]], vec![pos[fund]]),
        _ => (pos.clone(), pos.clone()),
    };
    let columns: Vec<(usize, usize)> = cols.iter().flat_map(|&n| (0..c.n_t).map(move |t| (n, t))).collect();
    let records = (0..k)
        .into_par_iter()
        .map(|i| {
            let pattern = record_pattern(seed, i, c.n_s, q, c.n_states);
            let mut h = scenario.response(&pattern, &rows, &columns)?;
            add_noise_matrix(&mut h, variance, &mut rng::stream(seed, Stream::Noise, i as u64));
            let observation = match mode {
                MeasurementMode::M2 => Observation::Magnitude(h.map(|z| z.norm())),
                _ => Observation::Complex(h),
            };
            Ok(Record { pattern, observation })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Campaign {
        mode,
        snr_db: snr_db.filter(|s| s.is_finite()),
        reference_power: p_ref,
        grid: retained.clone(),
        n_r: c.n_r,
        n_t: c.n_t,
        q,
        seed,
        records,
    })
}

impl Campaign {
    pub fn k(&self) -> usize {
        self.records.len()
    }

    /// Shape every observation must have.
    pub fn observation_shape(&self) -> (usize, usize) {
        match self.mode {
            MeasurementMode::M1 => (self.n_r, self.n_t),
            _ => (self.grid.len() * self.n_r, self.grid.len() * self.n_t),
        }
    }

    pub fn to_json(&self) -> Value {
        let records = self
            .records
            .iter()
            .map(|r| {
                let obs = match &r.observation {
                    Observation::Complex(m) => json::cmatrix(m),
                    Observation::Magnitude(m) => json::rmatrix(m),
                };
                json::object(vec![("states", Value::from(r.pattern.rows())), ("observation", obs)])
            })
            .collect();
        json::object(vec![
            ("mode", Value::from(self.mode.name())),
            ("snr_db", self.snr_db.map_or(Value::Null, Value::from)),
            ("reference_power", self.reference_power.map_or(Value::Null, Value::from)),
            ("grid", json::grid(&self.grid)),
            ("n_r", self.n_r.into()),
            ("n_t", self.n_t.into()),
            ("q", self.q.into()),
            ("seed", self.seed.into()),
            ("records", Value::Array(records)),
        ])
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let root = Node::root(v);
        root.only_keys(&[
            "mode",
            "snr_db",
            "reference_power",
            "grid",
            "n_r",
            "n_t",
            "q",
            "seed",
            "records",
        ])?;
        let mode_node = root.key("mode")?;
        let mode: MeasurementMode = mode_node
            .str()?
            .parse()
            .map_err(|e: Error| mode_node.error(e.to_string()))?;
        let snr_db = root.opt("snr_db")?.map(|n| n.f64()).transpose()?;
        let reference_power = root.opt("reference_power")?.map(|n| n.f64()).transpose()?;
        let grid = root.key("grid")?.grid()?;
        let n_r = root.key("n_r")?.usize()?;
        let n_t = root.key("n_t")?.usize()?;
        let q = root.key("q")?.usize()?;
        let seed = root.key("seed")?.u64()?;
        let mut c = Campaign {
            mode,
            snr_db,
            reference_power,
            grid,
            n_r,
            n_t,
            q,
            seed,
            records: Vec::new(),
        };
        let (rows, cols) = c.observation_shape();
        let recs = root.key("records")?;
        for r in recs.items()? {
            r.only_keys(&["states", "observation"])?;
            let sn = r.key("states")?;
            let states = sn
                .items()?
                .iter()
                .map(|row| row.items()?.iter().map(Node::usize).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let pattern = ModulationPattern::undelayed(&states).map_err(|e| sn.error(e.to_string()))?;
            if pattern.slots() != q {
                return Err(sn.error(format!("pattern has {} slots, campaign q is {q}", pattern.slots())));
            }
            let on = r.key("observation")?;
            let observation = match mode {
                MeasurementMode::M2 => Observation::Magnitude(on.rmatrix(rows, cols)?),
                _ => Observation::Complex(on.cmatrix(rows, cols)?),
            };
            c.records.push(Record { pattern, observation });
        }
        if c.records.is_empty() {
            return Err(recs.error("campaign holds no records"));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        json::write_file(path, &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&json::read_file(path)?)
    }
}

/// Static (Q = 1) measurements of the complex channel at a single harmonic.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticCampaign {
    pub harmonic: i32,
    pub snr_db: Option<f64>,
    /// Per-element load states of each configuration.
    pub configs: Vec<Vec<usize>>,
    pub observations: Vec<CMatrix>,
}

/// One static campaign per harmonic of `retained`, `k` configurations each.
pub fn simulate_static_campaigns(
    scenario: &Scenario,
    retained: &HarmonicGrid,
    k: usize,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Vec<StaticCampaign>> {
    if k == 0 {
        return Err(Error::Validation("static campaign needs K >= 1".into()));
    }
    let c = &scenario.config;
    let gt = scenario.gt_grid();
    retained
        .harmonics()
        .par_iter()
        .enumerate()
        .map(|(hi, &h)| {
            let n = gt.require_index(h)?;
            let blocks = scenario.model.blocks(n, true);
            let rho = scenario.loads.at(n);
            let channel = |states: &[usize]| {
                let r: Vec<C64> = states.iter().map(|&s| rho[s]).collect();
                blocks.static_channel(&r)
            };
            let draw = |purpose: Stream, count: usize| -> Vec<Vec<usize>> {
                let mut r = rng::stream(seed, purpose, hi as u64);
                (0..count)
                    .map(|_| (0..c.n_s).map(|_| r.random_range(0..c.n_states)).collect())
                    .collect()
            };
            let variance = match snr_db.filter(|s| s.is_finite()) {
                Some(s) => {
                    let pilot = draw(Stream::Pilot, PILOT_PATTERNS);
                    let mut p = 0.0;
                    for cfg in &pilot {
                        let m = channel(cfg)?;
                        p += m.iter().map(|z| z.norm_sqr()).sum::<f64>() / m.len() as f64;
                    }
                    noise_variance(s, p / pilot.len() as f64)?
                }
                None => 0.0,
            };
            let configs = draw(Stream::Step1, k);
            let mut noise = rng::stream(seed, Stream::Noise, (1 << 32) + hi as u64);
            let observations = configs
                .iter()
                .map(|cfg| {
                    let mut m = channel(cfg)?;
                    add_noise_matrix(&mut m, variance, &mut noise);
                    Ok(m)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StaticCampaign {
                harmonic: h,
                snr_db: snr_db.filter(|s| s.is_finite()),
                configs,
                observations,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Scenario {
        Scenario::generate(&ScenarioConfig {
            gt_harmonics: 7,
            retained_harmonics: 3,
            n_t: 2,
            n_r: 2,
            n_s: 3,
            n_states: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn projections() {
        let s = small();
        let g = s.retained_grid().unwrap();
        let p = random_patterns(1, 3, 3, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let h = s.channel(&p[0], &g).unwrap();
        let m3 = project(MeasurementMode::M3, &h).unwrap();
        let m2 = project(MeasurementMode::M2, &h).unwrap();
        let m1 = project(MeasurementMode::M1, &h).unwrap();
        assert_eq!(m3.as_complex().unwrap().map(|z| z.norm()), *m2.as_magnitude().unwrap());
        assert!(m2.as_magnitude().unwrap().iter().all(|&x| x >= 0.0));
        assert_eq!(m1.shape(), (2, 2));
        assert_eq!(*m1.as_complex().unwrap(), h.block(0, 0).unwrap());
    }

    #[test]
    fn projection_needs_the_fundamental() {
        let g = HarmonicGrid::new(135e9, 125e6, vec![-1, 1]);
        if let Ok(g) = g {
            let h = FloquetChannel::new(g, 1, 1, CMatrix::zeros(2, 2)).unwrap();
            assert!(project(MeasurementMode::M1, &h).is_err());
        }
    }

    #[test]
    fn information_counts() {
        let (nh, nr, nt) = (11, 4, 4);
        let m1 = MeasurementMode::M1.real_scalars(nh, nr, nt);
        let m2 = MeasurementMode::M2.real_scalars(nh, nr, nt);
        let m3 = MeasurementMode::M3.real_scalars(nh, nr, nt);
        assert_eq!(m3, 2 * m2);
        assert_eq!(m3, 121 * m1);
    }

    #[test]
    fn noise_statistics() {
        let draws = 100_000;
        let mut m = CMatrix::zeros(draws, 1);
        let var = 0.37;
        add_noise_matrix(&mut m, var, &mut ChaCha8Rng::seed_from_u64(11));
        let n = draws as f64;
        let total = m.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
        let re = m.iter().map(|z| z.re * z.re).sum::<f64>() / n;
        let im = m.iter().map(|z| z.im * z.im).sum::<f64>() / n;
        assert!((total / var - 1.0).abs() < 0.02);
        assert!((re / (var / 2.0) - 1.0).abs() < 0.02);
        assert!((im / (var / 2.0) - 1.0).abs() < 0.02);
    }

    #[test]
    fn infinite_snr_leaves_channel_unchanged() {
        let g = HarmonicGrid::symmetric(135e9, 125e6, 1).unwrap();
        let h = FloquetChannel::new(g, 1, 1, CMatrix::from_element(1, 1, C64::new(0.3, 0.1))).unwrap();
        let out = add_noise(&h, f64::INFINITY, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, h);
        assert!(add_noise(&h, 10.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn pattern_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ones = random_patterns(5, 3, 2, 1, &mut rng).unwrap();
        assert!(ones.iter().all(|p| p.rows().iter().flatten().all(|&s| s == 0)));

        // chi-square test of uniformity over 10^4 draws
        let p = 8;
        let pats = random_patterns(10_000, 1, 1, p, &mut rng).unwrap();
        let mut counts = vec![0f64; p];
        for x in &pats {
            counts[x.state(0, 0)] += 1.0;
        }
        let e = 10_000.0 / p as f64;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        // 7 degrees of freedom: mean 7, sd sqrt(14); 3 sd above the mean
        assert!(chi2 < 7.0 + 3.0 * 14f64.sqrt(), "chi2 {chi2}");

        let a = random_patterns(4, 3, 3, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = random_patterns(4, 3, 3, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn static_campaign_is_block_diagonal_and_deterministic() {
        let s = small();
        let g = s.retained_grid().unwrap();
        let c = simulate_campaign(&s, &g, 4, 1, MeasurementMode::M3, None, 9).unwrap();
        for r in &c.records {
            let h = FloquetChannel::new(g.clone(), 2, 2, r.observation.as_complex().unwrap().clone()).unwrap();
            assert!(h.is_block_diagonal());
        }
        let again = simulate_campaign(&s, &g, 4, 1, MeasurementMode::M3, None, 9).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn m1_records_match_the_full_channel() {
        let s = small();
        let g = s.retained_grid().unwrap();
        let c1 = simulate_campaign(&s, &g, 3, 3, MeasurementMode::M1, None, 4).unwrap();
        let c3 = simulate_campaign(&s, &g, 3, 3, MeasurementMode::M3, None, 4).unwrap();
        for (a, b) in c1.records.iter().zip(&c3.records) {
            assert_eq!(a.pattern, b.pattern);
            let full = FloquetChannel::new(g.clone(), 2, 2, b.observation.as_complex().unwrap().clone()).unwrap();
            let blk = full.block(0, 0).unwrap();
            let d = (a.observation.as_complex().unwrap() - &blk).norm() / blk.norm();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn noisy_campaign_json_round_trip() {
        let s = small();
        let g = s.retained_grid().unwrap();
        for mode in MeasurementMode::ALL {
            let c = simulate_campaign(&s, &g, 3, 3, mode, Some(20.0), 1).unwrap();
            assert!(c.reference_power.unwrap() > 0.0);
            let text = json::to_string(&c.to_json());
            let back = Campaign::from_json(&json::parse_str(&text).unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn static_campaigns_match_the_channel_block() {
        let s = small();
        let g = s.retained_grid().unwrap();
        let cs = simulate_static_campaigns(&s, &g, 3, None, 2).unwrap();
        assert_eq!(cs.len(), 3);
        for c in &cs {
            for (cfg, obs) in c.configs.iter().zip(&c.observations) {
                let p = ModulationPattern::static_config(cfg).unwrap();
                let h = s.channel(&p, &g).unwrap().block(c.harmonic, c.harmonic).unwrap();
                assert!((obs - &h).norm() / h.norm() < 1e-12);
            }
        }
    }
}
