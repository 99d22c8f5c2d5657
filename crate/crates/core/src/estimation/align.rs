//! Cross-harmonic gauge alignment: loss, exact gradient and the Adam driver.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde_json::Value;

use super::predict::{backward, forward, l1_misfit, observed};
use crate::error::{Error, Result};
use crate::floquet::WeightTable;
use crate::gauge::{
    check_admissible, compose_backward, compose_forward, AdmissibilityReport, ComposeTape, GaugeParams, GaugeVariant,
    ProxyAdjoint, ProxySet, MU_MAX,
};
use crate::json::{self, Node};
use crate::measurement::Campaign;
use crate::rng::{self, Stream};

/// Records per parallel work unit; partial sums are reduced in record order.
const CHUNK: usize = 4;

/// Full-batch Adam settings. Defaults: 250 iterations, step size decaying
/// geometrically from 1e-3 to 1e-5, standard moments, init spread 2e-2.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub bias_correction: bool,
    pub weight_decay: f64,
    pub init_spread: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 250,
            lr_start: 1e-3,
            lr_end: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            bias_correction: true,
            weight_decay: 0.0,
            init_spread: 2e-2,
            seed: 0,
        }
    }
}

const OPTIMIZER_KEYS: [&str; 10] = [
    "iterations",
    "lr_start",
    "lr_end",
    "beta1",
    "beta2",
    "eps",
    "bias_correction",
    "weight_decay",
    "init_spread",
    "seed",
];

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return bad("step sizes must be positive and non-increasing (lr_end <= lr_start)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moments must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.init_spread >= 0.0) {
            return bad("eps must be positive; weight_decay and init_spread non-negative");
        }
        Ok(())
    }

    /// Step size of iteration `t`: `lr_start * (lr_end / lr_start)^(t / T)`.
    pub fn step_size(&self, t: usize) -> f64 {
        self.lr_start * (self.lr_end / self.lr_start).powf(t as f64 / self.iterations as f64)
    }

    pub fn to_json(&self) -> Value {
        json::object(vec![
            ("iterations", self.iterations.into()),
            ("lr_start", self.lr_start.into()),
            ("lr_end", self.lr_end.into()),
            ("beta1", self.beta1.into()),
            ("beta2", self.beta2.into()),
            ("eps", self.eps.into()),
            ("bias_correction", self.bias_correction.into()),
            ("weight_decay", self.weight_decay.into()),
            ("init_spread", self.init_spread.into()),
            ("seed", self.seed.into()),
        ])
    }

    /// Absent fields keep their default.
    pub fn from_json(node: &Node) -> Result<Self> {
        node.only_keys(&OPTIMIZER_KEYS)?;
        let mut c = Self::default();
        if let Some(n) = node.opt("iterations")? {
            c.iterations = n.usize()?;
        }
        for (key, slot) in [
            ("lr_start", &mut c.lr_start),
            ("lr_end", &mut c.lr_end),
            ("beta1", &mut c.beta1),
            ("beta2", &mut c.beta2),
            ("eps", &mut c.eps),
            ("weight_decay", &mut c.weight_decay),
            ("init_spread", &mut c.init_spread),
        ] {
            if let Some(n) = node.opt(key)? {
                *slot = n.f64()?;
            }
        }
        if let Some(n) = node.opt("bias_correction")? {
            c.bias_correction = n.bool()?;
        }
        if let Some(n) = node.opt("seed")? {
            c.seed = n.u64()?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Adam state over a real parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64, c: &OptimizerConfig) {
        self.t += 1;
        let (c1, c2) = if c.bias_correction {
            (1.0 - c.beta1.powi(self.t), 1.0 - c.beta2.powi(self.t))
        } else {
            (1.0, 1.0)
        };
        for (((xi, &gi), mi), vi) in x.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = gi + c.weight_decay * *xi;
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
            *xi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + c.eps);
        }
    }
}

fn add_assign(acc: &mut [ProxyAdjoint], other: &[ProxyAdjoint]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.hd += &b.hd;
        a.a += &b.a;
        a.gamma += &b.gamma;
        a.b += &b.b;
        for (x, y) in a.rho.iter_mut().zip(&b.rho) {
            *x += y;
        }
    }
}

/// Campaign data prepared for repeated loss/gradient evaluation.
pub(crate) struct Problem<'a> {
    proxies: &'a ProxySet,
    campaign: &'a Campaign,
    weights: WeightTable,
    outs: Vec<usize>,
    cols: Vec<(usize, usize)>,
    norms: Vec<f64>,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(proxies: &'a ProxySet, campaign: &'a Campaign) -> Result<Self> {
        if proxies.grid() != &campaign.grid {
            return Err(Error::Validation(
                "proxies and campaign are defined on different harmonic grids".into(),
            ));
        }
        if proxies.n_r() != campaign.n_r || proxies.n_t() != campaign.n_t {
            return Err(Error::dim(format!(
                "proxies have {}x{} antennas, campaign {}x{}",
                proxies.n_r(),
                proxies.n_t(),
                campaign.n_r,
                campaign.n_t
            )));
        }
        if campaign.records.is_empty() {
            return Err(Error::Validation("campaign holds no records".into()));
        }
        let shape = campaign.observation_shape();
        let mut norms = Vec::with_capacity(campaign.k());
        for (k, r) in campaign.records.iter().enumerate() {
            r.pattern.validate(proxies.n_states(), proxies.n_s(), f64::INFINITY)?;
            if r.pattern.slots() != campaign.q {
                return Err(Error::dim(format!("record {k} has {} slots", r.pattern.slots())));
            }
            if r.observation.shape() != shape {
                return Err(Error::dim(format!(
                    "record {k} has observation shape {:?}",
                    r.observation.shape()
                )));
            }
            let n = r.observation.l1();
            if !(n > 0.0) {
                return Err(Error::ZeroNorm(k));
            }
            norms.push(n);
        }
        let (outs, cols) = observed(campaign.mode, proxies.grid(), proxies.n_t())?;
        Ok(Self {
            proxies,
            campaign,
            weights: WeightTable::new(proxies.grid(), campaign.q),
            outs,
            cols,
            norms,
        })
    }

    fn check(&self, gauges: &[GaugeParams]) -> Result<()> {
        if gauges.len() != self.proxies.grid().len() {
            return Err(Error::dim(format!(
                "{} gauges for {} harmonics",
                gauges.len(),
                self.proxies.grid().len()
            )));
        }
        for (p, g) in self.proxies.params().iter().zip(gauges) {
            let report = check_admissible(p, g);
            if !report.is_admissible() {
                return Err(Error::InadmissibleGauge(report));
            }
        }
        Ok(())
    }

    /// Loss and, if requested, the gradient over all real gauge coordinates
    /// (harmonic-major, [`GaugeParams::to_real`] layout).
    pub(crate) fn evaluate(&self, gauges: &[GaugeParams], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        self.check(gauges)?;
        let (gauged, tapes): (Vec<_>, Vec<ComposeTape>) = self
            .proxies
            .params()
            .iter()
            .zip(gauges)
            .map(|(p, g)| compose_forward(p, g))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let grid = self.proxies.grid();
        let k = self.campaign.k() as f64;
        let records: Vec<(usize, &crate::measurement::Record)> = self.campaign.records.iter().enumerate().collect();
        let partials = records
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut loss = 0.0;
                let mut acc: Option<Vec<ProxyAdjoint>> =
                    want_grad.then(|| gauged.iter().map(ProxyAdjoint::zeros).collect());
                for &(i, r) in chunk {
                    let f = forward(&gauged, grid, &self.weights, &r.pattern, &self.outs, &self.cols)?;
                    let scale = 1.0 / (self.norms[i] * k);
                    let (l, h_adj) = l1_misfit(self.campaign.mode, &f.h, &r.observation, scale, want_grad)?;
                    loss += l * scale;
                    if let (Some(acc), Some(h_adj)) = (acc.as_mut(), h_adj) {
                        backward(
                            &gauged,
                            grid,
                            &self.weights,
                            &r.pattern,
                            &self.outs,
                            &self.cols,
                            &f,
                            &h_adj,
                            acc,
                        );
                    }
                }
                Ok((loss, acc))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut loss = 0.0;
        let mut total: Option<Vec<ProxyAdjoint>> = None;
        for (l, acc) in partials {
            loss += l;
            if let Some(acc) = acc {
                match total.as_mut() {
                    Some(t) => add_assign(t, &acc),
                    None => total = Some(acc),
                }
            }
        }
        let grad = total.map(|adj| {
            let mut g = Vec::with_capacity(gauges.len() * GaugeParams::real_dim(self.proxies.n_s()));
            for (tape, a) in tapes.iter().zip(&adj) {
                compose_backward(tape, a).to_real(&mut g);
            }
            g
        });
        Ok((loss, grad))
    }
}

/// Mean normalized l1 misfit between gauged-proxy predictions and the campaign.
pub fn alignment_loss(proxies: &ProxySet, gauges: &[GaugeParams], campaign: &Campaign) -> Result<f64> {
    Ok(Problem::new(proxies, campaign)?.evaluate(gauges, false)?.0)
}

/// Gradient of [`alignment_loss`] over the real and imaginary parts of every gauge
/// coordinate, harmonic-major in the [`GaugeParams::to_real`] layout.
pub fn alignment_gradient(proxies: &ProxySet, gauges: &[GaugeParams], campaign: &Campaign) -> Result<Vec<f64>> {
    let (_, g) = Problem::new(proxies, campaign)?.evaluate(gauges, true)?;
    Ok(g.expect("gradient requested"))
}

/// Draws from `N(0, sigma^2)` conditioned on `|x| <= 2 sigma` (by resampling).
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    loop {
        let x: f64 = n.sample(rng);
        if x.abs() <= 2.0 * sigma {
            return x;
        }
    }
}

/// Initial gauges: `d`, `gamma` near 1 and the third coordinate near 0.
pub fn initial_gauges(
    n_harmonics: usize,
    n_s: usize,
    variant: GaugeVariant,
    config: &OptimizerConfig,
) -> Vec<GaugeParams> {
    let mut r = rng::stream(config.seed, Stream::Init, 0);
    let s = config.init_spread;
    (0..n_harmonics)
        .map(|_| {
            let mut x = Vec::with_capacity(GaugeParams::real_dim(n_s));
            for k in 0..n_s + 2 {
                let center = if k < n_s + 1 { 1.0 } else { 0.0 };
                x.push(center + truncated_normal(&mut r, s));
                x.push(truncated_normal(&mut r, s));
            }
            GaugeParams::from_real(&x, variant)
        })
        .collect()
}

fn to_real(gauges: &[GaugeParams]) -> Vec<f64> {
    let mut x = Vec::new();
    for g in gauges {
        g.to_real(&mut x);
    }
    x
}

fn from_real(x: &[f64], n_s: usize, variant: GaugeVariant) -> Vec<GaugeParams> {
    x.chunks(GaugeParams::real_dim(n_s))
        .map(|c| GaugeParams::from_real(c, variant))
        .collect()
}

/// Outcome of [`align`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub gauges: Vec<GaugeParams>,
    pub aligned: ProxySet,
    /// Loss before the first step and after every step.
    pub loss_trace: Vec<f64>,
    pub admissibility: Vec<AdmissibilityReport>,
    pub config: OptimizerConfig,
    /// Reason the run stopped early; the gauges are then the last admissible iterate.
    pub aborted: Option<String>,
}

impl AlignmentResult {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> Value {
        let h = self.aligned.grid().harmonics();
        json::object(vec![
            (
                "gauges",
                Value::Array(
                    self.gauges
                        .iter()
                        .zip(h)
                        .map(|(g, &h)| {
                            let mut v = g.to_json();
                            v["harmonic"] = h.into();
                            v
                        })
                        .collect(),
                ),
            ),
            ("aligned_proxies", self.aligned.to_json()),
            ("loss_trace", Value::from(self.loss_trace.clone())),
            (
                "admissibility",
                Value::Array(
                    self.admissibility
                        .iter()
                        .zip(h)
                        .map(|(r, &h)| {
                            json::object(vec![
                                ("harmonic", h.into()),
                                ("admissible", r.is_admissible().into()),
                                (
                                    "violations",
                                    Value::from(r.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
                                ),
                            ])
                        })
                        .collect(),
                ),
            ),
            ("config", self.config.to_json()),
            ("seed", self.config.seed.into()),
            ("aborted", self.aborted.clone().map_or(Value::Null, Value::from)),
        ])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        json::write_file(path, &self.to_json())
    }
}

/// Reads the aligned proxies out of an exported [`AlignmentResult`].
pub fn load_aligned_proxies(path: impl AsRef<Path>) -> Result<ProxySet> {
    let v = json::read_file(path)?;
    ProxySet::from_json(&Node::root(&v).key("aligned_proxies")?)
}

/// Aligns the per-harmonic gauges of `proxies` to the multi-harmonic `campaign`.
pub fn align(proxies: &ProxySet, campaign: &Campaign, config: &OptimizerConfig) -> Result<AlignmentResult> {
    config.validate()?;
    let problem = Problem::new(proxies, campaign)?;
    let variant = proxies.variant();
    let n_s = proxies.n_s();
    let nh = proxies.grid().len();
    let mut gauges = initial_gauges(nh, n_s, variant, config);
    let mut x = to_real(&gauges);
    let mut adam = Adam::new(x.len());
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut aborted = None;
    let stride = GaugeParams::real_dim(n_s);
    for t in 0..config.iterations {
        let (loss, grad) = match problem.evaluate(&gauges, true) {
            Ok(v) => v,
            Err(e) => {
                aborted = Some(format!("iteration {t}: {e}"));
                break;
            }
        };
        trace.push(loss);
        if !loss.is_finite() {
            aborted = Some(format!("iteration {t}: non-finite loss"));
            break;
        }
        let grad = grad.expect("gradient requested");
        let mut next = x.clone();
        adam.step(&mut next, &grad, config.step_size(t), config);
        if variant == GaugeVariant::Mobius {
            for c in next.chunks_mut(stride) {
                let (re, im) = (c[stride - 2], c[stride - 1]);
                let r = re.hypot(im);
                if r > MU_MAX {
                    c[stride - 2] = re * MU_MAX / r;
                    c[stride - 1] = im * MU_MAX / r;
                }
            }
        }
        let candidate = from_real(&next, n_s, variant);
        if let Some((h, report)) = proxies
            .params()
            .iter()
            .zip(&candidate)
            .map(|(p, g)| check_admissible(p, g))
            .enumerate()
            .find(|(_, r)| !r.is_admissible())
        {
            aborted = Some(format!(
                "iteration {t}: gauge at harmonic {} left the admissible set ({report})",
                proxies.grid().harmonics()[h]
            ));
            break;
        }
        x = next;
        gauges = candidate;
    }
    if aborted.is_none() {
        match problem.evaluate(&gauges, false) {
            Ok((loss, _)) => trace.push(loss),
            Err(e) => aborted = Some(format!("final evaluation: {e}")),
        }
    }
    if let Some(msg) = &aborted {
        log::warn!("alignment stopped early: {msg}");
    }
    let admissibility = proxies
        .params()
        .iter()
        .zip(&gauges)
        .map(|(p, g)| check_admissible(p, g))
        .collect();
    let aligned = proxies.gauged(&gauges)?;
    Ok(AlignmentResult {
        gauges,
        aligned,
        loss_trace: trace,
        admissibility,
        config: config.clone(),
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{surrogate_step1, truth_proxies};
    use crate::gauge::random_gauge;
    use crate::measurement::{simulate_campaign, MeasurementMode};
    use crate::scenario::{Scenario, ScenarioConfig};

    fn tiny() -> Scenario {
        Scenario::generate(&ScenarioConfig {
            gt_harmonics: 3,
            retained_harmonics: 3,
            n_t: 2,
            n_r: 2,
            n_s: 3,
            n_states: 4,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn fd_gradient(p: &Problem, x: &[f64], variant: GaugeVariant, n_s: usize) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                let fa = p.evaluate(&from_real(&a, n_s, variant), false).unwrap().0;
                let fb = p.evaluate(&from_real(&b, n_s, variant), false).unwrap().0;
                (fa - fb) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = tiny();
        let g = s.retained_grid().unwrap();
        for mc in [true, false] {
            let proxies = surrogate_step1(&s, &g, 0.2, 1, mc).unwrap();
            for mode in MeasurementMode::ALL {
                let campaign = simulate_campaign(&s, &g, 2, 3, mode, Some(30.0), 5).unwrap();
                let p = Problem::new(&proxies, &campaign).unwrap();
                let mut rng = rng::stream(9, Stream::Init, 1);
                let gauges: Vec<_> = (0..3)
                    .map(|_| random_gauge(&mut rng, GaugeVariant::for_coupling(mc), 3, 0.1))
                    .collect();
                let x = to_real(&gauges);
                let (_, grad) = p.evaluate(&gauges, true).unwrap();
                let grad = grad.unwrap();
                let fd = fd_gradient(&p, &x, GaugeVariant::for_coupling(mc), 3);
                let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
                if !mc && mode == MeasurementMode::M1 {
                    // only the fundamental input is driven, so every affine gauge is invisible
                    assert!(num < 1e-9 && den < 1e-9, "{num} {den}");
                } else {
                    assert!(num / den < 1e-5, "mc {mc} mode {mode}: rel err {}", num / den);
                }
            }
        }
    }

    #[test]
    fn coupled_fundamental_sees_sideband_gammas() {
        let s = tiny();
        let g = s.retained_grid().unwrap();
        let proxies = surrogate_step1(&s, &g, 0.2, 1, true).unwrap();
        let campaign = simulate_campaign(&s, &g, 2, 3, MeasurementMode::M1, None, 5).unwrap();
        let mut rng = rng::stream(9, Stream::Init, 1);
        let gauges: Vec<_> = (0..3)
            .map(|_| random_gauge(&mut rng, GaugeVariant::Mobius, 3, 0.1))
            .collect();
        let grad = alignment_gradient(&proxies, &gauges, &campaign).unwrap();
        for h in [0, 2] {
            let gamma = &grad[10 * h + 6..10 * h + 8];
            assert!(gamma.iter().any(|v| v.abs() > 1e-6), "harmonic {h}: {gamma:?}");
        }
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradient() {
        let mut cfg = tiny().config;
        cfg.delay_scale = 0.0;
        let s = Scenario::generate(&cfg).unwrap();
        let g = s.retained_grid().unwrap();
        let proxies = truth_proxies(&s, &g, true).unwrap();
        let campaign = simulate_campaign(&s, &g, 3, 3, MeasurementMode::M3, None, 2).unwrap();
        let id = vec![GaugeParams::identity(3, GaugeVariant::Mobius); 3];
        let (loss, grad) = Problem::new(&proxies, &campaign).unwrap().evaluate(&id, true).unwrap();
        assert!(loss < 1e-13, "{loss}");
        let n = grad.unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n < 1e-8, "{n}");
    }

    #[test]
    fn doubled_prediction_has_unit_loss() {
        let mut cfg = tiny().config;
        cfg.delay_scale = 0.0;
        let s = Scenario::generate(&cfg).unwrap();
        let g = s.retained_grid().unwrap();
        let proxies = truth_proxies(&s, &g, true).unwrap();
        for mode in MeasurementMode::ALL {
            let mut campaign = simulate_campaign(&s, &g, 2, 3, mode, None, 2).unwrap();
            for r in &mut campaign.records {
                r.observation = match &r.observation {
                    crate::measurement::Observation::Complex(m) => {
                        crate::measurement::Observation::Complex(m * crate::C64::new(0.5, 0.0))
                    }
                    crate::measurement::Observation::Magnitude(m) => {
                        crate::measurement::Observation::Magnitude(m * 0.5)
                    }
                };
            }
            let id = vec![GaugeParams::identity(3, GaugeVariant::Mobius); 3];
            let loss = alignment_loss(&proxies, &id, &campaign).unwrap();
            assert!((loss - 1.0).abs() < 1e-12, "{mode}: {loss}");
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let s = tiny();
        let g = s.retained_grid().unwrap();
        let proxies = truth_proxies(&s, &g, false).unwrap();
        let campaign = simulate_campaign(&s, &g, 2, 3, MeasurementMode::M1, None, 2).unwrap();
        let wrong = vec![GaugeParams::identity(3, GaugeVariant::Mobius); 3];
        assert!(matches!(
            alignment_loss(&proxies, &wrong, &campaign),
            Err(Error::InadmissibleGauge(_))
        ));
        let mut zero = campaign.clone();
        if let crate::measurement::Observation::Complex(m) = &mut zero.records[1].observation {
            m.fill(crate::C64::new(0.0, 0.0));
        }
        let id = vec![GaugeParams::identity(3, GaugeVariant::Affine); 3];
        assert!(matches!(alignment_loss(&proxies, &id, &zero), Err(Error::ZeroNorm(1))));
    }

    #[test]
    fn step_sizes_decay_geometrically() {
        let c = OptimizerConfig::default();
        assert_eq!(c.step_size(0), 1e-3);
        assert!((c.step_size(125) / 1e-4 - 1.0).abs() < 1e-12);
        assert!((0..250).all(|t| c.step_size(t + 1) <= c.step_size(t)));
    }

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut r = rng::stream(1, Stream::Init, 0);
        let xs: Vec<f64> = (0..20_000).map(|_| truncated_normal(&mut r, 0.5)).collect();
        assert!(xs.iter().all(|x| x.abs() <= 1.0));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn alignment_is_deterministic_and_traced() {
        let s = tiny();
        let g = s.retained_grid().unwrap();
        let proxies = surrogate_step1(&s, &g, 0.3, 1, true).unwrap();
        let campaign = simulate_campaign(&s, &g, 4, 3, MeasurementMode::M3, None, 2).unwrap();
        let cfg = OptimizerConfig {
            iterations: 30,
            ..Default::default()
        };
        let a = align(&proxies, &campaign, &cfg).unwrap();
        assert_eq!(a.loss_trace.len(), 31);
        assert!(a.aborted.is_none());
        assert!(a.admissibility.iter().all(AdmissibilityReport::is_admissible));
        assert_eq!(a, align(&proxies, &campaign, &cfg).unwrap());
        let text = json::to_string(&a.to_json());
        let v = json::parse_str(&text).unwrap();
        let back = ProxySet::from_json(&Node::root(&v).key("aligned_proxies").unwrap()).unwrap();
        assert_eq!(back, a.aligned);
    }
}
