//! Per-harmonic proxy estimation from static (Q = 1) measurements, and the
//! gauge-perturbed surrogate of its output.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::Value;

use super::align::{Adam, OptimizerConfig};
use super::predict::{backward, forward, l1_misfit};
use crate::error::{Error, Result};
use crate::floquet::{ModulationPattern, NetworkBlocks, WeightTable};
use crate::gauge::{compose, random_gauge, GaugeVariant, ProxyAdjoint, ProxyParams, ProxySet};
use crate::grid::HarmonicGrid;
use crate::json;
use crate::linalg::{CMatrix, C64};
use crate::measurement::{MeasurementMode, Observation, StaticCampaign};
use crate::rng::{self, Stream};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq)]
pub struct Step1Config {
    pub optimizer: OptimizerConfig,
    /// Standard deviation of the initial network-block entries.
    pub init_scale: f64,
    /// Final training loss above which a harmonic is flagged as not converged.
    pub loss_threshold: f64,
}

impl Default for Step1Config {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig {
                iterations: 3000,
                lr_start: 1e-2,
                lr_end: 1e-5,
                ..Default::default()
            },
            init_scale: 0.1,
            loss_threshold: 1e-2,
        }
    }
}

/// Fit quality of one harmonic.
#[derive(Debug, Clone, PartialEq)]
pub struct Step1Diagnostics {
    pub harmonic: i32,
    pub training_records: usize,
    pub heldout_records: usize,
    pub final_loss: f64,
    /// `sqrt(sum ||pred - obs||^2 / sum ||obs||^2)` over the held-out configurations.
    pub heldout_error: Option<f64>,
    pub converged: bool,
    pub low_identifiability: bool,
}

impl Step1Diagnostics {
    pub fn to_json(&self) -> Value {
        json::object(vec![
            ("harmonic", self.harmonic.into()),
            ("training_records", self.training_records.into()),
            ("heldout_records", self.heldout_records.into()),
            ("final_loss", self.final_loss.into()),
            ("heldout_error", self.heldout_error.map_or(Value::Null, Value::from)),
            ("converged", self.converged.into()),
            ("low_identifiability", self.low_identifiability.into()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step1Result {
    pub proxies: ProxySet,
    pub diagnostics: Vec<Step1Diagnostics>,
}

struct Layout {
    n_r: usize,
    n_t: usize,
    n_s: usize,
    p: usize,
    mc_aware: bool,
}

impl Layout {
    fn complex_len(&self) -> usize {
        let g = if self.mc_aware { self.n_s * self.n_s } else { 0 };
        self.n_r * self.n_t + self.n_r * self.n_s + g + self.n_s * self.n_t + self.p
    }

    fn unpack(&self, x: &[f64]) -> ProxyParams {
        let mut it = x.chunks(2).map(|c| C64::new(c[0], c[1]));
        let mut take = |r: usize, c: usize| CMatrix::from_row_iterator(r, c, it.by_ref().take(r * c));
        let hd = take(self.n_r, self.n_t);
        let a = take(self.n_r, self.n_s);
        let gamma = if self.mc_aware {
            take(self.n_s, self.n_s)
        } else {
            CMatrix::zeros(self.n_s, self.n_s)
        };
        let b = take(self.n_s, self.n_t);
        let rho = take(1, self.p).iter().copied().collect();
        ProxyParams {
            net: NetworkBlocks { hd, a, gamma, b },
            rho,
            mc_aware: self.mc_aware,
        }
    }

    fn pack_adjoint(&self, adj: &ProxyAdjoint) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.complex_len());
        let mut push = |m: &CMatrix| {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push(m[(r, c)].re);
                    out.push(m[(r, c)].im);
                }
            }
        };
        push(&adj.hd);
        push(&adj.a);
        if self.mc_aware {
            push(&adj.gamma);
        }
        push(&adj.b);
        for z in &adj.rho {
            out.push(z.re);
            out.push(z.im);
        }
        out
    }

    fn initial<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.complex_len());
        for _ in 0..2 * (self.complex_len() - self.p) {
            let v: f64 = StandardNormal.sample(rng);
            x.push(v * scale / 2f64.sqrt());
        }
        let offset: f64 = rng.random();
        for k in 0..self.p {
            let z = C64::from_polar(0.5, 2.0 * PI * (k as f64 + offset) / self.p as f64);
            x.push(z.re);
            x.push(z.im);
        }
        x
    }
}

struct Fit<'a> {
    layout: Layout,
    grid: HarmonicGrid,
    weights: WeightTable,
    cols: Vec<(usize, usize)>,
    patterns: Vec<ModulationPattern>,
    observations: Vec<Observation>,
    norms: Vec<f64>,
    campaign: &'a StaticCampaign,
}

impl Fit<'_> {
    fn loss_grad(
        &self,
        x: &[f64],
        records: std::ops::Range<usize>,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let params = [self.layout.unpack(x)];
        let mut acc = [ProxyAdjoint::zeros(&params[0])];
        let k = records.len() as f64;
        let mut loss = 0.0;
        for i in records {
            let f = forward(&params, &self.grid, &self.weights, &self.patterns[i], &[0], &self.cols)?;
            let scale = 1.0 / (self.norms[i] * k);
            let (l, adj) = l1_misfit(MeasurementMode::M1, &f.h, &self.observations[i], scale, want_grad)?;
            loss += l * scale;
            if let Some(h_adj) = adj {
                backward(
                    &params,
                    &self.grid,
                    &self.weights,
                    &self.patterns[i],
                    &[0],
                    &self.cols,
                    &f,
                    &h_adj,
                    &mut acc,
                );
            }
        }
        Ok((loss, want_grad.then(|| self.layout.pack_adjoint(&acc[0]))))
    }
}

fn fit_harmonic(
    index: usize,
    grid: &HarmonicGrid,
    campaign: &StaticCampaign,
    n_states: usize,
    config: &Step1Config,
    mc_aware: bool,
) -> Result<(ProxyParams, Step1Diagnostics)> {
    let k = campaign.configs.len();
    if k == 0 || campaign.observations.len() != k {
        return Err(Error::Validation(format!(
            "static campaign at harmonic {} has {} configurations and {} observations",
            campaign.harmonic,
            k,
            campaign.observations.len()
        )));
    }
    let (n_r, n_t) = campaign.observations[0].shape();
    let n_s = campaign.configs[0].len();
    let patterns = campaign
        .configs
        .iter()
        .map(|c| {
            let p = ModulationPattern::static_config(c)?;
            p.validate(n_states, n_s, f64::INFINITY)?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut norms = Vec::with_capacity(k);
    for (i, o) in campaign.observations.iter().enumerate() {
        if o.shape() != (n_r, n_t) {
            return Err(Error::dim(format!(
                "observation {i} at harmonic {} has shape {:?}",
                campaign.harmonic,
                o.shape()
            )));
        }
        let n: f64 = o.iter().map(|z| z.norm()).sum();
        if !(n > 0.0) {
            return Err(Error::ZeroNorm(i));
        }
        norms.push(n);
    }
    let heldout = if k >= 2 { k.div_ceil(5) } else { 0 };
    let train = k - heldout;
    let layout = Layout {
        n_r,
        n_t,
        n_s,
        p: n_states,
        mc_aware,
    };
    let unknowns = 2 * layout.complex_len();
    let low_identifiability = n_states == 1 || 2 * n_r * n_t * train < unknowns;
    let local = HarmonicGrid::symmetric(grid.f0(), grid.fm(), 1)?;
    let fit = Fit {
        weights: WeightTable::new(&local, 1),
        grid: local,
        cols: (0..n_t).map(|t| (0, t)).collect(),
        patterns,
        observations: campaign
            .observations
            .iter()
            .cloned()
            .map(Observation::Complex)
            .collect(),
        norms,
        layout,
        campaign,
    };
    let opt = &config.optimizer;
    let mut rng = rng::stream(opt.seed, Stream::Step1, index as u64);
    let mut x = fit.layout.initial(config.init_scale, &mut rng);
    let mut adam = Adam::new(x.len());
    for t in 0..opt.iterations {
        let (_, g) = fit.loss_grad(&x, 0..train, true)?;
        adam.step(&mut x, &g.expect("gradient requested"), opt.step_size(t), opt);
    }
    let (final_loss, _) = fit.loss_grad(&x, 0..train, false)?;
    let params = fit.layout.unpack(&x);
    let heldout_error = if heldout > 0 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in train..k {
            let pred = params.net.static_channel(
                &fit.campaign.configs[i]
                    .iter()
                    .map(|&s| params.rho[s])
                    .collect::<Vec<_>>(),
            )?;
            num += (&pred - &fit.campaign.observations[i]).norm_squared();
            den += fit.campaign.observations[i].norm_squared();
        }
        Some((num / den).sqrt())
    } else {
        None
    };
    let converged = final_loss.is_finite() && final_loss <= config.loss_threshold;
    if !converged {
        log::warn!(
            "step 1 at harmonic {}: final loss {final_loss} above threshold {}",
            campaign.harmonic,
            config.loss_threshold
        );
    }
    Ok((
        params,
        Step1Diagnostics {
            harmonic: campaign.harmonic,
            training_records: train,
            heldout_records: heldout,
            final_loss,
            heldout_error,
            converged,
            low_identifiability,
        },
    ))
}

/// Static configurations per harmonic giving twenty complex observations per unknown
/// of one harmonic's proxy blocks and loads.
pub fn default_static_k(n_t: usize, n_r: usize, n_s: usize, n_states: usize) -> usize {
    let unknowns = n_r * n_t + n_r * n_s + n_s * n_s + n_s * n_t + n_states;
    (20 * unknowns).div_ceil(n_r * n_t)
}

/// Fits proxy parameters independently at every harmonic of `grid` from one static
/// campaign per harmonic. The last `ceil(K/5)` configurations of each campaign are
/// held out for the reported prediction error.
pub fn step1_estimate(
    grid: &HarmonicGrid,
    campaigns: &[StaticCampaign],
    n_states: usize,
    config: &Step1Config,
    mc_aware: bool,
) -> Result<Step1Result> {
    config.optimizer.validate()?;
    if campaigns.len() != grid.len() || campaigns.iter().zip(grid.harmonics()).any(|(c, &h)| c.harmonic != h) {
        return Err(Error::Validation(
            "step 1 needs one static campaign per grid harmonic, in grid order".into(),
        ));
    }
    if n_states == 0 {
        return Err(Error::Validation("at least one load state is required".into()));
    }
    let fits = campaigns
        .par_iter()
        .enumerate()
        .map(|(i, c)| fit_harmonic(i, grid, c, n_states, config, mc_aware))
        .collect::<Result<Vec<_>>>()?;
    let (params, diagnostics): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
    Ok(Step1Result {
        proxies: ProxySet::new(grid.clone(), params)?,
        diagnostics,
    })
}

/// Ground-truth blocks and loads at the harmonics of `retained` (no delays), with
/// `S_SS` dropped for coupling-unaware proxies.
pub fn truth_proxies(scenario: &Scenario, retained: &HarmonicGrid, mc_aware: bool) -> Result<ProxySet> {
    let pos = scenario.gt_grid().positions_of(retained)?;
    let params = pos
        .iter()
        .map(|&n| {
            ProxyParams::new(
                scenario.model.blocks(n, mc_aware),
                scenario.loads.at(n).to_vec(),
                mc_aware,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ProxySet::new(retained.clone(), params)
}

/// Ground-truth proxies with an independent random gauge of scale `spread` applied at
/// every harmonic, standing in for the output of a per-harmonic estimator.
pub fn surrogate_step1(
    scenario: &Scenario,
    retained: &HarmonicGrid,
    spread: f64,
    seed: u64,
    mc_aware: bool,
) -> Result<ProxySet> {
    if !(spread >= 0.0) {
        return Err(Error::Validation(format!("spread must be non-negative, got {spread}")));
    }
    let truth = truth_proxies(scenario, retained, mc_aware)?;
    let variant = GaugeVariant::for_coupling(mc_aware);
    let params = truth
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = rng::stream(seed, Stream::Surrogate, i as u64);
            let mut last = None;
            for _ in 0..64 {
                let g = random_gauge(&mut r, variant, p.n_s(), spread);
                match compose(p, &g) {
                    Ok(q) => return Ok(q),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect::<Result<Vec<_>>>()?;
    ProxySet::new(retained.clone(), params)
}
