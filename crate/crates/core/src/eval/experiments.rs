//! Experiment drivers: accuracy against K, SNR and mode; accuracy against the evaluation
//! Q after a single calibration; optimized harmonic gains per model.
//!
//! Replicate `r` draws everything (scenario, proxies, campaigns, gauge initialization,
//! evaluation patterns, ascent restarts) from `child_seed(seed, r)`, so each row is a
//! pure function of the config and its cell key, independent of scheduling. Rows are
//! emitted in cell-key order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde_json::Value;

use super::gain::{coordinate_ascent_gain, GainConfig};
use super::zeta::{EvalModel, EvaluationSet, DEFAULT_EVAL_PATTERNS};
use crate::error::{Error, Result};
use crate::estimation::{
    align, default_static_k, step1_estimate, surrogate_step1, AlignmentResult, OptimizerConfig, Step1Config,
};
use crate::gauge::ProxySet;
use crate::grid::HarmonicGrid;
use crate::json::{self, Node};
use crate::measurement::{simulate_campaign, simulate_static_campaigns, MeasurementMode};
use crate::rng::child_seed;
use crate::scenario::{Scenario, ScenarioConfig};

/// Channel model compared in the gain table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKind {
    Gt,
    TruncGt,
    Aligned,
    Unaligned,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gt => "gt",
            Self::TruncGt => "trunc-gt",
            Self::Aligned => "aligned",
            Self::Unaligned => "unaligned",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Self::Gt),
            "trunc-gt" => Ok(Self::TruncGt),
            "aligned" => Ok(Self::Aligned),
            "unaligned" => Ok(Self::Unaligned),
            _ => Err(Error::Validation(format!(
                "unknown model '{s}' (expected gt, trunc-gt, aligned or unaligned)"
            ))),
        }
    }
}

/// Where the per-harmonic proxies come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxySource {
    /// Gauge-perturbed ground-truth blocks.
    Surrogate,
    /// Per-harmonic fits to static campaigns.
    Fit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub replicates: usize,
    pub proxy_source: ProxySource,
    /// Gauge spread of surrogate proxies. Much beyond 0.2 with ten or more coupled
    /// elements, the near-identity start of the alignment tends to stall in a local
    /// minimum.
    pub spread: f64,
    /// Static configurations per harmonic for fitted proxies (`None`: default rule).
    pub step1_k: Option<usize>,
    pub step1_snr_db: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub eval_patterns: usize,
    pub k_list: Vec<usize>,
    /// `None` entries are noiseless.
    pub snr_list: Vec<Option<f64>>,
    pub modes: Vec<MeasurementMode>,
    pub mc_flags: Vec<bool>,
    pub q_cal: usize,
    pub k_cal: usize,
    pub snr_cal_db: Option<f64>,
    pub mode_cal: MeasurementMode,
    pub q_eval: Vec<usize>,
    pub models: Vec<ModelKind>,
    pub tx: usize,
    pub rx: usize,
    pub harmonic: i32,
    pub restarts: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            seed: 0,
            replicates: 5,
            proxy_source: ProxySource::Surrogate,
            spread: 0.2,
            step1_k: None,
            step1_snr_db: None,
            optimizer: OptimizerConfig::default(),
            eval_patterns: DEFAULT_EVAL_PATTERNS,
            k_list: vec![1, 2, 5, 10, 20],
            snr_list: vec![Some(26.0)],
            modes: MeasurementMode::ALL.to_vec(),
            mc_flags: vec![true, false],
            q_cal: 3,
            k_cal: 20,
            snr_cal_db: Some(26.0),
            mode_cal: MeasurementMode::M3,
            q_eval: vec![1, 2, 3, 4, 5],
            models: vec![ModelKind::TruncGt, ModelKind::Aligned, ModelKind::Unaligned],
            tx: 0,
            rx: 0,
            harmonic: 1,
            restarts: 4,
        }
    }
}

const EXPERIMENT_KEYS: [&str; 23] = [
    "scenario",
    "seed",
    "replicates",
    "proxy_source",
    "spread",
    "step1_k",
    "step1_snr_db",
    "optimizer",
    "eval_patterns",
    "k_list",
    "snr_list",
    "modes",
    "mc_flags",
    "q_cal",
    "k_cal",
    "snr_cal_db",
    "mode_cal",
    "q_eval",
    "models",
    "tx",
    "rx",
    "harmonic",
    "restarts",
];

fn opt_f64(v: Option<f64>) -> Value {
    v.map_or(Value::Null, Value::from)
}

fn node_opt_f64(n: &Node) -> Result<Option<f64>> {
    if n.value().is_null() {
        Ok(None)
    } else {
        n.f64().map(Some)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.optimizer.validate()?;
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if !(self.spread >= 0.0) {
            return bad("spread must be non-negative");
        }
        if self.eval_patterns < 2 {
            return bad("at least two evaluation patterns are required");
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) || self.k_cal == 0 {
            return bad("K values must be positive");
        }
        if self.q_cal == 0 || self.q_eval.contains(&0) {
            return bad("Q values must be at least 1");
        }
        if self
            .snr_list
            .iter()
            .flatten()
            .chain(&self.snr_cal_db)
            .chain(&self.step1_snr_db)
            .any(|s| s.is_nan())
        {
            return bad("SNR values must not be NaN");
        }
        if self.step1_k == Some(0) || self.restarts == 0 {
            return bad("step1_k and restarts must be positive");
        }
        if self.snr_list.is_empty()
            || self.modes.is_empty()
            || self.mc_flags.is_empty()
            || self.q_eval.is_empty()
            || self.models.is_empty()
        {
            return bad("experiment lists must not be empty");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json::object(vec![
            ("scenario", self.scenario.to_json()),
            ("seed", self.seed.into()),
            ("replicates", self.replicates.into()),
            (
                "proxy_source",
                match self.proxy_source {
                    ProxySource::Surrogate => "surrogate",
                    ProxySource::Fit => "fit",
                }
                .into(),
            ),
            ("spread", self.spread.into()),
            ("step1_k", self.step1_k.map_or(Value::Null, Value::from)),
            ("step1_snr_db", opt_f64(self.step1_snr_db)),
            ("optimizer", self.optimizer.to_json()),
            ("eval_patterns", self.eval_patterns.into()),
            ("k_list", self.k_list.clone().into()),
            (
                "snr_list",
                Value::Array(self.snr_list.iter().map(|s| opt_f64(*s)).collect()),
            ),
            (
                "modes",
                Value::Array(self.modes.iter().map(|m| m.name().into()).collect()),
            ),
            ("mc_flags", self.mc_flags.clone().into()),
            ("q_cal", self.q_cal.into()),
            ("k_cal", self.k_cal.into()),
            ("snr_cal_db", opt_f64(self.snr_cal_db)),
            ("mode_cal", self.mode_cal.name().into()),
            ("q_eval", self.q_eval.clone().into()),
            (
                "models",
                Value::Array(self.models.iter().map(|m| m.name().into()).collect()),
            ),
            ("tx", self.tx.into()),
            ("rx", self.rx.into()),
            ("harmonic", self.harmonic.into()),
            ("restarts", self.restarts.into()),
        ])
    }

    /// Absent fields keep their default.
    pub fn from_json(v: &Value) -> Result<Self> {
        let root = Node::root(v);
        root.only_keys(&EXPERIMENT_KEYS)?;
        let mut c = Self::default();
        if let Some(n) = root.opt("scenario")? {
            c.scenario = ScenarioConfig::from_json(&n)?;
        }
        if let Some(n) = root.opt("optimizer")? {
            c.optimizer = OptimizerConfig::from_json(&n)?;
        }
        macro_rules! field {
            ($key:literal, $slot:expr, $get:ident) => {
                if let Some(n) = root.opt($key)? {
                    $slot = n.$get()?;
                }
            };
        }
        field!("seed", c.seed, u64);
        field!("replicates", c.replicates, usize);
        field!("spread", c.spread, f64);
        field!("eval_patterns", c.eval_patterns, usize);
        field!("q_cal", c.q_cal, usize);
        field!("k_cal", c.k_cal, usize);
        field!("tx", c.tx, usize);
        field!("rx", c.rx, usize);
        field!("restarts", c.restarts, usize);
        if let Some(n) = root.opt("harmonic")? {
            c.harmonic = i32::try_from(n.i64()?).map_err(|_| n.error("harmonic out of range"))?;
        }
        if let Some(n) = root.opt("proxy_source")? {
            c.proxy_source = match n.str()? {
                "surrogate" => ProxySource::Surrogate,
                "fit" => ProxySource::Fit,
                other => return Err(n.error(format!("unknown proxy source '{other}'"))),
            };
        }
        if let Some(n) = root.opt("step1_k")? {
            c.step1_k = if n.value().is_null() { None } else { Some(n.usize()?) };
        }
        if let Some(n) = root.opt("step1_snr_db")? {
            c.step1_snr_db = node_opt_f64(&n)?;
        }
        if let Some(n) = root.opt("snr_cal_db")? {
            c.snr_cal_db = node_opt_f64(&n)?;
        }
        if let Some(n) = root.opt("k_list")? {
            c.k_list = n.items()?.iter().map(Node::usize).collect::<Result<_>>()?;
        }
        if let Some(n) = root.opt("q_eval")? {
            c.q_eval = n.items()?.iter().map(Node::usize).collect::<Result<_>>()?;
        }
        if let Some(n) = root.opt("snr_list")? {
            c.snr_list = n.items()?.iter().map(node_opt_f64).collect::<Result<_>>()?;
        }
        if let Some(n) = root.opt("mc_flags")? {
            c.mc_flags = n.items()?.iter().map(Node::bool).collect::<Result<_>>()?;
        }
        let parse_mode =
            |n: &Node| -> Result<MeasurementMode> { n.str()?.parse().map_err(|e: Error| n.error(e.to_string())) };
        if let Some(n) = root.opt("modes")? {
            c.modes = n.items()?.iter().map(parse_mode).collect::<Result<_>>()?;
        }
        if let Some(n) = root.opt("mode_cal")? {
            c.mode_cal = parse_mode(&n)?;
        }
        if let Some(n) = root.opt("models")? {
            c.models = n
                .items()?
                .iter()
                .map(|m| m.str()?.parse().map_err(|e: Error| m.error(e.to_string())))
                .collect::<Result<_>>()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&json::read_file(path)?)
    }

    fn replicate_seeds(&self) -> Vec<(usize, u64)> {
        (0..self.replicates)
            .map(|r| (r, child_seed(self.seed, r as u64)))
            .collect()
    }
}

/// Shared state of one replicate.
struct Replicate<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    scenario: Scenario,
    retained: HarmonicGrid,
}

impl<'a> Replicate<'a> {
    fn new(cfg: &'a ExperimentConfig, seed: u64) -> Result<Self> {
        let scenario = Scenario::generate(&ScenarioConfig {
            seed,
            ..cfg.scenario.clone()
        })?;
        let retained = scenario.retained_grid()?;
        Ok(Self {
            cfg,
            seed,
            scenario,
            retained,
        })
    }

    /// Unaligned proxies for each requested coupling flag.
    fn proxies(&self, mc_flags: &[bool]) -> Result<BTreeMap<bool, ProxySet>> {
        let c = &self.scenario.config;
        let statics = match self.cfg.proxy_source {
            ProxySource::Surrogate => None,
            ProxySource::Fit => {
                let k = self
                    .cfg
                    .step1_k
                    .unwrap_or_else(|| default_static_k(c.n_t, c.n_r, c.n_s, c.n_states));
                Some(simulate_static_campaigns(
                    &self.scenario,
                    &self.retained,
                    k,
                    self.cfg.step1_snr_db,
                    self.seed,
                )?)
            }
        };
        mc_flags
            .iter()
            .map(|&mc| {
                let p = match &statics {
                    None => surrogate_step1(&self.scenario, &self.retained, self.cfg.spread, self.seed, mc)?,
                    Some(campaigns) => {
                        let mut s1 = Step1Config::default();
                        s1.optimizer.seed = self.seed;
                        step1_estimate(&self.retained, campaigns, c.n_states, &s1, mc)?.proxies
                    }
                };
                Ok((mc, p))
            })
            .collect()
    }

    fn align(
        &self,
        proxies: &ProxySet,
        k: usize,
        q: usize,
        mode: MeasurementMode,
        snr_db: Option<f64>,
    ) -> Result<AlignmentResult> {
        let campaign = simulate_campaign(&self.scenario, &self.retained, k, q, mode, snr_db, self.seed)?;
        let opt = OptimizerConfig {
            seed: self.seed,
            ..self.cfg.optimizer.clone()
        };
        align(proxies, &campaign, &opt)
    }

    fn evaluation(&self, q: usize) -> Result<EvaluationSet> {
        EvaluationSet::new(&self.scenario, &self.retained, q, self.cfg.eval_patterns, self.seed)
    }
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x}")
    }
}

fn snr_text(s: Option<f64>) -> String {
    s.map_or_else(|| "noiseless".into(), num)
}

fn csv_text(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory CSV");
    for r in rows {
        w.write_record(&r).expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("CSV output is UTF-8")
}

/// Status and error columns plus the value columns (blank on error).
fn outcome_columns<T>(
    outcome: &std::result::Result<T, String>,
    width: usize,
    values: impl Fn(&T) -> Vec<String>,
    aborted: impl Fn(&T) -> bool,
) -> Vec<String> {
    match outcome {
        Ok(v) => {
            let mut c = values(v);
            c.push(if aborted(v) { "aborted" } else { "ok" }.into());
            c.push(String::new());
            c
        }
        Err(e) => {
            let mut c = vec![String::new(); width];
            c.push("error".into());
            c.push(e.clone());
            c
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig3Values {
    pub zeta_aligned_db: f64,
    pub zeta_unaligned_db: f64,
    pub zeta_truncated_gt_db: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig3Row {
    pub replicate: usize,
    pub seed: u64,
    pub k: usize,
    pub snr_db: Option<f64>,
    pub mode: MeasurementMode,
    pub mc_aware: bool,
    pub q: usize,
    pub outcome: std::result::Result<Fig3Values, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig3Table {
    pub rows: Vec<Fig3Row>,
}

impl Fig3Table {
    pub const HEADER: [&'static str; 15] = [
        "replicate",
        "seed",
        "k",
        "snr_db",
        "mode",
        "mc_aware",
        "q",
        "zeta_aligned_db",
        "zeta_unaligned_db",
        "zeta_truncated_gt_db",
        "initial_loss",
        "final_loss",
        "aborted",
        "status",
        "error",
    ];

    pub fn to_csv(&self) -> String {
        csv_text(
            &Self::HEADER,
            self.rows.iter().map(|r| {
                let mut c = vec![
                    r.replicate.to_string(),
                    r.seed.to_string(),
                    r.k.to_string(),
                    snr_text(r.snr_db),
                    r.mode.name().into(),
                    r.mc_aware.to_string(),
                    r.q.to_string(),
                ];
                c.extend(outcome_columns(
                    &r.outcome,
                    6,
                    |v| {
                        vec![
                            num(v.zeta_aligned_db),
                            num(v.zeta_unaligned_db),
                            num(v.zeta_truncated_gt_db),
                            num(v.initial_loss),
                            num(v.final_loss),
                            v.aborted.to_string(),
                        ]
                    },
                    |v| v.aborted,
                ));
                c
            }),
        )
    }
}

/// Accuracy of aligned, unaligned and truncated-ground-truth models for every
/// `(replicate, K, SNR, mode, coupling flag)` cell, at the scenario's Q.
pub fn experiment_fig3(cfg: &ExperimentConfig) -> Result<Fig3Table> {
    cfg.validate()?;
    let q = cfg.scenario.q;
    let rows = cfg
        .replicate_seeds()
        .into_par_iter()
        .map(|(r, seed)| {
            let cell = |k: usize, snr_db: Option<f64>, mode: MeasurementMode, mc_aware: bool, outcome| Fig3Row {
                replicate: r,
                seed,
                k,
                snr_db,
                mode,
                mc_aware,
                q,
                outcome,
            };
            let keys = || {
                cfg.k_list.iter().flat_map(move |&k| {
                    cfg.snr_list.iter().flat_map(move |&snr| {
                        cfg.modes
                            .iter()
                            .flat_map(move |&mode| cfg.mc_flags.iter().map(move |&mc| (k, snr, mode, mc)))
                    })
                })
            };
            let shared = Replicate::new(cfg, seed).and_then(|rep| {
                let eval = rep.evaluation(q)?;
                let proxies = rep.proxies(&cfg.mc_flags)?;
                Ok((rep, eval, proxies))
            });
            let (rep, eval, proxies) = match shared {
                Ok(s) => s,
                Err(e) => {
                    return keys()
                        .map(|(k, snr, mode, mc)| cell(k, snr, mode, mc, Err(e.to_string())))
                        .collect::<Vec<_>>()
                }
            };
            let mut baselines: BTreeMap<(bool, &str), Result<(f64, f64)>> = BTreeMap::new();
            keys()
                .map(|(k, snr, mode, mc)| {
                    let base = baselines
                        .entry((mc, mode.name()))
                        .or_insert_with(|| {
                            let un = eval.zeta(&rep.scenario, &EvalModel::Proxies(proxies[&mc].clone()), mode)?;
                            let tr = eval.zeta(
                                &rep.scenario,
                                &EvalModel::truncated_gt(&rep.scenario, &rep.retained, mc)?,
                                mode,
                            )?;
                            Ok((un.zeta_db, tr.zeta_db))
                        })
                        .as_ref()
                        .map(|b| *b)
                        .map_err(|e| e.to_string());
                    let outcome = base.and_then(|(unaligned, truncated)| {
                        let a = rep.align(&proxies[&mc], k, q, mode, snr).map_err(|e| e.to_string())?;
                        let z = eval
                            .zeta(&rep.scenario, &EvalModel::Proxies(a.aligned.clone()), mode)
                            .map_err(|e| e.to_string())?;
                        Ok(Fig3Values {
                            zeta_aligned_db: z.zeta_db,
                            zeta_unaligned_db: unaligned,
                            zeta_truncated_gt_db: truncated,
                            initial_loss: a.loss_trace[0],
                            final_loss: a.final_loss(),
                            aborted: a.aborted.is_some(),
                        })
                    });
                    cell(k, snr, mode, mc, outcome)
                })
                .collect()
        })
        .collect::<Vec<Vec<_>>>()
        .concat();
    Ok(Fig3Table { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig4Values {
    pub zeta_aligned_db: f64,
    pub zeta_unaligned_db: f64,
    pub zeta_truncated_gt_db: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig4Row {
    pub replicate: usize,
    pub seed: u64,
    pub mc_aware: bool,
    pub q_cal: usize,
    pub q_eval: usize,
    pub mode: MeasurementMode,
    pub outcome: std::result::Result<Fig4Values, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig4Table {
    pub rows: Vec<Fig4Row>,
}

impl Fig4Table {
    pub const HEADER: [&'static str; 12] = [
        "replicate",
        "seed",
        "mc_aware",
        "q_cal",
        "q_eval",
        "mode",
        "zeta_aligned_db",
        "zeta_unaligned_db",
        "zeta_truncated_gt_db",
        "aborted",
        "status",
        "error",
    ];

    pub fn to_csv(&self) -> String {
        csv_text(
            &Self::HEADER,
            self.rows.iter().map(|r| {
                let mut c = vec![
                    r.replicate.to_string(),
                    r.seed.to_string(),
                    r.mc_aware.to_string(),
                    r.q_cal.to_string(),
                    r.q_eval.to_string(),
                    r.mode.name().into(),
                ];
                c.extend(outcome_columns(
                    &r.outcome,
                    4,
                    |v| {
                        vec![
                            num(v.zeta_aligned_db),
                            num(v.zeta_unaligned_db),
                            num(v.zeta_truncated_gt_db),
                            v.aborted.to_string(),
                        ]
                    },
                    |v| v.aborted,
                ));
                c
            }),
        )
    }
}

/// Aligned and unaligned proxies of every coupling flag, calibrated once at `q_cal`.
type Calibration = BTreeMap<bool, std::result::Result<(ProxySet, AlignmentResult), String>>;

fn calibrate(rep: &Replicate) -> Result<Calibration> {
    let cfg = rep.cfg;
    let proxies = rep.proxies(&cfg.mc_flags)?;
    Ok(proxies
        .into_iter()
        .map(|(mc, p)| {
            let a = rep
                .align(&p, cfg.k_cal, cfg.q_cal, cfg.mode_cal, cfg.snr_cal_db)
                .map_err(|e| e.to_string());
            (mc, a.map(|a| (p, a)))
        })
        .collect())
}

/// Calibrates at `q_cal` under `mode_cal` and evaluates at every `q_eval` without
/// re-alignment.
pub fn experiment_fig4(cfg: &ExperimentConfig) -> Result<Fig4Table> {
    cfg.validate()?;
    let rows = cfg
        .replicate_seeds()
        .into_par_iter()
        .map(|(r, seed)| {
            let row = |mc_aware: bool, q_eval: usize, outcome| Fig4Row {
                replicate: r,
                seed,
                mc_aware,
                q_cal: cfg.q_cal,
                q_eval,
                mode: cfg.mode_cal,
                outcome,
            };
            let shared = Replicate::new(cfg, seed).and_then(|rep| {
                let cal = calibrate(&rep)?;
                Ok((rep, cal))
            });
            let (rep, cal) = match shared {
                Ok(s) => s,
                Err(e) => {
                    return cfg
                        .mc_flags
                        .iter()
                        .flat_map(|&mc| cfg.q_eval.iter().map(move |&q| (mc, q)))
                        .map(|(mc, q)| row(mc, q, Err(e.to_string())))
                        .collect::<Vec<_>>()
                }
            };
            let mut out = Vec::new();
            for &mc in &cfg.mc_flags {
                for &q in &cfg.q_eval {
                    let outcome = cal[&mc].clone().and_then(|(unaligned, a)| {
                        let run = || -> Result<Fig4Values> {
                            let eval = rep.evaluation(q)?;
                            let z = |m: EvalModel| eval.zeta(&rep.scenario, &m, cfg.mode_cal).map(|z| z.zeta_db);
                            Ok(Fig4Values {
                                zeta_aligned_db: z(EvalModel::Proxies(a.aligned.clone()))?,
                                zeta_unaligned_db: z(EvalModel::Proxies(unaligned))?,
                                zeta_truncated_gt_db: z(EvalModel::truncated_gt(&rep.scenario, &rep.retained, mc)?)?,
                                aborted: a.aborted.is_some(),
                            })
                        };
                        run().map_err(|e| e.to_string())
                    });
                    out.push(row(mc, q, outcome));
                }
            }
            out
        })
        .collect::<Vec<Vec<_>>>()
        .concat();
    Ok(Fig4Table { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainValues {
    pub true_gain_db: f64,
    pub predicted_gain_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub replicate: usize,
    pub seed: u64,
    pub model: ModelKind,
    /// Always `true` for the ground-truth model.
    pub mc_aware: bool,
    pub q_eval: usize,
    pub outcome: std::result::Result<GainValues, String>,
}

impl Table1Row {
    /// `|true - predicted|` in dB; zero when both agree, including two vanishing gains.
    pub fn gap_db(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|v| {
            if v.true_gain_db == v.predicted_gain_db {
                0.0
            } else {
                (v.true_gain_db - v.predicted_gain_db).abs()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Output {
    pub config: ExperimentConfig,
    pub rows: Vec<Table1Row>,
}

/// Median of the finite entries, `None` if there are none.
fn median(mut v: Vec<f64>) -> Option<f64> {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl Table1Output {
    pub const HEADER: [&'static str; 11] = [
        "replicate",
        "seed",
        "model",
        "mc_aware",
        "q_eval",
        "harmonic",
        "true_gain_db",
        "predicted_gain_db",
        "gap_db",
        "status",
        "error",
    ];

    pub fn to_csv(&self) -> String {
        csv_text(
            &Self::HEADER,
            self.rows.iter().map(|r| {
                let mut c = vec![
                    r.replicate.to_string(),
                    r.seed.to_string(),
                    r.model.name().into(),
                    r.mc_aware.to_string(),
                    r.q_eval.to_string(),
                    self.config.harmonic.to_string(),
                ];
                c.extend(outcome_columns(
                    &r.outcome,
                    3,
                    |v| {
                        vec![
                            num(v.true_gain_db),
                            num(v.predicted_gain_db),
                            num((v.true_gain_db - v.predicted_gain_db).abs()),
                        ]
                    },
                    |_| false,
                ));
                c
            }),
        )
    }

    /// Median true gain and median gap over replicates of one `(model, coupling, Q)` cell.
    pub fn medians(&self, model: ModelKind, mc_aware: bool, q_eval: usize) -> (Option<f64>, Option<f64>) {
        let cell: Vec<&Table1Row> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.mc_aware == mc_aware && r.q_eval == q_eval)
            .collect();
        let gains = cell
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|v| v.true_gain_db))
            .collect();
        let gaps = cell.iter().filter_map(|r| r.gap_db()).collect();
        (median(gains), median(gaps))
    }

    fn cells(&self) -> Vec<(ModelKind, bool, usize)> {
        let mut keys: Vec<_> = self.rows.iter().map(|r| (r.model, r.mc_aware, r.q_eval)).collect();
        keys.sort();
        keys.dedup();
        keys
    }

    pub fn to_json(&self) -> Value {
        let opt = |x: f64| if x.is_finite() { Value::from(x) } else { Value::Null };
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let (status, t, p, e) = match &r.outcome {
                    Ok(v) => ("ok", opt(v.true_gain_db), opt(v.predicted_gain_db), Value::Null),
                    Err(e) => ("error", Value::Null, Value::Null, Value::from(e.as_str())),
                };
                json::object(vec![
                    ("replicate", r.replicate.into()),
                    ("seed", r.seed.into()),
                    ("model", r.model.name().into()),
                    ("mc_aware", r.mc_aware.into()),
                    ("q_eval", r.q_eval.into()),
                    ("true_gain_db", t),
                    ("predicted_gain_db", p),
                    ("gap_db", r.gap_db().map_or(Value::Null, opt)),
                    ("status", status.into()),
                    ("error", e),
                ])
            })
            .collect();
        let summary = self
            .cells()
            .into_iter()
            .map(|(m, mc, q)| {
                let (g, gap) = self.medians(m, mc, q);
                json::object(vec![
                    ("model", m.name().into()),
                    ("mc_aware", mc.into()),
                    ("q_eval", q.into()),
                    ("median_true_gain_db", g.map_or(Value::Null, Value::from)),
                    ("median_gap_db", gap.map_or(Value::Null, Value::from)),
                ])
            })
            .collect();
        json::object(vec![
            ("config", self.config.to_json()),
            ("rows", Value::Array(rows)),
            ("summary", Value::Array(summary)),
        ])
    }
}

/// Optimized fundamental-to-`harmonic` SISO gain of every model at every `q_eval`,
/// with calibration at `q_cal` as in [`experiment_fig4`].
pub fn experiment_table1(cfg: &ExperimentConfig) -> Result<Table1Output> {
    cfg.validate()?;
    let mut models = cfg.models.clone();
    models.sort();
    models.dedup();
    let keys: Vec<(ModelKind, bool)> = models
        .iter()
        .flat_map(|&m| {
            let flags = if m == ModelKind::Gt {
                vec![true]
            } else {
                cfg.mc_flags.clone()
            };
            flags.into_iter().map(move |mc| (m, mc))
        })
        .collect();
    let needs_alignment = models
        .iter()
        .any(|m| matches!(m, ModelKind::Aligned | ModelKind::Unaligned));
    let rows = cfg
        .replicate_seeds()
        .into_par_iter()
        .map(|(r, seed)| {
            let row = |model, mc_aware, q_eval, outcome| Table1Row {
                replicate: r,
                seed,
                model,
                mc_aware,
                q_eval,
                outcome,
            };
            let shared = Replicate::new(cfg, seed).and_then(|rep| {
                let cal = if needs_alignment {
                    calibrate(&rep)?
                } else {
                    Calibration::new()
                };
                Ok((rep, cal))
            });
            let (rep, cal) = match shared {
                Ok(s) => s,
                Err(e) => {
                    return keys
                        .iter()
                        .flat_map(|&(m, mc)| cfg.q_eval.iter().map(move |&q| (m, mc, q)))
                        .map(|(m, mc, q)| row(m, mc, q, Err(e.to_string())))
                        .collect::<Vec<_>>()
                }
            };
            let mut out = Vec::new();
            for &(m, mc) in &keys {
                for &q in &cfg.q_eval {
                    let model = match m {
                        ModelKind::Gt => Ok(EvalModel::GroundTruth),
                        ModelKind::TruncGt => {
                            EvalModel::truncated_gt(&rep.scenario, &rep.retained, mc).map_err(|e| e.to_string())
                        }
                        ModelKind::Aligned => cal[&mc]
                            .as_ref()
                            .map(|(_, a)| EvalModel::Proxies(a.aligned.clone()))
                            .map_err(Clone::clone),
                        ModelKind::Unaligned => cal[&mc]
                            .as_ref()
                            .map(|(p, _)| EvalModel::Proxies(p.clone()))
                            .map_err(Clone::clone),
                    };
                    let gcfg = GainConfig {
                        tx: cfg.tx,
                        rx: cfg.rx,
                        harmonic: cfg.harmonic,
                        q,
                        restarts: cfg.restarts,
                    };
                    let outcome = model.and_then(|model| {
                        coordinate_ascent_gain(&model, &rep.scenario, &rep.retained, &gcfg, seed)
                            .map(|g| GainValues {
                                true_gain_db: g.true_gain_db,
                                predicted_gain_db: g.predicted_gain_db,
                            })
                            .map_err(|e| e.to_string())
                    });
                    out.push(row(m, mc, q, outcome));
                }
            }
            out
        })
        .collect::<Vec<Vec<_>>>()
        .concat();
    Ok(Table1Output {
        config: cfg.clone(),
        rows,
    })
}
