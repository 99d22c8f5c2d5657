//! Gauge transformations of proxy multiport parameters.
//!
//! A proxy parameter tuple `(H_d, A, Gamma, B, rho)` at one harmonic is only
//! determined up to transformations that leave every conventional (Q = 1) channel
//! unchanged:
//!
//! * diagonal similarity (DS): `A D^-1`, `D B`, `D Gamma D^-1`;
//! * complex scaling (CS): `A / g`, `Gamma / g`, `g rho`;
//! * Moebius (MO), coupling-aware models only:
//!   `H_d + mu A F B`, `k A F`, `k F B`, `(Gamma - mu* I) F`, `(rho - mu) / (1 - mu* rho)`
//!   with `F = (I - mu Gamma)^-1` and `k = sqrt(1 - |mu|^2)`;
//! * affine shift (AF), coupling-unaware models only: `H_d - eta A B`, `rho + eta`.
//!
//! A composite gauge applies DS, then CS, then the third transformation.

use std::borrow::Borrow;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::floquet::NetworkBlocks;
use crate::grid::HarmonicGrid;
use crate::json::{self, Node};
use crate::linalg::{self, CMatrix, Factorized, C64, ONE, ZERO};

/// Largest admissible `|mu|`.
pub const MU_MAX: f64 = 0.99;
/// Smallest admissible `|d_i|` and `|gamma|`.
pub const SCALE_MIN: f64 = 1e-6;
/// Smallest admissible `|1 - mu* rho_p|`.
pub const POLE_MIN: f64 = 1e-9;

/// Proxy parameters at one harmonic.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyParams {
    pub net: NetworkBlocks,
    pub rho: Vec<C64>,
    pub mc_aware: bool,
}

impl Borrow<NetworkBlocks> for ProxyParams {
    fn borrow(&self) -> &NetworkBlocks {
        &self.net
    }
}

impl ProxyParams {
    pub fn new(net: NetworkBlocks, rho: Vec<C64>, mc_aware: bool) -> Result<Self> {
        let (n_r, n_t, n_s) = (net.n_r(), net.n_t(), net.n_s());
        if net.a.shape() != (n_r, n_s) || net.b.shape() != (n_s, n_t) || net.gamma.shape() != (n_s, n_s) {
            return Err(Error::dim(format!(
                "inconsistent proxy blocks: H_d {:?}, A {:?}, Gamma {:?}, B {:?}",
                net.hd.shape(),
                net.a.shape(),
                net.gamma.shape(),
                net.b.shape()
            )));
        }
        if rho.is_empty() {
            return Err(Error::dim("proxy needs at least one load state"));
        }
        if !mc_aware && net.gamma.iter().any(|v| *v != ZERO) {
            return Err(Error::Invalid("coupling-unaware proxy must have Gamma = 0".into()));
        }
        Ok(Self { net, rho, mc_aware })
    }

    pub fn n_s(&self) -> usize {
        self.net.n_s()
    }

    /// Conventional channel for a 0-based static configuration.
    pub fn static_channel(&self, config: &[usize]) -> Result<CMatrix> {
        let rho: Vec<C64> = config.iter().map(|&s| self.rho[s]).collect();
        self.net.static_channel(&rho)
    }

    pub fn variant(&self) -> GaugeVariant {
        if self.mc_aware {
            GaugeVariant::Mobius
        } else {
            GaugeVariant::Affine
        }
    }

    /// Largest relative field-wise difference to `other`.
    pub fn field_distance(&self, other: &ProxyParams) -> f64 {
        let m = |a: &CMatrix, b: &CMatrix| {
            if a.is_empty() {
                0.0
            } else {
                (a - b).norm() / b.norm().max(1e-300)
            }
        };
        let rho_num: f64 = self.rho.iter().zip(&other.rho).map(|(a, b)| (a - b).norm_sqr()).sum();
        let rho_den: f64 = other.rho.iter().map(|b| b.norm_sqr()).sum();
        [
            m(&self.net.hd, &other.net.hd),
            m(&self.net.a, &other.net.a),
            m(&self.net.b, &other.net.b),
            if other.mc_aware {
                m(&self.net.gamma, &other.net.gamma)
            } else {
                0.0
            },
            (rho_num / rho_den.max(1e-300)).sqrt(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Per-harmonic proxy parameters over a retained grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxySet {
    grid: HarmonicGrid,
    params: Vec<ProxyParams>,
}

impl ProxySet {
    pub fn new(grid: HarmonicGrid, params: Vec<ProxyParams>) -> Result<Self> {
        if params.len() != grid.len() {
            return Err(Error::dim(format!(
                "{} proxy tuples for {} harmonics",
                params.len(),
                grid.len()
            )));
        }
        let first = &params[0];
        let shape = |p: &ProxyParams| (p.net.n_r(), p.net.n_t(), p.net.n_s(), p.rho.len(), p.mc_aware);
        if params.iter().any(|p| shape(p) != shape(first)) {
            return Err(Error::dim(
                "proxy tuples differ in shape or coupling flag across harmonics",
            ));
        }
        Ok(Self { grid, params })
    }

    pub fn grid(&self) -> &HarmonicGrid {
        &self.grid
    }

    pub fn params(&self) -> &[ProxyParams] {
        &self.params
    }

    pub fn at(&self, n: usize) -> &ProxyParams {
        &self.params[n]
    }

    pub fn mc_aware(&self) -> bool {
        self.params[0].mc_aware
    }

    pub fn n_states(&self) -> usize {
        self.params[0].rho.len()
    }

    pub fn n_s(&self) -> usize {
        self.params[0].n_s()
    }

    pub fn n_t(&self) -> usize {
        self.params[0].net.n_t()
    }

    pub fn n_r(&self) -> usize {
        self.params[0].net.n_r()
    }

    pub fn variant(&self) -> GaugeVariant {
        self.params[0].variant()
    }

    /// Applies one gauge per harmonic.
    pub fn gauged(&self, gauges: &[GaugeParams]) -> Result<ProxySet> {
        if gauges.len() != self.params.len() {
            return Err(Error::dim(format!(
                "{} gauges for {} harmonics",
                gauges.len(),
                self.params.len()
            )));
        }
        let params = self
            .params
            .iter()
            .zip(gauges)
            .map(|(p, g)| compose(p, g))
            .collect::<Result<Vec<_>>>()?;
        ProxySet::new(self.grid.clone(), params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaugeVariant {
    /// DS-CS-MO, for coupling-aware proxies.
    Mobius,
    /// DS-CS-AF, for coupling-unaware proxies.
    Affine,
}

impl GaugeVariant {
    pub fn for_coupling(mc_aware: bool) -> Self {
        if mc_aware {
            Self::Mobius
        } else {
            Self::Affine
        }
    }
}

/// Composite gauge coordinates `(d, gamma, mu)` or `(d, gamma, eta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeParams {
    pub d: Vec<C64>,
    pub gamma: C64,
    pub third: C64,
    pub variant: GaugeVariant,
}

impl GaugeParams {
    pub fn identity(n_s: usize, variant: GaugeVariant) -> Self {
        Self {
            d: vec![ONE; n_s],
            gamma: ONE,
            third: ZERO,
            variant,
        }
    }

    /// Number of real coordinates.
    pub fn real_dim(n_s: usize) -> usize {
        2 * (n_s + 2)
    }

    /// Real coordinates `[Re d_1, Im d_1, ..., Re gamma, Im gamma, Re third, Im third]`.
    pub fn to_real(&self, out: &mut Vec<f64>) {
        for v in self.d.iter().chain([&self.gamma, &self.third]) {
            out.push(v.re);
            out.push(v.im);
        }
    }

    pub fn from_real(x: &[f64], variant: GaugeVariant) -> Self {
        let n_s = x.len() / 2 - 2;
        let z = |k: usize| C64::new(x[2 * k], x[2 * k + 1]);
        Self {
            d: (0..n_s).map(z).collect(),
            gamma: z(n_s),
            third: z(n_s + 1),
            variant,
        }
    }
}

/// One failed admissibility constraint.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    VariantMismatch { gauge: GaugeVariant, mc_aware: bool },
    SingularScaling { element: usize, modulus: f64 },
    SingularComplexScale { modulus: f64 },
    MobiusOutsideDisk { modulus: f64 },
    SingularMobiusFactor { cond: f64 },
    LoadPole { state: usize, modulus: f64 },
    ElementCount { expected: usize, got: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::VariantMismatch { gauge, mc_aware } => {
                write!(f, "{gauge:?} gauge on proxy with mc_aware={mc_aware}")
            }
            Violation::SingularScaling { element, modulus } => {
                write!(f, "|d_{element}| = {modulus:.3e} below {SCALE_MIN:e}")
            }
            Violation::SingularComplexScale { modulus } => {
                write!(f, "|gamma| = {modulus:.3e} below {SCALE_MIN:e}")
            }
            Violation::MobiusOutsideDisk { modulus } => {
                write!(f, "|mu| = {modulus:.6} exceeds {MU_MAX}")
            }
            Violation::SingularMobiusFactor { cond } => {
                write!(f, "I - mu Gamma ill-conditioned (cond {cond:.3e})")
            }
            Violation::LoadPole { state, modulus } => {
                write!(f, "|1 - mu* rho_{state}| = {modulus:.3e} below {POLE_MIN:e}")
            }
            Violation::ElementCount { expected, got } => {
                write!(f, "gauge has {got} element scalings, proxy has {expected} elements")
            }
        }
    }
}

/// Structured result of an admissibility check.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdmissibilityReport {
    pub violations: Vec<Violation>,
}

impl AdmissibilityReport {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }

    fn into_result(self) -> Result<()> {
        if self.is_admissible() {
            Ok(())
        } else {
            Err(Error::InadmissibleGauge(self))
        }
    }
}

impl fmt::Display for AdmissibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "admissible");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

fn check_ds(d: &[C64], n_s: usize, report: &mut AdmissibilityReport) {
    if d.len() != n_s {
        report.violations.push(Violation::ElementCount {
            expected: n_s,
            got: d.len(),
        });
    }
    for (element, v) in d.iter().enumerate() {
        if !(v.norm() >= SCALE_MIN) {
            report.violations.push(Violation::SingularScaling {
                element,
                modulus: v.norm(),
            });
        }
    }
}

fn check_cs(gamma: C64, report: &mut AdmissibilityReport) {
    if !(gamma.norm() >= SCALE_MIN) {
        report
            .violations
            .push(Violation::SingularComplexScale { modulus: gamma.norm() });
    }
}

fn mobius_factor(gamma: &CMatrix, mu: C64) -> Result<CMatrix> {
    let n = gamma.nrows();
    let x = CMatrix::identity(n, n) - gamma * mu;
    let f = Factorized::new(x)?;
    Ok(f.solve(&CMatrix::identity(n, n)))
}

fn check_mobius(theta: &ProxyParams, mu: C64, report: &mut AdmissibilityReport) {
    if !(mu.norm() <= MU_MAX) {
        report
            .violations
            .push(Violation::MobiusOutsideDisk { modulus: mu.norm() });
    }
    if let Err(Error::IllConditioned { cond }) = mobius_factor(&theta.net.gamma, mu) {
        report.violations.push(Violation::SingularMobiusFactor { cond });
    }
    for (state, r) in theta.rho.iter().enumerate() {
        let m = (ONE - mu.conj() * r).norm();
        if !(m >= POLE_MIN) {
            report.violations.push(Violation::LoadPole { state, modulus: m });
        }
    }
}

/// Checks every constraint of the composite gauge along the DS-CS-third chain.
pub fn check_admissible(theta: &ProxyParams, phi: &GaugeParams) -> AdmissibilityReport {
    let mut report = AdmissibilityReport::default();
    if phi.variant != theta.variant() {
        report.violations.push(Violation::VariantMismatch {
            gauge: phi.variant,
            mc_aware: theta.mc_aware,
        });
        return report;
    }
    check_ds(&phi.d, theta.n_s(), &mut report);
    check_cs(phi.gamma, &mut report);
    if !report.is_admissible() {
        return report;
    }
    if phi.variant == GaugeVariant::Mobius {
        let scaled = scale_unchecked(&ds_unchecked(theta, &phi.d), phi.gamma);
        check_mobius(&scaled, phi.third, &mut report);
    }
    report
}

fn ds_unchecked(theta: &ProxyParams, d: &[C64]) -> ProxyParams {
    let net = &theta.net;
    let a = CMatrix::from_fn(net.a.nrows(), net.a.ncols(), |r, i| net.a[(r, i)] / d[i]);
    let b = CMatrix::from_fn(net.b.nrows(), net.b.ncols(), |i, c| d[i] * net.b[(i, c)]);
    let gamma = CMatrix::from_fn(net.gamma.nrows(), net.gamma.ncols(), |i, j| {
        d[i] * net.gamma[(i, j)] / d[j]
    });
    ProxyParams {
        net: NetworkBlocks {
            hd: net.hd.clone(),
            a,
            gamma,
            b,
        },
        rho: theta.rho.clone(),
        mc_aware: theta.mc_aware,
    }
}

fn scale_unchecked(theta: &ProxyParams, gamma: C64) -> ProxyParams {
    let inv = ONE / gamma;
    ProxyParams {
        net: NetworkBlocks {
            hd: theta.net.hd.clone(),
            a: &theta.net.a * inv,
            gamma: &theta.net.gamma * inv,
            b: theta.net.b.clone(),
        },
        rho: theta.rho.iter().map(|r| r * gamma).collect(),
        mc_aware: theta.mc_aware,
    }
}

/// Diagonal-similarity gauge.
pub fn apply_ds(theta: &ProxyParams, d: &[C64]) -> Result<ProxyParams> {
    let mut report = AdmissibilityReport::default();
    check_ds(d, theta.n_s(), &mut report);
    report.into_result()?;
    Ok(ds_unchecked(theta, d))
}

/// Complex-scaling gauge.
pub fn apply_cs(theta: &ProxyParams, gamma: C64) -> Result<ProxyParams> {
    let mut report = AdmissibilityReport::default();
    check_cs(gamma, &mut report);
    report.into_result()?;
    Ok(scale_unchecked(theta, gamma))
}

/// Moebius gauge; only defined for coupling-aware proxies.
pub fn apply_mobius(theta: &ProxyParams, mu: C64) -> Result<ProxyParams> {
    if !theta.mc_aware {
        return Err(Error::VariantMismatch(
            "Moebius gauge requires a coupling-aware proxy".into(),
        ));
    }
    let mut report = AdmissibilityReport::default();
    check_mobius(theta, mu, &mut report);
    report.into_result()?;
    let net = &theta.net;
    let f = mobius_factor(&net.gamma, mu)?;
    let k = (1.0 - mu.norm_sqr()).sqrt();
    let af = &net.a * &f;
    let fb = &f * &net.b;
    let n_s = theta.n_s();
    Ok(ProxyParams {
        net: NetworkBlocks {
            hd: &net.hd + &af * &net.b * mu,
            a: af * C64::new(k, 0.0),
            gamma: (&net.gamma - CMatrix::identity(n_s, n_s) * mu.conj()) * &f,
            b: fb * C64::new(k, 0.0),
        },
        rho: theta.rho.iter().map(|&r| mobius_map(r, mu)).collect(),
        mc_aware: true,
    })
}

/// Disk automorphism `(rho - mu) / (1 - mu* rho)`.
pub fn mobius_map(rho: C64, mu: C64) -> C64 {
    (rho - mu) / (ONE - mu.conj() * rho)
}

/// Affine-shift gauge; only defined for coupling-unaware proxies.
pub fn apply_affine(theta: &ProxyParams, eta: C64) -> Result<ProxyParams> {
    if theta.mc_aware {
        return Err(Error::VariantMismatch(
            "affine-shift gauge requires a coupling-unaware proxy".into(),
        ));
    }
    let net = &theta.net;
    Ok(ProxyParams {
        net: NetworkBlocks {
            hd: &net.hd - &net.a * &net.b * eta,
            a: net.a.clone(),
            gamma: net.gamma.clone(),
            b: net.b.clone(),
        },
        rho: theta.rho.iter().map(|r| r + eta).collect(),
        mc_aware: false,
    })
}

/// `g(theta; phi)`: DS, then CS, then MO or AF.
pub fn compose(theta: &ProxyParams, phi: &GaugeParams) -> Result<ProxyParams> {
    let report = check_admissible(theta, phi);
    report.into_result()?;
    let t = apply_cs(&apply_ds(theta, &phi.d)?, phi.gamma)?;
    match phi.variant {
        GaugeVariant::Mobius => apply_mobius(&t, phi.third),
        GaugeVariant::Affine => apply_affine(&t, phi.third),
    }
}

/// Random admissible gauge near the identity with perturbations of scale `spread`.
///
/// Every complex coordinate is perturbed by a circular Gaussian with standard
/// deviation `spread` per real part; the third coordinate is clipped radially into
/// `|.| <= 0.9` for the Moebius variant. Draws with too small a scaling are redrawn.
pub fn random_gauge<R: Rng + ?Sized>(rng: &mut R, variant: GaugeVariant, n_s: usize, spread: f64) -> GaugeParams {
    let draw = |rng: &mut R| -> C64 {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im) * spread
    };
    for _ in 0..64 {
        let d: Vec<C64> = (0..n_s).map(|_| ONE + draw(rng)).collect();
        let gamma = ONE + draw(rng);
        let mut third = draw(rng);
        if variant == GaugeVariant::Mobius && third.norm() > 0.9 {
            third *= 0.9 / third.norm();
        }
        let ok = d.iter().chain([&gamma]).all(|v| v.norm() >= 0.05);
        if ok {
            return GaugeParams {
                d,
                gamma,
                third,
                variant,
            };
        }
    }
    GaugeParams::identity(n_s, variant)
}

/// Intermediate values of a composite gauge evaluation, kept for the reverse pass.
pub(crate) struct ComposeTape {
    d: Vec<C64>,
    gamma: C64,
    third: C64,
    variant: GaugeVariant,
    a1: CMatrix,
    gamma1: CMatrix,
    rho0: Vec<C64>,
    a2: CMatrix,
    gamma2: CMatrix,
    b2: CMatrix,
    rho2: Vec<C64>,
    // Moebius only
    f: CMatrix,
    k: f64,
    af: CMatrix,
    fb: CMatrix,
    e: CMatrix,
    // affine only
    ab: CMatrix,
}

/// Adjoints (`dL/dRe + j dL/dIm`) of the gauged proxy fields.
pub(crate) struct ProxyAdjoint {
    pub hd: CMatrix,
    pub a: CMatrix,
    pub gamma: CMatrix,
    pub b: CMatrix,
    pub rho: Vec<C64>,
}

impl ProxyAdjoint {
    pub fn zeros(p: &ProxyParams) -> Self {
        let n = &p.net;
        Self {
            hd: CMatrix::zeros(n.hd.nrows(), n.hd.ncols()),
            a: CMatrix::zeros(n.a.nrows(), n.a.ncols()),
            gamma: CMatrix::zeros(n.gamma.nrows(), n.gamma.ncols()),
            b: CMatrix::zeros(n.b.nrows(), n.b.ncols()),
            rho: vec![ZERO; p.rho.len()],
        }
    }
}

fn inner(a: &CMatrix, b: &CMatrix) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Forward composite gauge, recording what the reverse pass needs. Admissibility is
/// the caller's responsibility.
pub(crate) fn compose_forward(theta: &ProxyParams, phi: &GaugeParams) -> Result<(ProxyParams, ComposeTape)> {
    let t1 = ds_unchecked(theta, &phi.d);
    let t2 = scale_unchecked(&t1, phi.gamma);
    let n_s = theta.n_s();
    let empty = CMatrix::zeros(0, 0);
    let mut tape = ComposeTape {
        d: phi.d.clone(),
        gamma: phi.gamma,
        third: phi.third,
        variant: phi.variant,
        a1: t1.net.a,
        gamma1: t1.net.gamma,
        rho0: theta.rho.clone(),
        a2: t2.net.a.clone(),
        gamma2: t2.net.gamma.clone(),
        b2: t2.net.b.clone(),
        rho2: t2.rho.clone(),
        f: empty.clone(),
        k: 1.0,
        af: empty.clone(),
        fb: empty.clone(),
        e: empty.clone(),
        ab: empty,
    };
    let out = match phi.variant {
        GaugeVariant::Mobius => {
            let mu = phi.third;
            let f = mobius_factor(&t2.net.gamma, mu)?;
            let k = (1.0 - mu.norm_sqr()).sqrt();
            let af = &t2.net.a * &f;
            let fb = &f * &t2.net.b;
            let e = &t2.net.gamma - CMatrix::identity(n_s, n_s) * mu.conj();
            let out = ProxyParams {
                net: NetworkBlocks {
                    hd: &t2.net.hd + &af * &t2.net.b * mu,
                    a: &af * C64::new(k, 0.0),
                    gamma: &e * &f,
                    b: &fb * C64::new(k, 0.0),
                },
                rho: t2.rho.iter().map(|&r| mobius_map(r, mu)).collect(),
                mc_aware: theta.mc_aware,
            };
            tape.f = f;
            tape.k = k;
            tape.af = af;
            tape.fb = fb;
            tape.e = e;
            out
        }
        GaugeVariant::Affine => {
            let eta = phi.third;
            let ab = &t2.net.a * &t2.net.b;
            let out = ProxyParams {
                net: NetworkBlocks {
                    hd: &t2.net.hd - &ab * eta,
                    a: t2.net.a.clone(),
                    gamma: t2.net.gamma.clone(),
                    b: t2.net.b.clone(),
                },
                rho: t2.rho.iter().map(|r| r + eta).collect(),
                mc_aware: theta.mc_aware,
            };
            tape.ab = ab;
            out
        }
    };
    Ok((out, tape))
}

/// Reverse pass of [`compose_forward`]: adjoints of `(d, gamma, third)`.
pub(crate) fn compose_backward(tape: &ComposeTape, adj: &ProxyAdjoint) -> GaugeParams {
    let n_s = tape.d.len();
    // third transformation
    let mut third_adj = ZERO;
    let (a2_adj, gamma2_adj, b2_adj, rho2_adj) = match tape.variant {
        GaugeVariant::Mobius => {
            let mu = tape.third;
            let k = tape.k;
            let kc = C64::new(k, 0.0);
            let f_h = tape.f.adjoint();
            let g = &tape.af * &tape.b2;
            third_adj += inner(&g, &adj.hd);
            let g_adj = &adj.hd * mu.conj();
            let af_adj = &adj.a * kc + &g_adj * tape.b2.adjoint();
            let k_adj = inner(&tape.af, &adj.a).re + inner(&tape.fb, &adj.b).re;
            let fb_adj = &adj.b * kc;
            let b2_adj = tape.af.adjoint() * &g_adj + &f_h * &fb_adj;
            let e_adj = &adj.gamma * &f_h;
            let f_adj = tape.e.adjoint() * &adj.gamma + tape.a2.adjoint() * &af_adj + &fb_adj * tape.b2.adjoint();
            let a2_adj = &af_adj * &f_h;
            let mut gamma2_adj = e_adj.clone();
            third_adj -= e_adj.diagonal().sum().conj();
            let x_adj = -(&f_h * &f_adj * &f_h);
            third_adj -= inner(&tape.gamma2, &x_adj);
            gamma2_adj -= &x_adj * mu.conj();
            if k > 0.0 {
                third_adj -= mu * (k_adj / k);
            }
            let s = 1.0 - mu.norm_sqr();
            let mut rho2_adj = vec![ZERO; tape.rho2.len()];
            for (p, (&r2, &ra)) in tape.rho2.iter().zip(&adj.rho).enumerate() {
                let den = ONE - mu.conj() * r2;
                let den2 = den * den;
                rho2_adj[p] = (C64::new(s, 0.0) / den2).conj() * ra;
                third_adj += (-ONE / den).conj() * ra + ra.conj() * ((r2 - mu) * r2 / den2);
            }
            (a2_adj, gamma2_adj, b2_adj, rho2_adj)
        }
        GaugeVariant::Affine => {
            let eta = tape.third;
            third_adj -= inner(&tape.ab, &adj.hd);
            third_adj += adj.rho.iter().sum::<C64>();
            let ab_adj = &adj.hd * (-eta.conj());
            let a2_adj = &adj.a + &ab_adj * tape.b2.adjoint();
            let b2_adj = &adj.b + tape.a2.adjoint() * &ab_adj;
            (a2_adj, adj.gamma.clone(), b2_adj, adj.rho.clone())
        }
    };
    // complex scaling
    let g = tape.gamma;
    let gc = g.conj();
    let mut gamma_adj = ZERO;
    let a1_adj = &a2_adj / gc;
    gamma_adj -= inner(&(&tape.a2 / g), &a2_adj);
    let gamma1_adj = &gamma2_adj / gc;
    gamma_adj -= inner(&(&tape.gamma2 / g), &gamma2_adj);
    gamma_adj += tape.rho0.iter().zip(&rho2_adj).map(|(r, a)| r.conj() * a).sum::<C64>();
    let b1_adj = b2_adj;
    // diagonal similarity; b2 = D B so B = D^{-1} b2
    let d = &tape.d;
    let mut d_adj = vec![ZERO; n_s];
    for i in 0..n_s {
        for r in 0..tape.a1.nrows() {
            d_adj[i] -= (tape.a1[(r, i)] / d[i]).conj() * a1_adj[(r, i)];
        }
        for c in 0..tape.b2.ncols() {
            let b = tape.b2[(i, c)] / d[i];
            d_adj[i] += b.conj() * b1_adj[(i, c)];
        }
    }
    for i in 0..n_s {
        for j in 0..n_s {
            let v = tape.gamma1[(i, j)];
            let a = gamma1_adj[(i, j)];
            d_adj[i] += (v / d[i]).conj() * a;
            d_adj[j] -= (v / d[j]).conj() * a;
        }
    }
    GaugeParams {
        d: d_adj,
        gamma: gamma_adj,
        third: third_adj,
        variant: tape.variant,
    }
}

/// `|| H(c; a) - H(c; b) || / || H(c; b) ||`, maximized over the given static configurations.
pub fn static_channel_mismatch(a: &ProxyParams, b: &ProxyParams, configs: &[Vec<usize>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for c in configs {
        let ha = a.static_channel(c)?;
        let hb = b.static_channel(c)?;
        worst = worst.max(linalg::rel_diff(&ha, &hb));
    }
    Ok(worst)
}

impl GaugeVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mobius => "mobius",
            Self::Affine => "affine",
        }
    }
}

impl GaugeParams {
    pub fn to_json(&self) -> Value {
        json::object(vec![
            ("variant", Value::from(self.variant.name())),
            ("d", json::cvec(&self.d)),
            ("gamma", json::complex(self.gamma)),
            ("third", json::complex(self.third)),
        ])
    }

    pub fn from_json(node: &Node, n_s: usize) -> Result<Self> {
        node.only_keys(&["variant", "d", "gamma", "third"])?;
        let vn = node.key("variant")?;
        let variant = match vn.str()? {
            "mobius" => GaugeVariant::Mobius,
            "affine" => GaugeVariant::Affine,
            v => return Err(vn.error(format!("unknown gauge variant `{v}`"))),
        };
        let dn = node.key("d")?;
        let d = dn.cvec()?;
        if d.len() != n_s {
            return Err(dn.error(format!("expected {n_s} entries, found {}", d.len())));
        }
        Ok(Self {
            d,
            gamma: node.key("gamma")?.complex()?,
            third: node.key("third")?.complex()?,
            variant,
        })
    }
}

impl ProxySet {
    /// JSON layout: `grid`, `mc_aware` and per-harmonic `params` objects with the
    /// fields `hd`, `a`, `gamma`, `b` (row-major complex matrices) and `rho`.
    pub fn to_json(&self) -> Value {
        let params = self
            .params
            .iter()
            .map(|p| {
                json::object(vec![
                    ("hd", json::cmatrix(&p.net.hd)),
                    ("a", json::cmatrix(&p.net.a)),
                    ("gamma", json::cmatrix(&p.net.gamma)),
                    ("b", json::cmatrix(&p.net.b)),
                    ("rho", json::cvec(&p.rho)),
                ])
            })
            .collect();
        json::object(vec![
            ("grid", json::grid(&self.grid)),
            ("mc_aware", self.mc_aware().into()),
            ("params", Value::Array(params)),
        ])
    }

    pub fn from_json(node: &Node) -> Result<Self> {
        node.only_keys(&["grid", "mc_aware", "params"])?;
        let grid = node.key("grid")?.grid()?;
        let mc_aware = node.key("mc_aware")?.bool()?;
        let pn = node.key("params")?;
        let items = pn.items()?;
        if items.len() != grid.len() {
            return Err(pn.error(format!("expected {} harmonics, found {}", grid.len(), items.len())));
        }
        let mut params = Vec::with_capacity(items.len());
        for it in &items {
            it.only_keys(&["hd", "a", "gamma", "b", "rho"])?;
            let shape = |key: &str| -> Result<(usize, usize)> {
                let rows = it.key(key)?.items()?;
                let cols = match rows.first() {
                    Some(r) => r.items()?.len(),
                    None => 0,
                };
                Ok((rows.len(), cols))
            };
            let (n_r, n_t) = shape("hd")?;
            let (_, n_s) = shape("a")?;
            let net = NetworkBlocks {
                hd: it.key("hd")?.cmatrix(n_r, n_t)?,
                a: it.key("a")?.cmatrix(n_r, n_s)?,
                gamma: it.key("gamma")?.cmatrix(n_s, n_s)?,
                b: it.key("b")?.cmatrix(n_s, n_t)?,
            };
            let rho = it.key("rho")?.cvec()?;
            params.push(ProxyParams::new(net, rho, mc_aware).map_err(|e| it.error(e.to_string()))?);
        }
        ProxySet::new(grid, params).map_err(|e| pn.error(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        json::write_file(path, &self.to_json())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let v = json::read_file(path)?;
        Self::from_json(&Node::root(&v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn cm(r: usize, k: usize, scale: f64, rng: &mut impl Rng) -> CMatrix {
        CMatrix::from_fn(r, k, |_, _| {
            c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * scale
        })
    }

    fn random_proxy(mc_aware: bool, rng: &mut impl Rng) -> ProxyParams {
        let (n_r, n_t, n_s, p) = (2, 3, 4, 3);
        let gamma = if mc_aware {
            cm(n_s, n_s, 0.3, rng)
        } else {
            CMatrix::zeros(n_s, n_s)
        };
        let rho = (0..p)
            .map(|_| C64::from_polar(0.8, rng.random::<f64>() * std::f64::consts::TAU))
            .collect();
        ProxyParams::new(
            NetworkBlocks {
                hd: cm(n_r, n_t, 1.0, rng),
                a: cm(n_r, n_s, 1.0, rng),
                gamma,
                b: cm(n_s, n_t, 1.0, rng),
            },
            rho,
            mc_aware,
        )
        .unwrap()
    }

    fn configs(rng: &mut impl Rng) -> Vec<Vec<usize>> {
        (0..20)
            .map(|_| (0..4).map(|_| rng.random_range(0..3)).collect())
            .collect()
    }

    #[test]
    fn identity_gauges_change_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mc in [true, false] {
            let t = random_proxy(mc, &mut rng);
            assert_eq!(apply_ds(&t, &[ONE; 4]).unwrap(), t);
            assert_eq!(apply_cs(&t, ONE).unwrap(), t);
            let g = GaugeParams::identity(4, t.variant());
            assert!(compose(&t, &g).unwrap().field_distance(&t) < 1e-15);
        }
        let t = random_proxy(true, &mut rng);
        assert!(apply_mobius(&t, ZERO).unwrap().field_distance(&t) < 1e-15);
        let t = random_proxy(false, &mut rng);
        assert_eq!(apply_affine(&t, ZERO).unwrap(), t);
    }

    #[test]
    fn ds_scales_one_element() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_proxy(true, &mut rng);
        let out = apply_ds(&t, &[c(2.0, 0.0), ONE, ONE, ONE]).unwrap();
        for r in 0..2 {
            assert_eq!(out.net.a[(r, 0)], t.net.a[(r, 0)] / 2.0);
        }
        for k in 0..3 {
            assert_eq!(out.net.b[(0, k)], t.net.b[(0, k)] * 2.0);
        }
        assert!(matches!(
            apply_ds(&t, &[ZERO, ONE, ONE, ONE]),
            Err(Error::InadmissibleGauge(_))
        ));
    }

    #[test]
    fn cs_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_proxy(true, &mut rng);
        let g = c(0.0, 2.0);
        let out = apply_cs(&t, g).unwrap();
        for (a, b) in out.rho.iter().zip(&t.rho) {
            assert!((a.norm() - 2.0 * b.norm()).abs() < 1e-15);
        }
        assert!((out.net.a.clone() - &t.net.a / g).norm() < 1e-15);
        assert!(apply_cs(&t, ZERO).is_err());
    }

    #[test]
    fn mobius_maps_mu_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = random_proxy(true, &mut rng);
        t.rho[0] = c(0.5, 0.0);
        let out = apply_mobius(&t, c(0.5, 0.0)).unwrap();
        assert!(out.rho[0].norm() < 1e-16);
        assert!((0.75f64.sqrt() - 0.86603).abs() < 1e-5);
        for r in &out.rho {
            assert!(r.norm() < 1.0);
        }
    }

    #[test]
    fn mobius_preconditions_are_distinct_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_proxy(true, &mut rng);
        let err = apply_mobius(&t, c(0.995, 0.0)).unwrap_err();
        match err {
            Error::InadmissibleGauge(r) => {
                assert!(matches!(r.violations[0], Violation::MobiusOutsideDisk { .. }))
            }
            e => panic!("{e}"),
        }
        let mut pole = t.clone();
        pole.rho[1] = ONE / c(0.5, 0.0).conj();
        let err = apply_mobius(&pole, c(0.5, 0.0)).unwrap_err();
        assert!(
            matches!(err, Error::InadmissibleGauge(r) if matches!(r.violations[0], Violation::LoadPole { state: 1, .. }))
        );
        let mut sing = t.clone();
        sing.net.gamma = CMatrix::identity(4, 4) * c(2.0, 0.0);
        let err = apply_mobius(&sing, c(0.5, 0.0)).unwrap_err();
        assert!(
            matches!(err, Error::InadmissibleGauge(r) if matches!(r.violations[0], Violation::SingularMobiusFactor { .. }))
        );
        let u = random_proxy(false, &mut rng);
        assert!(matches!(apply_mobius(&u, c(0.1, 0.0)), Err(Error::VariantMismatch(_))));
        assert!(matches!(apply_affine(&t, c(0.1, 0.0)), Err(Error::VariantMismatch(_))));
    }

    #[test]
    fn affine_shift_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_proxy(false, &mut rng);
        let out = apply_affine(&t, c(0.1, 0.0)).unwrap();
        for (a, b) in out.rho.iter().zip(&t.rho) {
            assert!((a - b - c(0.1, 0.0)).norm() < 1e-15);
        }
        let expect = &t.net.hd - &t.net.a * &t.net.b * c(0.1, 0.0);
        assert!((out.net.hd - expect).norm() < 1e-15);
        assert!(out.net.gamma.iter().all(|v| *v == ZERO));
    }

    #[test]
    fn mobius_on_uncoupled_proxy_creates_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = random_proxy(true, &mut rng);
        t.net.gamma.fill(ZERO);
        let mu = c(0.2, -0.1);
        let out = apply_mobius(&t, mu).unwrap();
        let expect = CMatrix::identity(4, 4) * (-mu.conj());
        assert!((out.net.gamma - expect).norm() < 1e-15);
    }

    #[test]
    fn every_gauge_preserves_static_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let cfg = configs(&mut rng);
            for mc in [true, false] {
                let t = random_proxy(mc, &mut rng);
                let g = random_gauge(&mut rng, t.variant(), 4, 0.3);
                let candidates = [
                    apply_ds(&t, &g.d).unwrap(),
                    apply_cs(&t, g.gamma).unwrap(),
                    if mc {
                        apply_mobius(&t, g.third).unwrap()
                    } else {
                        apply_affine(&t, g.third).unwrap()
                    },
                    compose(&t, &g).unwrap(),
                ];
                for out in &candidates {
                    assert!(static_channel_mismatch(out, &t, &cfg).unwrap() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ds_and_cs_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_proxy(true, &mut rng);
        let g = random_gauge(&mut rng, GaugeVariant::Mobius, 4, 0.4);
        let x = apply_cs(&apply_ds(&t, &g.d).unwrap(), g.gamma).unwrap();
        let y = apply_ds(&apply_cs(&t, g.gamma).unwrap(), &g.d).unwrap();
        assert!(x.field_distance(&y) < 1e-15);
    }

    #[test]
    fn composition_order_matters_but_channels_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_proxy(true, &mut rng);
        let g = random_gauge(&mut rng, GaugeVariant::Mobius, 4, 0.3);
        assert!(g.third.norm() > 0.0);
        let fwd = compose(&t, &g).unwrap();
        let rev = apply_ds(&apply_cs(&apply_mobius(&t, g.third).unwrap(), g.gamma).unwrap(), &g.d).unwrap();
        assert!(fwd.field_distance(&rev) > 1e-6);
        let cfg = configs(&mut rng);
        assert!(static_channel_mismatch(&fwd, &rev, &cfg).unwrap() < 1e-9);
    }

    #[test]
    fn scalar_mobius_round_trip() {
        // M_{-mu} inverts M_mu on the disk
        let mu = c(0.3, -0.45);
        for k in 0..16 {
            let r = C64::from_polar(0.9, k as f64 * 0.4);
            let back = mobius_map(mobius_map(r, mu), -mu);
            assert!((back - r).norm() < 1e-14);
        }
    }

    #[test]
    fn random_gauge_contract() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(
            random_gauge(&mut a, GaugeVariant::Mobius, 5, 0.3),
            random_gauge(&mut b, GaugeVariant::Mobius, 5, 0.3)
        );
        assert_eq!(
            random_gauge(&mut a, GaugeVariant::Mobius, 5, 0.0),
            GaugeParams::identity(5, GaugeVariant::Mobius)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let g = random_gauge(&mut rng, GaugeVariant::Mobius, 3, 0.3);
            assert!(g.third.norm() < 1.0);
        }
        for _ in 0..50 {
            let g = random_gauge(&mut rng, GaugeVariant::Mobius, 4, 0.3);
            let t = random_proxy(true, &mut rng);
            assert!(check_admissible(&t, &g).is_admissible());
        }
    }

    #[test]
    fn tape_forward_matches_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for mc in [true, false] {
            let t = random_proxy(mc, &mut rng);
            let g = random_gauge(&mut rng, t.variant(), 4, 0.3);
            let (out, _) = compose_forward(&t, &g).unwrap();
            assert!(out.field_distance(&compose(&t, &g).unwrap()) < 1e-14);
        }
    }

    #[test]
    fn reverse_pass_matches_finite_differences() {
        // loss = Re <W, fields> for random weights W; check every gauge coordinate
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for mc in [true, false] {
            let t = random_proxy(mc, &mut rng);
            let g = random_gauge(&mut rng, t.variant(), 4, 0.3);
            let w = {
                let mut adj = ProxyAdjoint::zeros(&t);
                adj.hd = cm(2, 3, 1.0, &mut rng);
                adj.a = cm(2, 4, 1.0, &mut rng);
                adj.b = cm(4, 3, 1.0, &mut rng);
                if mc {
                    adj.gamma = cm(4, 4, 1.0, &mut rng);
                }
                adj.rho = (0..3).map(|_| c(rng.random(), rng.random())).collect();
                adj
            };
            let loss = |x: &[f64]| {
                let phi = GaugeParams::from_real(x, t.variant());
                let (o, _) = compose_forward(&t, &phi).unwrap();
                let m = |a: &CMatrix, b: &CMatrix| a.iter().zip(b.iter()).map(|(u, v)| (u.conj() * v).re).sum::<f64>();
                m(&w.hd, &o.net.hd)
                    + m(&w.a, &o.net.a)
                    + m(&w.b, &o.net.b)
                    + m(&w.gamma, &o.net.gamma)
                    + w.rho.iter().zip(&o.rho).map(|(u, v)| (u.conj() * v).re).sum::<f64>()
            };
            let (_, tape) = compose_forward(&t, &g).unwrap();
            let grad = compose_backward(&tape, &w);
            let mut analytic = Vec::new();
            grad.to_real(&mut analytic);
            let mut x = Vec::new();
            g.to_real(&mut x);
            for k in 0..x.len() {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!(
                    (fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "mc={mc} coord {k}: fd {fd} analytic {}",
                    analytic[k]
                );
            }
        }
    }
}
