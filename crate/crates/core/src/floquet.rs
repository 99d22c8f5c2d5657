//! Time-Floquet description of a periodically modulated RIS.
//!
//! The static network is linear and time invariant, so its Floquet scattering
//! matrix is block diagonal over harmonics. The tunable loads are modulated slot by
//! slot; their Floquet matrix couples every pair of harmonics but each block is
//! diagonal over elements. The end-to-end channel is obtained from the resolvent of
//! the `|H| N_S` dimensional load/RIS interaction without ever forming the full
//! `|H| N` network matrix.
//!
//! Stacked vectors and matrices are harmonic-major and port-minor: entry
//! `n * ports + p` belongs to harmonic position `n` and port `p`.

use std::borrow::Borrow;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{HarmonicGrid, PortPartition};
use crate::linalg::{self, CMatrix, CVector, Factorized, C64, ONE, ZERO};

/// Reflection coefficients `rho[h][p]` of the `P` load states at every grid harmonic.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSet {
    grid: HarmonicGrid,
    rho: Vec<Vec<C64>>,
}

impl LoadSet {
    pub fn new(grid: HarmonicGrid, rho: Vec<Vec<C64>>) -> Result<Self> {
        if rho.len() != grid.len() {
            return Err(Error::dim(format!(
                "load set has {} harmonics, grid has {}",
                rho.len(),
                grid.len()
            )));
        }
        let p = rho.first().map_or(0, Vec::len);
        if p == 0 || rho.iter().any(|r| r.len() != p) {
            return Err(Error::dim(
                "every harmonic needs the same non-zero number of load states",
            ));
        }
        for (n, row) in rho.iter().enumerate() {
            for (s, v) in row.iter().enumerate() {
                if !(v.norm() <= 1.0 + 1e-12) {
                    return Err(Error::Invalid(format!(
                        "load state {} at harmonic {} is not passive (|rho| = {})",
                        s + 1,
                        grid.harmonics()[n],
                        v.norm()
                    )));
                }
            }
        }
        Ok(Self { grid, rho })
    }

    pub fn grid(&self) -> &HarmonicGrid {
        &self.grid
    }

    pub fn n_states(&self) -> usize {
        self.rho[0].len()
    }

    /// Reflection coefficients at harmonic position `n`.
    pub fn at(&self, n: usize) -> &[C64] {
        &self.rho[n]
    }

    pub fn rows(&self) -> &[Vec<C64>] {
        &self.rho
    }

    pub fn truncate(&self, retained: &HarmonicGrid) -> Result<Self> {
        let pos = self.grid.positions_of(retained)?;
        Ok(Self {
            grid: retained.clone(),
            rho: pos.iter().map(|&n| self.rho[n].clone()).collect(),
        })
    }
}

/// Slot-wise load states (0-based, `N_S x Q`, row-major) plus per-element control delays.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationPattern {
    n_s: usize,
    q: usize,
    states: Vec<usize>,
    delays: Vec<f64>,
}

impl ModulationPattern {
    /// `rows[i][q]` is the 0-based state of element `i` in slot `q`.
    pub fn new(rows: &[Vec<usize>], delays: Vec<f64>) -> Result<Self> {
        let n_s = rows.len();
        let q = rows.first().map_or(0, Vec::len);
        if n_s == 0 || q == 0 || rows.iter().any(|r| r.len() != q) {
            return Err(Error::dim("pattern must be a non-empty N_S x Q matrix"));
        }
        if delays.len() != n_s {
            return Err(Error::dim(format!(
                "pattern has {n_s} elements but {} delays",
                delays.len()
            )));
        }
        Ok(Self {
            n_s,
            q,
            states: rows.concat(),
            delays,
        })
    }

    /// Pattern with zero control delays.
    pub fn undelayed(rows: &[Vec<usize>]) -> Result<Self> {
        Self::new(rows, vec![0.0; rows.len()])
    }

    /// Conventional (Q = 1) configuration.
    pub fn static_config(states: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<usize>> = states.iter().map(|&s| vec![s]).collect();
        Self::undelayed(&rows)
    }

    pub(crate) fn from_flat(n_s: usize, q: usize, states: Vec<usize>) -> Self {
        debug_assert_eq!(states.len(), n_s * q);
        Self {
            n_s,
            q,
            states,
            delays: vec![0.0; n_s],
        }
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn slots(&self) -> usize {
        self.q
    }

    pub fn state(&self, element: usize, slot: usize) -> usize {
        self.states[element * self.q + slot]
    }

    pub(crate) fn set_state(&mut self, element: usize, slot: usize, state: usize) {
        self.states[element * self.q + slot] = state;
    }

    pub fn row(&self, element: usize) -> &[usize] {
        &self.states[element * self.q..(element + 1) * self.q]
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.n_s).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    pub fn with_delays(mut self, delays: &[f64]) -> Result<Self> {
        if delays.len() != self.n_s {
            return Err(Error::dim(format!(
                "pattern has {} elements but {} delays",
                self.n_s,
                delays.len()
            )));
        }
        self.delays = delays.to_vec();
        Ok(self)
    }

    pub fn without_delays(&self) -> Self {
        Self {
            delays: vec![0.0; self.n_s],
            ..self.clone()
        }
    }

    pub fn validate(&self, n_states: usize, n_s: usize, period: f64) -> Result<()> {
        if self.n_s != n_s {
            return Err(Error::dim(format!(
                "pattern has {} elements, network has {n_s}",
                self.n_s
            )));
        }
        if let Some(&s) = self.states.iter().find(|&&s| s >= n_states) {
            return Err(Error::Invalid(format!(
                "state index {} exceeds the {n_states} available load states",
                s + 1
            )));
        }
        if let Some(t) = self.delays.iter().find(|t| !(**t >= 0.0 && **t < period)) {
            return Err(Error::Invalid(format!("control delay {t} s outside [0, {period})")));
        }
        Ok(())
    }
}

/// Per-slot weights `w_q(dh) = (1/T) * int_slot exp(-j 2 pi dh t / T) dt`.
///
/// The antiderivative gives `(e^{-j 2 pi dh (q-1)/Q} - e^{-j 2 pi dh q/Q}) / (j 2 pi dh)`;
/// at `dh = 0` the removable singularity takes the limit `1/Q`.
pub fn slot_weights(q: usize, dh: i32) -> Vec<C64> {
    if dh == 0 {
        return vec![C64::new(1.0 / q as f64, 0.0); q];
    }
    let denom = C64::new(0.0, 2.0 * PI * dh as f64);
    // phase at slot boundary s, reduced mod Q so boundaries on the unit root are exact
    let boundary = |s: usize| {
        let k = (dh as i64 * s as i64).rem_euclid(q as i64);
        if k == 0 {
            ONE
        } else {
            C64::from_polar(1.0, -2.0 * PI * k as f64 / q as f64)
        }
    };
    (0..q).map(|s| (boundary(s) - boundary(s + 1)) / denom).collect()
}

/// Delay phase `exp(-j 2 pi dh tau / T)`.
fn delay_phase(dh: i32, tau: f64, period: f64) -> C64 {
    C64::from_polar(1.0, -2.0 * PI * dh as f64 * tau / period)
}

/// Fourier coefficient `phi_i^{(h_n, h_m)}` of one element's periodic reflection coefficient.
///
/// `states` are the element's 0-based slot states and `tau` its control delay.
pub fn fourier_load_coefficient(
    states: &[usize],
    tau: f64,
    loads: &LoadSet,
    h_n: i32,
    h_m: i32,
    grid: &HarmonicGrid,
) -> Result<C64> {
    grid.require_index(h_n)?;
    grid.require_index(h_m)?;
    let m = loads.grid().require_index(h_m)?;
    let rho = loads.at(m);
    if states.is_empty() {
        return Err(Error::dim("element has no slots"));
    }
    if let Some(&s) = states.iter().find(|&&s| s >= rho.len()) {
        return Err(Error::Invalid(format!("state index {} out of range", s + 1)));
    }
    let dh = h_n - h_m;
    let w = slot_weights(states.len(), dh);
    let sum: C64 = states.iter().zip(&w).map(|(&s, &wq)| rho[s] * wq).sum();
    Ok(delay_phase(dh, tau, grid.period()) * sum)
}

/// Floquet scattering matrix of the load subsystem, stored as the diagonals of its
/// `|H| x |H|` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FloquetLoadScatter {
    n_s: usize,
    nh: usize,
    entries: Vec<C64>,
}

impl FloquetLoadScatter {
    pub fn zeros(nh: usize, n_s: usize) -> Self {
        Self {
            n_s,
            nh,
            entries: vec![ZERO; nh * nh * n_s],
        }
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn n_harmonics(&self) -> usize {
        self.nh
    }

    /// Diagonal of block `(out, in)` by harmonic position.
    pub fn block(&self, out: usize, inp: usize) -> &[C64] {
        let start = (out * self.nh + inp) * self.n_s;
        &self.entries[start..start + self.n_s]
    }

    pub(crate) fn block_mut(&mut self, out: usize, inp: usize) -> &mut [C64] {
        let start = (out * self.nh + inp) * self.n_s;
        &mut self.entries[start..start + self.n_s]
    }

    /// Dense `|H| N_S` square matrix.
    pub fn to_dense(&self) -> CMatrix {
        let n = self.nh * self.n_s;
        let mut m = CMatrix::zeros(n, n);
        for a in 0..self.nh {
            for b in 0..self.nh {
                for (i, v) in self.block(a, b).iter().enumerate() {
                    m[(a * self.n_s + i, b * self.n_s + i)] = *v;
                }
            }
        }
        m
    }
}

/// Builds the load Floquet matrix of `pattern` over `grid`.
pub fn assemble_phi(pattern: &ModulationPattern, loads: &LoadSet, grid: &HarmonicGrid) -> Result<FloquetLoadScatter> {
    let pos = loads.grid().positions_of(grid)?;
    pattern.validate(loads.n_states(), pattern.n_s(), grid.period())?;
    let rho: Vec<&[C64]> = pos.iter().map(|&p| loads.at(p)).collect();
    Ok(assemble_from_rho(pattern, &rho, grid))
}

/// Same as [`assemble_phi`] with per-harmonic coefficients given directly (no validation).
pub(crate) fn assemble_from_rho<R: AsRef<[C64]>>(
    pattern: &ModulationPattern,
    rho: &[R],
    grid: &HarmonicGrid,
) -> FloquetLoadScatter {
    let nh = grid.len();
    let n_s = pattern.n_s();
    let h = grid.harmonics();
    let weights = WeightTable::new(grid, pattern.slots());
    let mut phi = FloquetLoadScatter::zeros(nh, n_s);
    for out in 0..nh {
        for inp in 0..nh {
            let dh = h[out] - h[inp];
            let w = weights.get(dh);
            let r = rho[inp].as_ref();
            let block = phi.block_mut(out, inp);
            for (i, slot) in block.iter_mut().enumerate() {
                let sum: C64 = pattern.row(i).iter().zip(w).map(|(&s, &wq)| r[s] * wq).sum();
                let tau = pattern.delays()[i];
                *slot = if tau == 0.0 || dh == 0 {
                    sum
                } else {
                    delay_phase(dh, tau, grid.period()) * sum
                };
            }
        }
    }
    phi
}

/// Slot weights for every harmonic offset of a grid.
pub(crate) struct WeightTable {
    span: i32,
    table: Vec<Vec<C64>>,
}

impl WeightTable {
    pub(crate) fn new(grid: &HarmonicGrid, q: usize) -> Self {
        let h = grid.harmonics();
        let span = h[h.len() - 1] - h[0];
        let table = (-span..=span).map(|dh| slot_weights(q, dh)).collect();
        Self { span, table }
    }

    pub(crate) fn get(&self, dh: i32) -> &[C64] {
        &self.table[(dh + self.span) as usize]
    }
}

/// Per-harmonic partition blocks of a static network: `H_d = S_RT`, `A = S_RS`,
/// `Gamma = S_SS`, `B = S_ST`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBlocks {
    pub hd: CMatrix,
    pub a: CMatrix,
    pub gamma: CMatrix,
    pub b: CMatrix,
}

impl NetworkBlocks {
    pub fn n_t(&self) -> usize {
        self.hd.ncols()
    }

    pub fn n_r(&self) -> usize {
        self.hd.nrows()
    }

    pub fn n_s(&self) -> usize {
        self.gamma.nrows()
    }

    /// Conventional single-harmonic channel `H_d + A (diag(rho)^{-1} - Gamma)^{-1} B`,
    /// evaluated as `H_d + A (I - diag(rho) Gamma)^{-1} diag(rho) B`.
    pub fn static_channel(&self, rho: &[C64]) -> Result<CMatrix> {
        let n_s = self.n_s();
        let x = CMatrix::from_fn(n_s, n_s, |i, j| {
            let id = if i == j { ONE } else { ZERO };
            id - rho[i] * self.gamma[(i, j)]
        });
        let mut z = CMatrix::from_fn(n_s, self.n_t(), |i, t| rho[i] * self.b[(i, t)]);
        Factorized::new(x)?.solve_mut(&mut z);
        Ok(&self.hd + &self.a * z)
    }
}

/// Scattering matrices of the static subsystem at every grid harmonic.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticScatterModel {
    grid: HarmonicGrid,
    partition: PortPartition,
    matrices: Vec<CMatrix>,
    reciprocal: bool,
}

/// Reference impedance of every port.
pub const REFERENCE_IMPEDANCE_OHM: f64 = 50.0;

/// Singular-value slack tolerated when checking passivity.
pub const PASSIVITY_TOL: f64 = 1e-9;

impl StaticScatterModel {
    pub fn new(grid: HarmonicGrid, partition: PortPartition, matrices: Vec<CMatrix>, reciprocal: bool) -> Result<Self> {
        Self::with_passivity_limit(grid, partition, matrices, reciprocal, 1.0 + PASSIVITY_TOL)
    }

    pub(crate) fn with_passivity_limit(
        grid: HarmonicGrid,
        partition: PortPartition,
        matrices: Vec<CMatrix>,
        reciprocal: bool,
        sigma_limit: f64,
    ) -> Result<Self> {
        if matrices.len() != grid.len() {
            return Err(Error::dim(format!(
                "{} scattering matrices for {} harmonics",
                matrices.len(),
                grid.len()
            )));
        }
        let n = partition.n_ports();
        for (k, s) in matrices.iter().enumerate() {
            let h = grid.harmonics()[k];
            if s.nrows() != n || s.ncols() != n {
                return Err(Error::dim(format!(
                    "S at harmonic {h} is {}x{}, expected {n}x{n}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            let sigma = linalg::spectral_norm(s);
            if sigma > sigma_limit {
                return Err(Error::Invalid(format!(
                    "S at harmonic {h} is not passive (largest singular value {sigma})"
                )));
            }
            if reciprocal && linalg::rel_diff(&s.transpose(), s) > 1e-12 {
                return Err(Error::Invalid(format!("S at harmonic {h} is not reciprocal")));
            }
        }
        Ok(Self {
            grid,
            partition,
            matrices,
            reciprocal,
        })
    }

    pub fn grid(&self) -> &HarmonicGrid {
        &self.grid
    }

    pub fn partition(&self) -> &PortPartition {
        &self.partition
    }

    pub fn matrices(&self) -> &[CMatrix] {
        &self.matrices
    }

    pub fn is_reciprocal(&self) -> bool {
        self.reciprocal
    }

    /// Partition blocks at harmonic position `n`; `mc_aware = false` zeroes `S_SS`.
    pub fn blocks(&self, n: usize, mc_aware: bool) -> NetworkBlocks {
        let s = &self.matrices[n];
        let p = &self.partition;
        let gamma = if mc_aware {
            linalg::select(s, &p.ris, &p.ris)
        } else {
            CMatrix::zeros(p.n_s(), p.n_s())
        };
        NetworkBlocks {
            hd: linalg::select(s, &p.rx, &p.tx),
            a: linalg::select(s, &p.rx, &p.ris),
            gamma,
            b: linalg::select(s, &p.ris, &p.tx),
        }
    }

    pub fn all_blocks(&self, mc_aware: bool) -> Vec<NetworkBlocks> {
        (0..self.grid.len()).map(|n| self.blocks(n, mc_aware)).collect()
    }

    pub fn truncate(&self, retained: &HarmonicGrid) -> Result<Self> {
        let pos = self.grid.positions_of(retained)?;
        Ok(Self {
            grid: retained.clone(),
            partition: self.partition.clone(),
            matrices: pos.iter().map(|&n| self.matrices[n].clone()).collect(),
            reciprocal: self.reciprocal,
        })
    }
}

/// Multi-harmonic end-to-end channel `b = H a`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloquetChannel {
    grid: HarmonicGrid,
    n_r: usize,
    n_t: usize,
    matrix: CMatrix,
}

impl FloquetChannel {
    pub fn new(grid: HarmonicGrid, n_r: usize, n_t: usize, matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != grid.len() * n_r || matrix.ncols() != grid.len() * n_t {
            return Err(Error::dim(format!(
                "channel matrix is {}x{}, expected {}x{}",
                matrix.nrows(),
                matrix.ncols(),
                grid.len() * n_r,
                grid.len() * n_t
            )));
        }
        Ok(Self { grid, n_r, n_t, matrix })
    }

    pub fn grid(&self) -> &HarmonicGrid {
        &self.grid
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    /// Block mapping input harmonic `h_in` to output harmonic `h_out`.
    pub fn block(&self, h_out: i32, h_in: i32) -> Result<CMatrix> {
        let o = self.grid.require_index(h_out)?;
        let i = self.grid.require_index(h_in)?;
        Ok(self.block_at(o, i))
    }

    pub fn block_at(&self, out: usize, inp: usize) -> CMatrix {
        self.matrix
            .view((out * self.n_r, inp * self.n_t), (self.n_r, self.n_t))
            .into_owned()
    }

    /// Output wavefront for a stacked input wavefront.
    pub fn apply(&self, a: &CVector) -> Result<CVector> {
        if a.len() != self.matrix.ncols() {
            return Err(Error::dim(format!(
                "input wavefront has length {}, expected {}",
                a.len(),
                self.matrix.ncols()
            )));
        }
        Ok(&self.matrix * a)
    }

    pub fn truncate(&self, retained: &HarmonicGrid) -> Result<Self> {
        let pos = self.grid.positions_of(retained)?;
        let rows = stacked_indices(&pos, self.n_r);
        let cols = stacked_indices(&pos, self.n_t);
        Ok(Self {
            grid: retained.clone(),
            n_r: self.n_r,
            n_t: self.n_t,
            matrix: linalg::select(&self.matrix, &rows, &cols),
        })
    }

    pub fn is_block_diagonal(&self) -> bool {
        let nh = self.grid.len();
        (0..nh).all(|o| {
            (0..nh)
                .filter(|&i| i != o)
                .all(|i| self.block_at(o, i).iter().all(|v| *v == ZERO))
        })
    }
}

pub(crate) fn stacked_indices(harmonic_positions: &[usize], ports: usize) -> Vec<usize> {
    harmonic_positions
        .iter()
        .flat_map(|&n| (0..ports).map(move |p| n * ports + p))
        .collect()
}

/// End-to-end channel `S_RT + S_RS (I - Phi S_SS)^{-1} Phi S_ST` of the static model
/// loaded by `phi`.
pub fn end_to_end_channel(model: &StaticScatterModel, phi: &FloquetLoadScatter) -> Result<FloquetChannel> {
    channel_with_blocks(model, phi, true)
}

/// As [`end_to_end_channel`], optionally discarding mutual coupling (`S_SS = 0`).
pub fn channel_with_blocks(
    model: &StaticScatterModel,
    phi: &FloquetLoadScatter,
    mc_aware: bool,
) -> Result<FloquetChannel> {
    check_phi(model.grid(), model.partition().n_s(), phi)?;
    let blocks = model.all_blocks(mc_aware);
    let p = model.partition();
    let cols = all_columns(model.grid().len(), p.n_t());
    let m = floquet_response(&blocks, phi, &cols)?;
    FloquetChannel::new(model.grid().clone(), p.n_r(), p.n_t(), m)
}

pub(crate) fn check_phi(grid: &HarmonicGrid, n_s: usize, phi: &FloquetLoadScatter) -> Result<()> {
    if phi.n_harmonics() != grid.len() || phi.n_s() != n_s {
        return Err(Error::dim(format!(
            "load Floquet matrix covers {} harmonics x {} elements, network has {} x {}",
            phi.n_harmonics(),
            phi.n_s(),
            grid.len(),
            n_s
        )));
    }
    Ok(())
}

/// Every stacked input column `(harmonic position, transmit port)`.
pub(crate) fn all_columns(nh: usize, n_t: usize) -> Vec<(usize, usize)> {
    (0..nh).flat_map(|m| (0..n_t).map(move |t| (m, t))).collect()
}

/// Dense `I - Phi Gamma` for per-harmonic coupling blocks.
pub(crate) fn resolvent_system<B: Borrow<NetworkBlocks>>(blocks: &[B], phi: &FloquetLoadScatter) -> CMatrix {
    let nh = blocks.len();
    let n_s = phi.n_s();
    let mut x = CMatrix::identity(nh * n_s, nh * n_s);
    for (inp, block) in blocks.iter().enumerate() {
        let gamma = &block.borrow().gamma;
        for out in 0..nh {
            let d = phi.block(out, inp);
            for j in 0..n_s {
                let col = inp * n_s + j;
                for (i, di) in d.iter().enumerate() {
                    x[(out * n_s + i, col)] -= di * gamma[(i, j)];
                }
            }
        }
    }
    x
}

/// Stacked channel columns for the requested `(input harmonic, tx port)` pairs; all
/// output rows are returned.
pub(crate) fn floquet_response<B: Borrow<NetworkBlocks>>(
    blocks: &[B],
    phi: &FloquetLoadScatter,
    columns: &[(usize, usize)],
) -> Result<CMatrix> {
    let nh = blocks.len();
    let n_s = phi.n_s();
    let first = blocks[0].borrow();
    let (n_r, _) = (first.n_r(), first.n_t());
    let mut z = CMatrix::zeros(nh * n_s, columns.len());
    for (c, &(inp, t)) in columns.iter().enumerate() {
        let b = &blocks[inp].borrow().b;
        for out in 0..nh {
            for (i, di) in phi.block(out, inp).iter().enumerate() {
                z[(out * n_s + i, c)] = di * b[(i, t)];
            }
        }
    }
    let coupled = blocks.iter().any(|bl| bl.borrow().gamma.iter().any(|v| *v != ZERO));
    if coupled {
        Factorized::new(resolvent_system(blocks, phi))?.solve_mut(&mut z);
    }
    let mut h = CMatrix::zeros(nh * n_r, columns.len());
    for (out, block) in blocks.iter().enumerate() {
        let bl = block.borrow();
        let zs = z.rows(out * n_s, n_s);
        let mut hv = h.rows_mut(out * n_r, n_r);
        hv.gemm(ONE, &bl.a, &zs, ZERO);
        for (c, &(inp, t)) in columns.iter().enumerate() {
            if inp == out {
                for r in 0..n_r {
                    hv[(r, c)] += bl.hd[(r, t)];
                }
            }
        }
    }
    Ok(h)
}
