//! Proxy-model channel prediction and its reverse pass for one measurement record.

use crate::error::{Error, Result};
use crate::floquet::{self, FloquetChannel, FloquetLoadScatter, ModulationPattern, WeightTable};
use crate::gauge::{ProxyAdjoint, ProxyParams, ProxySet};
use crate::grid::HarmonicGrid;
use crate::linalg::{CMatrix, Factorized, ONE, ZERO};
use crate::measurement::{MeasurementMode, Observation};

/// Smoothing of the modulus in gradient computations: `|z|_eps = sqrt(|z|^2 + eps^2)`.
pub const MODULUS_EPS: f64 = 1e-12;

fn smooth_abs(x: f64) -> f64 {
    x.hypot(MODULUS_EPS)
}

/// Forward values of the proxy channel of one pattern.
pub(crate) struct Forward {
    phi: FloquetLoadScatter,
    factor: Option<Factorized>,
    /// `(I - Phi Gamma)^-1 Phi B` for the requested columns.
    z: CMatrix,
    /// Channel rows of `outs`, stacked harmonic-major.
    pub h: CMatrix,
}

/// Observed output harmonics and `(input harmonic, tx port)` columns, by position.
pub(crate) type Observed = (Vec<usize>, Vec<(usize, usize)>);

pub(crate) fn observed(mode: MeasurementMode, grid: &HarmonicGrid, n_t: usize) -> Result<Observed> {
    let outs: Vec<usize> = match mode {
        MeasurementMode::M1 => vec![grid
            .index_of(0)
            .ok_or_else(|| Error::Validation("grid lacks the fundamental harmonic".into()))?],
        _ => (0..grid.len()).collect(),
    };
    let cols = outs.iter().flat_map(|&n| (0..n_t).map(move |t| (n, t))).collect();
    Ok((outs, cols))
}

/// Evaluates the proxy channel; the pattern's delays are ignored.
pub(crate) fn forward(
    params: &[ProxyParams],
    grid: &HarmonicGrid,
    weights: &WeightTable,
    pattern: &ModulationPattern,
    outs: &[usize],
    cols: &[(usize, usize)],
) -> Result<Forward> {
    let nh = grid.len();
    let n_s = params[0].n_s();
    let n_r = params[0].net.n_r();
    let h = grid.harmonics();
    let mut phi = FloquetLoadScatter::zeros(nh, n_s);
    for out in 0..nh {
        for inp in 0..nh {
            let w = weights.get(h[out] - h[inp]);
            let r = &params[inp].rho;
            for (i, slot) in phi.block_mut(out, inp).iter_mut().enumerate() {
                *slot = pattern.row(i).iter().zip(w).map(|(&s, &wq)| r[s] * wq).sum();
            }
        }
    }
    let mut z = CMatrix::zeros(nh * n_s, cols.len());
    for (c, &(inp, t)) in cols.iter().enumerate() {
        let b = &params[inp].net.b;
        for out in 0..nh {
            for (i, di) in phi.block(out, inp).iter().enumerate() {
                z[(out * n_s + i, c)] = di * b[(i, t)];
            }
        }
    }
    let factor = if params[0].mc_aware {
        let f = Factorized::new(floquet::resolvent_system(params, &phi))?;
        f.solve_mut(&mut z);
        Some(f)
    } else {
        None
    };
    let mut hm = CMatrix::zeros(outs.len() * n_r, cols.len());
    for (k, &out) in outs.iter().enumerate() {
        let p = &params[out].net;
        let mut hv = hm.rows_mut(k * n_r, n_r);
        hv.gemm(ONE, &p.a, &z.rows(out * n_s, n_s), ZERO);
        for (c, &(inp, t)) in cols.iter().enumerate() {
            if inp == out {
                for r in 0..n_r {
                    hv[(r, c)] += p.hd[(r, t)];
                }
            }
        }
    }
    Ok(Forward { phi, factor, z, h: hm })
}

/// Accumulates the proxy-field adjoints of `f.h` given its adjoint `h_adj`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    params: &[ProxyParams],
    grid: &HarmonicGrid,
    weights: &WeightTable,
    pattern: &ModulationPattern,
    outs: &[usize],
    cols: &[(usize, usize)],
    f: &Forward,
    h_adj: &CMatrix,
    acc: &mut [ProxyAdjoint],
) {
    let nh = grid.len();
    let n_s = params[0].n_s();
    let n_r = params[0].net.n_r();
    let h = grid.harmonics();
    let mut z_adj = CMatrix::zeros(nh * n_s, cols.len());
    for (k, &out) in outs.iter().enumerate() {
        let ha = h_adj.rows(k * n_r, n_r);
        for (c, &(inp, t)) in cols.iter().enumerate() {
            if inp == out {
                for r in 0..n_r {
                    acc[out].hd[(r, t)] += ha[(r, c)];
                }
            }
        }
        let zo = f.z.rows(out * n_s, n_s);
        acc[out].a.gemm(ONE, &ha, &zo.adjoint(), ONE);
        z_adj
            .rows_mut(out * n_s, n_s)
            .gemm(ONE, &params[out].net.a.adjoint(), &ha, ZERO);
    }
    let r_adj = match &f.factor {
        Some(fac) => fac.solve_adjoint(&z_adj),
        None => z_adj,
    };
    let mut phi_adj = FloquetLoadScatter::zeros(nh, n_s);
    for (c, &(inp, t)) in cols.iter().enumerate() {
        let b = &params[inp].net.b;
        for out in 0..nh {
            let ph = f.phi.block(out, inp);
            let pa = phi_adj.block_mut(out, inp);
            for i in 0..n_s {
                let ra = r_adj[(out * n_s + i, c)];
                pa[i] += b[(i, t)].conj() * ra;
                acc[inp].b[(i, t)] += ph[i].conj() * ra;
            }
        }
    }
    if f.factor.is_some() {
        // X = I - Phi Gamma, X_adj = -R_adj Z^H
        let x_adj = -(&r_adj * f.z.adjoint());
        for out in 0..nh {
            for inp in 0..nh {
                let gamma = &params[inp].net.gamma;
                let ph = f.phi.block(out, inp);
                let pa = phi_adj.block_mut(out, inp);
                for i in 0..n_s {
                    let mut s = ZERO;
                    for j in 0..n_s {
                        let xa = x_adj[(out * n_s + i, inp * n_s + j)];
                        s -= gamma[(i, j)].conj() * xa;
                        acc[inp].gamma[(i, j)] -= ph[i].conj() * xa;
                    }
                    pa[i] += s;
                }
            }
        }
    }
    for out in 0..nh {
        for inp in 0..nh {
            let w = weights.get(h[out] - h[inp]);
            let pa = phi_adj.block(out, inp);
            for (i, &a) in pa.iter().enumerate() {
                for (&s, &wq) in pattern.row(i).iter().zip(w) {
                    acc[inp].rho[s] += wq.conj() * a;
                }
            }
        }
    }
}

/// `||P(pred) - obs||_1` and, if requested, the adjoint of `pred` for the loss
/// `scale * ||.||_1` (smoothed modulus).
pub(crate) fn l1_misfit(
    mode: MeasurementMode,
    pred: &CMatrix,
    obs: &Observation,
    scale: f64,
    want_adj: bool,
) -> Result<(f64, Option<CMatrix>)> {
    match (mode, obs) {
        (MeasurementMode::M2, Observation::Magnitude(m)) => {
            if m.shape() != pred.shape() {
                return Err(Error::dim("observation shape does not match the prediction"));
            }
            let mut loss = 0.0;
            let mut adj = want_adj.then(|| CMatrix::zeros(pred.nrows(), pred.ncols()));
            for (k, (z, &y)) in pred.iter().zip(m.iter()).enumerate() {
                loss += (z.norm() - y).abs();
                if let Some(a) = adj.as_mut() {
                    let az = smooth_abs(z.norm());
                    let r = az - y;
                    a[k] = *z * (scale * r / smooth_abs(r) / az);
                }
            }
            Ok((loss, adj))
        }
        (MeasurementMode::M1 | MeasurementMode::M3, Observation::Complex(m)) => {
            if m.shape() != pred.shape() {
                return Err(Error::dim("observation shape does not match the prediction"));
            }
            let mut loss = 0.0;
            let mut adj = want_adj.then(|| CMatrix::zeros(pred.nrows(), pred.ncols()));
            for (k, (z, y)) in pred.iter().zip(m.iter()).enumerate() {
                let e = z - y;
                loss += e.norm();
                if let Some(a) = adj.as_mut() {
                    a[k] = e * (scale / smooth_abs(e.norm()));
                }
            }
            Ok((loss, adj))
        }
        _ => Err(Error::VariantMismatch(format!(
            "observation type does not match mode {mode}"
        ))),
    }
}

/// Multi-harmonic channel predicted by `proxies` for `pattern` (delays are absorbed by
/// the gauges and therefore ignored).
pub fn predict_channel(proxies: &ProxySet, pattern: &ModulationPattern) -> Result<FloquetChannel> {
    let grid = proxies.grid();
    pattern.validate(proxies.n_states(), proxies.n_s(), f64::INFINITY)?;
    let weights = WeightTable::new(grid, pattern.slots());
    let cols = floquet::all_columns(grid.len(), proxies.n_t());
    let outs: Vec<usize> = (0..grid.len()).collect();
    let f = forward(proxies.params(), grid, &weights, pattern, &outs, &cols)?;
    FloquetChannel::new(grid.clone(), proxies.n_r(), proxies.n_t(), f.h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::floquet::{end_to_end_channel, LoadSet, StaticScatterModel};
    use crate::gauge::{random_gauge, GaugeVariant};
    use crate::grid::PortPartition;
    use crate::linalg::{rel_diff, C64};
    use crate::measurement::random_patterns;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(rng: &mut impl Rng) -> C64 {
        C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    }

    fn truth(nh: usize, rng: &mut impl Rng) -> (StaticScatterModel, LoadSet) {
        let g = HarmonicGrid::symmetric(135e9, 125e6, nh).unwrap();
        let part = PortPartition::contiguous(2, 2, 3).unwrap();
        let mats = (0..nh)
            .map(|_| {
                let m = CMatrix::from_fn(7, 7, |_, _| c(rng));
                let s = &m + m.transpose();
                let sigma = crate::linalg::spectral_norm(&s);
                s * C64::new(0.9 / sigma, 0.0)
            })
            .collect();
        let model = StaticScatterModel::new(g.clone(), part, mats, true).unwrap();
        let rho = (0..nh).map(|_| (0..4).map(|_| c(rng)).collect()).collect();
        (model, LoadSet::new(g, rho).unwrap())
    }

    fn proxies_of(model: &StaticScatterModel, loads: &LoadSet, mc_aware: bool) -> ProxySet {
        let params = (0..model.grid().len())
            .map(|n| ProxyParams::new(model.blocks(n, mc_aware), loads.at(n).to_vec(), mc_aware).unwrap())
            .collect();
        ProxySet::new(model.grid().clone(), params).unwrap()
    }

    #[test]
    fn exact_blocks_reproduce_the_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (model, loads) = truth(5, &mut rng);
        let proxies = proxies_of(&model, &loads, true);
        for p in random_patterns(3, 3, 3, 4, &mut rng).unwrap() {
            let phi = floquet::assemble_phi(&p, &loads, model.grid()).unwrap();
            let want = end_to_end_channel(&model, &phi).unwrap();
            let got = predict_channel(&proxies, &p).unwrap();
            assert!(rel_diff(got.matrix(), want.matrix()) < 1e-13);
        }
    }

    #[test]
    fn uncoupled_static_prediction_is_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (model, loads) = truth(3, &mut rng);
        let proxies = proxies_of(&model, &loads, false);
        let p = ModulationPattern::static_config(&[0, 3, 1]).unwrap();
        let h = predict_channel(&proxies, &p).unwrap();
        for n in 0..3 {
            let q = proxies.at(n);
            let rho: Vec<C64> = [0, 3, 1].iter().map(|&s| q.rho[s]).collect();
            let phi = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(rho));
            let want = &q.net.hd + &q.net.a * phi * &q.net.b;
            assert!(rel_diff(&h.block_at(n, n), &want) < 1e-14);
        }
        assert!(h.is_block_diagonal());
    }

    #[test]
    fn per_harmonic_gauges_are_invisible_at_q1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (model, loads) = truth(3, &mut rng);
        for mc in [true, false] {
            let proxies = proxies_of(&model, &loads, mc);
            let gauges: Vec<_> = (0..3)
                .map(|_| random_gauge(&mut rng, GaugeVariant::for_coupling(mc), 3, 0.3))
                .collect();
            let gauged = proxies.gauged(&gauges).unwrap();
            for p in random_patterns(3, 3, 1, 4, &mut rng).unwrap() {
                let a = predict_channel(&proxies, &p).unwrap();
                let b = predict_channel(&gauged, &p).unwrap();
                assert!(rel_diff(b.matrix(), a.matrix()) < 1e-10);
            }
            let p3 = &random_patterns(1, 3, 3, 4, &mut rng).unwrap()[0];
            let a = predict_channel(&proxies, p3).unwrap();
            let b = predict_channel(&gauged, p3).unwrap();
            assert!(rel_diff(b.matrix(), a.matrix()) > 1e-3);
        }
    }
}
