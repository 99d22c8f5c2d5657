//! Harmonic comb and port bookkeeping.

use crate::error::{Error, Result};

/// Harmonic comb `f_h = f0 + h * fm` around a carrier, symmetric about `h = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicGrid {
    f0: f64,
    fm: f64,
    harmonics: Vec<i32>,
}

impl HarmonicGrid {
    pub fn new(f0: f64, fm: f64, harmonics: Vec<i32>) -> Result<Self> {
        if !(f0 > 0.0 && fm > 0.0) || !f0.is_finite() || !fm.is_finite() {
            return Err(Error::Invalid(format!(
                "carrier and modulation frequency must be positive (f0={f0}, fm={fm})"
            )));
        }
        if f0 / fm <= 10.0 {
            return Err(Error::Invalid(format!(
                "modulation frequency must be much smaller than the carrier (f0/fm = {})",
                f0 / fm
            )));
        }
        if harmonics.len().is_multiple_of(2) {
            return Err(Error::Invalid("harmonic count must be odd".into()));
        }
        if harmonics.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("harmonics must be strictly increasing".into()));
        }
        let n = harmonics.len();
        if (0..n).any(|k| harmonics[k] != -harmonics[n - 1 - k]) {
            return Err(Error::Invalid("harmonics must be symmetric around 0".into()));
        }
        Ok(Self { f0, fm, harmonics })
    }

    /// Contiguous comb `-(count/2) ..= count/2`.
    pub fn symmetric(f0: f64, fm: f64, count: usize) -> Result<Self> {
        if count.is_multiple_of(2) {
            return Err(Error::Invalid(format!("harmonic count {count} is not odd")));
        }
        let half = (count / 2) as i32;
        Self::new(f0, fm, (-half..=half).collect())
    }

    pub fn f0(&self) -> f64 {
        self.f0
    }

    pub fn fm(&self) -> f64 {
        self.fm
    }

    /// Modulation period `1 / fm`.
    pub fn period(&self) -> f64 {
        1.0 / self.fm
    }

    pub fn harmonics(&self) -> &[i32] {
        &self.harmonics
    }

    pub fn len(&self) -> usize {
        self.harmonics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.harmonics.is_empty()
    }

    pub fn frequency(&self, h: i32) -> f64 {
        self.f0 + h as f64 * self.fm
    }

    pub fn index_of(&self, h: i32) -> Option<usize> {
        self.harmonics.binary_search(&h).ok()
    }

    pub fn require_index(&self, h: i32) -> Result<usize> {
        self.index_of(h).ok_or(Error::GridMismatch(h))
    }

    /// Position of the fundamental.
    pub fn fundamental(&self) -> usize {
        self.harmonics.len() / 2
    }

    /// Indices into `self` of every harmonic of `sub`; fails if one is missing.
    pub fn positions_of(&self, sub: &HarmonicGrid) -> Result<Vec<usize>> {
        sub.harmonics.iter().map(|&h| self.require_index(h)).collect()
    }

    /// Sub-comb with the same carrier and modulation frequency.
    pub fn restricted(&self, count: usize) -> Result<Self> {
        let sub = Self::symmetric(self.f0, self.fm, count)?;
        self.positions_of(&sub)?;
        Ok(sub)
    }
}

/// Partition of the `N = N_T + N_R + N_S` ports of the static network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortPartition {
    pub tx: Vec<usize>,
    pub rx: Vec<usize>,
    pub ris: Vec<usize>,
}

impl PortPartition {
    pub fn new(tx: Vec<usize>, rx: Vec<usize>, ris: Vec<usize>) -> Result<Self> {
        if tx.is_empty() || rx.is_empty() || ris.is_empty() {
            return Err(Error::Invalid("every port set needs at least one port".into()));
        }
        let n = tx.len() + rx.len() + ris.len();
        let mut seen = vec![false; n];
        for &p in tx.iter().chain(&rx).chain(&ris) {
            if p >= n || seen[p] {
                return Err(Error::Invalid(format!(
                    "port sets must partition 0..{n} (offending port {p})"
                )));
            }
            seen[p] = true;
        }
        Ok(Self { tx, rx, ris })
    }

    /// Transmit ports first, then receive ports, then RIS ports.
    pub fn contiguous(n_t: usize, n_r: usize, n_s: usize) -> Result<Self> {
        let a = n_t + n_r;
        Self::new((0..n_t).collect(), (n_t..a).collect(), (a..a + n_s).collect())
    }

    pub fn n_t(&self) -> usize {
        self.tx.len()
    }

    pub fn n_r(&self) -> usize {
        self.rx.len()
    }

    pub fn n_s(&self) -> usize {
        self.ris.len()
    }

    pub fn n_ports(&self) -> usize {
        self.tx.len() + self.rx.len() + self.ris.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_grid_is_centered() {
        let g = HarmonicGrid::symmetric(135e9, 125e6, 11).unwrap();
        assert_eq!(g.harmonics().first(), Some(&-5));
        assert_eq!(g.harmonics()[g.fundamental()], 0);
        assert_eq!(g.index_of(3), Some(8));
        assert!((g.period() - 8e-9).abs() < 1e-20);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(HarmonicGrid::symmetric(135e9, 125e6, 4).is_err());
        assert!(HarmonicGrid::new(135e9, 125e6, vec![-1, 0, 2]).is_err());
        assert!(HarmonicGrid::new(1e9, 2e8, vec![0]).is_err());
        assert!(HarmonicGrid::new(135e9, 0.0, vec![0]).is_err());
    }

    #[test]
    fn partition_must_cover_all_ports() {
        assert!(PortPartition::new(vec![0], vec![1], vec![2, 3]).is_ok());
        assert!(PortPartition::new(vec![0], vec![0], vec![2, 3]).is_err());
        assert!(PortPartition::new(vec![0], vec![1], vec![]).is_err());
        assert!(PortPartition::new(vec![0], vec![1], vec![5, 3]).is_err());
    }
}
