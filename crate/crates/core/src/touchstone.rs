//! Touchstone (v1 and v2) N-port S-parameter files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::floquet::{StaticScatterModel, REFERENCE_IMPEDANCE_OHM};
use crate::grid::{HarmonicGrid, PortPartition};
use crate::linalg::{self, CMatrix, Factorized, C64};

/// Largest singular value accepted from imported data; values in `(1, LIMIT]` only warn.
pub const IMPORT_PASSIVITY_LIMIT: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    RealImag,
    MagAngle,
    DbAngle,
}

/// Parsed network data: one S-matrix per frequency point.
#[derive(Debug, Clone, PartialEq)]
pub struct Touchstone {
    pub n_ports: usize,
    pub frequencies_hz: Vec<f64>,
    pub matrices: Vec<CMatrix>,
}

fn unit_scale(unit: &str) -> Option<f64> {
    Some(match unit {
        "HZ" => 1.0,
        "KHZ" => 1e3,
        "MHZ" => 1e6,
        "GHZ" => 1e9,
        _ => return None,
    })
}

/// Port count encoded in an `.sNp` extension.
pub fn ports_from_extension(path: &Path) -> Option<usize> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    let digits = ext.strip_prefix('s')?.strip_suffix('p')?;
    digits.parse().ok().filter(|&n| n > 0)
}

#[derive(Clone, Copy, PartialEq)]
enum MatrixFormat {
    Full,
    Lower,
    Upper,
}

impl Touchstone {
    /// Parses file text. `n_ports` must be given for v1 data (usually from the file
    /// extension); v2 files declare it themselves.
    pub fn parse(text: &str, n_ports: Option<usize>) -> Result<Self> {
        let err = |line: usize, m: String| Error::Validation(format!("touchstone line {line}: {m}"));
        let mut n = n_ports;
        let mut scale = 1e9;
        let mut format = DataFormat::MagAngle;
        let mut seen_options = false;
        let mut v2 = false;
        let mut order_21_12 = false;
        let mut matrix = MatrixFormat::Full;
        let mut expected_points = None;
        let mut values: Vec<f64> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('!').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(opts) = line.strip_prefix('#') {
                if seen_options {
                    continue;
                }
                seen_options = true;
                let mut tokens = opts.split_whitespace().map(|t| t.to_ascii_uppercase());
                while let Some(t) = tokens.next() {
                    if let Some(s) = unit_scale(&t) {
                        scale = s;
                    } else {
                        match t.as_str() {
                            "RI" => format = DataFormat::RealImag,
                            "MA" => format = DataFormat::MagAngle,
                            "DB" => format = DataFormat::DbAngle,
                            "S" => {}
                            "Y" | "Z" | "H" | "G" => {
                                return Err(err(line_no, format!("{t}-parameters are not supported")))
                            }
                            "R" => {
                                let r: f64 = tokens
                                    .next()
                                    .and_then(|v| v.parse().ok())
                                    .ok_or_else(|| err(line_no, "missing reference resistance".into()))?;
                                if r != REFERENCE_IMPEDANCE_OHM {
                                    return Err(err(
                                        line_no,
                                        format!("reference impedance {r} ohm, expected {REFERENCE_IMPEDANCE_OHM}"),
                                    ));
                                }
                            }
                            _ => return Err(err(line_no, format!("unknown option `{t}`"))),
                        }
                    }
                }
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let (kw, arg) = rest
                    .split_once(']')
                    .ok_or_else(|| err(line_no, "unterminated keyword".into()))?;
                let kw = kw.trim().to_ascii_lowercase();
                let arg = arg.trim();
                match kw.as_str() {
                    "version" => v2 = true,
                    "number of ports" => {
                        n = Some(
                            arg.parse()
                                .map_err(|_| err(line_no, format!("bad port count `{arg}`")))?,
                        )
                    }
                    "two-port data order" => order_21_12 = arg == "21_12",
                    "number of frequencies" => {
                        expected_points = Some(
                            arg.parse::<usize>()
                                .map_err(|_| err(line_no, format!("bad count `{arg}`")))?,
                        )
                    }
                    "matrix format" => {
                        matrix = match arg.to_ascii_lowercase().as_str() {
                            "full" => MatrixFormat::Full,
                            "lower" => MatrixFormat::Lower,
                            "upper" => MatrixFormat::Upper,
                            _ => return Err(err(line_no, format!("unknown matrix format `{arg}`"))),
                        }
                    }
                    "reference" => {
                        for r in arg.split_whitespace() {
                            if r.parse::<f64>().ok() != Some(REFERENCE_IMPEDANCE_OHM) {
                                return Err(err(line_no, format!("unsupported reference `{r}`")));
                            }
                        }
                    }
                    "end" => break,
                    _ => {}
                }
                continue;
            }
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| err(line_no, format!("bad number `{tok}`")))?;
                values.push(v);
            }
        }
        let n = n.ok_or_else(|| Error::Validation("touchstone: unknown port count".into()))?;
        let entries: Vec<(usize, usize)> = match matrix {
            MatrixFormat::Full => (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect(),
            MatrixFormat::Lower => (0..n).flat_map(|r| (0..=r).map(move |c| (r, c))).collect(),
            MatrixFormat::Upper => (0..n).flat_map(|r| (r..n).map(move |c| (r, c))).collect(),
        };
        let stride = 1 + 2 * entries.len();
        if values.is_empty() || !values.len().is_multiple_of(stride) {
            return Err(Error::Validation(format!(
                "touchstone: {} data values do not form whole {n}-port frequency records",
                values.len()
            )));
        }
        let mut frequencies_hz = Vec::new();
        let mut matrices = Vec::new();
        for rec in values.chunks(stride) {
            let f = rec[0] * scale;
            if frequencies_hz.last().is_some_and(|&last| f <= last) {
                return Err(Error::Validation(format!(
                    "touchstone: frequencies not strictly increasing at {f} Hz"
                )));
            }
            let mut s = CMatrix::zeros(n, n);
            for (k, &(r, c)) in entries.iter().enumerate() {
                let (a, b) = (rec[1 + 2 * k], rec[2 + 2 * k]);
                let z = match format {
                    DataFormat::RealImag => C64::new(a, b),
                    DataFormat::MagAngle => C64::from_polar(a, b.to_radians()),
                    DataFormat::DbAngle => C64::from_polar(10f64.powf(a / 20.0), b.to_radians()),
                };
                // two-port v1 data (and v2 with 21_12 order) lists S11 S21 S12 S22
                let (r, c) = if n == 2 && (!v2 || order_21_12) { (c, r) } else { (r, c) };
                s[(r, c)] = z;
                if matrix != MatrixFormat::Full {
                    s[(c, r)] = z;
                }
            }
            frequencies_hz.push(f);
            matrices.push(s);
        }
        if let Some(k) = expected_points {
            if k != frequencies_hz.len() {
                return Err(Error::Validation(format!(
                    "touchstone: declares {k} frequencies, contains {}",
                    frequencies_hz.len()
                )));
            }
        }
        Ok(Self {
            n_ports: n,
            frequencies_hz,
            matrices,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, ports_from_extension(path))
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    /// Version-1 text in Hz with real/imaginary data. Numbers use the shortest
    /// representation that parses back to the same double.
    pub fn to_v1_string(&self) -> String {
        let n = self.n_ports;
        let mut out = String::new();
        let _ = writeln!(out, "! {n}-port S-parameters");
        let _ = writeln!(out, "# HZ S RI R {REFERENCE_IMPEDANCE_OHM}");
        for (f, s) in self.frequencies_hz.iter().zip(&self.matrices) {
            let _ = write!(out, "{f:e}");
            for r in 0..n {
                for c in 0..n {
                    let z = if n == 2 { s[(c, r)] } else { s[(r, c)] };
                    let _ = write!(out, " {:e} {:e}", z.re, z.im);
                    if n > 2 && c % 4 == 3 && c + 1 < n {
                        out.push('\n');
                    }
                }
                if n > 2 {
                    out.push('\n');
                }
            }
            if n <= 2 {
                out.push('\n');
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_v1_string()).map_err(|e| Error::io(path, e))
    }

    /// Index of the frequency point nearest to `f`, and its distance in Hz.
    pub fn nearest(&self, f: f64) -> (usize, f64) {
        self.frequencies_hz
            .iter()
            .enumerate()
            .map(|(i, &x)| (i, (x - f).abs()))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
    }
}

/// Effective S-matrix of the `kept` ports when every other port is terminated by a
/// load with reflection coefficient `loads[j]` (ordered like the terminated ports).
pub fn terminate_ports(s: &CMatrix, kept: &[usize], loads: &[C64]) -> Result<CMatrix> {
    let n = s.nrows();
    let terminated: Vec<usize> = (0..n).filter(|p| !kept.contains(p)).collect();
    if loads.len() != terminated.len() {
        return Err(Error::dim(format!(
            "{} loads for {} terminated ports",
            loads.len(),
            terminated.len()
        )));
    }
    let skk = linalg::select(s, kept, kept);
    if terminated.is_empty() {
        return Ok(skk);
    }
    let sku = linalg::select(s, kept, &terminated);
    let suk = linalg::select(s, &terminated, kept);
    let suu = linalg::select(s, &terminated, &terminated);
    let gl = CMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(loads));
    let m = CMatrix::identity(terminated.len(), terminated.len()) - &suu * &gl;
    let x = Factorized::new(m)?.solve(&suk);
    Ok(skk + sku * gl * x)
}

/// Outcome of a Touchstone import.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportReport {
    pub warnings: Vec<String>,
    /// `(harmonic, |f_file - f_h|)` for every harmonic, in grid order.
    pub frequency_gaps_hz: Vec<(i32, f64)>,
    pub max_singular_value: f64,
}

/// Builds a static model from one Touchstone file per harmonic of `grid`.
///
/// `ports` addresses ports of the files (0-based); the imported model orders them
/// transmit, receive, RIS and uses the contiguous partition. Unselected ports are
/// treated as matched, which reduces to sub-matrix selection.
pub fn import_touchstone_set<P: AsRef<Path>>(
    paths: &[P],
    grid: &HarmonicGrid,
    ports: &PortPartition,
) -> Result<(StaticScatterModel, ImportReport)> {
    let files = paths.iter().map(Touchstone::read).collect::<Result<Vec<_>>>()?;
    import_from_data(&files, grid, ports)
}

pub fn import_from_data(
    files: &[Touchstone],
    grid: &HarmonicGrid,
    ports: &PortPartition,
) -> Result<(StaticScatterModel, ImportReport)> {
    if files.len() != grid.len() {
        return Err(Error::Validation(format!(
            "{} Touchstone files for {} harmonics; one file per harmonic is required",
            files.len(),
            grid.len()
        )));
    }
    let order: Vec<usize> = ports.tx.iter().chain(&ports.rx).chain(&ports.ris).copied().collect();
    let mut report = ImportReport::default();
    let mut matrices = Vec::with_capacity(files.len());
    for (ts, &h) in files.iter().zip(grid.harmonics()) {
        if let Some(&p) = order.iter().find(|&&p| p >= ts.n_ports) {
            return Err(Error::Validation(format!(
                "port {p} selected but the file for harmonic {h} has {} ports",
                ts.n_ports
            )));
        }
        let f = grid.frequency(h);
        let (i, gap) = ts.nearest(f);
        report.frequency_gaps_hz.push((h, gap));
        if gap > grid.fm() / 10.0 {
            let msg = format!("harmonic {h}: nearest frequency point is {gap} Hz away from {f} Hz");
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        let s = linalg::select(&ts.matrices[i], &order, &order);
        let sigma = linalg::spectral_norm(&s);
        report.max_singular_value = report.max_singular_value.max(sigma);
        if sigma > IMPORT_PASSIVITY_LIMIT {
            return Err(Error::Invalid(format!(
                "harmonic {h}: largest singular value {sigma} exceeds {IMPORT_PASSIVITY_LIMIT}"
            )));
        }
        if sigma > 1.0 {
            let msg = format!("harmonic {h}: slightly active data (largest singular value {sigma})");
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        matrices.push(s);
    }
    let partition = PortPartition::contiguous(ports.n_t(), ports.n_r(), ports.n_s())?;
    let model =
        StaticScatterModel::with_passivity_limit(grid.clone(), partition, matrices, false, IMPORT_PASSIVITY_LIMIT)?;
    Ok((model, report))
}

/// One Touchstone data set per harmonic of `model`, each holding a single frequency
/// point at the harmonic frequency.
pub fn export_model(model: &StaticScatterModel) -> Vec<Touchstone> {
    let g = model.grid();
    g.harmonics()
        .iter()
        .zip(model.matrices())
        .map(|(&h, s)| Touchstone {
            n_ports: s.nrows(),
            frequencies_hz: vec![g.frequency(h)],
            matrices: vec![s.clone()],
        })
        .collect()
}
