//! Geometry of the learned projection relative to the concept basis.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{mean_std, MeanStd};

pub const DEFAULT_PCA_TOP: usize = 10;

fn column_norms(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    m.column_iter()
        .enumerate()
        .map(|(j, c)| {
            let n = c.norm();
            if n > 0.0 {
                Ok(n)
            } else {
                Err(Error::ZeroNorm { row: j })
            }
        })
        .collect()
}

/// Cosine between matching columns of `a` and `phi`.
pub fn alignment(a: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.shape() != phi.shape() {
        return Err(Error::DimensionMismatch {
            context: "alignment columns",
            expected: phi.ncols(),
            found: a.ncols(),
        });
    }
    let (na, np) = (column_norms(a)?, column_norms(phi)?);
    Ok((0..a.ncols())
        .map(|j| (a.column(j).dot(&phi.column(j)) / (na[j] * np[j])).clamp(-1.0, 1.0))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("summary values"));
    }
    let MeanStd { mean, std } = mean_std(values);
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    Ok(Summary {
        mean,
        median,
        std,
        min: v[0],
        max: v[n - 1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaMethod {
    /// d x d covariance.
    Covariance,
    /// m x m Gram of the centred points; same non-zero spectrum.
    Gram,
    /// Gram when there are fewer points than dimensions.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaStats {
    pub total_variance: f64,
    pub top_k: usize,
    pub topk_fraction: f64,
    /// Descending; `min(d, m)` values.
    pub eigenvalues: Vec<f64>,
}

fn sorted_eigenvalues(sym: DMatrix<f64>, keep: usize) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    ev.truncate(keep);
    ev
}

/// PCA over the columns of `points` (d x m, one point per column), centred,
/// covariance divisor `m - 1`.
pub fn pca_stats(points: &DMatrix<f64>, top_k: usize, method: PcaMethod) -> Result<PcaStats> {
    let (d, m) = points.shape();
    if m < 2 {
        return Err(Error::TooFewClasses { required: 2, found: m });
    }
    if top_k == 0 {
        return Err(Error::InvalidConfig("PCA top-k must be positive".into()));
    }
    let mean = points.column_mean();
    let mut x = points.clone();
    for mut c in x.column_iter_mut() {
        c -= &mean;
    }
    let denom = (m - 1) as f64;
    let total_variance = x.iter().map(|v| v * v).sum::<f64>() / denom;
    if total_variance <= 0.0 {
        return Err(Error::Degenerate("all PCA points coincide"));
    }
    let use_gram = match method {
        PcaMethod::Covariance => false,
        PcaMethod::Gram => true,
        PcaMethod::Auto => m < d,
    };
    let keep = d.min(m);
    let eigenvalues = if use_gram {
        sorted_eigenvalues(x.transpose() * &x / denom, keep)
    } else {
        sorted_eigenvalues(&x * x.transpose() / denom, keep)
    };
    let k = top_k.min(keep);
    let topk_fraction = (eigenvalues[..k].iter().sum::<f64>() / total_variance).min(1.0);
    Ok(PcaStats {
        total_variance,
        top_k: k,
        topk_fraction,
        eigenvalues,
    })
}

/// Mean and population std of the strictly off-diagonal Gram entries.
pub fn gram_offdiag_stats(m: &DMatrix<f64>, normalize_columns: bool) -> Result<MeanStd> {
    if m.ncols() < 2 {
        return Err(Error::TooFewClasses {
            required: 2,
            found: m.ncols(),
        });
    }
    let mut x = m.clone();
    if normalize_columns {
        let norms = column_norms(&x)?;
        for (mut c, n) in x.column_iter_mut().zip(norms) {
            c /= n;
        }
    }
    let g = x.transpose() * &x;
    let k = g.nrows();
    let off: Vec<f64> = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| g[(i, j)])
        .collect();
    Ok(mean_std(&off))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub concepts: usize,
    pub dim: usize,
    pub alignment: Summary,
    pub pca_a: PcaStats,
    pub pca_phi: PcaStats,
    pub gram_a: MeanStd,
    pub gram_phi: MeanStd,
}

impl StructureReport {
    pub fn compute(a: &DMatrix<f64>, phi: &DMatrix<f64>, top_k: usize) -> Result<Self> {
        let align = alignment(a, phi)?;
        Ok(Self {
            concepts: a.ncols(),
            dim: a.nrows(),
            alignment: summarize(&align)?,
            pca_a: pca_stats(a, top_k, PcaMethod::Auto)?,
            pca_phi: pca_stats(phi, top_k, PcaMethod::Auto)?,
            gram_a: gram_offdiag_stats(a, true)?,
            gram_phi: gram_offdiag_stats(phi, true)?,
        })
    }

    /// `component,phi,a` eigenvalue table.
    pub fn write_spectrum_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(w);
        let err = |e| Error::io("spectrum csv", e);
        writeln!(out, "component,phi,a").map_err(err)?;
        for (i, (p, a)) in self.pca_phi.eigenvalues.iter().zip(&self.pca_a.eigenvalues).enumerate() {
            writeln!(out, "{},{:e},{:e}", i + 1, p, a).map_err(err)?;
        }
        out.flush().map_err(err)
    }
}
