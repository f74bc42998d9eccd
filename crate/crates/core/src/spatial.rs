//! Patch-level concept heatmaps and their agreement with object masks.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::ProjectionMatrix;
use crate::error::{Error, Result};
use crate::store::{EmbeddingKind, EmbeddingMatrix, MaskGrid};

pub const DEFAULT_IOU_PERCENTS: [f64; 3] = [5.0, 10.0, 20.0];

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patches: DMatrix<f64>,
    height: usize,
    width: usize,
    image_name: String,
}

impl PatchGrid {
    /// Rows are L2-normalized here; zero rows stay zero.
    pub fn new(patches: DMatrix<f64>, height: usize, width: usize, image_name: impl Into<String>) -> Result<Self> {
        if height * width != patches.nrows() {
            return Err(Error::DimensionMismatch {
                context: "patch grid rows vs shape",
                expected: height * width,
                found: patches.nrows(),
            });
        }
        let mut patches = patches;
        for (r, mut row) in patches.row_iter_mut().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("patch row {r}"),
                });
            }
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        Ok(Self {
            patches,
            height,
            width,
            image_name: image_name.into(),
        })
    }

    pub fn from_embeddings(
        m: &EmbeddingMatrix,
        height: usize,
        width: usize,
        image_name: impl Into<String>,
    ) -> Result<Self> {
        if m.kind() != EmbeddingKind::PatchGrid {
            return Err(Error::InvalidConfig(
                "patch grid loaded with the wrong embedding kind".into(),
            ));
        }
        Self::new(m.data().clone(), height, width, image_name)
    }

    pub fn patches(&self) -> &DMatrix<f64> {
        &self.patches
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_name(&self) -> &str {
        &self.image_name
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub concept: String,
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(concept: impl Into<String>, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimensionMismatch {
                context: "heatmap cells",
                expected: height * width,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "heatmap values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            concept: concept.into(),
            height,
            width,
            values,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(w);
        let err = |e| Error::io("heatmap csv", e);
        let header: Vec<String> = (0..self.width).map(|c| format!("c{c}")).collect();
        writeln!(out, "{}", header.join(",")).map_err(err)?;
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| format!("{:e}", self.get(r, c))).collect();
            writeln!(out, "{}", row.join(",")).map_err(err)?;
        }
        out.flush().map_err(err)
    }

    /// 8-bit binary graymap scaled so the maximum cell is white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }),
        );
        out
    }
}

/// Per-patch concept scores after max-abs normalization and centering
/// across concepts (`(h*w) x m`, before the ReLU).
pub fn normalized_patch_scores(grid: &PatchGrid, a: &ProjectionMatrix) -> Result<DMatrix<f64>> {
    if grid.patches.ncols() != a.dim() {
        return Err(Error::DimensionMismatch {
            context: "patch embedding vs projection",
            expected: a.dim(),
            found: grid.patches.ncols(),
        });
    }
    let mut z = &grid.patches * a.matrix();
    for mut row in z.row_iter_mut() {
        let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            row /= max;
        }
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    Ok(z)
}

pub fn concept_heatmap(grid: &PatchGrid, a: &ProjectionMatrix, concept: &str) -> Result<Heatmap> {
    heatmap_at(grid, a, a.resolve_concept(concept)?)
}

pub fn heatmap_at(grid: &PatchGrid, a: &ProjectionMatrix, j: usize) -> Result<Heatmap> {
    if j >= a.num_concepts() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: a.num_concepts(),
        });
    }
    let z = normalized_patch_scores(grid, a)?;
    let values = z.column(j).iter().map(|&v| v.max(0.0)).collect();
    Heatmap::new(a.names()[j].clone(), grid.height, grid.width, values)
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub pointing: f64,
    pub inside_ratio: f64,
    /// `(tau_percent, iou)` pairs in request order.
    pub iou: Vec<(f64, f64)>,
}

/// Row-major index of the largest cell, lowest index on ties.
pub fn argmax_cell(values: &[f64]) -> usize {
    crate::eval::argmax(values).unwrap_or(0)
}

pub fn region_metrics(h: &Heatmap, mask: &MaskGrid, iou_percents: &[f64]) -> Result<RegionMetrics> {
    if (mask.height(), mask.width()) != (h.height, h.width) {
        return Err(Error::DimensionMismatch {
            context: "mask cells vs heatmap cells",
            expected: h.height * h.width,
            found: mask.height() * mask.width(),
        });
    }
    if let Some(&t) = iou_percents.iter().find(|&&t| !(t > 0.0 && t <= 100.0)) {
        return Err(Error::InvalidConfig(format!("IoU percent {t} must be in (0, 100]")));
    }
    let inside: Vec<bool> = mask.cells().iter().map(|&c| c != 0).collect();
    let total: f64 = h.values.iter().sum();
    let in_mass: f64 = h.values.iter().zip(&inside).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    // an all-zero map points nowhere
    let pointing = if total > 0.0 && inside[argmax_cell(&h.values)] {
        1.0
    } else {
        0.0
    };
    let iou = iou_percents
        .iter()
        .map(|&t| {
            let thr = percentile(&h.values, 100.0 - t);
            let (mut inter, mut union) = (0usize, 0usize);
            for (&v, &m) in h.values.iter().zip(&inside) {
                let sel = v >= thr;
                inter += (sel && m) as usize;
                union += (sel || m) as usize;
            }
            (t, if union == 0 { 0.0 } else { inter as f64 / union as f64 })
        })
        .collect();
    Ok(RegionMetrics {
        pointing,
        inside_ratio: if total > 0.0 { in_mass / total } else { 0.0 },
        iou,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAlignmentSummary {
    pub concept: String,
    pub pointing: MeanStd,
    pub inside_ratio: MeanStd,
    pub iou: Vec<(f64, MeanStd)>,
    pub per_image: Vec<RegionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAlignmentReport {
    pub images: Vec<String>,
    pub positive: ConceptAlignmentSummary,
    pub negative: ConceptAlignmentSummary,
}

fn summarize(concept: String, per_image: Vec<RegionMetrics>, iou_percents: &[f64]) -> ConceptAlignmentSummary {
    let col = |f: &dyn Fn(&RegionMetrics) -> f64| mean_std(&per_image.iter().map(f).collect::<Vec<_>>());
    ConceptAlignmentSummary {
        pointing: col(&|r| r.pointing),
        inside_ratio: col(&|r| r.inside_ratio),
        iou: iou_percents
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, col(&|r| r.iou[i].1)))
            .collect(),
        concept,
        per_image,
    }
}

/// Region metrics for a positive and a negative concept over one class.
/// Masks are resized to each grid with nearest-neighbour sampling.
pub fn class_alignment_eval(
    items: &[(PatchGrid, Option<MaskGrid>)],
    a: &ProjectionMatrix,
    positive: &str,
    negative: &str,
    iou_percents: &[f64],
) -> Result<ClassAlignmentReport> {
    if items.is_empty() {
        return Err(Error::Empty("alignment images"));
    }
    let (pj, nj) = (a.resolve_concept(positive)?, a.resolve_concept(negative)?);
    let per: Vec<(RegionMetrics, RegionMetrics)> = items
        .par_iter()
        .map(|(grid, mask)| {
            let mask = mask
                .as_ref()
                .ok_or_else(|| Error::MissingMask(grid.image_name.clone()))?
                .resize_nearest(grid.height, grid.width)?;
            let pos = heatmap_at(grid, a, pj)?;
            let neg = heatmap_at(grid, a, nj)?;
            Ok((
                region_metrics(&pos, &mask, iou_percents)?,
                region_metrics(&neg, &mask, iou_percents)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (pos, neg): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    Ok(ClassAlignmentReport {
        images: items.iter().map(|(g, _)| g.image_name.clone()).collect(),
        positive: summarize(a.names()[pj].clone(), pos, iou_percents),
        negative: summarize(a.names()[nj].clone(), neg, iou_percents),
    })
}
