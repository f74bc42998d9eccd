//! Concept ablation: remove selected interaction scores from the predicted
//! class logit and measure the drop and whether the prediction flips.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{argmax, ConceptClassifier};
use crate::explain::{interaction_scores, rank_descending, sample_indices};
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub f: f64,
    pub f_prime: f64,
    pub drop: f64,
}

fn check_indices(indices: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    for &j in indices {
        if j >= m {
            return Err(Error::IndexOutOfRange { index: j, len: m });
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::DuplicateIndex(j));
        }
    }
    Ok(())
}

/// `f = <c_x, c_k>`, `drop = sum of s_j over J`, `f' = f - drop`.
pub fn ablate(c_x: &[f64], c_k: &[f64], indices: &[usize]) -> Result<Ablation> {
    let s = interaction_scores(c_x, c_k)?;
    check_indices(indices, s.len())?;
    Ok(ablate_scores(&s, indices))
}

fn ablate_scores(s: &[f64], indices: &[usize]) -> Ablation {
    let f: f64 = s.iter().sum();
    let drop: f64 = indices.iter().map(|&j| s[j]).sum();
    Ablation {
        f,
        f_prime: f - drop,
        drop,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Top,
    Random,
}

/// How the ablated prediction is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipRule {
    /// Only the predicted class loses the removed contributions.
    #[default]
    PredictedOnly,
    /// The same concept indices are removed from every class logit.
    AllClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub n: usize,
    pub mode: AblationMode,
    pub samples: usize,
    pub logit_drops: Vec<f64>,
    pub flip_count: usize,
    pub flip_rate: f64,
    pub mean_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub seed: u64,
    pub flip_rule: FlipRule,
    /// Indices of the evaluated images, ascending.
    pub sample: Vec<usize>,
    pub results: Vec<AblationResult>,
}

impl FaithfulnessReport {
    pub fn result(&self, n: usize, mode: AblationMode) -> Option<&AblationResult> {
        self.results.iter().find(|r| r.n == n && r.mode == mode)
    }

    /// Long-format drop table with columns `n,mode,image,drop`.
    pub fn write_drops_csv<W: Write>(&self, names: &[String], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Manifest(format!("writing drops: {e}"));
        out.write_record(["n", "mode", "image", "drop"]).map_err(err)?;
        for r in &self.results {
            let mode = match r.mode {
                AblationMode::Top => "top",
                AblationMode::Random => "random",
            };
            for (&i, d) in self.sample.iter().zip(&r.logit_drops) {
                out.write_record([r.n.to_string(), mode.to_owned(), names[i].clone(), format!("{d:e}")])
                    .map_err(err)?;
            }
        }
        out.flush().map_err(|e| Error::io("drops csv", e))
    }
}

/// Per-image generator, independent of scheduling.
pub fn image_rng(seed: u64, image: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image as u64);
    rng
}

struct Outcome {
    drop: f64,
    flipped: bool,
}

fn ablated_prediction(
    clf: &ConceptClassifier,
    c_x: &[f64],
    logits: &[f64],
    k_hat: usize,
    j: &[usize],
    drop: f64,
    rule: FlipRule,
) -> usize {
    match rule {
        FlipRule::PredictedOnly => {
            let mut l = logits.to_vec();
            l[k_hat] -= drop;
            argmax(&l).expect("non-empty")
        }
        FlipRule::AllClasses => {
            let l: Vec<f64> = (0..clf.num_classes())
                .map(|k| {
                    let c_k = clf.class_concepts().row(k);
                    logits[k] - j.iter().map(|&q| c_x[q] * c_k[q]).sum::<f64>()
                })
                .collect();
            argmax(&l).expect("non-empty")
        }
    }
}

/// Ablation sweep over `ns` for each requested mode. `sample_size` images are
/// drawn without replacement (all images when `None` or too large).
pub fn faithfulness_sweep(
    clf: &ConceptClassifier,
    images: &EmbeddingMatrix,
    ns: &[usize],
    modes: &[AblationMode],
    seed: u64,
    sample_size: Option<usize>,
    rule: FlipRule,
) -> Result<FaithfulnessReport> {
    let m = clf.projection().num_concepts();
    if ns.is_empty() || modes.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs at least one n and one mode".into(),
        ));
    }
    if ns.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("ablation sizes must be sorted ascending".into()));
    }
    if let Some(&n) = ns.iter().find(|&&n| n > m) {
        return Err(Error::InvalidConfig(format!("ablation size {n} exceeds {m} concepts")));
    }
    if images.is_empty() {
        return Err(Error::Empty("ablation images"));
    }
    let sample = sample_indices(images.nrows(), sample_size.unwrap_or(usize::MAX), seed);
    // per image: outcomes[mode][n]
    let per_image: Vec<Vec<Vec<Outcome>>> = sample
        .par_iter()
        .map(|&i| {
            let c_x = clf.activations(&images.row_vec(i))?;
            let logits = clf.logits(&c_x);
            let k_hat = argmax(&logits).ok_or(Error::TooFewClasses { required: 1, found: 0 })?;
            let s = interaction_scores(&c_x, &clf.class_row(k_hat))?;
            let ranked = rank_descending(&s);
            let mut rng = image_rng(seed, i);
            let mut by_mode = Vec::with_capacity(modes.len());
            for &mode in modes {
                let mut outs = Vec::with_capacity(ns.len());
                for &n in ns {
                    let j: Vec<usize> = match mode {
                        AblationMode::Top => ranked[..n].to_vec(),
                        AblationMode::Random => rand::seq::index::sample(&mut rng, m, n).into_vec(),
                    };
                    let ab = ablate_scores(&s, &j);
                    let pred = ablated_prediction(clf, &c_x, &logits, k_hat, &j, ab.drop, rule);
                    outs.push(Outcome {
                        drop: ab.drop,
                        flipped: pred != k_hat,
                    });
                }
                by_mode.push(outs);
            }
            Ok(by_mode)
        })
        .collect::<Result<_>>()?;

    let mut results = Vec::new();
    for (mi, &mode) in modes.iter().enumerate() {
        for (ni, &n) in ns.iter().enumerate() {
            let drops: Vec<f64> = per_image.iter().map(|o| o[mi][ni].drop).collect();
            let flips = per_image.iter().filter(|o| o[mi][ni].flipped).count();
            let samples = drops.len();
            results.push(AblationResult {
                n,
                mode,
                samples,
                mean_drop: drops.iter().sum::<f64>() / samples as f64,
                flip_count: flips,
                flip_rate: flips as f64 / samples as f64,
                logit_drops: drops,
            });
        }
    }
    Ok(FaithfulnessReport {
        seed,
        flip_rule: rule,
        sample,
        results,
    })
}

/// Top-n versus random-n on the same image sample.
pub fn intervention_compare(
    clf: &ConceptClassifier,
    images: &EmbeddingMatrix,
    n: usize,
    seed: u64,
    sample_size: Option<usize>,
) -> Result<(AblationResult, AblationResult)> {
    let mut r = faithfulness_sweep(
        clf,
        images,
        &[n],
        &[AblationMode::Top, AblationMode::Random],
        seed,
        sample_size,
        FlipRule::PredictedOnly,
    )?
    .results;
    let random = r.pop().expect("two results");
    let top = r.pop().expect("two results");
    Ok((top, random))
}
