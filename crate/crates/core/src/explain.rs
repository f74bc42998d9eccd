//! Concept-level explanations built on interaction scores `s = c_x ⊙ c_k`.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::{project_rows, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::eval::ConceptClassifier;
use crate::store::EmbeddingMatrix;

/// Threshold above which a concept counts as active.
pub const DEFAULT_DENSITY_TAU: f64 = 0.01;
pub const DEFAULT_SAMPLE_N: usize = 9;
pub const DEFAULT_TOP_N: usize = 9;

pub fn interaction_scores(c_x: &[f64], c_k: &[f64]) -> Result<Vec<f64>> {
    if c_x.len() != c_k.len() {
        return Err(Error::DimensionMismatch {
            context: "interaction scores",
            expected: c_x.len(),
            found: c_k.len(),
        });
    }
    Ok(c_x.iter().zip(c_k).map(|(a, b)| a * b).collect())
}

/// Indices sorted by descending value, ties by ascending index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub image_name: String,
    pub predicted_class: String,
    /// `<c_x, c_k>` for the predicted class; equals the sum of all m scores.
    pub logit: f64,
    pub concepts: Vec<ConceptScore>,
}

impl ExplanationRecord {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} -> {} (logit {:.6})\n",
            self.image_name, self.predicted_class, self.logit
        );
        let width = self.concepts.iter().map(|c| c.concept.len()).max().unwrap_or(0);
        for (rank, c) in self.concepts.iter().enumerate() {
            let _ = writeln!(out, "{:>4}  {:<width$}  {:.6}", rank + 1, c.concept, c.score);
        }
        out
    }
}

fn top_scores(scores: &[f64], names: &[String], top_k: usize) -> Vec<ConceptScore> {
    rank_descending(scores)
        .into_iter()
        .take(top_k)
        .map(|j| ConceptScore {
            concept: names[j].clone(),
            index: j,
            score: scores[j],
        })
        .collect()
}

fn check_top_k(top_k: usize, m: usize) -> Result<()> {
    if top_k == 0 || top_k > m {
        return Err(Error::InvalidConfig(format!("top_k {top_k} must be in 1..={m}")));
    }
    Ok(())
}

/// Explains the predicted class of image `i`.
pub fn explain_image(
    clf: &ConceptClassifier,
    images: &EmbeddingMatrix,
    i: usize,
    top_k: usize,
) -> Result<ExplanationRecord> {
    let a = clf.projection();
    check_top_k(top_k, a.num_concepts())?;
    if i >= images.nrows() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: images.nrows(),
        });
    }
    let c_x = clf.activations(&images.row_vec(i))?;
    let k = clf.predict(&c_x)?;
    let scores = interaction_scores(&c_x, &clf.class_row(k))?;
    Ok(ExplanationRecord {
        image_name: images.names()[i].clone(),
        predicted_class: clf.class_names()[k].clone(),
        logit: clf.logits(&c_x)[k],
        concepts: top_scores(&scores, a.names(), top_k),
    })
}

pub fn explain_all(clf: &ConceptClassifier, images: &EmbeddingMatrix, top_k: usize) -> Result<Vec<ExplanationRecord>> {
    (0..images.nrows())
        .into_par_iter()
        .map(|i| explain_image(clf, images, i, top_k))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub class: String,
    pub seed: u64,
    pub sampled_images: Vec<String>,
    pub concepts: Vec<ConceptScore>,
}

/// Sorted sample without replacement; everything when `n >= len`.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Mean interaction scores against class `k` over up to `sample_n` of
/// `images` (all assumed to belong to `k`).
pub fn explain_class(
    clf: &ConceptClassifier,
    images: &EmbeddingMatrix,
    k: usize,
    sample_n: usize,
    seed: u64,
    top_k: usize,
) -> Result<ClassSignature> {
    if k >= clf.num_classes() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: clf.num_classes(),
        });
    }
    let class = clf.class_names()[k].clone();
    if images.is_empty() {
        return Err(Error::EmptyClass(class));
    }
    if sample_n == 0 {
        return Err(Error::InvalidConfig("sample size must be positive".into()));
    }
    let a = clf.projection();
    check_top_k(top_k, a.num_concepts())?;
    let picked = sample_indices(images.nrows(), sample_n, seed);
    let c_k = clf.class_row(k);
    let mut mean = vec![0.0; a.num_concepts()];
    for &i in &picked {
        let s = interaction_scores(&clf.activations(&images.row_vec(i))?, &c_k)?;
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let n = picked.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    Ok(ClassSignature {
        class,
        seed,
        sampled_images: picked.iter().map(|&i| images.names()[i].clone()).collect(),
        concepts: top_scores(&mean, a.names(), top_k),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub image: String,
    pub index: usize,
    pub activation: f64,
}

/// Images with the highest activation `c_x^(j)` for one concept.
pub fn retrieve_by_concept(
    a: &ProjectionMatrix,
    concept: &str,
    images: &EmbeddingMatrix,
    top_n: usize,
) -> Result<Vec<Retrieval>> {
    let j = a.resolve_concept(concept)?;
    let concepts = project_rows(images.data(), a)?;
    let col: Vec<f64> = concepts.column(j).iter().copied().collect();
    Ok(rank_descending(&col)
        .into_iter()
        .take(top_n)
        .map(|i| Retrieval {
            image: images.names()[i].clone(),
            index: i,
            activation: col[i],
        })
        .collect())
}

/// Which class each image's scores are computed against.
#[derive(Debug, Clone, Copy)]
pub enum Pairing<'a> {
    Predicted,
    GroundTruth(&'a [usize]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub tau: f64,
    pub per_image: Vec<usize>,
    pub per_concept: Vec<usize>,
    pub mean_active: f64,
    pub median_active: f64,
}

pub fn count_active(scores: &[f64], tau: f64) -> usize {
    scores.iter().filter(|&&s| s > tau).count()
}

pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

pub fn activation_density(
    clf: &ConceptClassifier,
    images: &EmbeddingMatrix,
    tau: f64,
    pairing: Pairing<'_>,
) -> Result<DensityReport> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::InvalidConfig(format!("density threshold {tau} must be >= 0")));
    }
    if let Pairing::GroundTruth(labels) = pairing {
        if labels.len() != images.nrows() {
            return Err(Error::DimensionMismatch {
                context: "labels per image",
                expected: images.nrows(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&k| k >= clf.num_classes()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: clf.num_classes(),
            });
        }
    }
    let m = clf.projection().num_concepts();
    let active: Vec<Vec<bool>> = (0..images.nrows())
        .into_par_iter()
        .map(|i| {
            let c_x = clf.activations(&images.row_vec(i))?;
            let k = match pairing {
                Pairing::Predicted => clf.predict(&c_x)?,
                Pairing::GroundTruth(labels) => labels[i],
            };
            let s = interaction_scores(&c_x, &clf.class_row(k))?;
            Ok(s.iter().map(|&v| v > tau).collect())
        })
        .collect::<Result<_>>()?;
    let per_image: Vec<usize> = active.iter().map(|r| r.iter().filter(|&&b| b).count()).collect();
    let mut per_concept = vec![0usize; m];
    for row in &active {
        for (c, &b) in per_concept.iter_mut().zip(row) {
            *c += b as usize;
        }
    }
    let mean_active = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<usize>() as f64 / per_image.len() as f64
    };
    Ok(DensityReport {
        tau,
        median_active: median(&per_image),
        mean_active,
        per_image,
        per_concept,
    })
}
