//! Zero-shot and generalized zero-shot evaluation, plus fidelity of the
//! concept-space classifier to the original embedding-similarity classifier.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::{project_rows, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::manifest::ClassSplit;
use crate::rank::{kendall_tau_b, spearman};
use crate::store::EmbeddingMatrix;

/// Classes considered by the Kendall correlation, ranked by original logit.
pub const KENDALL_TOP: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    class_names: Vec<String>,
    seen: Vec<bool>,
}

impl LabelSpace {
    pub fn new(class_names: Vec<String>, seen: Vec<bool>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::TooFewClasses { required: 1, found: 0 });
        }
        if seen.len() != class_names.len() {
            return Err(Error::DimensionMismatch {
                context: "seen mask",
                expected: class_names.len(),
                found: seen.len(),
            });
        }
        Ok(Self { class_names, seen })
    }

    /// Labels in `classes` order, flagged by membership in `split.seen`.
    pub fn from_split(classes: &[String], split: &ClassSplit) -> Result<Self> {
        split.validate(classes)?;
        let seen = classes.iter().map(|c| split.is_seen(c)).collect();
        Self::new(classes.to_vec(), seen)
    }

    /// Source classes are seen, target classes unseen, in that order.
    pub fn cross_dataset(source: &[String], target: &[String]) -> Result<Self> {
        let mut names = source.to_vec();
        names.extend(target.iter().cloned());
        let mut seen = vec![true; source.len()];
        seen.extend(std::iter::repeat_n(false, target.len()));
        Self::new(names, seen)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn is_seen(&self, k: usize) -> bool {
        self.seen[k]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn seen_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.seen[k]).collect()
    }

    pub fn unseen_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| !self.seen[k]).collect()
    }

    /// Ground-truth class index per image.
    pub fn resolve_labels(&self, labels: &[String]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| self.index_of(l).ok_or_else(|| Error::UnknownLabel(l.clone())))
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Concept-space prediction `argmax_k <c_x, c_k>` over rows of `class_concepts`.
pub fn predict(image_concepts: &[f64], class_concepts: &DMatrix<f64>) -> Result<usize> {
    if class_concepts.nrows() == 0 {
        return Err(Error::TooFewClasses { required: 1, found: 0 });
    }
    if class_concepts.ncols() != image_concepts.len() {
        return Err(Error::DimensionMismatch {
            context: "predicted activations",
            expected: class_concepts.ncols(),
            found: image_concepts.len(),
        });
    }
    let logits = concept_logits(image_concepts, class_concepts);
    Ok(argmax(&logits).expect("non-empty"))
}

/// `<c_x, c_k>` for every class row, accumulated as the sum of the
/// concept-wise products.
pub fn concept_logits(image_concepts: &[f64], class_concepts: &DMatrix<f64>) -> Vec<f64> {
    class_concepts
        .row_iter()
        .map(|row| image_concepts.iter().zip(row.iter()).map(|(x, c)| x * c).sum())
        .collect()
}

pub fn harmonic_mean(acc_seen: f64, acc_unseen: f64) -> f64 {
    let s = acc_seen + acc_unseen;
    if s > 0.0 {
        2.0 * acc_seen * acc_unseen / s
    } else {
        0.0
    }
}

/// How class logits are produced for an image.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    /// Original embedding similarity `<v_x, t_k>`.
    Raw,
    /// Concept-space similarity `<v_x A, t_k A>`.
    Concept(&'a ProjectionMatrix),
}

/// Image x class logit matrix, rows computed independently.
pub fn class_logits(images: &DMatrix<f64>, classes: &DMatrix<f64>, scorer: Scorer<'_>) -> Result<DMatrix<f64>> {
    if images.ncols() != classes.ncols() && images.nrows() > 0 && classes.nrows() > 0 {
        return Err(Error::DimensionMismatch {
            context: "image vs class embeddings",
            expected: classes.ncols(),
            found: images.ncols(),
        });
    }
    let (img, cls) = match scorer {
        Scorer::Raw => (images.clone(), classes.clone()),
        Scorer::Concept(a) => (project_rows(images, a)?, project_rows(classes, a)?),
    };
    let rows: Vec<Vec<f64>> = (0..img.nrows())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = img.row(i).iter().copied().collect();
            concept_logits(&x, &cls)
        })
        .collect();
    Ok(DMatrix::from_fn(img.nrows(), cls.nrows(), |r, c| rows[r][c]))
}

/// Class side of the concept-space classifier: `C_Y = T A` with names.
#[derive(Debug, Clone)]
pub struct ConceptClassifier {
    a: ProjectionMatrix,
    class_names: Vec<String>,
    class_concepts: DMatrix<f64>,
}

impl ConceptClassifier {
    pub fn new(a: &ProjectionMatrix, classes: &EmbeddingMatrix) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::TooFewClasses { required: 1, found: 0 });
        }
        Ok(Self {
            class_concepts: project_rows(classes.data(), a)?,
            class_names: classes.names().to_vec(),
            a: a.clone(),
        })
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.a
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// K x m class activations.
    pub fn class_concepts(&self) -> &DMatrix<f64> {
        &self.class_concepts
    }

    pub fn class_row(&self, k: usize) -> Vec<f64> {
        self.class_concepts.row(k).iter().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn activations(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        crate::concept::project_vector(embedding, &self.a)
    }

    pub fn logits(&self, image_concepts: &[f64]) -> Vec<f64> {
        concept_logits(image_concepts, &self.class_concepts)
    }

    pub fn predict(&self, image_concepts: &[f64]) -> Result<usize> {
        predict(image_concepts, &self.class_concepts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Each image competes only against classes of its own split.
    Zsl,
    /// Every image competes against all classes.
    Gzsl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub seen: bool,
    pub images: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub harmonic_mean: f64,
    pub seen_images: usize,
    pub unseen_images: usize,
    pub per_class: Vec<ClassAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelityReport>,
}

fn restricted_argmax(logits: &[f64], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &k in &candidates[1..] {
        if logits[k] > logits[best] {
            best = k;
        }
    }
    best
}

/// Accuracy of `logits` (images x classes) against ground-truth indices.
pub fn evaluate_logits(
    logits: &DMatrix<f64>,
    truth: &[usize],
    space: &LabelSpace,
    mode: EvalMode,
) -> Result<EvalReport> {
    if logits.nrows() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "labels per image",
            expected: logits.nrows(),
            found: truth.len(),
        });
    }
    if logits.ncols() != space.len() {
        return Err(Error::DimensionMismatch {
            context: "classes in label space",
            expected: space.len(),
            found: logits.ncols(),
        });
    }
    let seen = space.seen_indices();
    let unseen = space.unseen_indices();
    let all: Vec<usize> = (0..space.len()).collect();
    if mode == EvalMode::Gzsl && (seen.is_empty() || unseen.is_empty()) {
        return Err(Error::InvalidConfig(
            "generalized evaluation needs at least one seen and one unseen class".into(),
        ));
    }
    let mut images = vec![0usize; space.len()];
    let mut correct = vec![0usize; space.len()];
    for (i, &k) in truth.iter().enumerate() {
        if k >= space.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: space.len(),
            });
        }
        let candidates = match mode {
            EvalMode::Gzsl => &all,
            EvalMode::Zsl if space.is_seen(k) => &seen,
            EvalMode::Zsl => &unseen,
        };
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        images[k] += 1;
        if restricted_argmax(&row, candidates) == k {
            correct[k] += 1;
        }
    }
    let sum = |idx: &[usize], v: &[usize]| idx.iter().map(|&k| v[k]).sum::<usize>();
    let (n_seen, n_unseen) = (sum(&seen, &images), sum(&unseen, &images));
    let ratio = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let acc_seen = ratio(sum(&seen, &correct), n_seen);
    let acc_unseen = ratio(sum(&unseen, &correct), n_unseen);
    let per_class = (0..space.len())
        .map(|k| ClassAccuracy {
            class: space.class_names()[k].clone(),
            seen: space.is_seen(k),
            images: images[k],
            correct: correct[k],
            accuracy: ratio(correct[k], images[k]),
        })
        .collect();
    Ok(EvalReport {
        mode,
        acc_seen,
        acc_unseen,
        harmonic_mean: harmonic_mean(acc_seen, acc_unseen),
        seen_images: n_seen,
        unseen_images: n_unseen,
        per_class,
        fidelity: None,
    })
}

/// Evaluates `images` (ground truth `labels`) against `classes`, whose rows
/// follow the order of `space`.
pub fn evaluate(
    images: &EmbeddingMatrix,
    labels: &[String],
    space: &LabelSpace,
    classes: &EmbeddingMatrix,
    scorer: Scorer<'_>,
    mode: EvalMode,
) -> Result<EvalReport> {
    if classes.nrows() != space.len() {
        return Err(Error::DimensionMismatch {
            context: "class embeddings vs label space",
            expected: space.len(),
            found: classes.nrows(),
        });
    }
    let truth = space.resolve_labels(labels)?;
    let logits = class_logits(images.data(), classes.data(), scorer)?;
    evaluate_logits(&logits, &truth, space, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub images: usize,
    pub top1_agreement: f64,
    pub spearman_mean: f64,
    pub kendall_top50_mean: f64,
    pub kl_mean: f64,
    /// Images whose logits were constant, so a rank correlation is undefined.
    pub spearman_skipped: usize,
    pub kendall_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageFidelity {
    pub agree: bool,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
    pub kl: f64,
}

fn log_softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let max = x.iter().map(|v| v * temperature).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v * temperature - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v * temperature - lse).collect()
}

/// KL(softmax(s . concept) || softmax(s . original)).
pub fn logit_kl(concept: &[f64], original: &[f64], temperature: f64) -> f64 {
    let lp = log_softmax(concept, temperature);
    let lq = log_softmax(original, temperature);
    lp.iter()
        .zip(&lq)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Indices of the `k` largest values, descending, ties to the lower index.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

pub fn image_fidelity(original: &[f64], concept: &[f64], temperature: f64) -> ImageFidelity {
    let top = top_indices(original, KENDALL_TOP.min(original.len()));
    let sub_o: Vec<f64> = top.iter().map(|&k| original[k]).collect();
    let sub_c: Vec<f64> = top.iter().map(|&k| concept[k]).collect();
    ImageFidelity {
        agree: argmax(original) == argmax(concept),
        spearman: spearman(original, concept),
        kendall: kendall_tau_b(&sub_o, &sub_c),
        kl: logit_kl(concept, original, temperature),
    }
}

pub fn fidelity(
    images: &DMatrix<f64>,
    classes: &DMatrix<f64>,
    a: &ProjectionMatrix,
    temperature: f64,
) -> Result<FidelityReport> {
    if classes.nrows() < 2 {
        return Err(Error::TooFewClasses {
            required: 2,
            found: classes.nrows(),
        });
    }
    if images.nrows() == 0 {
        return Err(Error::Empty("fidelity images"));
    }
    let original = class_logits(images, classes, Scorer::Raw)?;
    let concept = class_logits(images, classes, Scorer::Concept(a))?;
    let per_image: Vec<ImageFidelity> = (0..images.nrows())
        .into_par_iter()
        .map(|i| {
            let o: Vec<f64> = original.row(i).iter().copied().collect();
            let c: Vec<f64> = concept.row(i).iter().copied().collect();
            image_fidelity(&o, &c, temperature)
        })
        .collect();
    Ok(summarize_fidelity(&per_image))
}

pub fn summarize_fidelity(per_image: &[ImageFidelity]) -> FidelityReport {
    let n = per_image.len();
    let agree = per_image.iter().filter(|f| f.agree).count();
    let mean_of = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let sp: Vec<f64> = per_image.iter().filter_map(|f| f.spearman).collect();
    let kd: Vec<f64> = per_image.iter().filter_map(|f| f.kendall).collect();
    FidelityReport {
        images: n,
        top1_agreement: if n == 0 { 0.0 } else { agree as f64 / n as f64 },
        spearman_skipped: n - sp.len(),
        kendall_skipped: n - kd.len(),
        spearman_mean: mean_of(sp),
        kendall_top50_mean: mean_of(kd),
        kl_mean: mean_of(per_image.iter().map(|f| f.kl).collect()),
    }
}
