//! Matching and reconstruction objectives, their gradient, and the Adam
//! training loop that fits the projection.
//!
//! For a batch `V` (B x d), class text rows `T` (K x d) and projection `A`
//! (d x m) with temperature `s`:
//!
//! ```text
//! L_match = mean((A - Phi)^2)
//! Z = s (V A)(T A)^T          concept-space logits, B x K
//! Y = s V T^T                 original logits
//! L_recon = mean_i KL(softmax(Z_i) || softmax(Y_i))
//! L_total = [use_match] L_match + lambda [use_recon] L_recon
//! ```
//!
//! With `G_ik = p_ik (log p_ik - log q_ik - KL_i) / B` the reconstruction
//! gradient is `dL/dA = s (V^T G (T A) + T^T G^T (V A))`: both factors of
//! the bilinear logit depend on `A`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concept::{renormalize_columns, ConceptBasis, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

/// Rows per chunk when evaluating losses over a whole dataset.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// `None` means `min(512, N)`.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub temperature: f64,
    pub use_match: bool,
    pub use_recon: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-2,
            iterations: 10_000,
            batch_size: None,
            seed: 0,
            temperature: 1.0,
            use_match: true,
            use_recon: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainingConfig {
    /// Dataset presets: lambda = 5 for CUB and Places365, 1 elsewhere.
    pub fn preset(dataset: &str) -> Self {
        let lambda = match dataset.to_ascii_lowercase().as_str() {
            "cub" | "cub200" | "cub-200-2011" | "places365" | "places" => 5.0,
            _ => 1.0,
        };
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !self.use_match && !self.use_recon {
            return bad("at least one of use_match/use_recon must be enabled".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be a non-negative real", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("Adam epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(512).min(n).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub matching: f64,
    pub reconstruction: f64,
    pub total: f64,
}

fn check_same_shape(a: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<()> {
    if a.shape() != phi.shape() {
        let (expected, found) = if a.nrows() != phi.nrows() {
            (phi.nrows(), a.nrows())
        } else {
            (phi.ncols(), a.ncols())
        };
        return Err(Error::DimensionMismatch {
            context: "projection vs basis",
            expected,
            found,
        });
    }
    Ok(())
}

pub fn matching_loss(a: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(a, phi)?;
    let n = (a.nrows() * a.ncols()) as f64;
    Ok((a - phi).iter().map(|v| v * v).sum::<f64>() / n)
}

fn log_softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.apply(|v| *v -= lse);
    }
    out
}

/// Log-probabilities of the concept-space (`log p`) and original (`log q`)
/// class distributions for each batch row, plus the projected rows.
struct Forward {
    image_concepts: DMatrix<f64>,
    class_concepts: DMatrix<f64>,
    log_p: DMatrix<f64>,
    log_q: DMatrix<f64>,
    kl: Vec<f64>,
}

fn check_recon_inputs(batch: &DMatrix<f64>, t: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<()> {
    if batch.nrows() == 0 {
        return Err(Error::Empty("reconstruction batch"));
    }
    if t.nrows() < 2 {
        return Err(Error::TooFewClasses {
            required: 2,
            found: t.nrows(),
        });
    }
    for (context, cols) in [("batch embedding", batch.ncols()), ("class embedding", t.ncols())] {
        if cols != a.nrows() {
            return Err(Error::DimensionMismatch {
                context,
                expected: a.nrows(),
                found: cols,
            });
        }
    }
    Ok(())
}

fn forward(batch: &DMatrix<f64>, t: &DMatrix<f64>, a: &DMatrix<f64>, temperature: f64) -> Result<Forward> {
    check_recon_inputs(batch, t, a)?;
    let image_concepts = batch * a;
    let class_concepts = t * a;
    let concept_logits = (&image_concepts * class_concepts.transpose()) * temperature;
    let original_logits = (batch * t.transpose()) * temperature;
    let log_p = log_softmax_rows(&concept_logits);
    let log_q = log_softmax_rows(&original_logits);
    let kl: Vec<f64> = (0..batch.nrows())
        .map(|i| {
            log_p
                .row(i)
                .iter()
                .zip(log_q.row(i).iter())
                .map(|(&lp, &lq)| {
                    let p = lp.exp();
                    if p == 0.0 {
                        0.0
                    } else {
                        p * (lp - lq)
                    }
                })
                .sum::<f64>()
        })
        .collect();
    if kl.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("reconstruction loss"));
    }
    // Gibbs: KL >= 0; rounding may leave a tiny negative residue
    let kl = kl.into_iter().map(|v| v.max(0.0)).collect();
    Ok(Forward {
        image_concepts,
        class_concepts,
        log_p,
        log_q,
        kl,
    })
}

/// Mean KL(concept distribution || original distribution) over the batch.
pub fn reconstruction_loss(batch: &DMatrix<f64>, t: &DMatrix<f64>, a: &DMatrix<f64>, temperature: f64) -> Result<f64> {
    let f = forward(batch, t, a, temperature)?;
    Ok(f.kl.iter().sum::<f64>() / batch.nrows() as f64)
}

pub fn total_loss(
    batch: &DMatrix<f64>,
    t: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    cfg: &TrainingConfig,
) -> Result<LossBreakdown> {
    let matching = matching_loss(a, phi)?;
    let reconstruction = if cfg.use_recon {
        reconstruction_loss(batch, t, a, cfg.temperature)?
    } else {
        0.0
    };
    Ok(combine(matching, reconstruction, cfg))
}

fn combine(matching: f64, reconstruction: f64, cfg: &TrainingConfig) -> LossBreakdown {
    let mut total = 0.0;
    if cfg.use_match {
        total += matching;
    }
    if cfg.use_recon {
        total += cfg.lambda * reconstruction;
    }
    LossBreakdown {
        matching,
        reconstruction,
        total,
    }
}

/// Loss and analytic gradient of `L_total` with respect to `A`.
pub fn loss_and_gradient(
    batch: &DMatrix<f64>,
    t: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    cfg: &TrainingConfig,
) -> Result<(LossBreakdown, DMatrix<f64>)> {
    check_same_shape(a, phi)?;
    let matching = matching_loss(a, phi)?;
    let mut grad = DMatrix::zeros(a.nrows(), a.ncols());
    if cfg.use_match {
        let scale = 2.0 / (a.nrows() * a.ncols()) as f64;
        grad += (a - phi) * scale;
    }
    let mut reconstruction = 0.0;
    if cfg.use_recon {
        let f = forward(batch, t, a, cfg.temperature)?;
        let b = batch.nrows() as f64;
        reconstruction = f.kl.iter().sum::<f64>() / b;
        let mut g = DMatrix::zeros(batch.nrows(), t.nrows());
        for i in 0..batch.nrows() {
            for k in 0..t.nrows() {
                let lp = f.log_p[(i, k)];
                let p = lp.exp();
                if p != 0.0 {
                    g[(i, k)] = p * (lp - f.log_q[(i, k)] - f.kl[i]) / b;
                }
            }
        }
        let image_side = batch.transpose() * (&g * &f.class_concepts);
        let class_side = t.transpose() * (g.transpose() * &f.image_concepts);
        grad += (image_side + class_side) * (cfg.temperature * cfg.lambda);
    }
    for r in 0..grad.nrows() {
        for c in 0..grad.ncols() {
            if !grad[(r, c)].is_finite() {
                return Err(Error::NonFiniteGradient { row: r, col: c });
            }
        }
    }
    Ok((combine(matching, reconstruction, cfg), grad))
}

pub fn loss_gradient(
    batch: &DMatrix<f64>,
    t: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    cfg: &TrainingConfig,
) -> Result<DMatrix<f64>> {
    loss_and_gradient(batch, t, phi, a, cfg).map(|(_, g)| g)
}

/// Losses over a whole image set, evaluated in fixed-size chunks.
pub fn dataset_loss(
    images: &DMatrix<f64>,
    t: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    cfg: &TrainingConfig,
) -> Result<LossBreakdown> {
    let matching = matching_loss(a, phi)?;
    let mut reconstruction = 0.0;
    if cfg.use_recon {
        let n = images.nrows();
        if n == 0 {
            return Err(Error::Empty("training images"));
        }
        let mut start = 0;
        while start < n {
            let len = EVAL_CHUNK.min(n - start);
            let chunk = images.rows(start, len).clone_owned();
            reconstruction += reconstruction_loss(&chunk, t, a, cfg.temperature)? * len as f64;
            start += len;
        }
        reconstruction /= n as f64;
    }
    Ok(combine(matching, reconstruction, cfg))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    lr: f64,
    step: i32,
    first: DMatrix<f64>,
    second: DMatrix<f64>,
}

impl Adam {
    pub fn new(shape: (usize, usize), lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            lr,
            step: 0,
            first: DMatrix::zeros(shape.0, shape.1),
            second: DMatrix::zeros(shape.0, shape.1),
        }
    }

    pub fn step(&mut self, params: &mut DMatrix<f64>, grad: &DMatrix<f64>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub iteration: usize,
    pub l_match: f64,
    pub l_recon: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Batch losses before each step, one per iteration (1-based).
    pub records: Vec<TrainingRecord>,
    /// Iterations after which the columns of `A` were renormalized.
    pub epoch_boundaries: Vec<usize>,
    /// Largest `| ||A_j|| - 1 |` observed right after each renormalization.
    pub max_norm_deviation: f64,
    /// Full training-set losses at initialization and after training.
    pub initial: LossBreakdown,
    pub final_losses: LossBreakdown,
}

impl TrainingTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Manifest(format!("writing trace: {e}"));
        out.write_record(["iteration", "l_match", "l_recon", "l_total"])
            .map_err(err)?;
        for r in &self.records {
            out.write_record([
                r.iteration.to_string(),
                r.l_match.to_string(),
                r.l_recon.to_string(),
                r.l_total.to_string(),
            ])
            .map_err(err)?;
        }
        out.flush().map_err(|e| Error::io("trace csv", e))
    }
}

fn max_norm_deviation(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| (c.norm() - 1.0).abs()).fold(0.0, f64::max)
}

/// Fits `A` starting from `A = Phi`.
///
/// Each epoch visits the images in a fresh seeded shuffle, one Adam step per
/// batch (the final partial batch included); columns of `A` are rescaled to
/// unit norm after every epoch and once more after the last iteration.
pub fn train(
    images: &EmbeddingMatrix,
    classes: &EmbeddingMatrix,
    basis: &ConceptBasis,
    cfg: &TrainingConfig,
) -> Result<(ProjectionMatrix, TrainingTrace)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("training images"));
    }
    for (context, dim) in [("image embeddings", images.dim()), ("class embeddings", classes.dim())] {
        if dim != basis.dim() {
            return Err(Error::DimensionMismatch {
                context,
                expected: basis.dim(),
                found: dim,
            });
        }
    }
    if cfg.use_recon && classes.nrows() < 2 {
        return Err(Error::TooFewClasses {
            required: 2,
            found: classes.nrows(),
        });
    }

    let v = images.data();
    let t = classes.data();
    let phi = basis.phi();
    let mut projection = ProjectionMatrix::from_basis(basis);
    let initial = dataset_loss(v, t, phi, projection.matrix(), cfg)?;

    let n = images.nrows();
    let batch_size = cfg.effective_batch(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        phi.shape(),
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_epsilon,
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut boundaries = Vec::new();
    let mut worst = 0.0f64;
    let mut iteration = 0;

    'outer: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            iteration += 1;
            let batch = v.select_rows(chunk.iter());
            let (loss, grad) = loss_and_gradient(&batch, t, phi, projection.matrix(), cfg).map_err(|e| match e {
                Error::Numerical(_) | Error::NonFiniteGradient { .. } => Error::Divergence { iteration },
                other => other,
            })?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence { iteration });
            }
            records.push(TrainingRecord {
                iteration,
                l_match: loss.matching,
                l_recon: loss.reconstruction,
                l_total: loss.total,
            });
            adam.step(projection.matrix_mut(), &grad);
            if iteration == cfg.iterations {
                break 'outer;
            }
        }
        renormalize_columns(projection.matrix_mut());
        boundaries.push(iteration);
        worst = worst.max(max_norm_deviation(projection.matrix()));
    }
    if boundaries.last() != Some(&iteration) {
        renormalize_columns(projection.matrix_mut());
        boundaries.push(iteration);
        worst = worst.max(max_norm_deviation(projection.matrix()));
    }
    if projection.matrix().iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence { iteration });
    }
    projection.set_trained(true);
    let final_losses = dataset_loss(v, t, phi, projection.matrix(), cfg)?;
    Ok((
        projection,
        TrainingTrace {
            records,
            epoch_boundaries: boundaries,
            max_norm_deviation: worst,
            initial,
            final_losses,
        },
    ))
}
