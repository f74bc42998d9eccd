//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Every oracle here is computed independently of the library.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use conceptlens::concept::{ConceptBasis, ProjectionMatrix};
use conceptlens::eval::{evaluate, fidelity, harmonic_mean, predict, ConceptClassifier, EvalMode, LabelSpace, Scorer};
use conceptlens::explain::interaction_scores;
use conceptlens::faithfulness::{ablate, faithfulness_sweep, AblationMode, FlipRule};
use conceptlens::rank::{kendall_tau_b, spearman};
use conceptlens::spatial::{class_alignment_eval, region_metrics, Heatmap, PatchGrid};
use conceptlens::store::MaskGrid;
use conceptlens::structure::{gram_offdiag_stats, pca_stats, PcaMethod};
use conceptlens::synthetic::{alignment_grids, GridConfig, SyntheticTask, TaskConfig};
use conceptlens::train::{loss_gradient, matching_loss, reconstruction_loss, total_loss, train, TrainingConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn fail<T>(msg: impl Into<String>) -> Result<T, String> {
    Err(msg.into())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
    for mut r in m.row_iter_mut() {
        let norm = r.norm();
        r /= norm;
    }
    m
}

// ---------------------------------------------------------------- oracles

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Loss written out with explicit loops: mean squared deviation from Phi
/// plus lambda times the batch-mean KL of concept vs original softmaxes.
fn oracle_loss(v: &DMatrix<f64>, t: &DMatrix<f64>, phi: &DMatrix<f64>, a: &DMatrix<f64>, lambda: f64, tau: f64) -> f64 {
    let (d, m) = a.shape();
    let mut mse = 0.0;
    for r in 0..d {
        for c in 0..m {
            mse += (a[(r, c)] - phi[(r, c)]).powi(2);
        }
    }
    mse /= (d * m) as f64;
    let project = |x: &[f64]| -> Vec<f64> { (0..m).map(|j| (0..d).map(|r| x[r] * a[(r, j)]).sum()).collect() };
    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(p, q)| p * q).sum() };
    let rows = |mat: &DMatrix<f64>| -> Vec<Vec<f64>> { mat.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (vs, ts) = (rows(v), rows(t));
    let class_concepts: Vec<Vec<f64>> = ts.iter().map(|x| project(x)).collect();
    let mut total_kl = 0.0;
    for x in &vs {
        let c = project(x);
        let p = softmax(&class_concepts.iter().map(|ck| tau * dot(&c, ck)).collect::<Vec<_>>());
        let q = softmax(&ts.iter().map(|tk| tau * dot(x, tk)).collect::<Vec<_>>());
        total_kl += kl(&p, &q);
    }
    mse + lambda * total_kl / vs.len() as f64
}

fn brute_doubled_ranks(x: &[f64]) -> Vec<i64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as i64;
            let equal = x.iter().filter(|&&w| w == v).count() as i64;
            2 + 2 * less + (equal - 1)
        })
        .collect()
}

fn brute_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (a, b) = (brute_doubled_ranks(x), brute_doubled_ranks(y));
    let n = a.len() as i128;
    let sum = |v: &[i64]| v.iter().map(|&q| q as i128).sum::<i128>();
    let dot = |u: &[i64], v: &[i64]| u.iter().zip(v).map(|(&p, &q)| p as i128 * q as i128).sum::<i128>();
    let num = n * dot(&a, &b) - sum(&a) * sum(&b);
    let va = n * dot(&a, &a) - sum(&a) * sum(&a);
    let vb = n * dot(&b, &b) - sum(&b) * sum(&b);
    if va == 0 || vb == 0 {
        return None;
    }
    Some(num as f64 / ((va as f64) * (vb as f64)).sqrt())
}

fn brute_kendall(x: &[f64], y: &[f64]) -> Option<f64> {
    use std::cmp::Ordering::Equal;
    let n = x.len();
    let (mut score, mut tx, mut ty) = (0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].partial_cmp(&x[j]).unwrap();
            let dy = y[i].partial_cmp(&y[j]).unwrap();
            tx += (dx == Equal) as u64;
            ty += (dy == Equal) as u64;
            if dx != Equal && dy != Equal {
                score += if dx == dy { 1 } else { -1 };
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as u64;
    let (a, b) = (n0 - tx, n0 - ty);
    if a == 0 || b == 0 {
        return None;
    }
    Some(score as f64 / ((a as f64) * (b as f64)).sqrt())
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------- criteria

fn gradient_correctness() -> Outcome {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut seed = 100;
    for &lambda in &[0.0, 1.0, 5.0] {
        for &tau in &[1.0, 100.0] {
            for _ in 0..4 {
                seed += 1;
                let mut r = rng(seed);
                let d = r.gen_range(2..=5);
                let m = r.gen_range(1..=6);
                let k = r.gen_range(2..=4);
                let b = r.gen_range(1..=3);
                let phi = unit_rows(&mut r, m, d).transpose();
                let a = &phi + DMatrix::from_fn(d, m, |_, _| r.gen_range(-0.2..0.2));
                let v = unit_rows(&mut r, b, d);
                let t = unit_rows(&mut r, k, d);
                let cfg = TrainingConfig {
                    lambda,
                    temperature: tau,
                    ..Default::default()
                };
                let lib = total_loss(&v, &t, &phi, &a, &cfg).map_err(|e| e.to_string())?.total;
                let own = oracle_loss(&v, &t, &phi, &a, lambda, tau);
                if (lib - own).abs() > 1e-12 * own.abs().max(1.0) {
                    return fail(format!("seed {seed}: loss {lib} differs from oracle {own}"));
                }
                let g = loss_gradient(&v, &t, &phi, &a, &cfg).map_err(|e| e.to_string())?;
                for rr in 0..d {
                    for cc in 0..m {
                        let mut plus = a.clone();
                        let mut minus = a.clone();
                        plus[(rr, cc)] += H;
                        minus[(rr, cc)] -= H;
                        let fd = (oracle_loss(&v, &t, &phi, &plus, lambda, tau)
                            - oracle_loss(&v, &t, &phi, &minus, lambda, tau))
                            / (2.0 * H);
                        let ga = g[(rr, cc)];
                        if ga.abs() > 1e-8 {
                            worst = worst.max((ga - fd).abs() / ga.abs().max(fd.abs()));
                        }
                    }
                }
                checked += 1;
            }
        }
    }
    if worst < 1e-4 {
        Ok(format!("{checked} instances, max relative error {worst:.2e}"))
    } else {
        fail(format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

fn loss_sanity() -> Outcome {
    let mut r = rng(7);
    for _ in 0..50 {
        let phi = DMatrix::from_fn(r.gen_range(1..6), r.gen_range(1..6), |_, _| r.gen_range(-1.0..1.0));
        let l = matching_loss(&phi, &phi).map_err(|e| e.to_string())?;
        if l != 0.0 {
            return fail(format!("matching_loss(phi, phi) = {l}"));
        }
    }
    let mut min_recon = f64::INFINITY;
    let mut worst_gap = 0.0f64;
    for _ in 0..1000 {
        let d = r.gen_range(2..6);
        let m = r.gen_range(1..6);
        let (b, k) = (r.gen_range(1..4), r.gen_range(2..5));
        let v = unit_rows(&mut r, b, d);
        let t = unit_rows(&mut r, k, d);
        let a = DMatrix::from_fn(d, m, |_, _| r.gen_range(-1.0..1.0));
        let tau = if r.gen_bool(0.5) { 1.0 } else { 100.0 };
        let l = reconstruction_loss(&v, &t, &a, tau).map_err(|e| e.to_string())?;
        let own = oracle_loss(&v, &t, &a, &a, 1.0, tau);
        worst_gap = worst_gap.max((l - own).abs());
        min_recon = min_recon.min(l);
    }
    if min_recon < 0.0 {
        return fail(format!("negative reconstruction loss {min_recon}"));
    }
    // concept logits [ln 3, 0] against original logits [0, 0]
    let v = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
    let t = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let a = DMatrix::from_row_slice(3, 1, &[1.0, 3f64.ln(), 0.0]);
    let hand = reconstruction_loss(&v, &t, &a, 1.0).map_err(|e| e.to_string())?;
    if (hand - 0.130812).abs() > 1e-6 {
        return fail(format!("hand case {hand} != 0.130812"));
    }
    Ok(format!(
        "min recon {min_recon:.3e} over 1000, oracle gap {worst_gap:.1e}, hand case {hand:.6}"
    ))
}

fn decomposition_identity() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = r.gen_range(1..64);
        let cx: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ck: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s = interaction_scores(&cx, &ck).map_err(|e| e.to_string())?;
        let oracle: f64 = (0..m).map(|j| cx[j] * ck[j]).sum();
        worst = worst.max((s.iter().sum::<f64>() - oracle).abs());
    }
    if worst < 1e-9 {
        Ok(format!("max |sum s - <c_x, c_k>| = {worst:.1e}"))
    } else {
        fail(format!("gap {worst:e}"))
    }
}

fn harmonic_mean_table_row() -> Outcome {
    let h = harmonic_mean(0.680, 0.707);
    let oracle = 2.0 * 0.680 * 0.707 / (0.680 + 0.707);
    if (h - oracle).abs() > 1e-15 {
        return fail(format!("H = {h}, formula gives {oracle}"));
    }
    if (h - 0.693).abs() <= 0.0005 {
        Ok(format!("H(0.680, 0.707) = {h:.5}"))
    } else {
        fail(format!("H = {h}"))
    }
}

struct Trained {
    task: SyntheticTask,
    a: ProjectionMatrix,
}

fn train_synthetic() -> Result<(Trained, f64, f64), String> {
    let task = SyntheticTask::generate(&TaskConfig::default()).map_err(|e| e.to_string())?;
    let basis = ConceptBasis::from_embeddings(&task.concepts).map_err(|e| e.to_string())?;
    let cfg = TrainingConfig {
        lambda: 1.0,
        learning_rate: 1e-2,
        iterations: 2000,
        batch_size: Some(64),
        ..Default::default()
    };
    let seen_images = task.seen_images().map_err(|e| e.to_string())?;
    let seen_classes = task.seen_classes().map_err(|e| e.to_string())?;
    let (a, trace) = train(&seen_images, &seen_classes, &basis, &cfg).map_err(|e| e.to_string())?;
    Ok((Trained { task, a }, trace.initial.total, trace.final_losses.total))
}

fn synthetic_end_to_end(out: &mut Option<Trained>) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let (trained, initial, last) = pool.install(train_synthetic)?;
    let task = &trained.task;
    let seen_images = task.seen_images().map_err(|e| e.to_string())?;
    let seen_classes = task.seen_classes().map_err(|e| e.to_string())?;

    // (b) agreement oracle: argmax over raw similarities vs concept logits
    let mut agree = 0;
    for i in 0..seen_images.nrows() {
        let v = seen_images.row_vec(i);
        let raw: Vec<f64> = (0..seen_classes.nrows())
            .map(|k| seen_classes.row_vec(k).iter().zip(&v).map(|(p, q)| p * q).sum())
            .collect();
        let am = trained.a.matrix();
        let proj = |x: &[f64]| -> Vec<f64> {
            am.column_iter()
                .map(|c| c.iter().zip(x).map(|(p, q)| p * q).sum())
                .collect()
        };
        let cx = proj(&v);
        let concept: Vec<f64> = (0..seen_classes.nrows())
            .map(|k| proj(&seen_classes.row_vec(k)).iter().zip(&cx).map(|(p, q)| p * q).sum())
            .collect();
        agree += (first_argmax(&raw) == first_argmax(&concept)) as usize;
    }
    let agreement = agree as f64 / seen_images.nrows() as f64;
    let lib = fidelity(seen_images.data(), seen_classes.data(), &trained.a, 1.0).map_err(|e| e.to_string())?;
    if (lib.top1_agreement - agreement).abs() > 1e-12 {
        return fail(format!(
            "library agreement {} vs oracle {agreement}",
            lib.top1_agreement
        ));
    }

    let space = LabelSpace::from_split(task.classes.names(), &task.split).map_err(|e| e.to_string())?;
    let eval =
        |s| evaluate(&task.images, &task.labels, &space, &task.classes, s, EvalMode::Gzsl).map_err(|e| e.to_string());
    let h_concept = eval(Scorer::Concept(&trained.a))?.harmonic_mean;
    let h_raw = eval(Scorer::Raw)?.harmonic_mean;

    let detail = format!(
        "L_total {initial:.4} -> {last:.4}, agreement {agreement:.3}, H concept {h_concept:.3} vs raw {h_raw:.3}"
    );
    *out = Some(trained);
    if last.is_nan() || last >= 0.5 * initial {
        return fail(format!("(a) loss not halved: {detail}"));
    }
    if agreement < 0.90 {
        return fail(format!("(b) agreement below 0.90: {detail}"));
    }
    if (h_concept - h_raw).abs() > 0.05 {
        return fail(format!("(c) |dH| > 0.05: {detail}"));
    }
    Ok(detail)
}

fn faithfulness_properties(trained: Option<&Trained>) -> Outcome {
    let trained = trained.ok_or("needs the synthetic trained model")?;
    let big = SyntheticTask::generate(&TaskConfig {
        images_per_class: 500,
        ..trained.task.config.clone()
    })
    .map_err(|e| e.to_string())?;
    if big.classes != trained.task.classes {
        return fail("pool does not share the class embeddings");
    }
    let clf = ConceptClassifier::new(&trained.a, &big.classes).map_err(|e| e.to_string())?;
    let ns = [1, 3, 5, 10];
    let r = faithfulness_sweep(
        &clf,
        &big.images,
        &ns,
        &[AblationMode::Top],
        0,
        Some(5000),
        FlipRule::PredictedOnly,
    )
    .map_err(|e| e.to_string())?;
    let deltas: Vec<f64> = r.results.iter().map(|x| x.mean_drop).collect();
    if r.results[0].samples != 5000 {
        return fail(format!("{} samples", r.results[0].samples));
    }
    if deltas.windows(2).any(|w| w[1] - w[0] < 1e-6) {
        return fail(format!("drops not strictly increasing: {deltas:?}"));
    }

    let mut wins = 0;
    for seed in 0..20 {
        let s = faithfulness_sweep(
            &clf,
            &big.images,
            &[10],
            &[AblationMode::Top, AblationMode::Random],
            seed,
            Some(5000),
            FlipRule::PredictedOnly,
        )
        .map_err(|e| e.to_string())?;
        wins += (s.results[0].mean_drop > s.results[1].mean_drop) as usize;
    }
    if wins < 19 {
        return fail(format!("top-10 beat random-10 in only {wins}/20 seeds"));
    }

    let m = trained.a.num_concepts();
    let mut r2 = rng(99);
    let mut worst = 0.0f64;
    for i in 0..big.images.nrows() {
        let cx = clf.activations(&big.images.row_vec(i)).map_err(|e| e.to_string())?;
        let k = first_argmax(&clf.logits(&cx));
        let ck = clf.class_row(k);
        let mut idx: Vec<usize> = (0..m).collect();
        for j in (1..m).rev() {
            idx.swap(j, r2.gen_range(0..=j));
        }
        let cut = r2.gen_range(0..=m);
        let (j1, j2) = idx.split_at(cut);
        let whole = ablate(&cx, &ck, &idx).map_err(|e| e.to_string())?.drop;
        let parts = ablate(&cx, &ck, j1).map_err(|e| e.to_string())?.drop
            + ablate(&cx, &ck, j2).map_err(|e| e.to_string())?.drop;
        worst = worst.max((whole - parts).abs());
    }
    if worst > 1e-12 {
        return fail(format!("additivity gap {worst:e}"));
    }
    Ok(format!(
        "deltas {:.4}/{:.4}/{:.4}/{:.4}, top>random in {wins}/20 seeds, additivity gap {worst:.1e}",
        deltas[0], deltas[1], deltas[2], deltas[3]
    ))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(42);
    for trial in 0..200 {
        let k = r.gen_range(2..=30);
        let (x, y): (Vec<f64>, Vec<f64>) = if trial % 2 == 0 {
            (
                (0..k).map(|_| r.gen_range(0..5) as f64).collect(),
                (0..k).map(|_| r.gen_range(0..5) as f64).collect(),
            )
        } else {
            (
                (0..k).map(|_| r.gen_range(-1.0..1.0)).collect(),
                (0..k).map(|_| r.gen_range(-1.0..1.0)).collect(),
            )
        };
        if spearman(&x, &y) != brute_spearman(&x, &y) {
            return fail(format!("spearman differs on trial {trial}"));
        }
        if kendall_tau_b(&x, &y) != brute_kendall(&x, &y) {
            return fail(format!("kendall differs on trial {trial}"));
        }
    }
    for trial in 0..100 {
        let k = r.gen_range(1..=12);
        let m = r.gen_range(1..=10);
        let classes = DMatrix::from_fn(k, m, |_, _| r.gen_range(-1.0..1.0));
        let x: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = (0..k).map(|c| (0..m).map(|j| x[j] * classes[(c, j)]).sum()).collect();
        if predict(&x, &classes).map_err(|e| e.to_string())? != first_argmax(&logits) {
            return fail(format!("predict differs on instance {trial}"));
        }
    }
    Ok("200 rankings (100 with ties) and 100 predictions match exactly".into())
}

fn normalized_oracle(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = phi.clone();
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 && (n - 1.0).abs() > 1e-12 {
            for v in col.iter_mut() {
                *v /= n;
            }
        }
    }
    out
}

fn column_renormalization(trained: Option<&Trained>) -> Outcome {
    let task = match trained {
        Some(t) => t.task.clone(),
        None => SyntheticTask::generate(&TaskConfig::default()).map_err(|e| e.to_string())?,
    };
    let images = task.seen_images().map_err(|e| e.to_string())?;
    let classes = task.seen_classes().map_err(|e| e.to_string())?;
    let basis = ConceptBasis::from_embeddings(&task.concepts).map_err(|e| e.to_string())?;
    let n = images.nrows();
    let mut worst = 0.0f64;
    let mut runs = 0;
    for batch in [7, 64, n] {
        let per_epoch = n.div_ceil(batch);
        for epochs in [1, 2, 5] {
            let iterations = per_epoch * epochs;
            let cfg = TrainingConfig {
                iterations,
                batch_size: Some(batch),
                learning_rate: 0.05,
                ..Default::default()
            };
            let (a, trace) = train(&images, &classes, &basis, &cfg).map_err(|e| e.to_string())?;
            let boundaries: Vec<usize> = (1..=epochs).map(|e| e * per_epoch).collect();
            if trace.epoch_boundaries != boundaries {
                return fail(format!("batch {batch}: boundaries {:?}", trace.epoch_boundaries));
            }
            worst = worst.max(trace.max_norm_deviation);
            for c in a.matrix().column_iter() {
                worst = worst.max((c.norm() - 1.0).abs());
            }
            runs += 1;
        }
    }
    if worst >= 1e-9 {
        return fail(format!("norm deviation {worst:e}"));
    }
    let raw_phi = task.concepts.data().transpose();
    let want = normalized_oracle(&raw_phi);
    for iterations in [1, 100] {
        let cfg = TrainingConfig {
            iterations,
            use_recon: false,
            batch_size: Some(64),
            ..Default::default()
        };
        let (a, _) = train(&images, &classes, &basis, &cfg).map_err(|e| e.to_string())?;
        if a.matrix() != &want {
            return fail(format!(
                "matching-only run with {iterations} iterations differs from normalized Phi"
            ));
        }
    }
    Ok(format!(
        "{runs} runs, max deviation {worst:.1e}; matching-only equals normalized Phi at 1 and 100 iterations"
    ))
}

fn spatial_metrics() -> Outcome {
    let h = Heatmap::new("c", 2, 2, vec![1.0, 0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let mask = MaskGrid::new(2, 2, vec![1, 0, 0, 0], "m").map_err(|e| e.to_string())?;
    let rm = region_metrics(&h, &mask, &[25.0]).map_err(|e| e.to_string())?;
    if rm.iou != vec![(25.0, 1.0)] || rm.pointing != 1.0 || rm.inside_ratio != 1.0 {
        return fail(format!("hand case gave {rm:?}"));
    }

    let mut r = rng(5);
    let q = DMatrix::from_fn(16, 4, |_, _| r.gen_range(-1.0..1.0)).qr().q();
    let a = ProjectionMatrix::new(q, (0..4).map(|j| format!("c{j}")).collect(), true).map_err(|e| e.to_string())?;
    let grids = alignment_grids(a.matrix(), 0, &GridConfig::default()).map_err(|e| e.to_string())?;
    let items: Vec<(PatchGrid, Option<MaskGrid>)> = grids
        .iter()
        .map(|g| {
            Ok((
                PatchGrid::from_embeddings(&g.patches, 7, 7, g.image_name.clone())?,
                Some(g.mask.clone()),
            ))
        })
        .collect::<Result<_, conceptlens::Error>>()
        .map_err(|e| e.to_string())?;
    let rep = class_alignment_eval(&items, &a, "c0", "c1", &[10.0]).map_err(|e| e.to_string())?;
    let (pos, neg) = (rep.positive.iou[0].1.mean, rep.negative.iou[0].1.mean);
    if rep.positive.pointing.mean != 1.0 {
        return fail(format!("positive pointing {}", rep.positive.pointing.mean));
    }
    if pos.is_nan() || pos <= neg {
        return fail(format!("IoU@10% positive {pos} not above negative {neg}"));
    }
    Ok(format!(
        "hand IoU 1.0; {} images: pointing {:.2} vs {:.2}, IoU@10% {pos:.3} vs {neg:.3}",
        items.len(),
        rep.positive.pointing.mean,
        rep.negative.pointing.mean
    ))
}

fn structure_analytics() -> Outcome {
    let mut r = rng(12);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = r.gen_range(2..10);
        let m = r.gen_range(2..15);
        let p = DMatrix::from_fn(d, m, |_, _| r.gen_range(-1.0..1.0));
        let s = pca_stats(&p, 3, PcaMethod::Auto).map_err(|e| e.to_string())?;
        let mut ss = 0.0;
        for row in 0..d {
            let mean = (0..m).map(|c| p[(row, c)]).sum::<f64>() / m as f64;
            ss += (0..m).map(|c| (p[(row, c)] - mean).powi(2)).sum::<f64>();
        }
        let trace = ss / (m - 1) as f64;
        worst = worst.max((s.total_variance - trace).abs());
        worst = worst.max((s.eigenvalues.iter().sum::<f64>() - trace).abs());
    }
    if worst >= 1e-9 {
        return fail(format!("trace gap {worst:e}"));
    }
    let u: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
    let rank1 = DMatrix::from_fn(6, 9, |row, c| u[row] * (c as f64 - 3.0));
    let frac = pca_stats(&rank1, 1, PcaMethod::Covariance)
        .map_err(|e| e.to_string())?
        .topk_fraction;
    if (frac - 1.0).abs() > 1e-12 {
        return fail(format!("rank-1 top-1 fraction {frac}"));
    }
    let q = DMatrix::from_fn(8, 5, |_, _| r.gen_range(-1.0..1.0)).qr().q();
    let g = gram_offdiag_stats(&q, true).map_err(|e| e.to_string())?;
    if g.mean.abs() > 1e-12 || g.std > 1e-12 {
        return fail(format!("orthonormal gram ({}, {})", g.mean, g.std));
    }
    Ok(format!(
        "50 sets trace gap {worst:.1e}; rank-1 fraction {frac}; orthonormal gram ({:.0e}, {:.0e})",
        g.mean, g.std
    ))
}

fn read_reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".log.json") {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_conceptlens");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let call = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if o.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
        }
    };
    let p = |x: &Path| x.to_str().unwrap().to_owned();
    let fx = root.join("fx");
    call(&["synth", "--out", &p(&fx)])?;
    let fx_m = p(&fx.join("manifest.json"));
    let tr = root.join("tr");
    call(&[
        "--manifest",
        &fx_m,
        "--out",
        &p(&tr),
        "train",
        "--iters",
        "200",
        "--batch",
        "64",
    ])?;
    let tr_m = p(&tr.join("manifest.json"));
    let cases: Vec<(&str, Vec<&str>)> = vec![
        (&fx_m, vec!["split"]),
        (&fx_m, vec!["train", "--iters", "100", "--batch", "32"]),
        (&tr_m, vec!["eval", "--mode", "gzsl"]),
        (&tr_m, vec!["eval", "--mode", "zsl"]),
        (&tr_m, vec!["fidelity"]),
        (&tr_m, vec!["explain", "--class", "class_03"]),
        (&tr_m, vec!["retrieve", "--concept", "concept_004"]),
        (&tr_m, vec!["ablate", "--ns", "1,3,5,10", "--mode", "both"]),
        (
            &tr_m,
            vec![
                "align",
                "--positive",
                "concept_000",
                "--negative",
                "concept_001",
                "--heatmaps",
            ],
        ),
        (&tr_m, vec!["analyze"]),
    ];
    let mut files = 0;
    for (i, (manifest, args)) in cases.iter().enumerate() {
        let mut outputs = Vec::new();
        for (j, threads) in ["1", "4", "4"].iter().enumerate() {
            let out = root.join(format!("run{i}_{j}"));
            let mut full = vec![
                "--manifest",
                manifest,
                "--out",
                out.to_str().unwrap(),
                "--threads",
                threads,
            ];
            full.extend(args.iter().copied());
            call(&full)?;
            outputs.push(read_reports(&out));
        }
        if outputs[0].is_empty() {
            return fail(format!("{} wrote no reports", args[0]));
        }
        if outputs[0] != outputs[1] {
            return fail(format!("{}: --threads 1 and 4 differ", args[0]));
        }
        if outputs[1] != outputs[2] {
            return fail(format!("{}: repeated run differs", args[0]));
        }
        files += outputs[0].len();
    }
    Ok(format!(
        "{} subcommand runs x 3, {files} report files byte-identical",
        cases.len()
    ))
}

// ---------------------------------------------------------------- driver

struct Suite {
    failed: usize,
    total: usize,
}

impl Suite {
    fn check(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        self.total += 1;
        let start = Instant::now();
        let mut result = f();
        let elapsed = start.elapsed();
        if let (Ok(_), Some(b)) = (&result, budget) {
            if elapsed > b {
                result = Err(format!(
                    "took {:.2}s, budget {:.0}s",
                    elapsed.as_secs_f64(),
                    b.as_secs_f64()
                ));
            }
        }
        match result {
            Ok(detail) => println!("PASS  {name:<28} {:>7.2}s  {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name:<28} {:>7.2}s  {detail}", elapsed.as_secs_f64());
            }
        }
    }
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let mut suite = Suite { failed: 0, total: 0 };
    let mut trained = None;
    suite.check("gradient correctness", secs(5), gradient_correctness);
    suite.check("loss sanity", secs(2), loss_sanity);
    suite.check("decomposition identity", secs(1), decomposition_identity);
    suite.check("harmonic mean table row", None, harmonic_mean_table_row);
    suite.check("synthetic end-to-end", secs(60), || synthetic_end_to_end(&mut trained));
    suite.check("faithfulness properties", secs(30), || {
        faithfulness_properties(trained.as_ref())
    });
    suite.check("metric oracles", None, metric_oracles);
    suite.check("column renormalization", None, || {
        column_renormalization(trained.as_ref())
    });
    suite.check("spatial metrics", None, spatial_metrics);
    suite.check("structure analytics", None, structure_analytics);
    suite.check("determinism", None, determinism);
    println!("{}/{} criteria passed", suite.total - suite.failed, suite.total);
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
