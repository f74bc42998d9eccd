use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use serde::Serialize;
use serde_json::{json, Value};

use conceptlens::concept::{ConceptBasis, ProjectionMatrix};
use conceptlens::eval::{
    evaluate, fidelity as fidelity_report, ConceptClassifier, EvalMode, EvalReport, LabelSpace, Scorer,
};
use conceptlens::explain::{activation_density, explain_all, explain_class, retrieve_by_concept, Pairing};
use conceptlens::faithfulness::{faithfulness_sweep, AblationMode, FlipRule};
use conceptlens::manifest::{split_classes, Manifest, SplitSpec, TrainingOverrides};
use conceptlens::spatial::{class_alignment_eval, concept_heatmap, PatchGrid};
use conceptlens::store::{self, EmbeddingKind, EmbeddingMatrix, MaskGrid};
use conceptlens::structure::StructureReport;
use conceptlens::synthetic::{alignment_grids, write_grids, write_manifest, GridConfig, SyntheticTask, TaskConfig};
use conceptlens::train::{train as fit, TrainingConfig};

use crate::context::Context;
use crate::*;

fn check_labels(images: &EmbeddingMatrix, labels: &[String]) -> Result<()> {
    ensure!(
        images.nrows() == labels.len(),
        "{} images but {} labels",
        images.nrows(),
        labels.len()
    );
    Ok(())
}

fn rows_where(names: &[String], keep: impl Fn(&str) -> bool) -> Vec<usize> {
    (0..names.len()).filter(|&i| keep(&names[i])).collect()
}

pub fn split(ctx: &Context, args: &SplitArgs) -> Result<()> {
    let classes = match &args.classes {
        Some(p) => {
            ctx.track(p);
            store::read_names(p)?
        }
        None => ctx.class_names()?,
    };
    let seed = ctx.seed();
    let s = split_classes(&classes, args.ratio, seed)?;
    ctx.write_json("split.json", &s)?;
    let config = json!({ "ratio": args.ratio, "classes": classes.len() });
    ctx.finish("split", &config, &["split.json"])
}

/// Defaults, then the manifest's overrides, then flags.
fn training_config(ctx: &Context, args: &TrainArgs) -> Result<TrainingConfig> {
    let mut cfg = match &args.preset {
        Some(p) => TrainingConfig::preset(p),
        None => TrainingConfig::default(),
    };
    if let Some(o) = &ctx.manifest()?.training {
        o.apply(&mut cfg);
    }
    let flags = TrainingOverrides {
        lambda: args.lambda,
        learning_rate: args.lr,
        iterations: args.iters,
        batch_size: args.batch,
        seed: ctx.seed_flag(),
        temperature: args.temperature,
        use_match: args.no_match.then_some(false),
        use_recon: args.no_recon.then_some(false),
        ..Default::default()
    };
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn absolute(m: &Manifest, p: &Path) -> PathBuf {
    let full = m.resolve(p);
    full.canonicalize().unwrap_or(full)
}

/// Copy of `m` with every path absolute, so it can live in another directory.
fn relocated(m: &Manifest) -> Manifest {
    let mut out = m.clone();
    let f = &mut out.files;
    for slot in [
        &mut f.images,
        &mut f.image_labels,
        &mut f.classes,
        &mut f.concepts,
        &mut f.extra_concepts,
        &mut f.projection,
        &mut f.target_classes,
        &mut f.target_images,
        &mut f.target_image_labels,
    ] {
        if let Some(p) = slot.as_mut() {
            *p = absolute(m, p);
        }
    }
    for g in &mut out.patch_grids {
        g.path = absolute(m, &g.path);
        if let Some(mask) = g.mask.as_mut() {
            *mask = absolute(m, mask);
        }
    }
    if let Some(SplitSpec::File { file }) = out.split.as_mut() {
        *file = absolute(m, file);
    }
    out.output_dir = None;
    out
}

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<()> {
    let cfg = training_config(ctx, args)?;
    let images = ctx.images()?;
    let labels = ctx.labels()?;
    check_labels(&images, &labels)?;
    let classes = ctx.classes()?;
    let split = ctx.split(classes.names())?;
    let basis = ctx.basis()?;

    let seen_images = images.select_rows(&rows_where(&labels, |l| split.is_seen(l)))?;
    let seen_classes = classes.select_rows(&rows_where(classes.names(), |c| split.is_seen(c)))?;
    ensure!(!seen_images.is_empty(), "no images belong to seen classes");

    let (a, trace) = fit(&seen_images, &seen_classes, &basis, &cfg).context("training")?;
    let out = ctx.out_dir()?;
    a.save(&out.join("projection.ezt"))?;
    trace.write_csv(ctx.create("trace.csv")?)?;

    let config = serde_json::to_value(&cfg)?;
    let result = json!({
        "images": seen_images.nrows(),
        "classes": seen_classes.nrows(),
        "concepts": basis.len(),
        "dim": basis.dim(),
        "initial": trace.initial,
        "final": trace.final_losses,
        "epoch_boundaries": trace.epoch_boundaries,
        "max_norm_deviation": trace.max_norm_deviation,
    });
    ctx.report("train_report.json", "train", &config, &result)?;

    let mut next = relocated(ctx.manifest()?);
    next.files.projection = Some("projection.ezt".into());
    next.projection_trained = true;
    next.training = Some(TrainingOverrides {
        lambda: Some(cfg.lambda),
        learning_rate: Some(cfg.learning_rate),
        iterations: Some(cfg.iterations),
        batch_size: cfg.batch_size,
        seed: Some(cfg.seed),
        temperature: Some(cfg.temperature),
        use_match: Some(cfg.use_match),
        use_recon: Some(cfg.use_recon),
        adam_beta1: Some(cfg.adam_beta1),
        adam_beta2: Some(cfg.adam_beta2),
        adam_epsilon: Some(cfg.adam_epsilon),
    });
    write_manifest(&next, &out.join("manifest.json"))?;
    ctx.finish(
        "train",
        &config,
        &[
            "projection.ezt",
            "projection.names",
            "trace.csv",
            "train_report.json",
            "manifest.json",
        ],
    )
}

struct EvalData {
    images: EmbeddingMatrix,
    labels: Vec<String>,
    classes: EmbeddingMatrix,
    space: LabelSpace,
    cross_dataset: bool,
}

/// Source/target setup when the manifest names target classes, otherwise
/// the seen/unseen split of one dataset.
fn eval_data(ctx: &Context) -> Result<EvalData> {
    let m = ctx.manifest()?;
    let classes = ctx.classes()?;
    if m.files.target_classes.is_some() {
        let target = ctx.embeddings("target_classes", &m.files.target_classes, EmbeddingKind::ClassText)?;
        let images = ctx.embeddings("target_images", &m.files.target_images, EmbeddingKind::Image)?;
        let labels = ctx.names_file("target_image_labels", &m.files.target_image_labels)?;
        check_labels(&images, &labels)?;
        let space = LabelSpace::cross_dataset(classes.names(), target.names())?;
        return Ok(EvalData {
            images,
            labels,
            classes: classes.concat(&target)?,
            space,
            cross_dataset: true,
        });
    }
    let images = ctx.images()?;
    let labels = ctx.labels()?;
    check_labels(&images, &labels)?;
    let split = ctx.split(classes.names())?;
    let space = LabelSpace::from_split(classes.names(), &split)?;
    Ok(EvalData {
        images,
        labels,
        classes,
        space,
        cross_dataset: false,
    })
}

fn write_per_class(ctx: &Context, reports: &[(&str, &EvalReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(ctx.create("per_class.csv")?);
    w.write_record(["classifier", "class", "seen", "images", "correct", "accuracy"])?;
    for (name, r) in reports {
        for c in &r.per_class {
            w.write_record([
                name.to_string(),
                c.class.clone(),
                c.seen.to_string(),
                c.images.to_string(),
                c.correct.to_string(),
                c.accuracy.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<()> {
    let mode = match args.mode {
        ModeArg::Zsl => EvalMode::Zsl,
        ModeArg::Gzsl => EvalMode::Gzsl,
    };
    let a = ctx.projection()?;
    let d = eval_data(ctx)?;
    let concept = evaluate(&d.images, &d.labels, &d.space, &d.classes, Scorer::Concept(&a), mode)?;
    let raw = evaluate(&d.images, &d.labels, &d.space, &d.classes, Scorer::Raw, mode)?;
    write_per_class(ctx, &[("concept", &concept), ("raw", &raw)])?;
    let config = json!({
        "mode": mode,
        "projection_trained": a.is_trained(),
        "cross_dataset": d.cross_dataset,
    });
    ctx.report(
        "eval_report.json",
        "eval",
        &config,
        &json!({ "concept": concept, "raw": raw }),
    )?;
    ctx.finish("eval", &config, &["eval_report.json", "per_class.csv"])
}

fn temperature(ctx: &Context, flag: Option<f64>) -> Result<f64> {
    let t = flag
        .or_else(|| ctx.manifest().ok()?.training.as_ref()?.temperature)
        .unwrap_or(1.0);
    ensure!(t > 0.0 && t.is_finite(), "temperature {t} must be positive");
    Ok(t)
}

pub fn fidelity(ctx: &Context, args: &FidelityArgs) -> Result<()> {
    let t = temperature(ctx, args.temperature)?;
    let a = ctx.projection()?;
    let mut images = ctx.images()?;
    let mut classes = ctx.classes()?;
    if args.seen_only {
        let labels = ctx.labels()?;
        check_labels(&images, &labels)?;
        let split = ctx.split(classes.names())?;
        images = images.select_rows(&rows_where(&labels, |l| split.is_seen(l)))?;
        classes = classes.select_rows(&rows_where(classes.names(), |c| split.is_seen(c)))?;
    }
    let r = fidelity_report(images.data(), classes.data(), &a, t)?;
    let config = json!({
        "temperature": t,
        "seen_only": args.seen_only,
        "projection_trained": a.is_trained(),
    });
    ctx.report("fidelity_report.json", "fidelity", &config, &r)?;
    ctx.finish("fidelity", &config, &["fidelity_report.json"])
}

pub fn explain(ctx: &Context, args: &ExplainArgs) -> Result<()> {
    let a = ctx.projection()?;
    let images = ctx.images()?;
    let classes = ctx.classes()?;
    let clf = ConceptClassifier::new(&a, &classes)?;
    let seed = ctx.seed();

    let records = explain_all(&clf, &images, args.top_k)?;
    let truth;
    let pairing = match args.pairing {
        PairingArg::Predicted => Pairing::Predicted,
        PairingArg::Truth => {
            let labels = ctx.labels()?;
            check_labels(&images, &labels)?;
            truth = labels
                .iter()
                .map(|l| {
                    classes
                        .index_of(l)
                        .ok_or_else(|| conceptlens::Error::UnknownLabel(l.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Pairing::GroundTruth(&truth)
        }
    };
    let density = activation_density(&clf, &images, args.tau, pairing)?;

    let mut outputs = vec!["explanations.json", "explanations.txt", "density.json"];
    let signature = match &args.class {
        Some(name) => {
            let k = classes
                .index_of(name)
                .ok_or_else(|| conceptlens::Error::UnknownLabel(name.clone()))?;
            let labels = ctx.labels()?;
            check_labels(&images, &labels)?;
            let own = images.select_rows(&rows_where(&labels, |l| l == name))?;
            outputs.push("class_signature.json");
            Some(explain_class(&clf, &own, k, args.sample_n, seed, args.top_k)?)
        }
        None => None,
    };

    let config = json!({
        "top_k": args.top_k,
        "tau": args.tau,
        "pairing": match args.pairing { PairingArg::Predicted => "predicted", PairingArg::Truth => "ground_truth" },
        "class": args.class,
        "sample_n": args.sample_n,
        "projection_trained": a.is_trained(),
    });
    ctx.report("explanations.json", "explain", &config, &records)?;
    let table: String = records.iter().map(|r| r.to_table() + "\n").collect();
    std::fs::write(ctx.out_dir()?.join("explanations.txt"), table)?;
    ctx.report("density.json", "explain", &config, &density)?;
    if let Some(sig) = &signature {
        ctx.report("class_signature.json", "explain", &config, sig)?;
    }
    ctx.finish("explain", &config, &outputs)
}

pub fn retrieve(ctx: &Context, args: &RetrieveArgs) -> Result<()> {
    let a = ctx.projection()?;
    let images = ctx.images()?;
    let j = a.resolve_concept(&args.concept)?;
    let concept = a.names()[j].clone();
    let hits = retrieve_by_concept(&a, &concept, &images, args.top_k)?;
    let mut w = csv::Writer::from_writer(ctx.create("retrieval.csv")?);
    w.write_record(["rank", "image", "index", "activation"])?;
    for (rank, h) in hits.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            h.image.clone(),
            h.index.to_string(),
            h.activation.to_string(),
        ])?;
    }
    w.flush()?;
    let config = json!({ "concept": concept, "top_k": args.top_k, "projection_trained": a.is_trained() });
    ctx.report("retrieval.json", "retrieve", &config, &hits)?;
    ctx.finish("retrieve", &config, &["retrieval.json", "retrieval.csv"])
}

#[derive(Serialize)]
struct AblationSummary {
    n: usize,
    mode: AblationMode,
    samples: usize,
    mean_drop: f64,
    flip_count: usize,
    flip_rate: f64,
}

pub fn ablate(ctx: &Context, args: &AblateArgs) -> Result<()> {
    let modes = match args.mode {
        AblateModeArg::Top => vec![AblationMode::Top],
        AblateModeArg::Random => vec![AblationMode::Random],
        AblateModeArg::Both => vec![AblationMode::Top, AblationMode::Random],
    };
    let rule = match args.flip_rule {
        FlipRuleArg::Predicted => FlipRule::PredictedOnly,
        FlipRuleArg::All => FlipRule::AllClasses,
    };
    let mut ns = args.ns.clone();
    ns.sort_unstable();
    ns.dedup();
    let a = ctx.projection()?;
    let images = ctx.images()?;
    let classes = ctx.classes()?;
    let clf = ConceptClassifier::new(&a, &classes)?;
    let seed = ctx.seed();
    let r = faithfulness_sweep(&clf, &images, &ns, &modes, seed, args.sample, rule)?;
    r.write_drops_csv(images.names(), ctx.create("ablation_drops.csv")?)?;

    let summary: Vec<AblationSummary> = r
        .results
        .iter()
        .map(|x| AblationSummary {
            n: x.n,
            mode: x.mode,
            samples: x.samples,
            mean_drop: x.mean_drop,
            flip_count: x.flip_count,
            flip_rate: x.flip_rate,
        })
        .collect();
    let config = json!({
        "ns": ns,
        "modes": modes,
        "sample": args.sample,
        "flip_rule": rule,
        "projection_trained": a.is_trained(),
    });
    let sample: Vec<&str> = r.sample.iter().map(|&i| images.names()[i].as_str()).collect();
    ctx.report(
        "ablation_report.json",
        "ablate",
        &config,
        &json!({ "results": summary, "sample": sample }),
    )?;
    ctx.finish("ablate", &config, &["ablation_report.json", "ablation_drops.csv"])
}

pub fn align(ctx: &Context, args: &AlignArgs) -> Result<()> {
    let m = ctx.manifest()?;
    let a = ctx.projection()?;
    let entries: Vec<_> = m
        .patch_grids
        .iter()
        .filter(|e| args.class.is_none() || e.class == args.class)
        .collect();
    if entries.is_empty() {
        bail!(
            "manifest has no patch grids{}",
            args.class
                .as_ref()
                .map(|c| format!(" for class `{c}`"))
                .unwrap_or_default()
        );
    }
    let mut items = Vec::with_capacity(entries.len());
    for e in &entries {
        let path = m.require("patch grid", &Some(e.path.clone()))?;
        ctx.track(&path);
        let rows = store::load_embeddings(&path, EmbeddingKind::PatchGrid)?;
        let grid = PatchGrid::from_embeddings(&rows, e.shape[0], e.shape[1], e.image.clone())?;
        let mask = match &e.mask {
            Some(mp) => {
                let mp = m.require("mask", &Some(mp.clone()))?;
                ctx.track(&mp);
                Some(MaskGrid::from_pgm(&mp, e.image.clone())?)
            }
            None => None,
        };
        items.push((grid, mask));
    }
    let report = class_alignment_eval(&items, &a, &args.positive, &args.negative, &args.percents)?;

    let mut outputs = vec!["alignment_report.json".to_string()];
    if args.heatmaps {
        for (grid, _) in &items {
            for concept in [&report.positive.concept, &report.negative.concept] {
                let name = format!("heatmaps/{}__{}.csv", grid.image_name(), concept);
                concept_heatmap(grid, &a, concept)?.write_csv(ctx.create(&name)?)?;
                outputs.push(name);
            }
        }
    }
    let config = json!({
        "positive": report.positive.concept,
        "negative": report.negative.concept,
        "class": args.class,
        "percents": args.percents,
        "projection_trained": a.is_trained(),
    });
    ctx.report("alignment_report.json", "align", &config, &report)?;
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    ctx.finish("align", &config, &outputs)
}

pub fn analyze(ctx: &Context, args: &AnalyzeArgs) -> Result<()> {
    let basis = ctx.basis()?;
    let a = ctx.projection()?;
    ensure!(
        a.names() == basis.names(),
        "projection concepts differ from the manifest vocabulary"
    );
    let r = StructureReport::compute(a.matrix(), basis.phi(), args.top_k)?;
    r.write_spectrum_csv(ctx.create("spectrum.csv")?)?;
    let alignment = conceptlens::structure::alignment(a.matrix(), basis.phi())?;
    let mut w = csv::Writer::from_writer(ctx.create("alignment.csv")?);
    w.write_record(["concept", "cosine"])?;
    for (name, v) in basis.names().iter().zip(&alignment) {
        w.write_record([name.clone(), v.to_string()])?;
    }
    w.flush()?;
    let config = json!({ "top_k": args.top_k, "projection_trained": a.is_trained() });
    ctx.report("structure_report.json", "analyze", &config, &r)?;
    ctx.finish(
        "analyze",
        &config,
        &["structure_report.json", "spectrum.csv", "alignment.csv"],
    )
}

pub fn synth(ctx: &Context, args: &SynthArgs) -> Result<()> {
    let cfg = TaskConfig {
        images_per_class: args.images_per_class,
        seed: ctx.seed_flag().unwrap_or(TaskConfig::default().seed),
        ..Default::default()
    };
    let task = SyntheticTask::generate(&cfg)?;
    let out = ctx.out_dir()?.to_path_buf();
    let mut manifest = task.write_fixture(&out)?;
    if args.grids > 0 {
        let phi = ConceptBasis::from_embeddings(&task.concepts)?;
        let a = ProjectionMatrix::from_basis(&phi);
        let grid_cfg = GridConfig {
            images: args.grids,
            ..Default::default()
        };
        let grids = alignment_grids(a.matrix(), 0, &grid_cfg)?;
        write_grids(&grids, &task.classes.names()[0], &out, &mut manifest)?;
        write_manifest(&manifest, &out.join("manifest.json"))?;
    }
    let config: Value = json!({ "task": cfg, "grids": args.grids });
    ctx.finish("synth", &config, &["manifest.json"])
}
