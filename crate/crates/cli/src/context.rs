//! Manifest resolution, artifact loading with input tracking, and report
//! and run-log writers shared by every subcommand.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use conceptlens::concept::{merge_vocabularies, ConceptBasis, ProjectionMatrix};
use conceptlens::manifest::{ClassSplit, Manifest, SplitSpec};
use conceptlens::store::{self, EmbeddingKind, EmbeddingMatrix};

use crate::GlobalArgs;

pub struct Context {
    args: GlobalArgs,
    manifest: Option<Manifest>,
    out: PathBuf,
    inputs: Mutex<BTreeSet<PathBuf>>,
}

impl Context {
    pub fn new(args: GlobalArgs) -> Result<Self> {
        let manifest = match &args.manifest {
            Some(p) => Some(Manifest::load(p).with_context(|| format!("loading manifest {}", p.display()))?),
            None => None,
        };
        let out = match (&args.out, &manifest) {
            (Some(o), _) => o.clone(),
            (None, Some(m)) if m.output_dir.is_some() => m.resolve(m.output_dir.as_ref().unwrap()),
            _ => PathBuf::from("out"),
        };
        let ctx = Self {
            args,
            manifest,
            out,
            inputs: Mutex::new(BTreeSet::new()),
        };
        if let Some(p) = &ctx.args.manifest {
            ctx.track(p);
        }
        Ok(ctx)
    }

    pub fn threads(&self) -> usize {
        self.args.threads
    }

    pub fn manifest(&self) -> Result<&Manifest> {
        match &self.manifest {
            Some(m) => Ok(m),
            None => bail!("this subcommand requires --manifest"),
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }

    /// `--seed`, then the manifest's training seed, then 0.
    pub fn seed(&self) -> u64 {
        self.args
            .seed
            .or_else(|| self.manifest.as_ref()?.training.as_ref()?.seed)
            .unwrap_or(0)
    }

    pub fn seed_flag(&self) -> Option<u64> {
        self.args.seed
    }

    pub fn track(&self, p: &Path) {
        self.inputs.lock().unwrap().insert(p.to_path_buf());
    }

    fn artifact(&self, role: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        let path = self.manifest()?.require(role, p)?;
        self.track(&path);
        self.track(&store::names_path(&path));
        Ok(path)
    }

    pub fn embeddings(&self, role: &str, p: &Option<PathBuf>, kind: EmbeddingKind) -> Result<EmbeddingMatrix> {
        let path = self.artifact(role, p)?;
        store::load_embeddings(&path, kind).with_context(|| format!("loading `{role}`"))
    }

    pub fn names_file(&self, role: &str, p: &Option<PathBuf>) -> Result<Vec<String>> {
        let path = self.manifest()?.require(role, p)?;
        self.track(&path);
        store::read_names(&path).with_context(|| format!("loading `{role}`"))
    }

    pub fn images(&self) -> Result<EmbeddingMatrix> {
        self.embeddings("images", &self.manifest()?.files.images, EmbeddingKind::Image)
    }

    pub fn labels(&self) -> Result<Vec<String>> {
        self.names_file("image_labels", &self.manifest()?.files.image_labels)
    }

    pub fn classes(&self) -> Result<EmbeddingMatrix> {
        self.embeddings("classes", &self.manifest()?.files.classes, EmbeddingKind::ClassText)
    }

    pub fn class_names(&self) -> Result<Vec<String>> {
        let p = self.manifest()?.require("classes", &self.manifest()?.files.classes)?;
        let names = store::names_path(&p);
        self.track(&names);
        Ok(store::read_names(&names)?)
    }

    /// Primary vocabulary merged with `extra_concepts` when present.
    pub fn basis(&self) -> Result<ConceptBasis> {
        let m = self.manifest()?;
        let primary = ConceptBasis::load(&self.artifact("concepts", &m.files.concepts)?)?;
        match &m.files.extra_concepts {
            Some(_) => {
                let extra = ConceptBasis::load(&self.artifact("extra_concepts", &m.files.extra_concepts)?)?;
                Ok(merge_vocabularies(&primary, &extra)?)
            }
            None => Ok(primary),
        }
    }

    /// Trained projection when the manifest names one, otherwise `A = Phi`.
    pub fn projection(&self) -> Result<ProjectionMatrix> {
        let m = self.manifest()?;
        if m.files.projection.is_some() {
            let p = self.artifact("projection", &m.files.projection)?;
            Ok(ProjectionMatrix::load(&p, m.projection_trained)?)
        } else {
            Ok(ProjectionMatrix::from_basis(&self.basis()?))
        }
    }

    pub fn split(&self, classes: &[String]) -> Result<ClassSplit> {
        let m = self.manifest()?;
        if let Some(SplitSpec::File { file }) = &m.split {
            self.track(&m.resolve(file));
        }
        Ok(m.class_split(classes)?)
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.out_dir()?.join(name);
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn create(&self, name: &str) -> Result<fs::File> {
        let path = self.out_dir()?.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))
    }

    /// Report with a header naming the command, seed and effective config.
    pub fn report(&self, name: &str, command: &str, config: &Value, result: &impl Serialize) -> Result<()> {
        let body = json!({
            "command": command,
            "seed": self.seed(),
            "config": config,
            "result": result,
        });
        self.write_json(name, &body)?;
        Ok(())
    }

    /// Run log: config hash, seed, input checksums and the wall-clock time.
    /// Kept apart from the reports so they stay byte-identical across runs.
    pub fn finish(&self, command: &str, config: &Value, outputs: &[&str]) -> Result<()> {
        let config_hash = hex::encode(Sha256::digest(serde_json::to_vec(config)?));
        let mut inputs = Vec::new();
        for p in self.inputs.lock().unwrap().iter() {
            let bytes = fs::read(p).with_context(|| format!("checksumming {}", p.display()))?;
            inputs.push(json!({ "path": p.display().to_string(), "sha256": hex::encode(Sha256::digest(&bytes)) }));
        }
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let log = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": config_hash,
            "seed": self.seed(),
            "threads": self.args.threads,
            "inputs": inputs,
            "outputs": outputs,
            "timestamp_unix": timestamp,
        });
        self.write_json(&format!("{command}.log.json"), &log)?;
        Ok(())
    }
}
