//! JSON/TOML run manifest: artifact roles, patch grids, class split and
//! training overrides. Relative paths resolve against the manifest's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::TrainingConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// One ground-truth class name per image, aligned with `images`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<PathBuf>,
    /// Additional vocabulary merged after `concepts`, duplicates dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_concepts: Option<PathBuf>,
    /// Trained projection, stored transposed (m rows x d cols).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<PathBuf>,
    /// Cross-dataset evaluation: target classes become the unseen set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_classes: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_image_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub image: String,
    pub path: PathBuf,
    /// Grid shape `[h, w]`; `h * w` must equal the row count of `path`.
    pub shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Explicit { seen: Vec<String>, unseen: Vec<String> },
    File { file: PathBuf },
    Rule { ratio: f64, seed: u64 },
}

/// Training fields a manifest may override; unset fields keep defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingOverrides {
    pub lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
    pub use_match: Option<bool>,
    pub use_recon: Option<bool>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
}

impl TrainingOverrides {
    pub fn apply(&self, cfg: &mut TrainingConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(
            lambda,
            learning_rate,
            iterations,
            seed,
            temperature,
            use_match,
            use_recon,
            adam_beta1,
            adam_beta2,
            adam_epsilon
        );
        if let Some(b) = self.batch_size {
            cfg.batch_size = Some(b);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub files: ManifestFiles,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub patch_grids: Vec<PatchEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingOverrides>,
    #[serde(default)]
    pub projection_trained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip)]
    pub(crate) base_dir: PathBuf,
}

impl Manifest {
    /// Parses JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = if path.extension().is_some_and(|e| e == "toml") {
            toml_from_str(&text)?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?
        };
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Resolved path for a role, or a missing-artifact error naming it.
    pub fn require(&self, role: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        let p = p
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("manifest has no `{role}` artifact")))?;
        let full = self.resolve(p);
        if !full.exists() {
            return Err(Error::Manifest(format!(
                "artifact `{role}` not found at {}",
                full.display()
            )));
        }
        Ok(full)
    }

    /// Resolves the class split against the full class list.
    pub fn class_split(&self, classes: &[String]) -> Result<ClassSplit> {
        let split = match &self.split {
            None => return Err(Error::Manifest("manifest has no `split`".into())),
            Some(SplitSpec::Explicit { seen, unseen }) => ClassSplit {
                seen: seen.clone(),
                unseen: unseen.clone(),
                ratio: None,
                seed: None,
            },
            Some(SplitSpec::File { file }) => ClassSplit::load(&self.resolve(file))?,
            Some(SplitSpec::Rule { ratio, seed }) => split_classes(classes, *ratio, *seed)?,
        };
        split.validate(classes)?;
        Ok(split)
    }
}

fn toml_from_str(text: &str) -> Result<Manifest> {
    toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ClassSplit {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }

    /// Every class appears exactly once across seen and unseen.
    pub fn validate(&self, classes: &[String]) -> Result<()> {
        let mut all: Vec<&String> = self.seen.iter().chain(&self.unseen).collect();
        all.sort();
        let mut want: Vec<&String> = classes.iter().collect();
        want.sort();
        if all != want {
            return Err(Error::Manifest("split must cover every class exactly once".into()));
        }
        Ok(())
    }

    pub fn is_seen(&self, class: &str) -> bool {
        self.seen.iter().any(|c| c == class)
    }
}

/// Seeded shuffle; the first `ceil(ratio * K)` classes are seen.
pub fn split_classes(classes: &[String], ratio: f64, seed: u64) -> Result<ClassSplit> {
    if classes.len() < 2 {
        return Err(Error::TooFewClasses {
            required: 2,
            found: classes.len(),
        });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let mut order: Vec<String> = classes.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_seen = ((ratio * classes.len() as f64).ceil() as usize).clamp(1, classes.len() - 1);
    let unseen = order.split_off(n_seen);
    Ok(ClassSplit {
        seen: order,
        unseen,
        ratio: Some(ratio),
        seed: Some(seed),
    })
}
