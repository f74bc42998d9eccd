//! Seeded synthetic fixtures: a small zero-shot task with a concept
//! vocabulary, and patch grids with masks for region alignment.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{split_classes, ClassSplit, Manifest, ManifestFiles, PatchEntry, SplitSpec};
use crate::store::{save_embeddings, write_names, EmbeddingKind, EmbeddingMatrix, MaskGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub dim: usize,
    pub concepts: usize,
    pub classes: usize,
    pub images_per_class: usize,
    pub seen_ratio: f64,
    /// Class directions are drawn inside a random subspace of this rank
    /// (0 means the full space).
    pub class_rank: usize,
    /// Per-coordinate std of the image noise around the class direction.
    pub image_noise: f64,
    /// Weight of a direction shared by every concept, which skews `Φ Φᵀ`.
    pub concept_bias: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            concepts: 32,
            classes: 10,
            images_per_class: 20,
            seen_ratio: 0.8,
            class_rank: 6,
            image_noise: 0.25,
            concept_bias: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub images: EmbeddingMatrix,
    pub labels: Vec<String>,
    pub classes: EmbeddingMatrix,
    pub concepts: EmbeddingMatrix,
    pub split: ClassSplit,
}

fn gaussian(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn unit(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    v / n
}

fn rows_to_matrix(rows: &[DVector<f64>], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])
}

impl SyntheticTask {
    pub fn generate(config: &TaskConfig) -> Result<Self> {
        let c = config;
        if c.dim == 0 || c.concepts == 0 || c.classes < 2 || c.images_per_class == 0 {
            return Err(Error::InvalidConfig(
                "synthetic task sizes must be positive, classes >= 2".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let rank = if c.class_rank == 0 {
            c.dim
        } else {
            c.class_rank.min(c.dim)
        };
        let latent: Vec<DVector<f64>> = (0..rank).map(|_| gaussian(&mut rng, c.dim)).collect();
        let class_dirs: Vec<DVector<f64>> = (0..c.classes)
            .map(|_| {
                let w = gaussian(&mut rng, rank);
                unit(
                    latent
                        .iter()
                        .zip(w.iter())
                        .fold(DVector::zeros(c.dim), |acc, (l, &wi)| acc + l * wi),
                )
            })
            .collect();
        let shared = unit(gaussian(&mut rng, c.dim));
        let concept_dirs: Vec<DVector<f64>> = (0..c.concepts)
            .map(|_| unit(unit(gaussian(&mut rng, c.dim)) + &shared * c.concept_bias))
            .collect();
        let mut image_rows = Vec::with_capacity(c.classes * c.images_per_class);
        let mut labels = Vec::with_capacity(image_rows.capacity());
        let mut image_names = Vec::with_capacity(image_rows.capacity());
        let class_names: Vec<String> = (0..c.classes).map(|k| format!("class_{k:02}")).collect();
        for (k, dir) in class_dirs.iter().enumerate() {
            for i in 0..c.images_per_class {
                image_rows.push(unit(dir + gaussian(&mut rng, c.dim) * c.image_noise));
                labels.push(class_names[k].clone());
                image_names.push(format!("{}/img_{i:04}", class_names[k]));
            }
        }
        let concept_names = (0..c.concepts).map(|j| format!("concept_{j:03}")).collect();
        let split = split_classes(&class_names, c.seen_ratio, c.seed)?;
        Ok(Self {
            config: c.clone(),
            images: EmbeddingMatrix::new(rows_to_matrix(&image_rows, c.dim), image_names, EmbeddingKind::Image)?,
            labels,
            classes: EmbeddingMatrix::new(
                rows_to_matrix(&class_dirs, c.dim),
                class_names,
                EmbeddingKind::ClassText,
            )?,
            concepts: EmbeddingMatrix::new(
                rows_to_matrix(&concept_dirs, c.dim),
                concept_names,
                EmbeddingKind::ConceptText,
            )?,
            split,
        })
    }

    /// Image rows whose label is a seen class.
    pub fn seen_image_indices(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.split.is_seen(&self.labels[i]))
            .collect()
    }

    pub fn seen_images(&self) -> Result<EmbeddingMatrix> {
        self.images.select_rows(&self.seen_image_indices())
    }

    /// Class text rows for the seen classes, in class order.
    pub fn seen_classes(&self) -> Result<EmbeddingMatrix> {
        let idx: Vec<usize> = (0..self.classes.nrows())
            .filter(|&k| self.split.is_seen(&self.classes.names()[k]))
            .collect();
        self.classes.select_rows(&idx)
    }

    /// Writes all artifacts plus `manifest.json` into `dir`.
    pub fn write_fixture(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_embeddings(&self.images, &dir.join("images.ezt"))?;
        write_names(&dir.join("image_labels.txt"), &self.labels)?;
        save_embeddings(&self.classes, &dir.join("classes.ezt"))?;
        save_embeddings(&self.concepts, &dir.join("concepts.ezt"))?;
        let manifest = Manifest {
            embedding_dim: Some(self.config.dim),
            files: ManifestFiles {
                images: Some("images.ezt".into()),
                image_labels: Some("image_labels.txt".into()),
                classes: Some("classes.ezt".into()),
                concepts: Some("concepts.ezt".into()),
                ..Default::default()
            },
            split: Some(SplitSpec::Explicit {
                seen: self.split.seen.clone(),
                unseen: self.split.unseen.clone(),
            }),
            ..Default::default()
        };
        write_manifest(&manifest, &dir.join("manifest.json"))?;
        Ok(manifest.with_base_dir(dir))
    }
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Patch grids for one class: inside-mask patches point along `positive`,
/// the rest along random directions orthogonal to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub images: usize,
    pub patch_noise: f64,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            height: 7,
            width: 7,
            images: 12,
            patch_noise: 0.3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGrid {
    pub image_name: String,
    pub patches: EmbeddingMatrix,
    pub mask: MaskGrid,
}

fn orthogonal_to(v: DVector<f64>, dirs: &[&DVector<f64>]) -> DVector<f64> {
    let mut v = v;
    for d in dirs {
        let p = v.dot(d);
        v -= *d * p;
    }
    v
}

/// Grids whose inside-mask patches follow column `positive` of `a` (d x m);
/// outside patches have no component along it.
pub fn alignment_grids(a: &DMatrix<f64>, positive: usize, cfg: &GridConfig) -> Result<Vec<SyntheticGrid>> {
    if positive >= a.ncols() {
        return Err(Error::IndexOutOfRange {
            index: positive,
            len: a.ncols(),
        });
    }
    if cfg.height < 2 || cfg.width < 2 || cfg.images == 0 {
        return Err(Error::InvalidConfig(
            "grid must be at least 2 x 2 with one image".into(),
        ));
    }
    let d = a.nrows();
    let p = unit(a.column(positive).into_owned());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    (0..cfg.images)
        .map(|i| {
            // random axis-aligned box covering 2..=h/2+1 rows and columns
            let bh = rng.gen_range(2..=h / 2 + 1);
            let bw = rng.gen_range(2..=w / 2 + 1);
            let r0 = rng.gen_range(0..=h - bh);
            let c0 = rng.gen_range(0..=w - bw);
            let mut cells = vec![0u8; h * w];
            let mut rows = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let inside = (r0..r0 + bh).contains(&r) && (c0..c0 + bw).contains(&c);
                    let row = if inside {
                        cells[r * w + c] = 1;
                        unit(&p + orthogonal_to(gaussian(&mut rng, d), &[&p]) * cfg.patch_noise)
                    } else {
                        unit(orthogonal_to(gaussian(&mut rng, d), &[&p]))
                    };
                    rows.push(row);
                }
            }
            let name = format!("grid_{i:03}");
            let patch_names = (0..h * w).map(|k| format!("{name}/p{k:02}")).collect();
            Ok(SyntheticGrid {
                patches: EmbeddingMatrix::new(rows_to_matrix(&rows, d), patch_names, EmbeddingKind::PatchGrid)?,
                mask: MaskGrid::new(h, w, cells, name.clone())?,
                image_name: name,
            })
        })
        .collect()
}

/// Writes grids and PGM masks next to `manifest` and registers them.
pub fn write_grids(grids: &[SyntheticGrid], class: &str, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    let sub = dir.join("patches");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    for g in grids {
        let grid_path = sub.join(format!("{}.ezt", g.image_name));
        let mask_path = sub.join(format!("{}.pgm", g.image_name));
        save_embeddings(&g.patches, &grid_path)?;
        fs::write(&mask_path, g.mask.to_pgm()).map_err(|e| Error::io(&mask_path, e))?;
        manifest.patch_grids.push(PatchEntry {
            image: g.image_name.clone(),
            path: format!("patches/{}.ezt", g.image_name).into(),
            shape: [g.mask.height(), g.mask.width()],
            mask: Some(format!("patches/{}.pgm", g.image_name).into()),
            class: Some(class.to_owned()),
        });
    }
    Ok(())
}
