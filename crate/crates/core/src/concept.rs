//! Concept basis, learnable projection and concept-space projections.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::store::{self, EmbeddingKind, EmbeddingMatrix};

/// Columns within this distance of unit norm are left untouched by
/// renormalization, which makes renormalization idempotent bit-for-bit.
pub const UNIT_NORM_EPS: f64 = 1e-12;

/// Duplicate-detection key: NFC, trimmed, lowercased, internal whitespace
/// collapsed to single spaces.
pub fn canonical_name(name: &str) -> String {
    let lowered: String = name.nfc().collect::<String>().to_lowercase();
    let nfc: String = lowered.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Rescales every non-zero column to unit L2 norm.
pub fn renormalize_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 && (norm - 1.0).abs() > UNIT_NORM_EPS {
            col /= norm;
        }
    }
}

/// Frozen concept text embeddings, one unit column per concept (d x m).
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBasis {
    phi: DMatrix<f64>,
    names: Vec<String>,
}

impl ConceptBasis {
    /// Normalizes columns and drops later duplicates of a canonical name.
    pub fn new(phi: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != phi.ncols() {
            return Err(Error::NameCountMismatch {
                rows: phi.ncols(),
                names: names.len(),
            });
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "concept basis".into(),
            });
        }
        let mut seen = HashSet::new();
        let keep: Vec<usize> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| seen.insert(canonical_name(n)))
            .map(|(i, _)| i)
            .collect();
        let mut phi = if keep.len() == names.len() {
            phi
        } else {
            phi.select_columns(keep.iter())
        };
        let names: Vec<String> = keep.iter().map(|&i| names[i].clone()).collect();
        for (j, col) in phi.column_iter().enumerate() {
            if col.norm() == 0.0 {
                return Err(Error::ZeroNorm { row: j });
            }
        }
        renormalize_columns(&mut phi);
        Ok(Self { phi, names })
    }

    /// From concept text rows (m x d), transposed to d x m.
    pub fn from_embeddings(rows: &EmbeddingMatrix) -> Result<Self> {
        Self::new(rows.data().transpose(), rows.names().to_vec())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_embeddings(&store::load_embeddings(path, EmbeddingKind::ConceptText)?)
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    pub fn len(&self) -> usize {
        self.phi.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.ncols() == 0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let key = canonical_name(name);
        self.names.iter().position(|n| canonical_name(n) == key)
    }
}

/// Union of two vocabularies; the first occurrence of a canonical name wins.
pub fn merge_vocabularies(primary: &ConceptBasis, extra: &ConceptBasis) -> Result<ConceptBasis> {
    if extra.is_empty() {
        return Ok(primary.clone());
    }
    if primary.dim() != extra.dim() {
        return Err(Error::DimensionMismatch {
            context: "merged vocabularies",
            expected: primary.dim(),
            found: extra.dim(),
        });
    }
    let d = primary.dim();
    let (m1, m2) = (primary.len(), extra.len());
    let phi = DMatrix::from_fn(d, m1 + m2, |r, c| {
        if c < m1 {
            primary.phi[(r, c)]
        } else {
            extra.phi[(r, c - m1)]
        }
    });
    let mut names = primary.names.clone();
    names.extend(extra.names.iter().cloned());
    ConceptBasis::new(phi, names)
}

/// Learnable d x m projection into concept space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    a: DMatrix<f64>,
    names: Vec<String>,
    trained: bool,
}

impl ProjectionMatrix {
    pub fn new(a: DMatrix<f64>, names: Vec<String>, trained: bool) -> Result<Self> {
        if names.len() != a.ncols() {
            return Err(Error::NameCountMismatch {
                rows: a.ncols(),
                names: names.len(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "projection matrix".into(),
            });
        }
        Ok(Self { a, names, trained })
    }

    /// Untrained projection equal to the basis.
    pub fn from_basis(basis: &ConceptBasis) -> Self {
        Self {
            a: basis.phi.clone(),
            names: basis.names.clone(),
            trained: false,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.a
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_concepts(&self) -> usize {
        self.a.ncols()
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        let key = canonical_name(name);
        self.names.iter().position(|n| canonical_name(n) == key)
    }

    /// Resolves a concept given as an exact name or a numeric index.
    pub fn resolve_concept(&self, spec: &str) -> Result<usize> {
        if let Some(i) = self.names.iter().position(|n| n == spec) {
            return Ok(i);
        }
        if let Ok(i) = spec.parse::<usize>() {
            if i < self.num_concepts() {
                return Ok(i);
            }
        }
        self.concept_index(spec)
            .ok_or_else(|| Error::UnknownConcept(spec.to_owned()))
    }

    /// Saves transposed (m rows x d cols) so each row is one concept.
    pub fn save(&self, path: &Path) -> Result<()> {
        let payload: Vec<f32> = self
            .a
            .column_iter()
            .flat_map(|c| c.iter().map(|&v| v as f32).collect::<Vec<_>>())
            .collect();
        store::write_tensor(path, self.num_concepts(), self.dim(), &payload)?;
        store::write_names(&store::names_path(path), &self.names)
    }

    /// Loads a saved projection verbatim (no renormalization).
    pub fn load(path: &Path, trained: bool) -> Result<Self> {
        let (rows, cols, payload) = store::read_tensor(path)?;
        let names = store::read_names(&store::names_path(path))?;
        if names.len() != rows {
            return Err(Error::NameCountMismatch {
                rows,
                names: names.len(),
            });
        }
        let a = DMatrix::from_fn(cols, rows, |r, c| payload[c * cols + r] as f64);
        Self::new(a, names, trained)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Image,
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptActivations {
    pub values: Vec<f64>,
    pub owner: Owner,
    pub owner_name: String,
}

/// `values[j] = <embedding, A_j>`. Works on any vector, unit or not.
pub fn project_vector(embedding: &[f64], a: &ProjectionMatrix) -> Result<Vec<f64>> {
    if embedding.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            context: "projected embedding",
            expected: a.dim(),
            found: embedding.len(),
        });
    }
    Ok(a.a
        .column_iter()
        .map(|col| col.iter().zip(embedding).map(|(x, y)| x * y).sum())
        .collect())
}

pub fn project(
    embedding: &[f64],
    a: &ProjectionMatrix,
    owner: Owner,
    owner_name: impl Into<String>,
) -> Result<ConceptActivations> {
    Ok(ConceptActivations {
        values: project_vector(embedding, a)?,
        owner,
        owner_name: owner_name.into(),
    })
}

/// Projects every row of `t`; row k is bit-identical to `project` on row k.
pub fn project_all(t: &EmbeddingMatrix, a: &ProjectionMatrix) -> Result<DMatrix<f64>> {
    project_rows(t.data(), a)
}

pub fn project_rows(rows: &DMatrix<f64>, a: &ProjectionMatrix) -> Result<DMatrix<f64>> {
    let m = a.num_concepts();
    if rows.nrows() == 0 {
        return Ok(DMatrix::zeros(0, m));
    }
    if rows.ncols() != a.dim() {
        return Err(Error::DimensionMismatch {
            context: "projected rows",
            expected: a.dim(),
            found: rows.ncols(),
        });
    }
    let projected: Vec<Vec<f64>> = (0..rows.nrows())
        .into_par_iter()
        .map(|r| {
            let v: Vec<f64> = rows.row(r).iter().copied().collect();
            project_vector(&v, a).expect("dimension checked")
        })
        .collect();
    Ok(DMatrix::from_fn(rows.nrows(), m, |r, c| projected[r][c]))
}
