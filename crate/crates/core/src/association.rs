//! Soft prototype estimation: image/category association and
//! association-weighted class prototypes.

use crate::encoders::CategoryEmbeddings;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, row_softmax, Matrix};

/// Raw cosine associations and their row-wise softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMap {
    /// `|B| × M` cosine similarities.
    pub raw: Matrix,
    /// Row-stochastic `|B| × M` probabilities.
    pub normalized: Matrix,
}

/// Visual prototypes, one per category, with the per-category mass
/// `Σ_k Ã(I_k, C_j)` used to normalise them.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub matrix: Matrix,
    pub mass: Vec<f64>,
}

/// Cosine association between every feature row and every category,
/// normalised across categories.
pub fn association_map(features: &Matrix, categories: &CategoryEmbeddings) -> Result<AssociationMap> {
    association_with(features, categories.matrix())
}

/// [`association_map`] against an arbitrary category matrix (any `M ≥ 1`).
pub fn association_with(features: &Matrix, categories: &Matrix) -> Result<AssociationMap> {
    if features.cols() != categories.cols() {
        return Err(Error::dim(
            "association_map",
            format!("features have {} columns, categories {}", features.cols(), categories.cols()),
        ));
    }
    if features.rows() == 0 || categories.rows() == 0 {
        return Err(Error::dim("association_map", "empty batch or category set"));
    }
    let raw = cosine_similarity_matrix(features, categories)?;
    let normalized = row_softmax(&raw)?;
    Ok(AssociationMap { raw, normalized })
}

impl AssociationMap {
    pub fn batch_size(&self) -> usize {
        self.normalized.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.normalized.cols()
    }

    /// Most associated category per image, lowest index on ties.
    pub fn assignments(&self) -> Vec<usize> {
        self.normalized.row_argmax()
    }
}

/// `𝒫ⱼ = Σ_k Ã(I_k,C_j)·V_k / Σ_k Ã(I_k,C_j)` for every category.
pub fn estimate_prototypes(assoc: &AssociationMap, features: &Matrix) -> Result<Prototypes> {
    let a = &assoc.normalized;
    if a.rows() != features.rows() {
        return Err(Error::dim(
            "estimate_prototypes",
            format!("{} association rows for {} features", a.rows(), features.rows()),
        ));
    }
    let mass = a.col_sums();
    let mut matrix = a.transpose().matmul(features)?;
    for (j, m) in mass.iter().enumerate() {
        for v in matrix.row_mut(j) {
            *v /= m;
        }
    }
    Ok(Prototypes { matrix, mass })
}

impl Prototypes {
    /// Column-normalised association weights `Ã(I_k,C_j) / massⱼ` as a
    /// `M × |B|` matrix; prototype `j` is row `j` times the feature matrix.
    pub fn convex_weights(&self, assoc: &AssociationMap) -> Matrix {
        let mut w = assoc.normalized.transpose();
        for (j, m) in self.mass.iter().enumerate() {
            for v in w.row_mut(j) {
                *v /= m;
            }
        }
        w
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }
}
