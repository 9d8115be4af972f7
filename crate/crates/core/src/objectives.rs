//! Prototype-anchored reconstruction, contrastive alignment, entropy and the
//! weighted training objective.
//!
//! Every loss exists twice: as a plain function over matrices (used for
//! reporting and as a reference) and as tape operations in
//! [`objective_on_tape`], which is what the adaptation loop differentiates.

use serde::{Deserialize, Serialize};

use crate::association::{association_map, estimate_prototypes, AssociationMap, Prototypes};
use crate::encoders::CategoryEmbeddings;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, row_softmax, Matrix, Tape, Var};

/// Weights and switches of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Divides the alignment logits when set. Off by default: the logits
    /// are raw cosines.
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Treat the reconstruction target `V` as a constant.
    #[serde(default)]
    pub stop_grad_target: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            temperature: None,
            stop_grad_target: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn entropy_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "alpha and beta must be finite and >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// Component losses of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ent: f64,
    pub l_pir: f64,
    pub l_ca: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(l_ent: f64, l_pir: f64, l_ca: f64, alpha: f64, beta: f64) -> Self {
        Self {
            l_ent,
            l_pir,
            l_ca,
            total: combine(l_ent, l_pir, l_ca, alpha, beta),
            alpha,
            beta,
        }
    }
}

fn combine(ent: f64, pir: f64, ca: f64, alpha: f64, beta: f64) -> f64 {
    ent + (alpha * pir + beta * ca)
}

/// `V̂ᵢ = Σ_k Ã(Iᵢ,C_k)·𝒫_k`, summing over categories.
pub fn reconstruct(assoc: &AssociationMap, protos: &Prototypes) -> Result<Matrix> {
    if assoc.num_classes() != protos.num_classes() {
        return Err(Error::dim(
            "reconstruct",
            format!(
                "{} association columns for {} prototypes",
                assoc.num_classes(),
                protos.num_classes()
            ),
        ));
    }
    assoc.normalized.matmul(&protos.matrix)
}

/// Batch mean of `‖V̂ᵢ − Vᵢ‖²`.
pub fn loss_pir(reconstructed: &Matrix, features: &Matrix) -> Result<f64> {
    let diff = reconstructed.sub(features)?;
    if diff.rows() == 0 {
        return Err(Error::dim("loss_pir", "empty batch"));
    }
    Ok(diff.squared_norm() / diff.rows() as f64)
}

/// Mean of `−log softmax(rowᵢ)[i]` over the rows of a square logit matrix.
fn diagonal_cross_entropy(logits: &Matrix) -> Result<f64> {
    let p = row_softmax(logits)?;
    let m = logits.rows();
    Ok(-(0..m).map(|i| p.get(i, i).ln()).sum::<f64>() / m as f64)
}

/// Symmetric prototype/category contrastive loss `½(L_p2c + L_c2p)` between
/// two `M × D` matrices whose rows correspond.
pub fn contrastive_alignment(protos: &Matrix, categories: &Matrix, temperature: Option<f64>) -> Result<f64> {
    if protos.shape() != categories.shape() {
        return Err(Error::dim(
            "loss_ca",
            format!("{:?} prototypes vs {:?} categories", protos.shape(), categories.shape()),
        ));
    }
    if protos.rows() < 2 {
        return Err(Error::Config("contrastive alignment needs M >= 2".into()));
    }
    let mut sim = cosine_similarity_matrix(protos, categories)?;
    if let Some(t) = temperature {
        sim = sim.scale(1.0 / t);
    }
    let p2c = diagonal_cross_entropy(&sim)?;
    let c2p = diagonal_cross_entropy(&sim.transpose())?;
    Ok(0.5 * (p2c + c2p))
}

pub fn loss_ca(protos: &Prototypes, categories: &CategoryEmbeddings) -> Result<f64> {
    contrastive_alignment(&protos.matrix, categories.matrix(), None)
}

/// Mean Shannon entropy of the rows of a row-stochastic matrix (`0·log 0 = 0`).
pub fn entropy_rows(p: &Matrix) -> f64 {
    let total: f64 = p
        .data()
        .iter()
        .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
        .sum();
    total / p.rows().max(1) as f64
}

pub fn loss_entropy(assoc: &AssociationMap) -> f64 {
    entropy_rows(&assoc.normalized)
}

/// Full objective on a feature batch, evaluated without gradients.
pub fn total_objective(
    features: &Matrix,
    categories: &CategoryEmbeddings,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let assoc = association_map(features, categories)?;
    let protos = estimate_prototypes(&assoc, features)?;
    let recon = reconstruct(&assoc, &protos)?;
    let l_pir = loss_pir(&recon, features)?;
    let l_ca = contrastive_alignment(&protos.matrix, categories.matrix(), cfg.temperature)?;
    let l_ent = loss_entropy(&assoc);
    Ok(LossBreakdown::new(l_ent, l_pir, l_ca, cfg.alpha, cfg.beta))
}

/// Nodes of the objective recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub entropy: Var,
    pub reconstruction: Var,
    pub alignment: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
        Ok(LossBreakdown::new(
            tape.scalar(self.entropy)?,
            tape.scalar(self.reconstruction)?,
            tape.scalar(self.alignment)?,
            cfg.alpha,
            cfg.beta,
        ))
    }
}

/// Records association, prototypes, reconstruction and all three losses for
/// the `|B| × D` feature node `features`.
pub fn objective_on_tape(
    tape: &Tape,
    features: Var,
    categories: &CategoryEmbeddings,
    cfg: &ObjectiveConfig,
) -> LossTerms {
    let t = tape.constant(categories.matrix().clone());
    let m = categories.num_classes();
    let batch = tape.value(features).rows().max(1);

    let assoc = tape.row_softmax(tape.cosine_similarity(features, t));
    let mass = tape.transpose(tape.col_sum(assoc));
    let protos = tape.div_rows(tape.matmul(tape.transpose(assoc), features), mass);
    let recon = tape.matmul(assoc, protos);

    let target = if cfg.stop_grad_target {
        tape.stop_gradient(features)
    } else {
        features
    };
    let reconstruction = tape.scale(tape.sum_squares(tape.sub(recon, target)), 1.0 / batch as f64);
    let entropy = tape.scale(tape.sum(tape.xlogx(assoc)), -1.0 / batch as f64);

    let mut sim = tape.cosine_similarity(protos, t);
    if let Some(temp) = cfg.temperature {
        sim = tape.scale(sim, 1.0 / temp);
    }
    let eye = tape.constant(Matrix::identity(m));
    let diag_nll = |logits: Var| {
        let logp = tape.log(tape.row_softmax(logits));
        tape.scale(tape.sum(tape.mul(logp, eye)), -1.0 / m as f64)
    };
    let p2c = diag_nll(sim);
    let c2p = diag_nll(tape.transpose(sim));
    let alignment = tape.scale(tape.add(p2c, c2p), 0.5);

    let weighted = tape.add(tape.scale(reconstruction, cfg.alpha), tape.scale(alignment, cfg.beta));
    let total = tape.add(entropy, weighted);
    LossTerms {
        entropy,
        reconstruction,
        alignment,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::association_with;
    use crate::numerics::{evaluate, finite_difference_gradient, relative_error, value_and_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eye_cats() -> CategoryEmbeddings {
        CategoryEmbeddings::from_matrix(&Matrix::identity(2)).unwrap()
    }

    fn saturated(raw: Matrix) -> AssociationMap {
        let normalized = row_softmax(&raw.scale(1e3)).unwrap();
        AssociationMap { raw, normalized }
    }

    #[test]
    fn one_hot_row_selects_prototype() {
        let protos = Prototypes {
            matrix: Matrix::from_rows(&[[1.0, 2.0], [-3.0, 0.5], [0.0, 4.0]]).unwrap(),
            mass: vec![1.0; 3],
        };
        let assoc = saturated(Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap());
        let v = reconstruct(&assoc, &protos).unwrap();
        assert!((v.get(0, 0) + 3.0).abs() < 1e-9);
        assert!((v.get(0, 1) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn uniform_row_averages_prototypes() {
        let protos = Prototypes {
            matrix: Matrix::from_rows(&[[1.0, 2.0], [3.0, 0.0]]).unwrap(),
            mass: vec![1.0; 2],
        };
        let assoc = AssociationMap {
            raw: Matrix::zeros(1, 2),
            normalized: Matrix::filled(1, 2, 0.5),
        };
        assert_eq!(reconstruct(&assoc, &protos).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn equal_prototypes_reconstruct_to_that_point() {
        let p = [0.25, -1.5, 2.0];
        let protos = Prototypes {
            matrix: Matrix::from_rows(&[p, p]).unwrap(),
            mass: vec![1.0; 2],
        };
        let assoc = AssociationMap {
            raw: Matrix::zeros(3, 2),
            normalized: Matrix::from_rows(&[[0.9, 0.1], [0.3, 0.7], [0.5, 0.5]]).unwrap(),
        };
        let v = reconstruct(&assoc, &protos).unwrap();
        for r in v.row_iter() {
            for (a, b) in r.iter().zip(p) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pir_values() {
        let v = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(loss_pir(&v, &v).unwrap(), 0.0);
        let vh = Matrix::from_rows(&[[4.0, 6.0]]).unwrap();
        assert_eq!(loss_pir(&vh, &v).unwrap(), 25.0);
        // per-instance 2 and 4
        let a = Matrix::from_rows(&[[1.0, 1.0], [2.0, 0.0]]).unwrap();
        assert_eq!(loss_pir(&a, &Matrix::zeros(2, 2)).unwrap(), 3.0);
    }

    #[test]
    fn alignment_orthonormal_hand_value() {
        // s(𝒫ᵢ,Tᵢ) = 1, s(𝒫ᵢ,Tⱼ) = 0: −log(e/(e+1))
        let e = std::f64::consts::E;
        let want = -(e / (e + 1.0)).ln();
        assert!((want - 0.31326).abs() < 1e-5);
        let l = contrastive_alignment(&Matrix::identity(2), &Matrix::identity(2), None).unwrap();
        assert!((l - want).abs() < 1e-15);
    }

    #[test]
    fn alignment_identical_rows_is_log_m() {
        let row = [0.3, -0.4, 1.2];
        let m = Matrix::from_rows(&[row, row, row, row]).unwrap();
        let l = contrastive_alignment(&m, &m, None).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_symmetric_in_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let t = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = contrastive_alignment(&p, &t, None).unwrap();
        let b = contrastive_alignment(&t, &p, None).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn alignment_zero_prototype_is_degenerate() {
        let p = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(
            contrastive_alignment(&p, &Matrix::identity(2), None),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn entropy_values() {
        let one_hot = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(entropy_rows(&one_hot), 0.0);
        let uniform = Matrix::filled(3, 4, 0.25);
        assert!((entropy_rows(&uniform) - 4f64.ln()).abs() < 1e-15);
        let h = entropy_rows(&Matrix::from_rows(&[[0.75, 0.25]]).unwrap());
        let want = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((h - want).abs() < 1e-15);
        assert!((h - 0.56234).abs() < 1e-5);
    }

    #[test]
    fn total_degenerate_weighting_and_linearity() {
        let v = Matrix::from_rows(&[[1.0, 0.2], [0.1, 0.9], [0.5, 0.5]]).unwrap();
        let t = eye_cats();
        let ent = total_objective(&v, &t, &ObjectiveConfig::entropy_only()).unwrap();
        assert_eq!(ent.total, ent.l_ent);

        let one = ObjectiveConfig::default();
        let two = ObjectiveConfig { alpha: 2.0, ..one };
        let a = total_objective(&v, &t, &one).unwrap();
        let b = total_objective(&v, &t, &two).unwrap();
        assert!((b.total - a.total - a.l_pir).abs() < 1e-12);
    }

    #[test]
    fn total_on_identity_instance_sums_hand_components() {
        // V = T = I₂: Ã = [[h,l],[l,h]], 𝒫 = Ã (columns sum to 1), V̂ = Ã²
        let e = std::f64::consts::E;
        let h = e / (e + 1.0);
        let l = 1.0 / (e + 1.0);
        let ent = -(h * h.ln() + l * l.ln());
        let vh = [h * h + l * l, 2.0 * h * l];
        let pir = (vh[0] - 1.0).powi(2) + vh[1].powi(2);
        let cos_same = h / (h * h + l * l).sqrt();
        let cos_diff = l / (h * h + l * l).sqrt();
        let ca = -(cos_same.exp() / (cos_same.exp() + cos_diff.exp())).ln();

        let got = total_objective(&Matrix::identity(2), &eye_cats(), &ObjectiveConfig::default()).unwrap();
        assert!((got.l_ent - ent).abs() < 1e-12);
        assert!((got.l_pir - pir).abs() < 1e-12);
        assert!((got.l_ca - ca).abs() < 1e-12);
        assert!((got.total - (ent + pir + ca)).abs() < 1e-12);
    }

    #[test]
    fn saturated_self_consistent_batch() {
        let t = CategoryEmbeddings::seeded_orthonormal(4, 6, 2).unwrap();
        let v = t.matrix().clone();
        let raw = cosine_similarity_matrix(&v, t.matrix()).unwrap();
        let assoc = saturated(raw);
        assert_eq!(assoc.assignments(), vec![0, 1, 2, 3]);
        let protos = estimate_prototypes(&assoc, &v).unwrap();
        let recon = reconstruct(&assoc, &protos).unwrap();
        assert!(loss_pir(&recon, &v).unwrap() < 1e-12);
    }

    #[test]
    fn nearest_prototype_minimises_one_hot_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for m in 2..=8 {
            for _ in 0..10 {
                let protos = Prototypes {
                    matrix: Matrix::from_vec(m, 3, (0..3 * m).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
                    mass: vec![1.0; m],
                };
                let v = Matrix::from_vec(1, 3, (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
                let losses: Vec<f64> = (0..m)
                    .map(|j| {
                        let mut row = Matrix::zeros(1, m);
                        row.set(0, j, 1.0);
                        let assoc = AssociationMap {
                            raw: row.clone(),
                            normalized: row,
                        };
                        loss_pir(&reconstruct(&assoc, &protos).unwrap(), &v).unwrap()
                    })
                    .collect();
                let best = crate::numerics::argmax(&losses.iter().map(|l| -l).collect::<Vec<_>>());
                let dists: Vec<f64> = protos
                    .matrix
                    .row_iter()
                    .map(|p| p.iter().zip(v.row(0)).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                let nearest = crate::numerics::argmax(&dists.iter().map(|d| -d).collect::<Vec<_>>());
                assert_eq!(best, nearest);
            }
        }
    }

    #[test]
    fn tape_matches_plain_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = CategoryEmbeddings::seeded_orthonormal(4, 8, 1).unwrap();
        let v = Matrix::from_vec(6, 8, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cfg = ObjectiveConfig {
            alpha: 0.7,
            beta: 1.3,
            ..ObjectiveConfig::default()
        };
        let plain = total_objective(&v, &t, &cfg).unwrap();
        let tape = Tape::new();
        let f = tape.constant(v.clone());
        let terms = objective_on_tape(&tape, f, &t, &cfg);
        let taped = terms.breakdown(&tape, &cfg).unwrap();
        for (a, b) in [
            (plain.l_ent, taped.l_ent),
            (plain.l_pir, taped.l_pir),
            (plain.l_ca, taped.l_ca),
            (plain.total, tape.scalar(terms.total).unwrap()),
        ] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let assoc = association_with(&v, t.matrix()).unwrap();
        assert!(plain.l_ent <= (4f64).ln() + 1e-9 && plain.l_ent >= 0.0);
        assert_eq!(assoc.num_classes(), 4);
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let t = CategoryEmbeddings::seeded_orthonormal(4, 16, 0).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Matrix::from_vec(8, 16, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            for (name, pick) in [
                ("ent", 0usize),
                ("pir", 1),
                ("ca", 2),
                ("total", 3),
            ] {
                for stop in [false, true] {
                    let cfg = ObjectiveConfig {
                        stop_grad_target: stop,
                        ..ObjectiveConfig::default()
                    };
                    let f = |tape: &Tape, x: Var| {
                        let terms = objective_on_tape(tape, x, &t, &cfg);
                        [terms.entropy, terms.reconstruction, terms.alignment, terms.total][pick]
                    };
                    let a = value_and_gradient(f, &v).unwrap();
                    let fd = if stop && (pick == 1 || pick == 3) {
                        // oracle: reconstruction against the frozen batch
                        let frozen = |p: &Matrix| -> Result<f64> {
                            let assoc = association_map(p, &t)?;
                            let protos = estimate_prototypes(&assoc, p)?;
                            let pir = loss_pir(&reconstruct(&assoc, &protos)?, &v)?;
                            if pick == 1 {
                                return Ok(pir);
                            }
                            let ca = contrastive_alignment(&protos.matrix, t.matrix(), None)?;
                            Ok(combine(loss_entropy(&assoc), pir, ca, 1.0, 1.0))
                        };
                        finite_difference_gradient(frozen, &v, 1e-5).unwrap()
                    } else {
                        finite_difference_gradient(|p| evaluate(f, p), &v, 1e-5).unwrap()
                    };
                    let err = relative_error(&a.gradient, &fd);
                    assert!(err <= 1e-4, "{name} seed {seed}: {err}");
                }
            }
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        let bad = ObjectiveConfig {
            alpha: -1.0,
            ..ObjectiveConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
