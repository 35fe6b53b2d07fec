//! Conflict-free editing: unlearning the outdated residual.
//!
//! Alongside the residual δ that pushes a hidden state toward the NEW
//! object, a second residual δ′ is optimized toward the OLD object. The
//! two share a linguistic component; its direction is the sum of their
//! unit vectors, and δ′'s projection onto that direction (δ″) is what
//! must be preserved. The remainder u = δ′ − δ″ carries only the
//! outdated knowledge and is subtracted from the target vector z with
//! weight alpha, restricted to the top-p% largest-magnitude coordinates
//! of u.
//!
//! Ablation modes bypass individual stages (skip δ′ entirely, zero δ″,
//! or drop the top-p restriction); the orthogonality property of u
//! against the common direction holds on the unablated path only.

use serde::{Deserialize, Serialize};

use crate::editengine::{optimize_residual, AblationMode, EditConfig, EditRequest};
use crate::error::Result;
use crate::model::ModelState;
use crate::numerics::Vector;

/// Norm below which a direction sum counts as cancelled (anti-parallel).
pub const DIRECTION_EPS: f64 = 1e-8;
/// Norm below which an input residual counts as zero.
pub const ZERO_EPS: f64 = 1e-12;

/// Full provenance of one request's unlearning computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBundle {
    pub request_id: String,
    /// Residual toward the new object.
    pub delta_new: Vector,
    /// Residual toward the outdated object.
    pub delta_old: Vector,
    /// Common direction: sum of unit vectors of the two residuals.
    pub direction: Vector,
    /// Projection of the outdated residual onto the common direction.
    pub common: Vector,
    /// Unlearning vector: delta_old - common.
    pub unlearn: Vector,
    /// Set when the direction collapsed (anti-parallel or zero inputs).
    pub degenerate: bool,
}

/// Coordinate restriction for the subtraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Percentage of coordinates kept, in [0, 100].
    pub p: f64,
    /// Selected coordinate indices, ascending.
    pub selected: Vec<usize>,
    /// Magnitude of the smallest selected coordinate (0 when empty).
    pub threshold: f64,
}

impl MaskSpec {
    pub fn covers_all(&self, dim: usize) -> bool {
        self.selected.len() == dim
    }
}

/// Sum of unit vectors of the two residuals (the shared direction).
///
/// Degenerate when either input is (numerically) zero or the residuals
/// are anti-parallel so the unit vectors cancel. Degeneracy is a flagged
/// result, not an error.
pub fn common_direction(delta_new: &Vector, delta_old: &Vector) -> (Vector, bool) {
    let n_new = delta_new.norm();
    let n_old = delta_old.norm();
    if n_new < ZERO_EPS || n_old < ZERO_EPS {
        return (Vector::zeros(delta_new.dim()), true);
    }
    let dir = delta_new.scale(1.0 / n_new).add(&delta_old.scale(1.0 / n_old));
    let degenerate = dir.norm() < DIRECTION_EPS;
    (dir, degenerate)
}

/// Projection of δ′ onto the unit common direction, as a vector:
/// δ″ = (δ′·û)û. Zero when degenerate.
pub fn project_common(delta_old: &Vector, direction: &Vector, degenerate: bool) -> Vector {
    assert_eq!(delta_old.dim(), direction.dim(), "projection dims differ");
    if degenerate {
        return Vector::zeros(delta_old.dim());
    }
    let norm = direction.norm();
    let unit = direction.scale(1.0 / norm);
    unit.scale(delta_old.dot(&unit))
}

/// u = δ′ − δ″; orthogonal to the common direction when not degenerate.
pub fn unlearn_vector(delta_old: &Vector, common: &Vector) -> Vector {
    delta_old.sub(common)
}

/// Selects the ceil(p·d/100) coordinates of largest |u|, ties broken by
/// lower index. p = 0 or u = 0 select nothing; p = 100 selects all.
pub fn build_mask(u: &Vector, p: f64) -> MaskSpec {
    assert!((0.0..=100.0).contains(&p), "p out of [0, 100]");
    let d = u.dim();
    let all_zero = u.data().iter().all(|&v| v == 0.0);
    if p == 0.0 || all_zero {
        return MaskSpec {
            p,
            selected: Vec::new(),
            threshold: 0.0,
        };
    }
    let count = ((p * d as f64) / 100.0).ceil() as usize;
    let count = count.min(d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        u[b].abs()
            .partial_cmp(&u[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..count].to_vec();
    let threshold = selected
        .iter()
        .map(|&i| u[i].abs())
        .fold(f64::INFINITY, f64::min);
    selected.sort_unstable();
    MaskSpec {
        p,
        selected,
        threshold,
    }
}

/// Masks from a batch-pooled magnitude threshold (diagnostic variant):
/// the top p% of all |u| entries across every request, ties broken by
/// (request order, coordinate index).
pub fn build_masks_pooled(us: &[&Vector], p: f64) -> Vec<MaskSpec> {
    assert!((0.0..=100.0).contains(&p), "p out of [0, 100]");
    let total: usize = us.iter().map(|u| u.dim()).sum();
    let mut entries: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (r, u) in us.iter().enumerate() {
        if u.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        entries.extend((0..u.dim()).map(|i| (r, i)));
    }
    let count = ((p * total as f64) / 100.0).ceil() as usize;
    let count = count.min(entries.len());
    entries.sort_by(|&(ra, ia), &(rb, ib)| {
        us[rb][ib]
            .abs()
            .partial_cmp(&us[ra][ia].abs())
            .unwrap()
            .then(ra.cmp(&rb))
            .then(ia.cmp(&ib))
    });
    let mut per_request: Vec<Vec<usize>> = vec![Vec::new(); us.len()];
    if p > 0.0 {
        for &(r, i) in &entries[..count] {
            per_request[r].push(i);
        }
    }
    per_request
        .into_iter()
        .enumerate()
        .map(|(r, mut selected)| {
            selected.sort_unstable();
            let threshold = selected
                .iter()
                .map(|&i| us[r][i].abs())
                .fold(f64::INFINITY, f64::min);
            MaskSpec {
                p,
                selected,
                threshold: if threshold.is_finite() { threshold } else { 0.0 },
            }
        })
        .collect()
}

/// z′[j] = z[j] − α·u[j] on selected coordinates; z′[j] = z[j] elsewhere.
pub fn apply_unlearning(z: &Vector, u: &Vector, alpha: f64, mask: &MaskSpec) -> Vector {
    assert_eq!(z.dim(), u.dim(), "apply_unlearning dims differ");
    let mut out = z.clone();
    for &j in &mask.selected {
        out[j] -= alpha * u[j];
    }
    out
}

/// The full per-request unlearning pipeline.
///
/// Optimizes the outdated residual δ′ (same schedule as δ), extracts the
/// common direction and projection, masks, and subtracts. Ablation modes
/// in the config skip their designated stage. Returns the adjusted target
/// z′ together with the provenance bundle and mask for the report.
pub fn come_transform(
    state: &ModelState,
    request: &EditRequest,
    delta_new: &Vector,
    z: &Vector,
    config: &EditConfig,
) -> Result<(Vector, ResidualBundle, MaskSpec)> {
    let d = delta_new.dim();
    let (delta_old, direction, common, unlearn, degenerate) = match config.ablation {
        AblationMode::NoDeltaOld => {
            // Skip δ′ entirely: nothing to unlearn.
            let zero = Vector::zeros(d);
            (zero.clone(), zero.clone(), zero.clone(), zero, true)
        }
        AblationMode::NoDeltaCommon => {
            let delta_old = optimize_residual(
                state,
                request,
                &request.triple.old_object,
                config.final_layer,
                &config.opt,
            )?;
            let (direction, degenerate) = common_direction(delta_new, &delta_old);
            let common = Vector::zeros(d);
            let unlearn = delta_old.clone();
            (delta_old, direction, common, unlearn, degenerate)
        }
        AblationMode::Full | AblationMode::NoRestriction => {
            let delta_old = optimize_residual(
                state,
                request,
                &request.triple.old_object,
                config.final_layer,
                &config.opt,
            )?;
            let (direction, degenerate) = common_direction(delta_new, &delta_old);
            let common = project_common(&delta_old, &direction, degenerate);
            let unlearn = unlearn_vector(&delta_old, &common);
            (delta_old, direction, common, unlearn, degenerate)
        }
    };

    let p = match config.ablation {
        AblationMode::NoRestriction => 100.0,
        _ => config.top_p,
    };
    let mask = build_mask(&unlearn, p);
    let z_prime = apply_unlearning(z, &unlearn, config.alpha, &mask);

    let bundle = ResidualBundle {
        request_id: request.triple.id.clone(),
        delta_new: delta_new.clone(),
        delta_old,
        direction,
        common,
        unlearn,
        degenerate,
    };
    Ok((z_prime, bundle, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> Vector {
        Vector::from(data.to_vec())
    }

    #[test]
    fn direction_orthogonal_units() {
        let (dir, degenerate) = common_direction(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]));
        assert!(!degenerate);
        assert_eq!(dir.data(), &[1.0, 1.0]);
    }

    #[test]
    fn direction_parallel_case() {
        let vecs = v(&[3.0, 4.0]);
        let (dir, degenerate) = common_direction(&vecs, &vecs);
        assert!(!degenerate);
        let expect = vecs.scale(2.0 / vecs.norm());
        assert!(dir.sub(&expect).norm() < 1e-15);
    }

    #[test]
    fn direction_anti_parallel_degenerates() {
        let (_, degenerate) = common_direction(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0]));
        assert!(degenerate);
    }

    #[test]
    fn direction_zero_input_degenerates() {
        let (dir, degenerate) = common_direction(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]));
        assert!(degenerate);
        assert_eq!(dir.data(), &[0.0, 0.0]);
    }

    #[test]
    fn projection_analytic_case() {
        let s = 1.0 / 2.0_f64.sqrt();
        let common = project_common(&v(&[0.0, 1.0]), &v(&[s, s]), false);
        assert!((common[0] - 0.5).abs() < 1e-12);
        assert!((common[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn projection_parallel_full_overlap() {
        let delta_old = v(&[2.0, 2.0]);
        let common = project_common(&delta_old, &v(&[1.0, 1.0]), false);
        assert!(common.sub(&delta_old).norm() < 1e-12);
        assert!(unlearn_vector(&delta_old, &common).norm() < 1e-12);
    }

    #[test]
    fn projection_orthogonal_no_overlap() {
        let delta_old = v(&[0.0, 3.0]);
        let common = project_common(&delta_old, &v(&[1.0, 0.0]), false);
        assert_eq!(common.data(), &[0.0, 0.0]);
        assert_eq!(unlearn_vector(&delta_old, &common), delta_old);
    }

    #[test]
    fn unlearn_arithmetic() {
        assert_eq!(
            unlearn_vector(&v(&[0.0, 1.0]), &v(&[0.5, 0.5])).data(),
            &[-0.5, 0.5]
        );
        assert_eq!(unlearn_vector(&v(&[1.0]), &v(&[1.0])).data(), &[0.0]);
    }

    #[test]
    fn mask_picks_dominant_entries() {
        let mut u = Vector::zeros(10);
        u[3] = 5.0;
        u[7] = -9.0;
        u[1] = 0.1;
        let mask = build_mask(&u, 20.0);
        assert_eq!(mask.selected, vec![3, 7]);
        assert!((mask.threshold - 5.0).abs() < 1e-15);
    }

    #[test]
    fn mask_boundaries() {
        let u = v(&[1.0, 2.0, 3.0]);
        assert!(build_mask(&u, 0.0).selected.is_empty());
        assert_eq!(build_mask(&u, 100.0).selected, vec![0, 1, 2]);
        assert!(build_mask(&Vector::zeros(5), 50.0).selected.is_empty());
    }

    #[test]
    fn mask_ties_break_by_lower_index() {
        let u = v(&[2.0, -2.0, 2.0, 2.0, -2.0]);
        let mask = build_mask(&u, 40.0);
        assert_eq!(mask.selected, vec![0, 1]);
    }

    #[test]
    fn apply_alpha_zero_is_bit_identical() {
        let z = v(&[1.0, -2.0, 0.0, 3.5]);
        let u = v(&[0.5, 0.5, 0.5, 0.5]);
        let mask = build_mask(&u, 100.0);
        let out = apply_unlearning(&z, &u, 0.0, &mask);
        assert_eq!(out, z);
    }

    #[test]
    fn apply_full_mask_arithmetic() {
        let z = v(&[1.0, 1.0]);
        let u = v(&[0.5, -0.5]);
        let mask = build_mask(&u, 100.0);
        let out = apply_unlearning(&z, &u, 1.0, &mask);
        assert_eq!(out.data(), &[0.5, 1.5]);
    }

    #[test]
    fn pooled_masks_concentrate_on_large_request() {
        let big = v(&[10.0, 9.0, 8.0, 7.0]);
        let small = v(&[0.1, 0.2, 0.3, 0.4]);
        let masks = build_masks_pooled(&[&big, &small], 50.0);
        assert_eq!(masks[0].selected, vec![0, 1, 2, 3]);
        assert!(masks[1].selected.is_empty());
    }

    proptest! {
        // Orthogonality of u against the common direction, non-degenerate pairs.
        #[test]
        fn prop_unlearn_orthogonal_to_direction(
            a in proptest::collection::vec(-10.0f64..10.0, 2..32),
            b in proptest::collection::vec(-10.0f64..10.0, 2..32),
        ) {
            prop_assume!(a.len() == b.len());
            let delta_new = Vector::from(a);
            let delta_old = Vector::from(b);
            let (dir, degenerate) = common_direction(&delta_new, &delta_old);
            prop_assume!(!degenerate);
            let common = project_common(&delta_old, &dir, degenerate);
            let u = unlearn_vector(&delta_old, &common);
            let bound = 1e-6 * u.norm() * dir.norm();
            prop_assert!(u.dot(&dir).abs() <= bound.max(1e-18));
        }

        // Positive rescaling of the inputs leaves the direction unchanged.
        #[test]
        fn prop_direction_scale_covariant(
            a in proptest::collection::vec(-5.0f64..5.0, 2..16),
            c1 in 0.01f64..100.0,
            c2 in 0.01f64..100.0,
        ) {
            let delta_new = Vector::from(a.clone());
            let mut flipped = a;
            flipped.rotate_left(1);
            let delta_old = Vector::from(flipped);
            let (d1, g1) = common_direction(&delta_new, &delta_old);
            let (d2, g2) = common_direction(&delta_new.scale(c1), &delta_old.scale(c2));
            prop_assert_eq!(g1, g2);
            prop_assert!(d1.sub(&d2).norm() <= 1e-9 * d1.norm().max(1.0));
        }

        // Parallel residuals annihilate: nothing to unlearn.
        #[test]
        fn prop_parallel_annihilation(
            a in proptest::collection::vec(-5.0f64..5.0, 2..16),
            c in 0.01f64..50.0,
        ) {
            let delta_new = Vector::from(a);
            prop_assume!(delta_new.norm() > 1e-6);
            let delta_old = delta_new.scale(c);
            let (dir, degenerate) = common_direction(&delta_new, &delta_old);
            prop_assert!(!degenerate);
            let common = project_common(&delta_old, &dir, degenerate);
            let u = unlearn_vector(&delta_old, &common);
            prop_assert!(u.norm() <= 1e-9 * delta_old.norm().max(1.0));
            let z = Vector::from(vec![1.0; delta_new.dim()]);
            let mask = build_mask(&u, 100.0);
            let z2 = apply_unlearning(&z, &u, 2.0, &mask);
            prop_assert!(z2.sub(&z).norm() <= 1e-8);
        }

        // Mask cardinality: ceil(p*d/100) whenever u != 0 and p > 0.
        #[test]
        fn prop_mask_cardinality(
            data in proptest::collection::vec(-3.0f64..3.0, 1..64),
            p in 0.0f64..=100.0,
        ) {
            let u = Vector::from(data);
            prop_assume!(u.data().iter().any(|&x| x != 0.0));
            let mask = build_mask(&u, p);
            let expect = if p == 0.0 {
                0
            } else {
                ((p * u.dim() as f64) / 100.0).ceil() as usize
            };
            prop_assert_eq!(mask.selected.len(), expect.min(u.dim()));
        }
    }
}
