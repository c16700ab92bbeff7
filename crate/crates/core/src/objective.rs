//! In-batch ranking loss, focus-degree distributions and the KL focus
//! regularizer.

use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::data::{AblationFlag, HyperConfig};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, softmax_rows, Graph, Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    #[serde(rename = "L_rank")]
    pub l_rank: f64,
    #[serde(rename = "L_fr")]
    pub l_fr: f64,
    pub total: f64,
    pub tau: f64,
    pub mu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistributionSource {
    Composed,
    Target,
}

/// Row-stochastic `B×B` similarity distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusDistribution {
    pub f: Mat,
    pub source: DistributionSource,
}

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub rank: bool,
    pub regularize: bool,
    pub tau: f64,
    pub mu: f64,
    pub detach_target: bool,
}

impl ObjectiveTerms {
    pub fn from_config(cfg: &HyperConfig) -> Result<Self> {
        let t = Self {
            rank: !cfg.ablations.contains(&AblationFlag::NoBbc),
            regularize: !cfg.ablations.contains(&AblationFlag::NoFr),
            tau: cfg.tau,
            mu: cfg.mu,
            detach_target: cfg.detach_target,
        };
        if !t.rank && !t.regularize {
            return Err(Error::EmptyObjective);
        }
        Ok(t)
    }
}

/// Mean over rows, `1×D`.
pub fn pool(f: &Mat) -> Result<Mat> {
    if f.nrows() == 0 {
        return Err(Error::Shape {
            role: "pooled input".into(),
            expected: (1, f.ncols()),
            got: f.dim(),
        });
    }
    Ok(f.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0)))
}

fn check_batch(fc: &Mat, ft: &Mat, min: usize) -> Result<()> {
    if fc.dim() != ft.dim() {
        return Err(Error::Batch(format!(
            "composed {:?} vs target {:?}",
            fc.dim(),
            ft.dim()
        )));
    }
    if fc.nrows() < min {
        return Err(Error::Batch(format!("need at least {min} rows, got {}", fc.nrows())));
    }
    for (name, m) in [("composed", fc), ("target", ft)] {
        if let Some(i) = m.rows().into_iter().position(|r| r.iter().all(|x| *x == 0.0)) {
            return Err(Error::ZeroVector(format!("{name} row {i}")));
        }
    }
    Ok(())
}

/// `cos(x_i, y_j)/τ`, `B×B`.
pub fn cosine_logits_g(g: &mut Graph, x: Var, y: Var, tau: f64) -> Var {
    let xn = g.normalize_rows(x);
    let yn = g.normalize_rows(y);
    let s = g.matmul_t(xn, yn);
    g.scale(s, 1.0 / tau)
}

fn diagonal_mask(b: usize) -> Mat {
    Array2::eye(b)
}

pub fn bbc_loss_g(g: &mut Graph, fc: Var, ft: Var, tau: f64) -> Var {
    let b = g.shape(fc).0;
    let logits = cosine_logits_g(g, fc, ft, tau);
    let ls = g.log_softmax_rows(logits);
    let eye = g.constant(diagonal_mask(b));
    let diag = g.mul(ls, eye);
    let s = g.sum(diag);
    g.scale(s, -1.0 / b as f64)
}

pub fn fr_loss_g(g: &mut Graph, fc: Var, ft: Var, tau: f64, detach_target: bool) -> Var {
    let b = g.shape(fc).0;
    let mut st = cosine_logits_g(g, ft, ft, tau);
    if detach_target {
        st = g.detach(st);
    }
    let sc = cosine_logits_g(g, fc, ft, tau);
    let pt = g.softmax_rows(st);
    let lt = g.log_softmax_rows(st);
    let lc = g.log_softmax_rows(sc);
    let diff = g.sub(lt, lc);
    let kl = g.mul(pt, diff);
    let s = g.sum(kl);
    g.scale(s, 1.0 / b as f64)
}

/// Loss nodes of one batch; absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rank: Option<Var>,
    pub fr: Option<Var>,
    pub total: Var,
}

/// `fc`, `ft` are `B×D` pooled rows already in the graph.
pub fn total_loss_g(g: &mut Graph, fc: Var, ft: Var, terms: &ObjectiveTerms) -> Result<LossVars> {
    check_batch(g.value(fc), g.value(ft), 2)?;
    let rank = terms.rank.then(|| bbc_loss_g(g, fc, ft, terms.tau));
    let fr = terms
        .regularize
        .then(|| fr_loss_g(g, fc, ft, terms.tau, terms.detach_target));
    let total = match (rank, fr) {
        (Some(r), Some(f)) => {
            let w = g.scale(f, terms.mu);
            g.add(r, w)
        }
        (Some(r), None) => r,
        (None, Some(f)) => g.scale(f, terms.mu),
        (None, None) => return Err(Error::EmptyObjective),
    };
    Ok(LossVars { rank, fr, total })
}

impl LossVars {
    pub fn bundle(&self, g: &Graph, terms: &ObjectiveTerms) -> LossBundle {
        LossBundle {
            l_rank: self.rank.map_or(0.0, |v| g.scalar(v)),
            l_fr: self.fr.map_or(0.0, |v| g.scalar(v)),
            total: g.scalar(self.total),
            tau: terms.tau,
            mu: terms.mu,
        }
    }
}

fn cosine_logits(x: &Mat, y: &Mat, tau: f64) -> Mat {
    let norm = |m: &Mat| {
        let mut m = m.clone();
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        m
    };
    norm(x).dot(&norm(y).t()) / tau
}

/// Per-query ranking loss `−log softmax_j(cos/τ)_ii`.
pub fn bbc_per_sample(fc: &Mat, ft: &Mat, tau: f64) -> Result<Vec<f64>> {
    check_batch(fc, ft, 2)?;
    let ls = log_softmax_rows(&cosine_logits(fc, ft, tau));
    Ok((0..fc.nrows()).map(|i| -ls[[i, i]]).collect())
}

pub fn bbc_loss(fc: &Mat, ft: &Mat, tau: f64) -> Result<f64> {
    let v = bbc_per_sample(fc, ft, tau)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn focus_distribution(x: &Mat, ft: &Mat, tau: f64, source: DistributionSource) -> Result<FocusDistribution> {
    check_batch(x, ft, 1)?;
    Ok(FocusDistribution {
        f: softmax_rows(&cosine_logits(x, ft, tau)),
        source,
    })
}

/// `(1/B) Σ_i KL(ft_i ‖ fc_i)`.
pub fn fr_loss(ft: &FocusDistribution, fc: &FocusDistribution) -> Result<f64> {
    if ft.f.dim() != fc.f.dim() {
        return Err(Error::Batch(format!(
            "distribution shapes {:?} vs {:?}",
            ft.f.dim(),
            fc.f.dim()
        )));
    }
    let b = ft.f.nrows().max(1) as f64;
    let s: f64 = ft
        .f
        .iter()
        .zip(fc.f.iter())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, c)| t * (t / c).ln())
        .sum();
    Ok(s / b)
}

/// Loss on pooled `B×D` composed and target rows.
pub fn total_loss(fc: &Mat, ft: &Mat, terms: &ObjectiveTerms) -> Result<LossBundle> {
    let mut g = Graph::new();
    let a = g.constant(fc.clone());
    let b = g.constant(ft.clone());
    let vars = total_loss_g(&mut g, a, b, terms)?;
    Ok(vars.bundle(&g, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn terms(mu: f64) -> ObjectiveTerms {
        ObjectiveTerms {
            rank: true,
            regularize: true,
            tau: 0.1,
            mu,
            detach_target: false,
        }
    }

    #[test]
    fn identity_cosine_case() {
        let e = Array2::eye(2);
        let got = bbc_loss(&e, &e, 0.1).unwrap();
        let want = (1.0 + (-10f64).exp()).ln();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn orthogonal_rows_give_log_b() {
        let fc = array![[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]];
        let ft = array![[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]];
        assert!((bbc_loss(&fc, &ft, 0.1).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_row_batch_and_zero_rows_are_rejected() {
        let one = array![[1.0, 0.0]];
        assert!(matches!(bbc_loss(&one, &one, 0.1), Err(Error::Batch(_))));
        let z = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(bbc_loss(&z, &Array2::eye(2), 0.1), Err(Error::ZeroVector(_))));
    }

    #[test]
    fn hand_kl_case() {
        let ft = FocusDistribution {
            f: array![[0.5, 0.5], [0.5, 0.5]],
            source: DistributionSource::Target,
        };
        let fc = FocusDistribution {
            f: array![[0.9, 0.1], [0.9, 0.1]],
            source: DistributionSource::Composed,
        };
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = fr_loss(&ft, &fc).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.5108).abs() < 1e-4);
        assert!(fr_loss(&ft, &ft).unwrap().abs() < 1e-15);
    }

    #[test]
    fn single_query_distribution_is_one() {
        let x = array![[1.0, 2.0]];
        let f = focus_distribution(&x, &x, 0.1, DistributionSource::Target).unwrap();
        assert_eq!(f.f, array![[1.0]]);
    }

    #[test]
    fn pool_examples() {
        assert_eq!(pool(&array![[0.0, 2.0], [2.0, 0.0]]).unwrap(), array![[1.0, 1.0]]);
        assert_eq!(pool(&array![[3.0, -1.0]]).unwrap(), array![[3.0, -1.0]]);
    }

    #[test]
    fn ablated_terms() {
        let fc = array![[1.0, 0.2], [0.1, 1.0], [0.5, 0.5]];
        let ft = array![[0.9, 0.1], [0.3, 1.0], [0.4, 0.8]];
        let full = total_loss(&fc, &ft, &terms(0.5)).unwrap();
        assert!((full.total - (full.l_rank + 0.5 * full.l_fr)).abs() < 1e-12);
        let zero_mu = total_loss(&fc, &ft, &terms(0.0)).unwrap();
        assert_eq!(zero_mu.total, zero_mu.l_rank);
        let no_fr = total_loss(&fc, &ft, &ObjectiveTerms { regularize: false, ..terms(0.5) }).unwrap();
        assert!(full.l_fr > 0.0 && no_fr.total < full.total);
        let no_bbc = total_loss(&fc, &ft, &ObjectiveTerms { rank: false, ..terms(0.5) }).unwrap();
        assert!((no_bbc.total - 0.5 * full.l_fr).abs() < 1e-12);
        let none = ObjectiveTerms { rank: false, regularize: false, ..terms(0.5) };
        assert!(matches!(total_loss(&fc, &ft, &none), Err(Error::EmptyObjective)));
    }

    #[test]
    fn config_flags_map_to_terms() {
        let mut cfg = HyperConfig::stub();
        cfg.ablations.insert(AblationFlag::NoBbc);
        assert!(!ObjectiveTerms::from_config(&cfg).unwrap().rank);
        cfg.ablations.insert(AblationFlag::NoFr);
        assert!(matches!(ObjectiveTerms::from_config(&cfg), Err(Error::EmptyObjective)));
    }

    fn batch(b: usize, d: usize) -> impl Strategy<Value = (Mat, Mat)> {
        let cell = prop_oneof![-2.0..-0.05f64, 0.05..2.0f64];
        (
            proptest::collection::vec(cell.clone(), b * d),
            proptest::collection::vec(cell, b * d),
        )
            .prop_map(move |(a, c)| {
                (
                    Array2::from_shape_vec((b, d), a).unwrap(),
                    Array2::from_shape_vec((b, d), c).unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn graph_and_direct_losses_agree((fc, ft) in batch(4, 3)) {
            let bundle = total_loss(&fc, &ft, &terms(0.5)).unwrap();
            let direct = bbc_loss(&fc, &ft, 0.1).unwrap();
            let t = focus_distribution(&ft, &ft, 0.1, DistributionSource::Target).unwrap();
            let c = focus_distribution(&fc, &ft, 0.1, DistributionSource::Composed).unwrap();
            let kl = fr_loss(&t, &c).unwrap();
            prop_assert!((bundle.l_rank - direct).abs() < 1e-9);
            prop_assert!((bundle.l_fr - kl).abs() < 1e-9);
            prop_assert!(bundle.l_rank >= 0.0 && bundle.l_fr >= -1e-12);
        }

        #[test]
        fn rescaling_rows_leaves_bbc_unchanged((fc, ft) in batch(3, 4), k in 0.01..100.0f64, row in 0usize..3) {
            let mut scaled = fc.clone();
            scaled.row_mut(row).mapv_inplace(|x| x * k);
            let a = bbc_loss(&fc, &ft, 0.1).unwrap();
            let b = bbc_loss(&scaled, &ft, 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn joint_permutation_equivariance((fc, ft) in batch(4, 3), shift in 1usize..4) {
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let pfc = fc.select(Axis(0), &perm);
            let pft = ft.select(Axis(0), &perm);
            let base = bbc_per_sample(&fc, &ft, 0.1).unwrap();
            let moved = bbc_per_sample(&pfc, &pft, 0.1).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((moved[i] - base[p]).abs() < 1e-9);
            }
            let a = total_loss(&fc, &ft, &terms(0.5)).unwrap().total;
            let b = total_loss(&pfc, &pft, &terms(0.5)).unwrap().total;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn distributions_are_stochastic_and_kl_nonnegative((x, ft) in batch(5, 3)) {
            let c = focus_distribution(&x, &ft, 0.1, DistributionSource::Composed).unwrap();
            let t = focus_distribution(&ft, &ft, 0.1, DistributionSource::Target).unwrap();
            for r in c.f.rows() {
                prop_assert!((r.sum() - 1.0).abs() < 1e-6);
                prop_assert!(r.iter().all(|v| *v > 0.0));
            }
            prop_assert!(fr_loss(&t, &c).unwrap() >= -1e-12);
        }

        #[test]
        fn kl_zero_only_for_equal_distributions((x, ft) in batch(3, 3)) {
            let c = focus_distribution(&x, &ft, 0.1, DistributionSource::Composed).unwrap();
            let t = focus_distribution(&ft, &ft, 0.1, DistributionSource::Target).unwrap();
            prop_assert!(fr_loss(&c, &c).unwrap().abs() < 1e-12);
            let gap = (&c.f - &t.f).iter().map(|v| v.abs()).fold(0.0, f64::max);
            if gap > 1e-6 {
                prop_assert!(fr_loss(&t, &c).unwrap() > 0.0);
            }
        }
    }
}
