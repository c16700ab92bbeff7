//! Textually guided focus revision: per-channel, per-feature gates that
//! compose the reference and modification focused features.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::data::{check_role, Dims, FeatureMatrix, Role};
use crate::error::Result;
use crate::tensor::{Bound, Graph, Mat, ParamGroup, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug)]
pub struct RevisionParams {
    /// `P×2P`, applied on the left of a reference focused feature.
    pub reduce_ref: ParamId,
    pub reduce_mod: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Reducer that averages local row `i` with global row `i`.
pub fn mean_reducer(focus: usize) -> Mat {
    let mut r = Array2::zeros((focus, 2 * focus));
    for i in 0..focus {
        r[[i, i]] = 0.5;
        r[[i, focus + i]] = 0.5;
    }
    r
}

impl RevisionParams {
    pub fn register(store: &mut ParamStore, dims: &Dims, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Head;
        let d = dims.embed_dim;
        Self {
            reduce_ref: store.add("rev.reduce_ref", g, mean_reducer(dims.focus)),
            reduce_mod: store.add("rev.reduce_mod", g, mean_reducer(dims.focus)),
            w1: store.add_glorot("rev.w1", g, 2 * d, d, rng),
            b1: store.add_zeros("rev.b1", g, (1, d)),
            w2: store.add_glorot("rev.w2", g, d, 2 * d, rng),
            b2: store.add_zeros("rev.b2", g, (1, 2 * d)),
        }
    }
}

pub fn reduce_g(g: &mut Graph, p: &Bound, reducer: ParamId, focused: Var) -> Var {
    g.matmul(p.var(reducer), focused)
}

/// Returns `(alpha, beta)`, each `P×D`.
pub fn revision_weights_g(g: &mut Graph, p: &Bound, rp: &RevisionParams, fr: Var, fm: Var) -> (Var, Var) {
    let d = g.shape(fr).1;
    let x = g.concat_cols(&[fr, fm]);
    let h = g.matmul(x, p.var(rp.w1));
    let h = g.add_row(h, p.var(rp.b1));
    let h = g.relu(h);
    let z = g.matmul(h, p.var(rp.w2));
    let z = g.add_row(z, p.var(rp.b2));
    let w = g.sigmoid(z);
    (g.slice_cols(w, 0, d), g.slice_cols(w, d, 2 * d))
}

pub fn compose_g(g: &mut Graph, alpha: Var, beta: Var, fr: Var, fm: Var) -> Var {
    let a = g.mul(alpha, fr);
    let b = g.mul(beta, fm);
    g.add(a, b)
}

/// Which reducer to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Reference,
    Modification,
}

fn inference(store: &ParamStore) -> (Graph, Bound) {
    let mut g = Graph::new();
    let p = store.bind(&mut g, &[]);
    (g, p)
}

pub fn reduce_channels(
    rp: &RevisionParams,
    store: &ParamStore,
    focused: &FeatureMatrix,
    side: Side,
    dims: &Dims,
) -> Result<FeatureMatrix> {
    check_role(focused.data(), Role::Focused, dims)?;
    let reducer = match side {
        Side::Reference => rp.reduce_ref,
        Side::Modification => rp.reduce_mod,
    };
    let (mut g, p) = inference(store);
    let f = g.constant(focused.data().clone());
    let out = reduce_g(&mut g, &p, reducer, f);
    FeatureMatrix::new(g.value(out).clone(), Role::Reduced, dims)
}

pub fn revision_weights(
    rp: &RevisionParams,
    store: &ParamStore,
    fr: &FeatureMatrix,
    fm: &FeatureMatrix,
    dims: &Dims,
) -> Result<(Mat, Mat)> {
    check_role(fr.data(), Role::Reduced, dims)?;
    check_role(fm.data(), Role::Reduced, dims)?;
    let (mut g, p) = inference(store);
    let a = g.constant(fr.data().clone());
    let b = g.constant(fm.data().clone());
    let (alpha, beta) = revision_weights_g(&mut g, &p, rp, a, b);
    Ok((g.value(alpha).clone(), g.value(beta).clone()))
}

/// `alpha ⊙ Fr + beta ⊙ Fm`, or `Fr + Fm` when `gated` is false.
pub fn compose(
    alpha: &Mat,
    beta: &Mat,
    fr: &FeatureMatrix,
    fm: &FeatureMatrix,
    gated: bool,
    dims: &Dims,
) -> Result<FeatureMatrix> {
    for m in [alpha, beta, fr.data(), fm.data()] {
        check_role(m, Role::Composed, dims)?;
    }
    let out = if gated {
        alpha * fr.data() + beta * fm.data()
    } else {
        fr.data() + fm.data()
    };
    FeatureMatrix::new(out, Role::Composed, dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HyperConfig;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn tiny(p: usize, d: usize) -> Dims {
        let mut cfg = HyperConfig::stub();
        cfg.focus_channels = p;
        cfg.embed_dim = d;
        Dims::from(&cfg)
    }

    fn setup(dims: &Dims) -> (ParamStore, RevisionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rp = RevisionParams::register(&mut store, dims, &mut rng);
        (store, rp)
    }

    #[test]
    fn reducer_initialises_to_pairwise_mean() {
        let d = tiny(1, 2);
        let (store, rp) = setup(&d);
        let f = FeatureMatrix::new(array![[0.0, 2.0], [4.0, 6.0]], Role::Focused, &d).unwrap();
        let out = reduce_channels(&rp, &store, &f, Side::Reference, &d).unwrap();
        assert_eq!(out.data(), &array![[2.0, 4.0]]);
    }

    #[test]
    fn reducer_general_rows() {
        let d = tiny(3, 4);
        let (store, rp) = setup(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let f = FeatureMatrix::new(m.clone(), Role::Focused, &d).unwrap();
        let out = reduce_channels(&rp, &store, &f, Side::Modification, &d).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let want = (m[[i, j]] + m[[3 + i, j]]) / 2.0;
                assert!((out.data()[[i, j]] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_parameters_give_half_gates() {
        let d = tiny(2, 16);
        let (mut store, rp) = setup(&d);
        for id in [rp.w1, rp.b1, rp.w2, rp.b2] {
            store.value_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mk = |rng: &mut ChaCha8Rng| {
            FeatureMatrix::new(
                Array2::from_shape_fn((2, 16), |_| rng.random_range(-1.0..1.0)),
                Role::Reduced,
                &d,
            )
            .unwrap()
        };
        let (a, b) = revision_weights(&rp, &store, &mk(&mut rng), &mk(&mut rng), &d).unwrap();
        assert!(a.iter().chain(b.iter()).all(|x| *x == 0.5));
    }

    #[test]
    fn compose_hand_case() {
        let d = tiny(1, 2);
        let fr = FeatureMatrix::new(array![[4.0, 4.0]], Role::Reduced, &d).unwrap();
        let fm = FeatureMatrix::new(array![[2.0, 8.0]], Role::Reduced, &d).unwrap();
        let out = compose(&array![[0.25, 0.75]], &array![[1.0, 0.0]], &fr, &fm, true, &d).unwrap();
        assert_eq!(out.data(), &array![[3.0, 3.0]]);
        let out = compose(&array![[1.0, 1.0]], &array![[0.0, 0.0]], &fr, &fm, true, &d).unwrap();
        assert_eq!(out.data(), fr.data());
        let out = compose(&array![[0.0, 0.0]], &array![[0.0, 0.0]], &fr, &fm, false, &d).unwrap();
        assert_eq!(out.data(), &array![[6.0, 12.0]]);
    }

    #[test]
    fn half_gates_fix_equal_inputs() {
        let d = tiny(1, 2);
        let x = FeatureMatrix::new(array![[1.5, -2.0]], Role::Reduced, &d).unwrap();
        let h = array![[0.5, 0.5]];
        let out = compose(&h, &h, &x, &x, true, &d).unwrap();
        assert_eq!(out.data(), x.data());
    }
}
