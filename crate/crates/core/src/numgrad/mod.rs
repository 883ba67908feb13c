//! Deterministic reverse-mode differentiation and Adam, sized for the toy
//! generator: a tensor-level tape with a closed op set, named parameter
//! buffers with trainability flags, and finite-difference verification.

mod adam;
mod fdcheck;
mod params;
mod tape;

pub use adam::{Adam, AdamParams};
pub use fdcheck::{fd_check, fd_compare};
pub use params::{ParamBuffer, ParamSet};
pub use tape::{FetchFootprint, NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumGradError {
    #[error("non-finite gradient produced by op '{op}' (node {node}) at flat index {index}")]
    NonFiniteGrad { op: &'static str, node: usize, index: usize },
    #[error("non-finite gradient in parameter '{name}' at flat index {index}; step aborted")]
    NonFiniteParamGrad { name: String, index: usize },
    #[error("non-finite objective value while perturbing coordinate {index}")]
    NonFiniteEval { index: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(name: &str, v: f64) -> ParamSet {
        let mut set = ParamSet::new();
        set.insert(name, vec![1], vec![v], true);
        set
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut set = scalar_set("x", 3.0);
        let mut tape = Tape::new();
        let x = tape.leaf(&set, "x");
        let y = tape.mul(x, x);
        tape.backward(y, &mut set).unwrap();
        assert!((set.get("x").grad[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn product_rule_gives_cross_gradients() {
        let mut set = ParamSet::new();
        set.insert("a", vec![1], vec![5.0], true);
        set.insert("b", vec![1], vec![2.0], true);
        let mut tape = Tape::new();
        let a = tape.leaf(&set, "a");
        let b = tape.leaf(&set, "b");
        let y = tape.mul(a, b);
        tape.backward(y, &mut set).unwrap();
        assert_eq!(set.get("a").grad[0], 2.0);
        assert_eq!(set.get("b").grad[0], 5.0);
    }

    #[test]
    fn frozen_buffer_receives_no_gradient() {
        let mut set = ParamSet::new();
        set.insert("a", vec![1], vec![5.0], true);
        set.insert("frozen", vec![1], vec![2.0], false);
        let mut tape = Tape::new();
        let a = tape.leaf(&set, "a");
        let f = tape.leaf(&set, "frozen");
        let y = tape.mul(a, f);
        tape.backward(y, &mut set).unwrap();
        assert_eq!(set.get("a").grad[0], 2.0);
        assert_eq!(set.get("frozen").grad[0], 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        let mut set = scalar_set("x", 0.0);
        set.get_mut("x").grad[0] = 1.0;
        let mut opt = Adam::new(AdamParams::with_lr(0.1));
        opt.step(&mut set).unwrap();
        let moved = set.get("x").values[0];
        assert!((moved + 0.1).abs() < 1e-6, "first Adam step was {moved}, wanted about -0.1");
        assert_eq!(set.get("x").grad[0], 0.0, "gradient must be cleared after the step");
    }

    #[test]
    fn adam_rejects_non_finite_gradient_without_touching_values() {
        let mut set = ParamSet::new();
        set.insert("x", vec![2], vec![1.0, 2.0], true);
        set.get_mut("x").grad = vec![0.5, f64::NAN];
        let mut opt = Adam::new(AdamParams::with_lr(0.1));
        let err = opt.step(&mut set).unwrap_err();
        assert!(matches!(err, NumGradError::NonFiniteParamGrad { ref name, index: 1 } if name == "x"));
        assert_eq!(set.get("x").values, vec![1.0, 2.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn fd_check_square_is_tight() {
        let err = fd_check(|t, x| t.mul(x, x), &[3.0], 1e-5).unwrap();
        assert!(err < 1e-6, "fd mismatch {err}");
    }

    #[test]
    fn fd_check_composed_elementwise_chain() {
        let build = |t: &mut Tape, x: NodeId| {
            let s = t.softplus(x);
            let g = t.sigmoid(s);
            let l = t.leaky_relu(g, 0.2);
            let e = t.exp(l);
            let r = t.recip(e);
            t.sum_all(r)
        };
        let err = fd_check(build, &[0.3, -1.2, 2.5, 0.0], 1e-5).unwrap();
        assert!(err < 1e-4, "fd mismatch {err}");
    }

    #[test]
    fn fd_check_reductions_and_cumsum() {
        let build = |t: &mut Tape, x: NodeId| {
            let m = t.reshape(x, vec![2, 3]);
            let c = t.cumsum_excl_last(m);
            let e = t.exp(c);
            let s = t.sum_last(e);
            let q = t.mul(s, s);
            t.mean_all(q)
        };
        let err = fd_check(build, &[0.1, -0.4, 0.7, 0.2, 0.0, -0.9], 1e-5).unwrap();
        assert!(err < 1e-4, "fd mismatch {err}");
    }

    #[test]
    fn fd_check_triplane_sample_scatter_adjoint() {
        let pts = vec![[0.15, -0.3, 0.8], [-0.9, 0.9, 0.05], [2.0, 0.0, 0.0]];
        let build = move |t: &mut Tape, x: NodeId| {
            let planes = t.reshape(x, vec![3, 2, 2, 2]);
            let feats = t.triplane_sample(planes, pts.clone());
            let sq = t.mul(feats, feats);
            t.sum_all(sq)
        };
        let point: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let err = fd_check(build, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "fd mismatch {err}");
    }

    #[test]
    fn triplane_sample_at_shared_node_sums_three_plane_values() {
        let mut tape = Tape::new();
        let mut vals = vec![0.0; 3 * 1 * 2 * 2];
        // Node (1, 1, 1) in a 2x2 grid is corner index 3 of every plane.
        vals[3] = 1.5;
        vals[4 + 3] = 2.5;
        vals[8 + 3] = 4.0;
        let planes = tape.constant(vec![3, 1, 2, 2], vals);
        let out = tape.triplane_sample(planes, vec![[1.0, 1.0, 1.0]]);
        assert!((tape.value(out)[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn triplane_sample_outside_cube_is_zero() {
        let mut tape = Tape::new();
        let planes = tape.constant(vec![3, 1, 2, 2], vec![1.0; 12]);
        let out = tape.triplane_sample(planes, vec![[0.0, 0.0, 1.5]]);
        assert_eq!(tape.value(out)[0], 0.0);
    }

    #[test]
    fn tv2d_matches_hand_value_on_2x2() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        let tv = tape.tv2d(x);
        assert!((tape.scalar(tv) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fd_check_tv2d_and_avg_pool() {
        let build = |t: &mut Tape, x: NodeId| {
            let img = t.reshape(x, vec![2, 4, 4]);
            let pooled = t.avg_pool2(img);
            let tv_full = t.tv2d(img);
            let tv_pooled = t.tv2d(pooled);
            t.add(tv_full, tv_pooled)
        };
        let point: Vec<f64> = (0..32).map(|i| ((i * i) as f64 * 0.11).cos()).collect();
        let err = fd_check(build, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "fd mismatch {err}");
    }

    #[test]
    fn fd_check_linear_layer_all_inputs() {
        let xv: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let wv: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
        let bv = vec![0.1, -0.2, 0.3, 0.05];
        let run = |xv: &[f64], wv: &[f64], bv: &[f64], grads: Option<&mut ParamSet>| -> f64 {
            let mut set = ParamSet::new();
            set.insert("x", vec![2, 3], xv.to_vec(), true);
            set.insert("w", vec![4, 3], wv.to_vec(), true);
            set.insert("b", vec![4], bv.to_vec(), true);
            let mut tape = Tape::new();
            let x = tape.leaf(&set, "x");
            let w = tape.leaf(&set, "w");
            let b = tape.leaf(&set, "b");
            let y = tape.linear(x, w, b);
            let a = tape.sigmoid(y);
            let out = tape.sum_all(a);
            if let Some(dst) = grads {
                tape.backward(out, &mut set).unwrap();
                *dst = set;
            }
            tape.scalar(out)
        };
        let mut set = ParamSet::new();
        run(&xv, &wv, &bv, Some(&mut set));
        let ex = fd_compare(&set.get("x").grad, |p| run(p, &wv, &bv, None), &xv, 1e-5).unwrap();
        let ew = fd_compare(&set.get("w").grad, |p| run(&xv, p, &bv, None), &wv, 1e-5).unwrap();
        let eb = fd_compare(&set.get("b").grad, |p| run(&xv, &wv, p, None), &bv, 1e-5).unwrap();
        assert!(ex < 1e-4 && ew < 1e-4 && eb < 1e-4, "fd mismatch x={ex} w={ew} b={eb}");
    }

    #[test]
    fn fd_check_concat_normalize_projection() {
        let mat: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let build = move |t: &mut Tape, x: NodeId| {
            let m = t.reshape(x, vec![3, 2]);
            let c0 = t.slice_col(m, 0);
            let c1 = t.slice_col(m, 1);
            let cat = t.concat(&[c0, c1]);
            let unit = t.normalize(cat);
            let proj = t.linear_const(unit, mat.clone(), 2);
            let sq = t.mul(proj, proj);
            t.sum_all(sq)
        };
        let point = vec![0.4, -0.7, 1.2, 0.3, -0.5, 0.9];
        let err = fd_check(build, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "fd mismatch {err}");
    }

    #[test]
    fn fd_check_sparse_fetch() {
        use super::FetchFootprint;
        let pix = vec![
            Some(FetchFootprint { idx: [0, 1, 2, 3], w: [0.25, 0.25, 0.25, 0.25] }),
            None,
            Some(FetchFootprint { idx: [2, 3, 0, 1], w: [0.5, 0.3, 0.1, 0.1] }),
        ];
        let build = move |t: &mut Tape, x: NodeId| {
            let atlas = t.reshape(x, vec![3, 2, 2]);
            let img = t.sparse_fetch(atlas, pix.clone());
            let sq = t.mul(img, img);
            t.sum_all(sq)
        };
        let point: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.4).collect();
        let err = fd_check(build, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "fd mismatch {err}");
    }

    #[test]
    fn backward_reports_non_finite_gradient_with_op_identity() {
        let mut set = scalar_set("x", 0.0);
        let mut tape = Tape::new();
        let x = tape.leaf(&set, "x");
        let r = tape.recip(x);
        let s = tape.sum_all(r);
        let err = tape.backward(s, &mut set).unwrap_err();
        match err {
            NumGradError::NonFiniteGrad { op, .. } => assert_eq!(op, "recip"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
