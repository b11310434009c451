//! Reverse-mode vs central finite difference comparison.

use super::tape::{SpikeMode, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub worst_index: Option<usize>,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

/// Options for [`gradcheck_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradcheckOpts {
    pub step: f64,
    pub tol: f64,
    /// Spiking layers are checked against the derivative of their
    /// relaxation, so gradchecks through them use [`SpikeMode::Relaxed`].
    pub spike_mode: SpikeMode,
}

impl Default for GradcheckOpts {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, spike_mode: SpikeMode::Relaxed }
    }
}

/// Checks `f` at `point` with default options.
pub fn gradcheck<F>(f: F, point: &Tensor, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_with(f, point, GradcheckOpts { tol, ..Default::default() })
}

pub fn gradcheck_with<F>(f: F, point: &Tensor, opts: GradcheckOpts) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::with_spike_mode(opts.spike_mode);
        let x = tape.leaf(p.clone(), false);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut tape = Tape::with_spike_mode(opts.spike_mode);
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let mut numeric = Tensor::zeros(point.shape().to_vec());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + opts.step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - opts.step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        numeric.data_mut()[i] = (up - down) / (2.0 * opts.step);
    }

    let mut max_rel_err = 0.0;
    let mut worst_index = None;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if err > max_rel_err || err.is_nan() {
            max_rel_err = err;
            worst_index = Some(i);
        }
    }
    Ok(GradcheckReport { max_rel_err, tol: opts.tol, worst_index, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det_point(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape.to_vec(), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn sum_is_exact_on_dyadic_point() {
        let p = Tensor::from_vec(vec![0.5, -1.25, 2.0, 0.0]);
        let opts = GradcheckOpts { step: 1.0 / 65536.0, ..Default::default() };
        let r = gradcheck_with(|t, x| Ok(t.sum(x)), &p, opts).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn mean_square_with_small_step() {
        let p = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let opts = GradcheckOpts { step: 1e-6, ..Default::default() };
        let r = gradcheck_with(
            |t, x| {
                let s = t.square(x);
                Ok(t.mean(s))
            },
            &p,
            opts,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    type Build = fn(&mut Tape, Var) -> Result<Var>;

    fn unary_cases() -> Vec<(&'static str, Build)> {
        vec![
            ("softplus", |t, x| Ok(t.softplus(x))),
            ("tanh", |t, x| Ok(t.tanh(x))),
            ("sigmoid", |t, x| Ok(t.sigmoid(x))),
            ("exp", |t, x| Ok(t.exp(x))),
            ("log", |t, x| {
                let a = t.abs(x);
                let p = t.add_scalar(a, 0.5);
                Ok(t.log(p))
            }),
            ("relu", |t, x| Ok(t.relu(x))),
            ("clamp_min", |t, x| Ok(t.clamp_min(x, 0.1))),
            ("sqrt", |t, x| {
                let s = t.square(x);
                let p = t.add_scalar(s, 0.3);
                Ok(t.sqrt(p))
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn unary_primitives_match_finite_differences(seed in 0u64..10_000, n in 1usize..12) {
            let p = det_point(&[n], seed).map(|v| 2.0 * v);
            // keep kinked ops away from their kinks
            let p = p.map(|v| if (v.abs() < 0.01) || ((v - 0.1).abs() < 0.01) { v + 0.05 } else { v });
            for (name, op) in unary_cases() {
                let r = gradcheck(|t, x| { let y = op(t, x)?; let w = t.constant(Tensor::from_fn([n], |i| 1.0 + 0.1 * i as f64)); let z = t.mul(y, w)?; Ok(t.sum(z)) }, &p, 1e-4).unwrap();
                prop_assert!(r.passed(), "{name}: {r:?}");
            }
        }

        #[test]
        fn matmul_and_broadcast_match_finite_differences(seed in 0u64..10_000, b in 1usize..3, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
            let p = det_point(&[b, m, k], seed);
            let w = det_point(&[k, n], seed + 1);
            let bias = det_point(&[n], seed + 2);
            let r = gradcheck(|t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul(x, wv)?;
                let bv = t.constant(bias.clone());
                let y = t.add(y, bv)?;
                let yy = t.mul(y, y)?;
                let y2 = t.transpose(yy)?;
                let s = t.matmul_t(y2, x, false, false)?;
                Ok(t.sum(s))
            }, &p, 1e-4).unwrap();
            prop_assert!(r.passed(), "{r:?}");
        }

        #[test]
        fn linearity_of_gradients(seed in 0u64..10_000) {
            let p = det_point(&[5], seed);
            let f1 = |t: &mut Tape, x: Var| -> Result<Var> { let s = t.softplus(x); Ok(t.sum(s)) };
            let f2 = |t: &mut Tape, x: Var| -> Result<Var> { let s = t.tanh(x); Ok(t.sum(s)) };
            let grad = |f: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
                let mut t = Tape::new();
                let x = t.leaf(p.clone(), true);
                let y = f(&mut t, x).unwrap();
                t.backward(y).unwrap();
                t.grad(x).unwrap().clone()
            };
            let g1 = grad(&f1);
            let g2 = grad(&f2);
            let g12 = grad(&|t: &mut Tape, x: Var| { let a = f1(t, x)?; let b = f2(t, x)?; t.add(a, b) });
            for i in 0..5 {
                prop_assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let p = det_point(&[2, 3], 7).map(|v| v + 2.5);
        let other = det_point(&[3], 8).map(|v| v * 0.5 + 1.7);
        for kind in 0..6 {
            let r = gradcheck(
                |t, x| {
                    let o = t.constant(other.clone());
                    let y = match kind {
                        0 => t.add(x, o)?,
                        1 => t.sub(o, x)?,
                        2 => t.mul(x, o)?,
                        3 => t.div(o, x)?,
                        4 => t.minimum(x, o)?,
                        _ => t.maximum(o, x)?,
                    };
                    let sq = t.square(y);
                    Ok(t.sum(sq))
                },
                &p,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "kind {kind}: {r:?}");
        }
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let p = det_point(&[2, 3, 4], 11);
        let r = gradcheck(
            |t, x| {
                let a = t.permute(x, &[2, 0, 1])?;
                let b = t.narrow(a, 0, 1, 2)?;
                let c = t.index_select(b, 2, &[2, 0, 2])?;
                let d = t.concat(&[c, c], 1)?;
                let e = t.sum_axis(d, 1)?;
                let f = t.reshape(e, &[6])?;
                let m = t.mean_axis(x, 2)?;
                let m = t.reshape(m, &[6])?;
                let g = t.mul(f, m)?;
                let g = t.exp(g);
                Ok(t.sum(g))
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn conv_and_batchnorm_match_finite_differences() {
        use crate::autodiff::tape::BnMode;
        let x0 = det_point(&[2, 2, 5, 5], 3);
        let w0 = det_point(&[3, 2, 3, 3], 4);
        let b0 = det_point(&[3], 5);
        let gm = det_point(&[3], 6).map(|v| v + 1.5);
        let bt = det_point(&[3], 7);
        let mix = det_point(&[2, 3, 3, 3], 9);
        let build = |t: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = t.conv2d(x, w, Some(b), 2, 1)?;
            let (g, be) = (t.constant(gm.clone()), t.constant(bt.clone()));
            let (z, _) = t.batchnorm(y, g, be, 1, BnMode::Train { eps: 1e-5 })?;
            let m = t.constant(mix.clone());
            let z = t.mul(z, m)?;
            let z = t.tanh(z);
            Ok(t.sum(z))
        };
        let r = gradcheck(|t, x| { let w = t.constant(w0.clone()); let b = t.constant(b0.clone()); build(t, x, w, b) }, &x0, 1e-4).unwrap();
        assert!(r.passed(), "input: {r:?}");
        let r = gradcheck(|t, w| { let x = t.constant(x0.clone()); let b = t.constant(b0.clone()); build(t, x, w, b) }, &w0, 1e-4).unwrap();
        assert!(r.passed(), "weight: {r:?}");
        let r = gradcheck(|t, b| { let x = t.constant(x0.clone()); let w = t.constant(w0.clone()); build(t, x, w, b) }, &b0, 1e-4).unwrap();
        // the bias is removed by the batch norm, so its gradient is ~0
        assert!(r.analytic.data().iter().all(|g| g.abs() < 1e-9), "{r:?}");
    }
}
