//! Complex-Gaussian likelihood of a target spectrum given a mask and a
//! variance, plus the two training objectives built on it.
//!
//! Per bin, `S ~ CN(G X, 2 sigma^2)` with independent real and imaginary
//! parts of variance `sigma^2`, so
//!
//! ```text
//! ln p = -ln(2 pi sigma^2) - |S - G X|^2 / (2 sigma^2)
//! ```
//!
//! Frame functions return partials with respect to the linear-domain mask
//! and variance; [`utterance_loss_and_grads`] chains them into the network.

use ndarray::{Array2, ArrayView2};
use rand::RngCore;

use crate::dsp::{Complex64, MelFilterbank, Spectrogram};
use crate::error::{Error, Result};
use crate::masks::psa_gain;
use crate::nn::{backward, forward_batch, Gradients, MaskPosterior, NetworkParams, TrainHyper, UtterancePosterior};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Loss of one frame with its partials in the linear domain.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLikelihoodGrad {
    pub loss: f64,
    pub d_mask_lin: Vec<f64>,
    pub d_var_lin: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Negative complex-Gaussian log-likelihood.
    MaximumLikelihood,
    /// Squared error against the phase-sensitive target (variance unused).
    PsaMmse,
}

fn check_frame(s: &[Complex64], x: &[Complex64], mask: &[f64], var: &[f64]) -> Result<()> {
    let n = s.len();
    if x.len() != n || mask.len() != n || var.len() != n {
        return Err(Error::Shape(format!(
            "frame lengths differ: target {n}, mixture {}, mask {}, variance {}",
            x.len(),
            mask.len(),
            var.len()
        )));
    }
    Ok(())
}

fn check_var(var: &[f64]) -> Result<()> {
    if var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("variance must be positive".into()));
    }
    Ok(())
}

/// `sum_w [ -ln(2 pi sigma_w^2) - |S_w - G_w X_w|^2 / (2 sigma_w^2) ]`
pub fn gaussian_log_likelihood(s: &[Complex64], x: &[Complex64], post: &MaskPosterior) -> Result<f64> {
    check_frame(s, x, &post.mask_lin, &post.var_lin)?;
    check_var(&post.var_lin)?;
    Ok(s.iter()
        .zip(x)
        .zip(post.mask_lin.iter().zip(&post.var_lin))
        .map(|((&s, &x), (&g, &v))| -(TWO_PI * v).ln() - (s - x * g).norm_sqr() / (2.0 * v))
        .sum())
}

fn ml_bin(s: Complex64, x: Complex64, g: f64, v: f64) -> (f64, f64, f64) {
    let e = (s - x * g).norm_sqr();
    let loss = (TWO_PI * v).ln() + e / (2.0 * v);
    // e = |S|^2 - 2 g Re(S X*) + g^2 |X|^2
    let d_mask = (g * x.norm_sqr() - (s * x.conj()).re) / v;
    let d_var = 1.0 / v - e / (2.0 * v * v);
    (loss, d_mask, d_var)
}

fn mmse_bin(s: Complex64, x: Complex64, g: f64) -> (f64, f64) {
    let target = psa_gain(s, x);
    let xx = x.norm_sqr();
    let diff = g - target;
    (diff * diff * xx, 2.0 * diff * xx)
}

/// Negative log-likelihood of one frame and its partials with respect to
/// the linear mask and variance.
pub fn ml_loss_and_head_grads(s: &[Complex64], x: &[Complex64], post: &MaskPosterior) -> Result<FrameLikelihoodGrad> {
    check_frame(s, x, &post.mask_lin, &post.var_lin)?;
    check_var(&post.var_lin)?;
    let mut out = FrameLikelihoodGrad {
        loss: 0.0,
        d_mask_lin: Vec::with_capacity(s.len()),
        d_var_lin: Vec::with_capacity(s.len()),
    };
    for i in 0..s.len() {
        let (l, dm, dv) = ml_bin(s[i], x[i], post.mask_lin[i], post.var_lin[i]);
        out.loss += l;
        out.d_mask_lin.push(dm);
        out.d_var_lin.push(dv);
    }
    Ok(out)
}

/// `sum_w (G_w |X_w| - G^PSA_w |X_w|)^2`. The variance partial is zero.
pub fn psa_mmse_loss_and_head_grads(
    s: &[Complex64],
    x: &[Complex64],
    post: &MaskPosterior,
) -> Result<FrameLikelihoodGrad> {
    check_frame(s, x, &post.mask_lin, &post.var_lin)?;
    let mut out = FrameLikelihoodGrad {
        loss: 0.0,
        d_mask_lin: Vec::with_capacity(s.len()),
        d_var_lin: vec![0.0; s.len()],
    };
    for i in 0..s.len() {
        let (l, dm) = mmse_bin(s[i], x[i], post.mask_lin[i]);
        out.loss += l;
        out.d_mask_lin.push(dm);
    }
    Ok(out)
}

/// Summed loss over all frames with `frames x bins` partials. No `1/T`
/// normalization is applied here.
pub fn utterance_loss(
    objective: Objective,
    s: &Spectrogram,
    x: &Spectrogram,
    mask_lin: ArrayView2<f64>,
    var_lin: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let shape = (x.n_frames(), x.n_bins());
    if !s.same_shape(x) || mask_lin.dim() != shape || var_lin.dim() != shape {
        return Err(Error::Shape("utterance loss: spectrogram and posterior shapes differ".into()));
    }
    if objective == Objective::MaximumLikelihood && var_lin.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("variance must be positive".into()));
    }
    let mut loss = 0.0;
    let mut dm = Array2::zeros(shape);
    let mut dv = Array2::zeros(shape);
    for t in 0..shape.0 {
        let (sf, xf) = (s.frame(t), x.frame(t));
        for k in 0..shape.1 {
            let g = mask_lin[(t, k)];
            match objective {
                Objective::MaximumLikelihood => {
                    let (l, a, b) = ml_bin(sf[k], xf[k], g, var_lin[(t, k)]);
                    loss += l;
                    dm[(t, k)] = a;
                    dv[(t, k)] = b;
                }
                Objective::PsaMmse => {
                    let (l, a) = mmse_bin(sf[k], xf[k], g);
                    loss += l;
                    dm[(t, k)] = a;
                }
            }
        }
    }
    Ok((loss, dm, dv))
}

/// Forward pass, loss and parameter gradients for one utterance, both
/// divided by its frame count. L2 from `hyper` is added once.
#[allow(clippy::too_many_arguments)]
pub fn utterance_loss_and_grads(
    objective: Objective,
    params: &NetworkParams,
    fb: &MelFilterbank,
    features: ArrayView2<f64>,
    clean: &Spectrogram,
    mixture: &Spectrogram,
    hyper: &TrainHyper,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(f64, Gradients)> {
    if features.nrows() != mixture.n_frames() || features.nrows() == 0 {
        return Err(Error::Shape(format!(
            "{} feature rows for {} frames",
            features.nrows(),
            mixture.n_frames()
        )));
    }
    let (heads, cache) = forward_batch(params, features, hyper, dropout_rng)?;
    let post = UtterancePosterior::from_heads(fb, &heads, hyper.c_sigma)?;
    let (loss, mut dm, mut dv) = utterance_loss(objective, clean, mixture, post.mask_lin.view(), post.var_lin.view())?;
    let inv_t = 1.0 / mixture.n_frames() as f64;
    dm *= inv_t;
    dv *= inv_t;
    let (gm, gv) = post.grads_to_mel(fb, dm.view(), dv.view())?;
    let grads = backward(params, &cache, gm.view(), gv.view(), hyper)?;
    Ok((loss * inv_t, grads))
}

/// Loss only, with dropout disabled.
pub fn utterance_eval_loss(
    objective: Objective,
    params: &NetworkParams,
    fb: &MelFilterbank,
    features: ArrayView2<f64>,
    clean: &Spectrogram,
    mixture: &Spectrogram,
    hyper: &TrainHyper,
) -> Result<f64> {
    let (heads, _) = forward_batch(params, features, hyper, None)?;
    let post = UtterancePosterior::from_heads(fb, &heads, hyper.c_sigma)?;
    let (loss, _, _) = utterance_loss(objective, clean, mixture, post.mask_lin.view(), post.var_lin.view())?;
    Ok(loss / mixture.n_frames().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, NetDims};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn post(mask: Vec<f64>, var: Vec<f64>) -> MaskPosterior {
        MaskPosterior {
            mask_mel: mask.clone(),
            var_mel: var.clone(),
            mask_lin: mask,
            var_lin: var,
        }
    }

    #[test]
    fn exact_fit_at_unit_normalizer_is_zero() {
        let x = vec![c(1.0, 2.0), c(-0.5, 0.3), c(0.0, 1.0)];
        let g = vec![0.2, 0.9, 0.5];
        let s: Vec<_> = x.iter().zip(&g).map(|(x, g)| x * g).collect();
        let p = post(g, vec![1.0 / TWO_PI; 3]);
        assert!(gaussian_log_likelihood(&s, &x, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn doubling_variance_costs_ln2() {
        let x = vec![c(1.0, -1.0), c(2.0, 0.5)];
        let g = vec![0.3, 0.6];
        let s: Vec<_> = x.iter().zip(&g).map(|(x, g)| x * g).collect();
        let a = gaussian_log_likelihood(&s, &x, &post(g.clone(), vec![0.1, 0.2])).unwrap();
        let b = gaussian_log_likelihood(&s, &x, &post(g, vec![0.1, 0.4])).unwrap();
        assert!((a - b - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn larger_error_lowers_likelihood() {
        let x = vec![c(1.0, 0.0)];
        let p = post(vec![0.5], vec![0.3]);
        let a = gaussian_log_likelihood(&[c(0.6, 0.0)], &x, &p).unwrap();
        let b = gaussian_log_likelihood(&[c(0.9, 0.0)], &x, &p).unwrap();
        assert!(b < a);
    }

    #[test]
    fn nonpositive_variance_rejected() {
        let x = vec![c(1.0, 0.0)];
        assert!(gaussian_log_likelihood(&x, &x, &post(vec![0.5], vec![0.0])).is_err());
        assert!(ml_loss_and_head_grads(&x, &x, &post(vec![0.5], vec![-1.0])).is_err());
        assert!(gaussian_log_likelihood(&x, &[], &post(vec![0.5], vec![1.0])).is_err());
    }

    #[test]
    fn mask_partial_vanishes_at_unclamped_optimum() {
        let s = [c(0.4, 0.9)];
        let x = [c(1.5, -0.7)];
        let g = (s[0] * x[0].conj()).re / x[0].norm_sqr();
        let r = ml_loss_and_head_grads(&s, &x, &post(vec![g], vec![0.2])).unwrap();
        assert!(r.d_mask_lin[0].abs() < 1e-12);
    }

    #[test]
    fn variance_partial_vanishes_at_half_error() {
        let s = [c(0.4, 0.9)];
        let x = [c(1.5, -0.7)];
        let g = 0.1;
        let e = (s[0] - x[0] * g).norm_sqr();
        let r = ml_loss_and_head_grads(&s, &x, &post(vec![g], vec![e / 2.0])).unwrap();
        assert!(r.d_var_lin[0].abs() < 1e-9);
    }

    #[test]
    fn frame_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = 5;
            let s: Vec<_> = (0..n).map(|_| c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
            let x: Vec<_> = (0..n).map(|_| c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
            let r = ml_loss_and_head_grads(&s, &x, &post(g.clone(), v.clone())).unwrap();
            let nll = |g: &[f64], v: &[f64]| -gaussian_log_likelihood(&s, &x, &post(g.to_vec(), v.to_vec())).unwrap();
            assert!((r.loss - nll(&g, &v)).abs() < 1e-9);
            let h = 1e-6;
            for i in 0..n {
                let (mut gp, mut gm) = (g.clone(), g.clone());
                gp[i] += h;
                gm[i] -= h;
                let fd = (nll(&gp, &v) - nll(&gm, &v)) / (2.0 * h);
                assert!((fd - r.d_mask_lin[i]).abs() <= 1e-5 * fd.abs().max(1.0));
                let (mut vp, mut vm) = (v.clone(), v.clone());
                vp[i] += h;
                vm[i] -= h;
                let fd = (nll(&g, &vp) - nll(&g, &vm)) / (2.0 * h);
                assert!((fd - r.d_var_lin[i]).abs() <= 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn psa_loss_examples() {
        // target mask 1 with |X| = 2, estimate 0
        let x = [c(2.0, 0.0)];
        let s = [c(3.0, 0.0)];
        let r = psa_mmse_loss_and_head_grads(&s, &x, &post(vec![0.0], vec![1.0])).unwrap();
        assert_eq!(r.loss, 4.0);
        assert_eq!(r.d_mask_lin, vec![-8.0]);
        assert_eq!(r.d_var_lin, vec![0.0]);

        let x = [c(1.0, 1.0), c(-2.0, 0.5)];
        let s = [c(0.3, 0.6), c(-1.0, 0.1)];
        let g: Vec<f64> = s.iter().zip(&x).map(|(&s, &x)| psa_gain(s, x)).collect();
        let r = psa_mmse_loss_and_head_grads(&s, &x, &post(g, vec![1.0; 2])).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.d_mask_lin.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn utterance_loss_matches_frame_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (nb, nf) = (4, 3);
        let mut draw = || c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let s = Spectrogram::from_bins((0..nb * nf).map(|_| draw()).collect(), nb, nf).unwrap();
        let x = Spectrogram::from_bins((0..nb * nf).map(|_| draw()).collect(), nb, nf).unwrap();
        let m = Array2::from_shape_fn((nf, nb), |(t, k)| 0.1 + 0.2 * t as f64 + 0.05 * k as f64);
        let v = Array2::from_shape_fn((nf, nb), |(t, k)| 0.5 + 0.1 * t as f64 + 0.3 * k as f64);
        for obj in [Objective::MaximumLikelihood, Objective::PsaMmse] {
            let (loss, dm, dv) = utterance_loss(obj, &s, &x, m.view(), v.view()).unwrap();
            let mut total = 0.0;
            for t in 0..nf {
                let p = post(m.row(t).to_vec(), v.row(t).to_vec());
                let r = match obj {
                    Objective::MaximumLikelihood => ml_loss_and_head_grads(s.frame(t), x.frame(t), &p),
                    Objective::PsaMmse => psa_mmse_loss_and_head_grads(s.frame(t), x.frame(t), &p),
                }
                .unwrap();
                total += r.loss;
                assert_eq!(dm.row(t).to_vec(), r.d_mask_lin);
                assert_eq!(dv.row(t).to_vec(), r.d_var_lin);
            }
            assert!((loss - total).abs() < 1e-12);
        }
    }

    /// Loss through a tiny network with an identity filterbank, so no clamp
    /// is active and the objective is smooth in the parameters.
    fn tiny_problem(seed: u64) -> (NetworkParams, MelFilterbank, Array2<f64>, Spectrogram, Spectrogram) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nb, nf, input) = (3, 4, 5);
        let params = init_params(&NetDims::new(input, vec![6], nb), seed).unwrap();
        let feats = Array2::from_shape_simple_fn((nf, input), || rng.random_range(-1.0..1.0));
        let mut draw = || c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let s = Spectrogram::from_bins((0..nb * nf).map(|_| draw()).collect(), nb, nf).unwrap();
        let x = Spectrogram::from_bins((0..nb * nf).map(|_| draw()).collect(), nb, nf).unwrap();
        (params, MelFilterbank::identity(nb), feats, s, x)
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let hyper = TrainHyper {
            l2: 1e-3,
            ..TrainHyper::default()
        };
        for seed in 0..5 {
            let (params, fb, feats, s, x) = tiny_problem(seed);
            for obj in [Objective::MaximumLikelihood, Objective::PsaMmse] {
                let (_, grads) = utterance_loss_and_grads(obj, &params, &fb, feats.view(), &s, &x, &hyper, None).unwrap();
                let flat = params.to_flat();
                let analytic = grads.to_flat();
                let objective = |p: &[f64]| {
                    let mut q = params.clone();
                    q.set_flat(p).unwrap();
                    let l = utterance_eval_loss(obj, &q, &fb, feats.view(), &s, &x, &hyper).unwrap();
                    l + hyper.l2 * q.layers().map(|d| d.weight.iter().map(|w| w * w).sum::<f64>()).sum::<f64>()
                };
                let h = 1e-6;
                for i in 0..flat.len() {
                    let mut p = flat.clone();
                    p[i] += h;
                    let up = objective(&p);
                    p[i] -= 2.0 * h;
                    let down = objective(&p);
                    let fd = (up - down) / (2.0 * h);
                    let scale = fd.abs().max(analytic[i].abs()).max(1e-6);
                    assert!(
                        (fd - analytic[i]).abs() / scale < 1e-4,
                        "{obj:?} param {i}: fd {fd} analytic {}",
                        analytic[i]
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in any::<u64>(), rot in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let s: Vec<_> = (0..n).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let x: Vec<_> = (0..n).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let rotate = |a: &[_]| { let mut b = a.to_vec(); b.rotate_left(rot); b };
            let rotf = |a: &[f64]| { let mut b = a.to_vec(); b.rotate_left(rot); b };
            let a = gaussian_log_likelihood(&s, &x, &post(g.clone(), v.clone())).unwrap();
            let b = gaussian_log_likelihood(&rotate(&s), &rotate(&x), &post(rotf(&g), rotf(&v))).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn psa_loss_depends_on_target_only_through_psa(re in -2.0f64..2.0, im in -2.0f64..2.0, xr in 0.1f64..2.0, g in 0.0f64..1.0) {
            // Reflecting S about the mixture axis keeps Re(S X*).
            let x = [c(xr, 0.0)];
            let s1 = [c(re, im)];
            let s2 = [c(re, -im)];
            let p = post(vec![g], vec![1.0]);
            let a = psa_mmse_loss_and_head_grads(&s1, &x, &p).unwrap();
            let b = psa_mmse_loss_and_head_grads(&s2, &x, &p).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
