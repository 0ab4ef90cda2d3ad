//! Finite-difference gradient checks: every differentiable op's
//! analytic backward against central differences of an independent f64
//! reference forward, ≥ 20 random shapes per op, rel. error < 1e-3.

mod common;

use common::*;
use provnet::nn::loss;
use provnet::nn::ops::{self, Mode};
use provnet::rng::RngStream;
use provnet::tensor::Tensor;

fn shapes4(rng: &mut RngStream, count: usize, max_c: usize, max_hw: usize) -> Vec<(usize, usize, usize, usize)> {
    (0..count)
        .map(|_| {
            (
                1 + rng.below(3),
                1 + rng.below(max_c),
                2 + rng.below(max_hw - 1),
                2 + rng.below(max_hw - 1),
            )
        })
        .collect()
}

#[test]
fn conv2d_matches_bruteforce_reference() {
    // the spec's fixed example first: 2×3×5×5, 4×3×3×3, stride 2, pad 1
    let mut rng = RngStream::new(101);
    let x = rand_vec(&mut rng, 2 * 3 * 5 * 5, 1.0);
    let w = rand_vec(&mut rng, 4 * 3 * 3 * 3, 0.5);
    let b = rand_vec(&mut rng, 4, 0.5);
    let (y, _) = ops::conv2d_fwd(
        &tensor4(2, 3, 5, 5, x.clone()),
        &tensor4(4, 3, 3, 3, w.clone()),
        &Tensor::from_vec(&[4], b.clone()),
        2,
        1,
    )
    .unwrap();
    let yref = conv2d_ref(&to_f64(&x), (2, 3, 5, 5), &to_f64(&w), (4, 3, 3, 3), &to_f64(&b), 2, 1);
    assert_eq!(y.len(), yref.len());
    for (a, r) in y.data().iter().zip(yref.iter()) {
        assert!((*a as f64 - r).abs() < 1e-4, "{a} vs {r}");
    }
}

#[test]
fn conv2d_gradients_match_fd() {
    let mut rng = RngStream::new(7);
    for (round, &(n, c, h, wd)) in shapes4(&mut rng, 21, 3, 7).iter().enumerate() {
        let k = if h.min(wd) >= 3 && round % 2 == 0 { 3 } else { 2 };
        let stride = 1 + round % 2;
        let pad = round % 2;
        let co = 1 + round % 3;
        let x = rand_vec(&mut rng, n * c * h * wd, 1.0);
        let w = rand_vec(&mut rng, co * c * k * k, 0.5);
        let b = rand_vec(&mut rng, co, 0.3);
        let xt = tensor4(n, c, h, wd, x.clone());
        let wt = Tensor::from_vec(&[co, c, k, k], w.clone());
        let bt = Tensor::from_vec(&[co], b.clone());
        let (y, cache) = ops::conv2d_fwd(&xt, &wt, &bt, stride, pad).unwrap();
        let g = rand_vec(&mut rng, y.len(), 1.0);
        let gt = Tensor::from_vec(y.shape(), g.clone());
        let (gx, gw, gb) = ops::conv2d_bwd(&cache, &wt, &gt);

        let f_x = |xd: &[f64]| {
            weighted_sum(
                &conv2d_ref(xd, (n, c, h, wd), &to_f64(&w), (co, c, k, k), &to_f64(&b), stride, pad),
                &g,
            )
        };
        let rel = fd_check(&x, gx.data(), |_| false, f_x);
        assert!(rel < FD_TOL, "conv input grad rel err {rel} (shape {n}x{c}x{h}x{wd} k{k} s{stride} p{pad})");

        let f_w = |wd_: &[f64]| {
            weighted_sum(
                &conv2d_ref(&to_f64(&x), (n, c, h, wd), wd_, (co, c, k, k), &to_f64(&b), stride, pad),
                &g,
            )
        };
        let rel = fd_check(&w, gw.data(), |_| false, f_w);
        assert!(rel < FD_TOL, "conv weight grad rel err {rel}");

        let f_b = |bd: &[f64]| {
            weighted_sum(
                &conv2d_ref(&to_f64(&x), (n, c, h, wd), &to_f64(&w), (co, c, k, k), bd, stride, pad),
                &g,
            )
        };
        let rel = fd_check(&b, gb.data(), |_| false, f_b);
        assert!(rel < FD_TOL, "conv bias grad rel err {rel}");
    }
}

#[test]
fn transposed_conv_gradients_match_fd() {
    let mut rng = RngStream::new(8);
    for round in 0..20 {
        let (n, cin, cout) = (1 + round % 2, 1 + round % 3, 1 + (round + 1) % 3);
        let (h, wd) = (2 + round % 4, 2 + (round + 1) % 4);
        let k = 3;
        let (stride, pad, op) = match round % 3 {
            0 => (1, 0, 0),
            1 => (2, 1, 1),
            _ => (1, 1, 0),
        };
        let x = rand_vec(&mut rng, n * cin * h * wd, 1.0);
        let w = rand_vec(&mut rng, cin * cout * k * k, 0.5);
        let b = rand_vec(&mut rng, cout, 0.3);
        let xt = tensor4(n, cin, h, wd, x.clone());
        let wt = Tensor::from_vec(&[cin, cout, k, k], w.clone());
        let bt = Tensor::from_vec(&[cout], b.clone());
        let (y, cache) = ops::transposed_conv2d_fwd(&xt, &wt, &bt, stride, pad, op).unwrap();

        // forward agrees with the scatter reference
        let yref = tconv2d_ref(&to_f64(&x), (n, cin, h, wd), &to_f64(&w), cout, k, stride, pad, op);
        for (ni, (a, r)) in y.data().iter().zip(yref.iter()).enumerate() {
            let want = r + b[(ni / ((y.dim(2)) * y.dim(3))) % cout] as f64;
            assert!((*a as f64 - want).abs() < 1e-4, "tconv fwd {a} vs {want}");
        }

        let g = rand_vec(&mut rng, y.len(), 1.0);
        let gt = Tensor::from_vec(y.shape(), g.clone());
        let (gx, gw, gb) = ops::transposed_conv2d_bwd(&cache, &xt, &wt, &gt);

        let add_bias = |out: &mut Vec<f64>, bd: &[f64], oh: usize, ow: usize| {
            for (i, v) in out.iter_mut().enumerate() {
                *v += bd[(i / (oh * ow)) % cout];
            }
        };
        let (oh, ow) = (y.dim(2), y.dim(3));
        let f_x = |xd: &[f64]| {
            let mut out = tconv2d_ref(xd, (n, cin, h, wd), &to_f64(&w), cout, k, stride, pad, op);
            add_bias(&mut out, &to_f64(&b), oh, ow);
            weighted_sum(&out, &g)
        };
        let rel = fd_check(&x, gx.data(), |_| false, f_x);
        assert!(rel < FD_TOL, "tconv input grad rel err {rel} (round {round})");

        let f_w = |wd_: &[f64]| {
            let mut out = tconv2d_ref(&to_f64(&x), (n, cin, h, wd), wd_, cout, k, stride, pad, op);
            add_bias(&mut out, &to_f64(&b), oh, ow);
            weighted_sum(&out, &g)
        };
        let rel = fd_check(&w, gw.data(), |_| false, f_w);
        assert!(rel < FD_TOL, "tconv weight grad rel err {rel}");

        let f_b = |bd: &[f64]| {
            let mut out = tconv2d_ref(&to_f64(&x), (n, cin, h, wd), &to_f64(&w), cout, k, stride, pad, op);
            add_bias(&mut out, bd, oh, ow);
            weighted_sum(&out, &g)
        };
        let rel = fd_check(&b, gb.data(), |_| false, f_b);
        assert!(rel < FD_TOL, "tconv bias grad rel err {rel}");
    }
}

#[test]
fn batchnorm_gradients_match_fd() {
    let mut rng = RngStream::new(9);
    for round in 0..21 {
        let (n, c, s) = (2 + round % 3, 1 + round % 4, 1 + round % 5);
        let x = rand_vec(&mut rng, n * c * s, 1.0);
        let gamma = rand_vec(&mut rng, c, 0.7);
        let beta = rand_vec(&mut rng, c, 0.5);
        let xt = Tensor::from_vec(&[n, c, s], x.clone());
        let gt_ = Tensor::from_vec(&[c], gamma.clone());
        let bt = Tensor::from_vec(&[c], beta.clone());
        let mut rm = Tensor::zeros(&[c]);
        let mut rv = Tensor::full(&[c], 1.0);
        let (y, cache) =
            ops::batchnorm_fwd(&xt, &gt_, &bt, &mut rm, &mut rv, Mode::Train, 1e-5, 0.1, s);
        let g = rand_vec(&mut rng, y.len(), 1.0);
        let (gx, gg, gb) =
            ops::batchnorm_bwd(&cache, &gt_, &Tensor::from_vec(y.shape(), g.clone()));

        let f_x = |xd: &[f64]| {
            weighted_sum(
                &batchnorm_ref(xd, (n, c, s), &to_f64(&gamma), &to_f64(&beta), 1e-5),
                &g,
            )
        };
        let rel = fd_check(&x, gx.data(), |_| false, f_x);
        assert!(rel < FD_TOL, "bn input grad rel err {rel} (n{n} c{c} s{s})");

        let f_g = |gd: &[f64]| {
            weighted_sum(&batchnorm_ref(&to_f64(&x), (n, c, s), gd, &to_f64(&beta), 1e-5), &g)
        };
        let rel = fd_check(&gamma, gg.data(), |_| false, f_g);
        assert!(rel < FD_TOL, "bn gamma grad rel err {rel}");

        let f_b = |bd: &[f64]| {
            weighted_sum(&batchnorm_ref(&to_f64(&x), (n, c, s), &to_f64(&gamma), bd, 1e-5), &g)
        };
        let rel = fd_check(&beta, gb.data(), |_| false, f_b);
        assert!(rel < FD_TOL, "bn beta grad rel err {rel}");
    }
}

#[test]
fn linear_gradients_match_fd() {
    let mut rng = RngStream::new(10);
    for round in 0..21 {
        let (n, d, m) = (1 + round % 4, 1 + round % 6, 1 + (round + 2) % 5);
        let x = rand_vec(&mut rng, n * d, 1.0);
        let w = rand_vec(&mut rng, d * m, 0.5);
        let b = rand_vec(&mut rng, m, 0.5);
        let xt = Tensor::from_vec(&[n, d], x.clone());
        let wt = Tensor::from_vec(&[d, m], w.clone());
        let bt = Tensor::from_vec(&[m], b.clone());
        let y = ops::linear_fwd(&xt, &wt, &bt).unwrap();
        let g = rand_vec(&mut rng, y.len(), 1.0);
        let (gx, gw, gb) = ops::linear_bwd(&xt, &wt, &Tensor::from_vec(y.shape(), g.clone()));

        let rel = fd_check(&x, gx.data(), |_| false, |xd| {
            weighted_sum(&linear_ref(xd, (n, d), &to_f64(&w), m, &to_f64(&b)), &g)
        });
        assert!(rel < FD_TOL, "linear input grad rel err {rel}");
        let rel = fd_check(&w, gw.data(), |_| false, |wd| {
            weighted_sum(&linear_ref(&to_f64(&x), (n, d), wd, m, &to_f64(&b)), &g)
        });
        assert!(rel < FD_TOL, "linear weight grad rel err {rel}");
        let rel = fd_check(&b, gb.data(), |_| false, |bd| {
            weighted_sum(&linear_ref(&to_f64(&x), (n, d), &to_f64(&w), m, bd), &g)
        });
        assert!(rel < FD_TOL, "linear bias grad rel err {rel}");
    }
}

#[test]
fn activation_gradients_match_fd() {
    let mut rng = RngStream::new(11);
    for round in 0..21 {
        let n = 5 + round;
        let x = rand_vec(&mut rng, n, 1.0);
        let g = rand_vec(&mut rng, n, 1.0);
        let xt = Tensor::from_vec(&[n], x.clone());
        let gt = Tensor::from_vec(&[n], g.clone());

        let gx = ops::relu_bwd(&xt, &gt);
        // skip the kink neighborhood |x| < 5·h
        let xc = x.clone();
        let rel = fd_check(
            &x,
            gx.data(),
            |i| xc[i].abs() < 5.0 * FD_H as f32,
            |xd| weighted_sum(&relu_ref(xd), &g),
        );
        assert!(rel < FD_TOL, "relu grad rel err {rel}");

        let y = ops::sigmoid_fwd(&xt);
        let gx = ops::sigmoid_bwd(&y, &gt);
        let rel = fd_check(&x, gx.data(), |_| false, |xd| {
            weighted_sum(&sigmoid_ref(xd), &g)
        });
        assert!(rel < FD_TOL, "sigmoid grad rel err {rel}");
    }
}

#[test]
fn pooling_gradients_match_fd() {
    let mut rng = RngStream::new(12);
    for round in 0..21 {
        let (n, c) = (1 + round % 2, 1 + round % 3);
        let (h, wd) = (2 + 2 * (round % 3), 4 + 2 * (round % 2));
        let x = rand_vec(&mut rng, n * c * h * wd, 1.0);
        let xt = tensor4(n, c, h, wd, x.clone());

        // maxpool: skip near-tie windows where FD crosses the argmax
        let (y, cache) = ops::maxpool2d_fwd(&xt);
        let g = rand_vec(&mut rng, y.len(), 1.0);
        let gx = ops::maxpool2d_bwd(&cache, &Tensor::from_vec(y.shape(), g.clone()));
        let near_tie = |i: usize| {
            let ci = i / (h * wd);
            let (ii, jj) = ((i % (h * wd)) / wd, i % wd);
            let (oi, oj) = (ii / 2, jj / 2);
            let mut vals = Vec::new();
            for di in 0..2 {
                for dj in 0..2 {
                    vals.push(x[ci * h * wd + (oi * 2 + di) * wd + oj * 2 + dj]);
                }
            }
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            (vals[0] - vals[1]).abs() < 5.0 * FD_H as f32
        };
        let rel = fd_check(&x, gx.data(), near_tie, |xd| {
            weighted_sum(&maxpool2_ref(xd, (n, c, h, wd)), &g)
        });
        assert!(rel < FD_TOL, "maxpool grad rel err {rel}");

        // adaptive average pooling
        let (oh, ow) = (1 + round % 3, 1 + (round + 1) % 3);
        let (oh, ow) = (oh.min(h), ow.min(wd));
        let (y, cache) = ops::adaptive_avgpool2d_fwd(&xt, oh, ow);
        let g = rand_vec(&mut rng, y.len(), 1.0);
        let gx = ops::adaptive_avgpool2d_bwd(&cache, &Tensor::from_vec(y.shape(), g.clone()));
        let rel = fd_check(&x, gx.data(), |_| false, |xd| {
            weighted_sum(&adaptive_pool_ref(xd, (n, c, h, wd), (oh, ow)), &g)
        });
        assert!(rel < FD_TOL, "adaptive pool grad rel err {rel}");

        // global average pooling
        let (y, cache) = ops::global_avgpool_fwd(&xt);
        let g = rand_vec(&mut rng, y.len(), 1.0);
        let gx = ops::global_avgpool_bwd(&cache, &Tensor::from_vec(y.shape(), g.clone()));
        let rel = fd_check(&x, gx.data(), |_| false, |xd| {
            weighted_sum(&adaptive_pool_ref(xd, (n, c, h, wd), (1, 1)), &g)
        });
        assert!(rel < FD_TOL, "global pool grad rel err {rel}");
    }
}

#[test]
fn dropout_gradient_through_fixed_mask() {
    let mut rng = RngStream::new(13);
    for _ in 0..20 {
        let n = 40;
        let x = rand_vec(&mut rng, n, 1.0);
        let xt = Tensor::from_vec(&[n], x.clone());
        let (y, cache) = ops::dropout_fwd(&xt, 0.4, Mode::Train, &mut rng).unwrap();
        // recover the realized mask factors from the output
        let factors: Vec<f64> = y
            .data()
            .iter()
            .zip(x.iter())
            .map(|(&yv, &xv)| if xv != 0.0 { yv as f64 / xv as f64 } else { 0.0 })
            .collect();
        let g = rand_vec(&mut rng, n, 1.0);
        let gx = ops::dropout_bwd(&cache, &Tensor::from_vec(&[n], g.clone()));
        let fc = factors.clone();
        let rel = fd_check(&x, gx.data(), |i| x[i].abs() < 1e-3, move |xd| {
            let y: Vec<f64> = xd.iter().zip(fc.iter()).map(|(&a, &f)| a * f).collect();
            weighted_sum(&y, &g)
        });
        assert!(rel < FD_TOL, "dropout grad rel err {rel}");
    }
}

#[test]
fn softmax_xent_gradients_match_fd() {
    let mut rng = RngStream::new(14);
    for round in 0..21 {
        let (n, k) = (1 + round % 4, 2 + round % 8);
        let logits = rand_vec(&mut rng, n * k, 2.0);
        let targets: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let eps = if round % 2 == 0 { 0.05 } else { 0.0 };
        // mask a suffix of each row on odd rounds (targets stay valid)
        let mask: Option<Vec<bool>> = if round % 3 == 2 && k > 2 {
            let mut m = vec![true; n * k];
            for i in 0..n {
                for j in (k - 1).max(targets[i] + 1)..k {
                    m[i * k + j] = false;
                }
            }
            Some(m)
        } else {
            None
        };
        let lt = Tensor::from_vec(&[n, k], logits.clone());
        let (_, probs) = loss::softmax_xent(&lt, &targets, eps, mask.as_deref()).unwrap();
        let grad = loss::softmax_xent_grad(&probs, &targets, eps, mask.as_deref());

        let tg = targets.clone();
        let mk = mask.clone();
        let rel = fd_check(&logits, grad.data(), |i| mk.as_ref().is_some_and(|m| !m[i]), move |ld| {
            softmax_xent_ref(ld, (n, k), &tg, eps as f64, mask.as_deref())
        });
        assert!(rel < FD_TOL, "xent grad rel err {rel} (n{n} k{k} eps{eps})");
    }
}

#[test]
fn vae_loss_gradients_match_fd() {
    let mut rng = RngStream::new(15);
    for round in 0..20 {
        let (n, d) = (1 + round % 3, 2 + round % 6);
        // bce: keep x̂ away from the clamp region, where the third
        // derivative (∝ p⁻³) makes h = 1e-3 central differences blow up
        let xhat: Vec<f32> = (0..n * d).map(|_| 0.15 + 0.7 * rng.next_f32()).collect();
        let x: Vec<f32> = (0..n * d).map(|_| rng.next_f32()).collect();
        let xhat_t = Tensor::from_vec(&[n, d], xhat.clone());
        let x_t = Tensor::from_vec(&[n, d], x.clone());
        let (_, gx) = loss::bce_recon(&xhat_t, &x_t);
        let xc = x.clone();
        let rel = fd_check(&xhat, gx.data(), |_| false, move |xd| {
            bce_ref(xd, &to_f64(&xc), n)
        });
        assert!(rel < FD_TOL, "bce grad rel err {rel}");

        // kl
        let mu = rand_vec(&mut rng, n * d, 1.0);
        let lv = rand_vec(&mut rng, n * d, 0.7);
        let mu_t = Tensor::from_vec(&[n, d], mu.clone());
        let lv_t = Tensor::from_vec(&[n, d], lv.clone());
        let (_, gmu, glv) = loss::kl_gaussian(&mu_t, &lv_t);
        let lvc = lv.clone();
        let rel = fd_check(&mu, gmu.data(), |_| false, move |md| {
            kl_ref(md, &to_f64(&lvc), n)
        });
        assert!(rel < FD_TOL, "kl mu grad rel err {rel}");
        let muc = mu.clone();
        let rel = fd_check(&lv, glv.data(), |_| false, move |ld| {
            kl_ref(&to_f64(&muc), ld, n)
        });
        assert!(rel < FD_TOL, "kl logvar grad rel err {rel}");
    }
}
