use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Six nested loops, no lowering.
fn reference_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for o in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * f + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv(x: Tensor, w: Tensor, stride: usize, pad: usize) -> crate::Result<Tensor> {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x), t.constant(w));
    let y = t.conv2d(xv, wv, stride, pad)?;
    Ok(t.value(y).clone())
}

#[test]
fn conv_of_ones_sums_kernel() {
    let y = conv(Tensor::ones([1, 1, 3, 3]), Tensor::ones([1, 1, 3, 3]), 1, 0).unwrap();
    assert_eq!(y.shape(), [1, 1, 1, 1]);
    assert_eq!(y.data(), [9.0]);
}

#[test]
fn conv_identity_kernel() {
    let x = random(&[2, 1, 5, 4], 3);
    let mut k = Tensor::zeros([1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let y = conv(x.clone(), k, 1, 1).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_matches_reference() {
    let x = random(&[1, 2, 5, 5], 11);
    let w = random(&[3, 2, 3, 3], 12);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let y = conv(x.clone(), w.clone(), stride, pad).unwrap();
        let r = reference_conv(&x, &w, stride, pad);
        assert_eq!(y.len(), r.len());
        for (a, b) in y.data().iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_shape_errors_name_axes() {
    let err = conv(Tensor::ones([1, 2, 4, 4]), Tensor::ones([1, 3, 3, 3]), 1, 0).unwrap_err();
    assert!(matches!(&err, Error::Dimension { detail, .. } if detail.contains("channel")));
    let err = conv(Tensor::ones([1, 1, 2, 2]), Tensor::ones([1, 1, 3, 3]), 1, 0).unwrap_err();
    assert!(matches!(&err, Error::Dimension { detail, .. } if detail.contains("spatial")));
}

fn pool(x: Tensor, axis: usize) -> crate::Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(x);
    let y = t.max_pool(v, axis)?;
    Ok(t.value(y).clone())
}

#[test]
fn maxpool_examples() {
    let x = Tensor::new([2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
    assert_eq!(pool(x, 0).unwrap().data(), [3.0, 5.0]);
    let row = Tensor::new([1, 3], vec![4.0, -1.0, 2.0]).unwrap();
    assert_eq!(pool(row, 0).unwrap().data(), [4.0, -1.0, 2.0]);
}

#[test]
fn maxpool_routes_gradient_to_first_max() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new([3, 2], vec![2.0, 1.0, 2.0, 7.0, 0.0, 7.0]).unwrap());
    let y = t.max_pool(x, 0).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn maxpool_permutation_invariant(rows in 1usize..7, cols in 1usize..5, seed in 0u64..1000) {
        let x = random(&[rows, cols], seed);
        let mut order: Vec<usize> = (0..rows).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for i in (1..rows).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = order.iter().flat_map(|&r| x.row(r).to_vec()).collect();
        let p = Tensor::new([rows, cols], permuted).unwrap();
        prop_assert_eq!(pool(x.clone(), 0).unwrap(), pool(p, 0).unwrap());

        // gradient is a 0/1 mask with exactly one 1 per output
        let mut t = Tape::new();
        let v = t.param(x);
        let y = t.max_pool(v, 0).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        let mask = g.get(v).unwrap();
        prop_assert!(mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        for c in 0..cols {
            let ones = (0..rows).filter(|&r| mask.data()[r * cols + c] == 1.0).count();
            prop_assert_eq!(ones, 1);
        }
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let x0 = random(&[4], 5);
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let s = t.sum(x);
    assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), [1.0; 4]);

    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    for (gi, xi) in g.get(x).unwrap().data().iter().zip(x0.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut t = Tape::new();
    let x = t.param(Tensor::ones([3]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn untracked_leaves_get_no_gradient() {
    let mut t = Tape::new();
    let a = t.param(Tensor::ones([2]));
    let b = t.constant(Tensor::ones([2]));
    let p = t.mul(a, b).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    assert!(g.get(a).is_some());
    assert!(g.get(b).is_none());
}

#[test]
fn grad_check_basic_cases() {
    let sq = |t: &mut Tape, x: Var| {
        let y = t.mul(x, x)?;
        Ok(t.sum(y))
    };
    assert!(grad_check(sq, &Tensor::scalar(3.0), 1e-5).unwrap() <= 1e-8);
    let constant = |t: &mut Tape, _x: Var| Ok(t.constant(Tensor::scalar(4.0)));
    assert_eq!(grad_check(constant, &Tensor::scalar(1.0), 1e-5).unwrap(), 0.0);
    assert!(grad_check(sq, &Tensor::scalar(1.0), 0.5).is_err());
    let blowup = |t: &mut Tape, x: Var| {
        let l = t.log(x)?;
        Ok(t.sum(l))
    };
    assert!(grad_check(blowup, &Tensor::scalar(-1.0), 1e-5).is_err());
}

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let w = t.constant(random(t.shape(y), seed));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

#[test]
fn grad_check_every_op() {
    let x = random(&[2, 3, 6, 6], 1);
    let k = random(&[4, 3, 3, 3], 2);
    let e = grad_check_many(
        |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            weighted_sum(t, y, 3)
        },
        &[x.clone(), k],
        EPS,
        None,
    )
    .unwrap();
    assert!(e <= TOL, "conv {e}");

    let g = random(&[3], 4);
    let b = random(&[3], 5);
    let e = grad_check_many(
        |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], None)?;
            weighted_sum(t, y, 6)
        },
        &[x.clone(), g.clone(), b.clone()],
        EPS,
        None,
    )
    .unwrap();
    assert!(e <= TOL, "batchnorm train {e}");
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    let e = grad_check_many(
        |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)))?;
            weighted_sum(t, y, 6)
        },
        &[x.clone(), g, b],
        EPS,
        None,
    )
    .unwrap();
    assert!(e <= TOL, "batchnorm eval {e}");

    let e = grad_check(|t, v| { let y = t.upsample2x(v)?; weighted_sum(t, y, 7) }, &x, EPS).unwrap();
    assert!(e <= TOL, "upsample {e}");
    let e = grad_check(|t, v| { let y = t.max_pool(v, 1)?; weighted_sum(t, y, 8) }, &x, EPS).unwrap();
    assert!(e <= TOL, "maxpool {e}");
    let e = grad_check(|t, v| { let y = t.relu(v); weighted_sum(t, y, 9) }, &x, EPS).unwrap();
    assert!(e <= TOL, "relu {e}");

    let a = random(&[3, 4], 10);
    let m = random(&[4, 5], 11);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let aa = if ta { random(&[4, 3], 10) } else { a.clone() };
        let mm = if tb { random(&[5, 4], 11) } else { m.clone() };
        let e = grad_check_many(
            |t, v| {
                let y = t.matmul_t(v[0], v[1], ta, tb)?;
                weighted_sum(t, y, 12)
            },
            &[aa, mm],
            EPS,
            None,
        )
        .unwrap();
        assert!(e <= TOL, "matmul {ta} {tb} {e}");
    }
    let bias = random(&[4], 13);
    let e = grad_check_many(
        |t, v| {
            let y = t.add_bias(v[0], v[1], 1)?;
            weighted_sum(t, y, 14)
        },
        &[a.clone(), bias],
        EPS,
        None,
    )
    .unwrap();
    assert!(e <= TOL, "bias {e}");
    let e = grad_check(|t, v| { let y = t.normalize_rows(v)?; weighted_sum(t, y, 15) }, &a, EPS).unwrap();
    assert!(e <= TOL, "normalize {e}");
    let sqm = random(&[4, 4], 16);
    let e = grad_check(|t, v| { let y = t.offdiag_logsumexp(v)?; weighted_sum(t, y, 17) }, &sqm, EPS).unwrap();
    assert!(e <= TOL, "lse {e}");
    let e = grad_check(|t, v| { let y = t.gather_rows(v, &[2, 0, 2])?; weighted_sum(t, y, 18) }, &a, EPS).unwrap();
    assert!(e <= TOL, "gather {e}");
    let fmap = random(&[2, 3, 2, 2], 21);
    let e = grad_check(|t, v| { let y = t.gather_pixels(v, &[(1, 0, 1), (0, 1, 1), (1, 0, 1)])?; weighted_sum(t, y, 22) }, &fmap, EPS).unwrap();
    assert!(e <= TOL, "gather pixels {e}");
    let e = grad_check(|t, v| { let y = t.take(v, &[1, 5, 5, 11])?; weighted_sum(t, y, 19) }, &a, EPS).unwrap();
    assert!(e <= TOL, "take {e}");
    let e = grad_check(
        |t, v| {
            let y = t.exp(v)?;
            let z = t.log(y)?;
            let c = t.concat_rows(&[z, v])?;
            weighted_sum(t, c, 20)
        },
        &a,
        EPS,
    )
    .unwrap();
    assert!(e <= TOL, "exp/log/concat {e}");
}

#[test]
fn batchnorm_training_normalizes() {
    // inputs with variance ~3e3, so the epsilon guard costs < 1e-8
    let x = random(&[4, 3, 5, 5], 21).map(|v| 100.0 * v);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let g = t.constant(Tensor::ones([3]));
    let b = t.constant(Tensor::zeros([3]));
    let (y, stats) = t.batch_norm(xv, g, b, None).unwrap();
    assert!(stats.is_some());
    let y = t.value(y);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + ch) * 25..(n * 3 + ch + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8, "{var}");
    }
}

#[test]
fn batchnorm_constant_channel_and_degenerate_batch() {
    let mut t = Tape::new();
    let xv = t.constant(Tensor::full([3, 2], 7.5));
    let g = t.constant(Tensor::ones([2]));
    let b = t.constant(Tensor::zeros([2]));
    let (y, _) = t.batch_norm(xv, g, b, None).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    let one = t.constant(Tensor::ones([1, 2]));
    assert!(matches!(t.batch_norm(one, g, b, None), Err(Error::Degenerate(_))));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.param(random(&[3, 2, 8, 8], 30));
        let k = t.param(random(&[4, 2, 3, 3], 31));
        let y = t.conv2d(x, k, 2, 1).unwrap();
        let y = t.relu(y);
        let p = t.max_pool(y, 1).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        (g.get(x).unwrap().clone(), g.get(k).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
}
