use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = numel_of(shape);
    t(&(0..n).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<_>>(), shape)
}

#[test]
fn matmul_shape() {
    let a = Tensor::<f64>::ones(&[2, 3]);
    let b = Tensor::<f64>::ones(&[3, 4]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 4]);
    assert!(c.data().iter().all(|&v| v == 3.0));
}

#[test]
fn matmul_values() {
    let a = t(&[1., 2., 3., 4.], &[2, 2]);
    let b = t(&[5., 6., 7., 8.], &[2, 2]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[19., 22., 43., 50.]);
}

#[test]
fn relu_definition() {
    let x = t(&[-1., 0., 2.], &[3]);
    assert_eq!(x.relu().unwrap().data(), &[0., 0., 2.]);
}

#[test]
fn conv_all_ones() {
    let x = Tensor::<f64>::ones(&[1, 1, 5, 5]);
    let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
    let y = x.conv2d(&k, None, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 9.0));
}

/// Direct nested-loop convolution used as an oracle for the im2col path.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[oc];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(stride, pad) in &[(1, 0), (2, 0), (1, 1), (2, 1), (3, 2)] {
        let x = random(&mut rng, &[2, 3, 7, 6]);
        let w = random(&mut rng, &[4, 3, 3, 2]);
        let b = random(&mut rng, &[4]);
        let y = x.conv2d(&w, Some(&b), stride, pad).unwrap();
        let want = conv_oracle(&x, &w, b.data(), stride, pad);
        assert_eq!(y.numel(), want.len());
        for (a, e) in y.data().iter().zip(&want) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-12);
        }
    }
}

#[test]
fn conv_rejects_oversized_kernel() {
    let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
    let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
    let err = x.conv2d(&k, None, 1, 0).unwrap_err();
    assert!(err.to_string().contains("does not fit"), "{err}");
}

#[test]
fn backward_square_sum() {
    let x = t(&[1., 2., 3.], &[3]).requires_grad();
    x.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2., 4., 6.]);
}

#[test]
fn backward_two_way_log_softmax() {
    let x = t(&[0., 0.], &[2]).requires_grad();
    let y = x.log_softmax(0).unwrap().narrow(0, 0, 1).unwrap().sum_all().unwrap();
    y.backward().unwrap();
    let g = x.grad().unwrap();
    assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(g[1], -0.5, epsilon = 1e-15);
}

#[test]
fn backward_independent_input_is_zero() {
    let x = t(&[1., 2.], &[2]).requires_grad();
    let y = t(&[3., 4.], &[2]).requires_grad();
    let loss = y.square().unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad_or_zeros(), vec![0., 0.]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let x = t(&[1., -2.], &[2]).requires_grad();
    let loss = x.scale(3.0).unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6., 6.]);
    x.zero_grad();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3., 3.]);
}

#[test]
fn backward_rejects_non_scalar_and_detached() {
    let x = t(&[1., 2.], &[2]).requires_grad();
    let y = x.scale(2.0).unwrap();
    assert!(matches!(y.backward(), Err(TensorError::NotScalar(_))));
    let c = t(&[1.], &[1]);
    assert!(matches!(c.backward(), Err(TensorError::Detached)));
}

#[test]
fn graph_visits_each_op_once() {
    let x = t(&[0.5, 1.5], &[2]).requires_grad();
    let a = x.exp().unwrap();
    // `a` is shared by both branches
    let b = a.mul(&a).unwrap();
    let c = a.add(&b).unwrap();
    let loss = c.sum_all().unwrap();
    let g = Graph::from_root(&loss);
    assert_eq!(g.ops(), vec!["exp", "mul", "add", "sum"]);
    let ids: Vec<u64> = g.tensors().iter().map(|t| t.id()).collect();
    let mut dedup = ids.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(ids.len(), dedup.len());
    assert_eq!(loss.backward_counted().unwrap(), 4);
    // d/dx (e^x + e^2x) = e^x + 2e^2x
    let want: Vec<f64> = [0.5f64, 1.5].iter().map(|v| v.exp() + 2.0 * (2.0 * v).exp()).collect();
    for (g, w) in x.grad().unwrap().iter().zip(want) {
        assert_abs_diff_eq!(*g, w, epsilon = 1e-10);
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let a = Tensor::<f64>::ones(&[2, 3]);
    let b = Tensor::<f64>::ones(&[4, 3]);
    let msg = a.add(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 3]"), "{msg}");
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("matmul"), "{msg}");
}

#[test]
fn non_finite_output_names_op() {
    let x = t(&[-1.0], &[1]);
    let err = x.log().unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { op: "log" }));
    let z = t(&[0.0, 0.0], &[1, 2]);
    assert!(matches!(z.l2_normalize(1), Err(TensorError::NonFinite { op: "l2_normalize" })));
}

#[test]
fn broadcasting_add_and_grad_reduction() {
    let x = random(&mut ChaCha8Rng::seed_from_u64(1), &[2, 3]).requires_grad();
    let b = t(&[1., 2., 3.], &[3]).requires_grad();
    let y = x.add(&b).unwrap();
    assert_eq!(y.shape(), &[2, 3]);
    y.sum_all().unwrap().backward().unwrap();
    assert_eq!(b.grad().unwrap(), vec![2., 2., 2.]);
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[5]);
    let err = grad_check(|x| x.square()?.sum_all(), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
    let c = grad_check(|_| Ok(Tensor::scalar(4.0)), &x, 1e-5).unwrap();
    assert_eq!(c, 0.0);
}

#[test]
fn grad_check_detects_nondeterminism() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let x = t(&[1.0], &[1]);
    let r = grad_check(
        |x| {
            calls.set(calls.get() + 1.0);
            x.add_scalar(calls.get())?.sum_all()
        },
        &x,
        1e-5,
    );
    assert!(matches!(r, Err(TensorError::NonDeterministic { .. })));
}

struct Fixtures {
    other: Tensor<f64>,
    row: Tensor<f64>,
    kernel: Tensor<f64>,
    bias: Tensor<f64>,
    mat: Tensor<f64>,
}

type Op = Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>>;

/// Every differentiable op wrapped into a scalar function of a (2,3,4,4)
/// input, combined with a fixed random weighting so no gradient is uniform.
fn op_suite() -> Vec<(&'static str, Op)> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let other = random(&mut rng, &[2, 3, 4, 4]);
    let row = random(&mut rng, &[4]);
    let kernel = random(&mut rng, &[2, 3, 3, 3]);
    let bias = random(&mut rng, &[2]);
    let mat = random(&mut rng, &[12, 5]);
    let weights = random(&mut rng, &[1024]);
    let weigh = move |y: Tensor<f64>| -> Result<Tensor<f64>> {
        let n = y.numel();
        let ww = Tensor::from_vec(weights.data()[..n].to_vec(), y.shape())?;
        y.mul(&ww)?.sum_all()
    };
    let fx = std::rc::Rc::new(Fixtures { other, row, kernel, bias, mat });
    let mut v: Vec<(&'static str, Op)> = Vec::new();
    macro_rules! op {
        ($name:expr, |$x:ident, $f:ident| $body:expr) => {{
            let weigh = weigh.clone();
            #[allow(unused_variables)]
            let $f = fx.clone();
            v.push(($name, Box::new(move |$x: &Tensor<f64>| weigh($body?))));
        }};
    }
    op!("add", |x, f| x.add(&f.other));
    op!("sub_broadcast", |x, f| x.sub(&f.row));
    op!("mul", |x, f| x.mul(&f.other));
    op!("div", |x, f| x.div(&f.other.square()?.add_scalar(0.5)?));
    op!("div_by_x", |x, f| f.other.div(&x.square()?.add_scalar(0.5)?));
    op!("exp", |x, f| x.exp());
    op!("log", |x, f| x.square()?.add_scalar(0.1)?.log());
    op!("relu", |x, f| x.relu());
    op!("sqrt", |x, f| x.square()?.add_scalar(0.2)?.sqrt());
    op!("matmul", |x, f| x.reshape(&[8, 12])?.matmul(&f.mat));
    op!("matmul_rhs", |x, f| f.mat.transpose()?.matmul(&x.reshape(&[12, 8])?));
    op!("conv2d", |x, f| x.conv2d(&f.kernel, Some(&f.bias), 1, 0));
    op!("conv2d_strided_padded", |x, f| x.conv2d(&f.kernel, None, 2, 1));
    op!("conv2d_kernel", |x, f| f.other.conv2d(&x.narrow(0, 0, 2)?.narrow(2, 0, 3)?.narrow(3, 0, 3)?, None, 1, 1));
    op!("sum_axes", |x, f| x.sum_axes(&[1, -1], false));
    op!("mean_axes", |x, f| x.mean_axes(&[0, 2], true));
    op!("reshape", |x, f| x.reshape(&[6, 16]));
    op!("permute", |x, f| x.permute(&[2, 0, 3, 1]));
    op!("concat", |x, f| Tensor::concat(&[&x.narrow(1, 0, 2)?, &f.other, &x], 1));
    op!("narrow", |x, f| x.narrow(2, 1, 2));
    op!("index_select", |x, f| x.index_select(3, &[3, 0, 0, 2]));
    op!("masked_select", |x, f| {
        let mask: Vec<bool> = (0..x.numel()).map(|i| i % 3 != 1).collect();
        x.masked_select(&mask)
    });
    op!("softmax", |x, f| x.softmax(1));
    op!("log_softmax", |x, f| x.log_softmax(-1));
    op!("logsumexp", |x, f| x.logsumexp(2));
    op!("masked_logsumexp", |x, f| {
        let mask: Vec<bool> = (0..x.numel()).map(|i| i % 4 != 2).collect();
        x.masked_logsumexp(&mask, 3)
    });
    op!("l2_normalize", |x, f| x.l2_normalize(1));
    v
}

#[test]
fn every_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, f) in op_suite() {
        for _ in 0..10 {
            let x = random(&mut rng, &[2, 3, 4, 4]);
            let err = grad_check(&f, &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: max relative error {err}");
        }
    }
}

#[test]
fn softmax_normalizes_and_matches_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 7, 2]).scale(4.0).unwrap();
    let s = x.softmax(1).unwrap();
    let ls = x.log_softmax(1).unwrap();
    for a in 0..3 {
        for c in 0..2 {
            let total: f64 = (0..7).map(|j| s.data()[(a * 7 + j) * 2 + c]).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }
    for (l, p) in ls.data().iter().zip(s.data()) {
        assert_abs_diff_eq!(*l, p.ln(), epsilon = 1e-12);
    }
}

#[test]
fn logsumexp_is_stable_at_large_magnitude() {
    let x = t(&[500., 499., -500.], &[3]);
    let v = x.logsumexp(0).unwrap().item().unwrap();
    assert_abs_diff_eq!(v, 500.0 + (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
}

#[test]
fn masked_logsumexp_rejects_empty_lane() {
    let x = t(&[1., 2., 3., 4.], &[2, 2]);
    assert!(x.masked_logsumexp(&[true, false, false, false], 1).is_err());
}

#[test]
fn permute_matches_manual_transpose() {
    let x = t(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
    assert_eq!(x.transpose().unwrap().data(), &[1., 4., 2., 5., 3., 6.]);
}

#[test]
fn single_precision_ops() {
    let x = Tensor::<f32>::from_f64(&[1., 2., 3., 4.], &[2, 2]).unwrap().requires_grad();
    let y = x.matmul(&x).unwrap().sum_all().unwrap();
    y.backward().unwrap();
    assert_eq!(y.item().unwrap(), 54.0);
    assert_eq!(x.grad().unwrap(), vec![7., 11., 9., 13.]);
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    assert!(read_checkpoint(&b"NOTACKPT\x01"[..]).is_err());
    let mut buf = Vec::new();
    let rec = vec![("w".to_string(), AnyTensor::from(t(&[1., 2.], &[2])))];
    write_checkpoint(&mut buf, &rec).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(read_checkpoint(&buf[..]).is_err());
}

#[test]
fn checkpoint_layout_is_bit_exact() {
    let mut buf = Vec::new();
    let rec = vec![(
        "ab".to_string(),
        AnyTensor::from(Tensor::<f32>::from_f64(&[1.0], &[1]).unwrap()),
    )];
    write_checkpoint(&mut buf, &rec).unwrap();
    let mut want = b"APNCKPT\0".to_vec();
    want.push(1);
    want.extend_from_slice(&2u32.to_le_bytes());
    want.extend_from_slice(b"ab");
    want.push(0);
    want.extend_from_slice(&1u32.to_le_bytes());
    want.extend_from_slice(&1u64.to_le_bytes());
    want.extend_from_slice(&1.0f32.to_le_bytes());
    assert_eq!(buf, want);
}

proptest! {
    #[test]
    fn conv_extent_formula(h in 1usize..20, k in 1usize..6, s in 1usize..4) {
        prop_assume!(k <= h);
        let x = Tensor::<f64>::ones(&[1, 1, h, h]);
        let w = Tensor::<f64>::ones(&[1, 1, k, k]);
        let y = x.conv2d(&w, None, s, 0).unwrap();
        prop_assert_eq!(y.shape()[2], (h - k) / s + 1);
        prop_assert_eq!(conv_out_extent(h, k, s, 0), Some((h - k) / s + 1));
    }

    #[test]
    fn checkpoint_round_trip(
        a in proptest::collection::vec(-1e6f64..1e6, 0..24),
        b in proptest::collection::vec(-1e3f32..1e3, 1..8),
    ) {
        let recs = vec![
            ("stage0.block0.weight".to_string(), AnyTensor::from(t(&a, &[a.len()]))),
            ("x".to_string(), AnyTensor::from(Tensor::from_vec(b.clone(), &[1, b.len()]).unwrap())),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &recs).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), 2);
        prop_assert_eq!(&back[0].0, "stage0.block0.weight");
        prop_assert_eq!(back[0].1.to::<f64>().to_vec(), a);
        prop_assert_eq!(back[1].1.dtype(), DType::F32);
        prop_assert_eq!(back[1].1.shape(), &[1, b.len()]);
        prop_assert_eq!(back[1].1.to::<f32>().to_vec(), b);
    }
}
