//! Self-checks run by the `grad-check` and `oracle` subcommands. Each
//! compares the library against an independent computation: central
//! finite differences, naive summation, hand-evaluated closed forms or
//! direct enumeration.

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{derive_seed, PatchifyConfig, Pipeline};
use crate::data::{make_synthetic, split_indices};
use crate::encoder::{build_encoder, EncoderConfig, FeatureMapSet, Norm};
use crate::extraction::{
    extract_amdim, extract_cpc, AnchorMode, ContextEncoder, PredictionMatrices, RepresentationBatch,
};
use crate::harness::{pretrain, read_steps, PretrainOptions, Preset, RunConfig};
use crate::simloss::{
    amdim_total, batch_loss, info_nce, nce_amdim, nt_xent, sharded_negatives, LossConfig, Similarity,
};
use crate::tensor::{grad_check, Tensor};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.to_string(), passed, detail: detail.into() }
    }

    fn from_result(name: &str, r: Result<(bool, String), String>) -> Self {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

type Res<T> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).expect("shape matches")
}

/// Splits a flat `x` into consecutive pieces of the given shapes.
fn split(x: &Tensor<f64>, shapes: &[&[usize]]) -> Res<Vec<Tensor<f64>>> {
    let mut start = 0;
    let mut out = Vec::new();
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(x.narrow(0, start, n).and_then(|t| t.reshape(s)).map_err(err)?);
        start += n;
    }
    Ok(out)
}

fn grad_case<F>(name: &str, instances: usize, seed: u64, tol: f64, mut case: F) -> Check
where
    F: FnMut(&mut ChaCha8Rng) -> Res<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        match case(&mut rng) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return Check::new(name, false, format!("error: {e}")),
        }
    }
    Check::new(name, worst < tol, format!("max relative error {worst:.2e} over {instances} instances (tolerance {tol:.0e})"))
}

/// Central finite-difference checks of every loss, in double precision.
pub fn grad_suite(instances: usize, seed: u64) -> Vec<Check> {
    let eps = 1e-5;
    let mut out = Vec::new();
    out.push(grad_case("sum of squares", instances, derive_seed(seed, 1), 1e-6, |rng| {
        let x = random(rng, &[5]);
        grad_check(|t| t.square()?.sum_all(), &x, eps).map_err(err)
    }));
    out.push(grad_case("conv2d", instances, derive_seed(seed, 2), 1e-4, |rng| {
        let x = random(rng, &[2 * 25 + 2 * 2 * 9 + 2]);
        grad_check(
            |t| {
                let p = split(t, &[&[1, 2, 5, 5], &[2, 2, 3, 3], &[2]]).map_err(|e| crate::tensor::TensorError::Invalid { op: "split", msg: e })?;
                p[0].conv2d(&p[1], Some(&p[2]), 2, 1)?.square()?.sum_all()
            },
            &x,
            eps,
        )
        .map_err(err)
    }));
    out.push(grad_case("nce_amdim", instances, derive_seed(seed, 3), 1e-4, |rng| {
        let (c, p, n) = (rng.gen_range(2..6), rng.gen_range(1..4), rng.gen_range(2..6));
        let include = rng.gen_bool(0.5);
        let x = random(rng, &[c * (1 + p + n)]);
        let f = |t: &Tensor<f64>| -> Res<Tensor<f64>> {
            let s = split(t, &[&[c], &[p, c], &[n, c]])?;
            nce_amdim(&s[0], &s[1], &s[2], &Similarity::Dot, include).map_err(err)
        };
        check_with(f, &x, eps)
    }));
    out.push(grad_case("amdim_total", instances, derive_seed(seed, 4), 1e-4, |rng| {
        let (b, c) = (2, rng.gen_range(2..4));
        let shapes: [&[usize]; 3] = [&[b, c, 3, 3], &[b, c, 2, 2], &[b, c, 1, 1]];
        let per: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let x = random(rng, &[2 * per]);
        let f = |t: &Tensor<f64>| -> Res<Tensor<f64>> {
            let all = [shapes, shapes].concat();
            let s = split(t, &all)?;
            let ma = FeatureMapSet { maps: s[..3].to_vec() };
            let mb = FeatureMapSet { maps: s[3..].to_vec() };
            let batches = extract_amdim(&ma, &mb, &[], &[(-1, -2), (-1, -3), (-2, -2)], AnchorMode::AllCells).map_err(err)?;
            amdim_total(&batches, &Similarity::Dot, &LossConfig::nce_amdim(), 1).map_err(err)
        };
        check_with(f, &x, eps)
    }));
    out.push(grad_case("info_nce", instances, derive_seed(seed, 5), 1e-4, |rng| {
        let (c, n) = (rng.gen_range(2..6), rng.gen_range(1..6));
        let x = random(rng, &[c * (2 + n)]);
        let f = |t: &Tensor<f64>| -> Res<Tensor<f64>> {
            let s = split(t, &[&[c], &[c], &[n, c]])?;
            info_nce(&s[0], &s[1], &s[2], &Similarity::Dot).map_err(err)
        };
        check_with(f, &x, eps)
    }));
    out.push(grad_case("nt_xent", instances, derive_seed(seed, 6), 1e-4, |rng| {
        let (n, c) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let tau = rng.gen_range(0.2..1.0);
        let x = random(rng, &[2 * n * c]);
        let f = |t: &Tensor<f64>| -> Res<Tensor<f64>> {
            let s = split(t, &[&[n, c], &[n, c]])?;
            let z1 = s[0].l2_normalize(1).map_err(err)?;
            let z2 = s[1].l2_normalize(1).map_err(err)?;
            nt_xent(&z1, &z2, tau).map_err(err)
        };
        check_with(f, &x, eps)
    }));
    out.push(grad_case("sharded info_nce (unequal shards)", instances, derive_seed(seed, 7), 1e-4, |rng| {
        let (a, t, c) = (3, 7, 3);
        let x = random(rng, &[(a + t) * c]);
        let f = |x: &Tensor<f64>| -> Res<Tensor<f64>> {
            let s = split(x, &[&[a, c], &[t, c]])?;
            let batch = labeled_batch(s[0].clone(), s[1].clone(), vec![0, 3, 6]);
            sharded_negatives(&batch, &Similarity::Dot, &LossConfig::info_nce(), &[vec![0, 1], vec![2, 3, 4, 5], vec![6]]).map_err(err)
        };
        check_with(f, &x, eps)
    }));
    out
}

fn check_with<F>(f: F, x: &Tensor<f64>, eps: f64) -> Res<f64>
where
    F: Fn(&Tensor<f64>) -> Res<Tensor<f64>>,
{
    grad_check(|t| f(t).map_err(|msg| crate::tensor::TensorError::Invalid { op: "loss", msg }), x, eps).map_err(err)
}

fn labeled_batch(anchors: Tensor<f64>, targets: Tensor<f64>, labels: Vec<usize>) -> RepresentationBatch<f64> {
    let (a, t) = (anchors.shape()[0], targets.shape()[0]);
    RepresentationBatch {
        anchors,
        targets,
        anchor_source: (0..a).collect(),
        target_source: (0..t).collect(),
        positives: crate::extraction::Positives::Labels(labels),
        negatives: crate::extraction::Negatives::AllOthers,
        exclude: None,
        layers: None,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = t.shape()[t.rank() - 1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Check {
    Check::new(name, (got - want).abs() <= tol, format!("got {got:.12}, expected {want:.12} (tolerance {tol:.0e})"))
}

fn loss_value(r: Result<Tensor<f64>, crate::simloss::LossError>) -> Res<f64> {
    r.map_err(err)?.item().map_err(err)
}

/// Closed-form, naive-summation and enumeration oracles that need no
/// training.
pub fn oracle_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    out.push(Check::from_result("conv2d all-ones 3x3 on 5x5", (|| {
        let y = Tensor::<f64>::ones(&[1, 1, 5, 5]).conv2d(&Tensor::ones(&[1, 1, 3, 3]), None, 1, 0).map_err(err)?;
        Ok((y.shape() == [1, 1, 3, 3] && y.data().iter().all(|&v| v == 9.0), format!("shape {:?}, values {:?}", y.shape(), y.data())))
    })()));

    out.push(Check::from_result("log_softmax gradient at [0, 0]", (|| {
        let x = Tensor::<f64>::param(vec![0.0, 0.0], &[2]).map_err(err)?;
        x.log_softmax(0).and_then(|l| l.narrow(0, 0, 1)).and_then(|l| l.sum_all()).and_then(|l| l.backward()).map_err(err)?;
        let g = x.grad().unwrap_or_default();
        let ok = g.len() == 2 && (g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12;
        Ok((ok, format!("gradient {g:?}, expected [0.5, -0.5]")))
    })()));

    out.push(Check::from_result("patchify 64x64, q=16, overlap 8", (|| {
        let p = Pipeline::yadim(PatchifyConfig::new(16, 8).map_err(err)?);
        let v = p.apply(&random(&mut rng, &[3, 64, 64]), 1).map_err(err)?;
        Ok((v.shape() == [49, 3, 16, 16], format!("views of shape {:?}", v.shape())))
    })()));

    out.push(Check::from_result("patch count formula, 50 configurations", (|| {
        let mut bad = Vec::new();
        for _ in 0..50 {
            let q = rng.gen_range(2..20);
            let overlap = rng.gen_range(0..q);
            let s = q - overlap;
            let n = rng.gen_range(1..8);
            let size = q + s * (n - 1);
            let got = PatchifyConfig::new(q, overlap).and_then(|p| p.patch_count(size, size)).map_err(err)?;
            if got != n * n {
                bad.push((size, q, overlap, got));
            }
        }
        Ok((bad.is_empty(), if bad.is_empty() { "all match ((s - q) / stride + 1)^2".into() } else { format!("mismatches {bad:?}") }))
    })()));

    out.push(Check::from_result("encoder extents 32 -> 30, 28, 26", (|| {
        let cfg = EncoderConfig { stage_channels: vec![4, 4, 4], blocks_per_stage: vec![1; 3], stage_strides: vec![1; 3], ..EncoderConfig::default() };
        let e = cfg.map_extents(32, 32).map_err(err)?;
        Ok((e == [(30, 30), (28, 28), (26, 26)], format!("{e:?}")))
    })()));

    out.push(Check::from_result("patch locality", (|| {
        let cfg = EncoderConfig { input_channels: 1, stage_channels: vec![4, 4], blocks_per_stage: vec![1; 2], stage_strides: vec![1; 2], norm: Norm::None, ..EncoderConfig::default() };
        let enc = build_encoder::<f64>(&cfg, 3).map_err(err)?;
        let v = random(&mut rng, &[9, 1, 8, 8]);
        let mut w = v.to_vec();
        for x in &mut w[4 * 64..5 * 64] {
            *x += 1.0;
        }
        let w = Tensor::from_vec(w, &[9, 1, 8, 8]).map_err(err)?;
        let (a, b) = (enc.encode_patches(&v, 3, 3).map_err(err)?, enc.encode_patches(&w, 3, 3).map_err(err)?);
        let (a, b) = (a.deepest().to_vec(), b.deepest().to_vec());
        let changed: Vec<usize> = (0..9).filter(|&cell| (0..4).any(|ch| a[ch * 9 + cell] != b[ch * 9 + cell])).collect();
        Ok((changed == [4], format!("changed cells {changed:?}, expected [4]")))
    })()));

    out.push(Check::from_result("multiscale counts |R+| = 16, |R-| = 32", (|| {
        let m = |s: u64| FeatureMapSet { maps: vec![random(&mut ChaCha8Rng::seed_from_u64(s), &[1, 2, 4, 4]), random(&mut ChaCha8Rng::seed_from_u64(s + 1), &[1, 2, 2, 2])] };
        let (ma, mb, n1, n2) = (m(1), m(3), m(5), m(7));
        let batches = extract_amdim(&ma, &mb, &[&n1, &n2], &[(-1, -2)], AnchorMode::AllCells).map_err(err)?;
        let b = &batches[0];
        let counts: Vec<(usize, usize)> = (0..b.anchor_count()).map(|a| (b.positives_of(a), b.negatives_of(a))).collect();
        Ok((counts.iter().all(|&c| c == (16, 32)), format!("(positives, negatives) per anchor {counts:?}")))
    })()));

    out.push(Check::from_result("cpc labels against nested-loop enumeration", (|| {
        let mut cases = 0;
        for b in 1..=3 {
            for h in 1..=3 {
                for w in 1..=3 {
                    for max_offset in 1..=3 {
                        cases += 1;
                        let grid = random(&mut rng, &[b, 2, h, w]);
                        let batch = extract_cpc(&grid, &ContextEncoder::new(2, 1), &PredictionMatrices::new(2, max_offset, 2), 0.1);
                        let mut want = Vec::new();
                        for k in 1..=max_offset {
                            for bi in 0..b {
                                for row in 0..h {
                                    for col in 0..w {
                                        if row + k < h {
                                            want.push(bi * h * w + (row + k) * w + col);
                                        }
                                    }
                                }
                            }
                        }
                        match batch {
                            Ok(batch) if batch.labels() == Some(&want[..]) => {}
                            Err(_) if want.is_empty() => {}
                            other => return Ok((false, format!("b={b} h={h} w={w} offsets={max_offset}: got {:?}, expected {want:?}", other.map(|x| x.labels().map(<[usize]>::to_vec))))),
                        }
                    }
                }
            }
        }
        Ok((true, format!("{cases} grids match")))
    })()));

    out.push(Check::from_result("cpc labels b=1 h=3 w=2", (|| {
        let batch = extract_cpc(&random(&mut rng, &[1, 2, 3, 2]), &ContextEncoder::new(2, 1), &PredictionMatrices::new(2, 1, 2), 0.1).map_err(err)?;
        Ok((batch.labels() == Some(&[2, 3, 4, 5][..]), format!("labels {:?}", batch.labels())))
    })()));

    out.push(Check::from_result("context encoder causality, 100 draws", (|| {
        for draw in 0..100u64 {
            let ctx = ContextEncoder::<f64>::new(2, draw);
            let h = random(&mut rng, &[1, 2, 4, 3]);
            let row = rng.gen_range(0..4);
            let mut g = h.to_vec();
            for ch in 0..2 {
                for r in row..4 {
                    for c in 0..3 {
                        g[(ch * 4 + r) * 3 + c] += rng.gen_range(-1.0..1.0);
                    }
                }
            }
            let (a, b) = (ctx.forward(&h).map_err(err)?.to_vec(), ctx.forward(&Tensor::from_vec(g, &[1, 2, 4, 3]).map_err(err)?).map_err(err)?.to_vec());
            let c_out = a.len() / 12;
            for ch in 0..c_out {
                for r in 0..row {
                    for c in 0..3 {
                        let i = (ch * 4 + r) * 3 + c;
                        if a[i] != b[i] {
                            return Ok((false, format!("draw {draw}: row {r} changed after perturbing rows >= {row}")));
                        }
                    }
                }
            }
        }
        Ok((true, "context of row r never depends on rows >= r".to_string()))
    })()));

    out.push(Check::from_result("nt_xent n=2 counts", (|| {
        let b = RepresentationBatch::paired(&random(&mut rng, &[2, 3]), &random(&mut rng, &[2, 3])).map_err(err)?;
        let counts: Vec<(usize, usize)> = (0..4).map(|a| (b.positives_of(a), b.negatives_of(a))).collect();
        Ok((counts.iter().all(|&c| c == (1, 2)), format!("(positives, negatives) per anchor {counts:?}")))
    })()));

    out.push(Check::from_result("nce_amdim against naive summation", (|| {
        let (a, p, n) = (random(&mut rng, &[5]), random(&mut rng, &[2, 5]), random(&mut rng, &[3, 5]));
        let got = loss_value(nce_amdim(&a, &p, &n, &Similarity::Dot, false))?;
        let s = |m: &Tensor<f64>| rows(m).iter().map(|r| dot(&a.to_vec(), r).exp()).sum::<f64>();
        let want = -(s(&p) / s(&n)).ln();
        Ok(((got - want).abs() < 1e-9, format!("got {got:.12}, oracle {want:.12}")))
    })()));

    out.push(Check::from_result("amdim_total is the mean of three nce_amdim", (|| {
        let m = |s: u64| FeatureMapSet { maps: [3, 2, 1].iter().enumerate().map(|(i, &e)| random(&mut ChaCha8Rng::seed_from_u64(s + i as u64), &[2, 3, e, e])).collect() };
        let (ma, mb) = (m(10), m(20));
        let pairs = [(-1, -2), (-1, -3), (-2, -2)];
        let batches = extract_amdim(&ma, &mb, &[], &pairs, AnchorMode::AllCells).map_err(err)?;
        let total = loss_value(amdim_total(&batches, &Similarity::Dot, &LossConfig::nce_amdim(), 1))?;
        let mut sum = 0.0;
        for pair in pairs {
            let one = extract_amdim(&ma, &mb, &[], &[pair], AnchorMode::AllCells).map_err(err)?;
            sum += loss_value(batch_loss(&one[0], &Similarity::Dot, &LossConfig::nce_amdim()))?;
        }
        Ok(((total - sum / 3.0).abs() < 1e-9, format!("total {total:.12}, mean of parts {:.12}", sum / 3.0)))
    })()));

    out.push(Check::from_result("info_nce against naive summation", (|| {
        let (a, p, n) = (random(&mut rng, &[4]), random(&mut rng, &[4]), random(&mut rng, &[6, 4]));
        let got = loss_value(info_nce(&a, &p, &n, &Similarity::Dot))?;
        let pos = dot(&a.to_vec(), &p.to_vec()).exp();
        let neg: f64 = rows(&n).iter().map(|r| dot(&a.to_vec(), r).exp()).sum();
        let want = -(pos / (pos + neg)).ln();
        Ok(((got - want).abs() < 1e-9, format!("got {got:.12}, oracle {want:.12}")))
    })()));

    for k in [1usize, 4, 16, 64] {
        let name = format!("uniform info_nce with {k} negatives = ln(1 + {k})");
        out.push(match loss_value(info_nce(&Tensor::zeros(&[3]), &Tensor::zeros(&[3]), &Tensor::zeros(&[k, 3]), &Similarity::Dot)) {
            Ok(v) => close(&name, v, (1.0 + k as f64).ln(), 1e-9),
            Err(e) => Check::new(&name, false, e),
        });
    }

    out.push(match loss_value(nce_amdim(&Tensor::zeros(&[3]), &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[5, 3]), &Similarity::Dot, false)) {
        Ok(v) => close("uniform nce_amdim = ln(|R-| / |R+|)", v, (5.0f64 / 2.0).ln(), 1e-9),
        Err(e) => Check::new("uniform nce_amdim = ln(|R-| / |R+|)", false, e),
    });

    out.push(Check::from_result("nt_xent orthogonal pair, tau = 1", (|| {
        let z = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).map_err(err)?;
        let v = loss_value(nt_xent(&z, &z, 1.0))?;
        let want = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        Ok(((v - want).abs() < 1e-6, format!("got {v:.9}, expected {want:.9}")))
    })()));

    out.push(Check::from_result("shard equivalence, equal and unequal shards", (|| {
        let batch = labeled_batch(random(&mut rng, &[4, 3]), random(&mut rng, &[10, 3]), vec![0, 2, 5, 9]);
        let cfg = LossConfig::info_nce();
        let whole = loss_value(batch_loss(&batch, &Similarity::Dot, &cfg))?;
        let halves = loss_value(sharded_negatives(&batch, &Similarity::Dot, &cfg, &[(0..5).collect(), (5..10).collect()]))?;
        let uneven = loss_value(sharded_negatives(&batch, &Similarity::Dot, &cfg, &[vec![0], vec![1, 2, 3, 4, 5, 6], vec![7, 8], vec![9]]))?;
        let worst = (halves - whole).abs().max((uneven - whole).abs());
        Ok((worst < 1e-9, format!("max difference from K = 1: {worst:.2e}")))
    })()));

    out.push(Check::from_result("nearest-centroid accuracy at nuisance 0", (|| {
        let data = make_synthetic(200, 2, 3, 16, 16, 0.0, 5).map_err(err)?;
        let labels = data.labels().map_err(err)?.to_vec();
        let (train, _, test) = split_indices(&labels, 0);
        let dim = data.image(0).len();
        let mut centroids = vec![vec![0.0; dim]; 2];
        let mut counts = [0usize; 2];
        for &i in &train {
            counts[labels[i]] += 1;
            for (c, v) in centroids[labels[i]].iter_mut().zip(data.image(i)) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let correct = test.iter().filter(|&&i| {
            let img = data.image(i);
            usize::from(dist(img, &centroids[1]) < dist(img, &centroids[0])) == labels[i]
        }).count();
        Ok((correct == test.len(), format!("{correct}/{} held-out images", test.len())))
    })()));

    out
}

fn scratch_dir(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("apnlab-oracle-{}-{tag}", std::process::id()))
}

fn small_run(shards: usize) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Yadim);
    cfg.data.n = 96;
    cfg.epochs = 2;
    cfg.shards = shards;
    cfg
}

/// Short pretraining runs checking shard equivalence, reproducibility and
/// label blindness.
pub fn training_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let run = |cfg: &RunConfig, data: &crate::data::Dataset, tag: &str| -> Res<PathBuf> {
        let dir = scratch_dir(tag);
        let _ = fs::remove_dir_all(&dir);
        pretrain(cfg, data.unlabeled(), &dir, &PretrainOptions::default()).map_err(err)?;
        Ok(dir)
    };
    let body = || -> Res<Vec<Check>> {
        let cfg = small_run(1);
        let data = crate::harness::dataset_for(&cfg).map_err(err)?;
        let a = run(&cfg, &data, "k1")?;
        let b = run(&cfg, &data, "k1-again")?;
        let k2 = run(&small_run(2), &data, "k2")?;
        let mut labels = data.labels().map_err(err)?.to_vec();
        labels.reverse();
        let permuted = run(&cfg, &data.with_labels(labels).map_err(err)?, "permuted")?;
        let read = |d: &PathBuf, f: &str| fs::read(d.join(f)).map_err(err);
        let (s1, s2) = (read_steps(&a).map_err(err)?, read_steps(&k2).map_err(err)?);
        let worst = s1.iter().zip(&s2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let checks = vec![
            Check::new("per-step losses, 2 shards vs 1", s1.len() == s2.len() && worst <= 1e-5, format!("{} steps, max difference {worst:.2e}", s1.len())),
            Check::new("metrics.csv reproducible", read(&a, "metrics.csv")? == read(&b, "metrics.csv")?, "two runs of one config"),
            Check::new("checkpoint independent of labels", read(&a, "ckpt.bin")? == read(&permuted, "ckpt.bin")?, "labels reversed"),
        ];
        for d in [a, b, k2, permuted] {
            let _ = fs::remove_dir_all(d);
        }
        Ok(checks)
    };
    match body() {
        Ok(c) => out.extend(c),
        Err(e) => out.push(Check::new("training oracles", false, format!("error: {e}"))),
    }
    out
}
