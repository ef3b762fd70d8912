use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

// Scalar re-implementations, written against the formulas only.

fn cos_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + 1e-8) * (nb + 1e-8))
}

fn contrastive_oracle(r: &Tensor<f64>, samples: &[PairSample], lambda2: f64) -> f64 {
    let d = r.shape()[1];
    let row = |i: usize| &r.data()[i * d..(i + 1) * d];
    let n = samples.len() as f64;
    let pos: f64 = samples
        .iter()
        .map(|s| 1.0 - cos_oracle(row(s.anchor), row(s.positive)))
        .sum::<f64>()
        / n;
    let neg: f64 = samples
        .iter()
        .map(|s| 1.0 + cos_oracle(row(s.anchor), row(s.negative)))
        .sum::<f64>()
        / n;
    pos + lambda2 * neg
}

fn recon_oracle(
    h: &Tensor<f64>,
    s: &Tensor<f64>,
    l: &Tensor<f64>,
    mask: &[bool],
    d_avg: f64,
) -> f64 {
    let (b, t, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let mut total = 0.0;
    for i in 0..b {
        let mut sq = 0.0;
        for j in 0..t {
            if !mask[i * t + j] {
                continue;
            }
            for k in 0..d {
                let idx = (i * t + j) * d + k;
                let r = h.data()[idx] - s.data()[idx] - l.data()[idx];
                sq += r * r;
            }
        }
        total += sq.sqrt() / d_avg;
    }
    total / b as f64
}

fn ce_oracle(logits: &Tensor<f64>, targets: &[usize], valid: &[bool], eps: f64) -> f64 {
    let v = *logits.shape().last().unwrap();
    let mut total = 0.0;
    let mut count = 0.0;
    for (r, (&tgt, &ok)) in targets.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        let logp: Vec<f64> = row.iter().map(|x| x - lse).collect();
        total += -(1.0 - eps) * logp[tgt] - eps / v as f64 * logp.iter().sum::<f64>();
        count += 1.0;
    }
    total / count
}

fn layout(src: &[usize], tgt: &[usize]) -> PairLayout {
    PairLayout::new(src, tgt).unwrap()
}

#[test]
fn pool_cases() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(Tensor::full(&[1, 3, 2], 0.7));
    let m = Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
    let p = pool(&mut g, x, &m).unwrap();
    assert_eq!(g.value(p).data(), &[0.7, 0.7]);

    let x = g.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let m = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let p = pool(&mut g, x, &m).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 4.0]);

    let m = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
    assert!(pool(&mut g, x, &m).is_err());
}

#[test]
fn worked_sampling_example() {
    // x1(en)->de, x2(en)->fr
    let l = layout(&[0, 0], &[1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = sample_pairs(&l, &mut rng).unwrap();
    assert_eq!(s.semantic[0].anchor, 0);
    assert_eq!(s.semantic[0].positive, 2);
    assert_eq!(s.language[0].anchor, 0);
    assert_eq!(s.language[0].positive, 1);
    assert_eq!(s.language_skipped, 0);
}

#[test]
fn lone_language_is_skipped() {
    let l = layout(&[0, 1], &[1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = sample_pairs(&l, &mut rng).unwrap();
    // L0 only occurs once; L1 occurs twice
    assert_eq!(s.language_skipped, 1);
    assert_eq!(s.language.len(), 1);
    assert_eq!(s.language[0].anchor, 1);
    assert_eq!(s.language[0].positive, 2);
}

#[test]
fn single_pair_batch_is_an_error() {
    let l = layout(&[0], &[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(sample_pairs(&l, &mut rng).is_err());
}

#[test]
fn sampling_replays_under_seed() {
    let l = layout(&[0, 0, 1, 2, 0], &[1, 2, 0, 0, 3]);
    let a = sample_pairs(&l, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_pairs(&l, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sampling_soundness_over_many_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let n = rng.gen_range(2..9);
        let src: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let tgt: Vec<usize> = src.iter().map(|&s| (s + rng.gen_range(1..4)) % 4).collect();
        let l = layout(&src, &tgt);
        let s = sample_pairs(&l, &mut rng).unwrap();
        assert_eq!(s.semantic.len(), n);
        assert_eq!(s.language.len() + s.language_skipped, n);
        for p in &s.semantic {
            assert_eq!(p.positive, l.partner(p.anchor));
            assert!(p.negative != p.anchor && p.negative != p.positive);
        }
        for p in &s.language {
            assert_ne!(p.positive, p.anchor);
            assert_eq!(l.langs[p.positive], l.langs[p.anchor]);
            assert_ne!(l.langs[p.negative], l.langs[p.anchor]);
        }
    }
}

fn one(anchor: usize, positive: usize, negative: usize) -> Vec<PairSample> {
    vec![PairSample {
        anchor,
        positive,
        negative,
        kind: SampleKind::Semantic,
    }]
}

fn loss_value(r: Tensor<f64>, samples: &[PairSample], semantic: bool) -> f64 {
    let mut g = Graph::eval();
    let v = g.constant(r);
    let l = if semantic {
        semantic_loss(&mut g, v, samples, 0.2).unwrap()
    } else {
        language_loss(&mut g, v, samples, 0.2).unwrap()
    };
    g.value(l).item()
}

#[test]
fn contrastive_analytic_values() {
    let r = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    for semantic in [true, false] {
        assert!((loss_value(r.clone(), &one(0, 1, 2), semantic) - 0.2).abs() < 1e-7);
    }
    let r = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
    assert!((loss_value(r, &one(0, 1, 2), true) - 1.0).abs() < 1e-7);
}

#[test]
fn contrastive_empty_cases() {
    let mut g = Graph::<f64>::eval();
    let v = g.constant(Tensor::zeros(&[2, 2]));
    assert!(semantic_loss(&mut g, v, &[], 0.2).is_err());
    let l = language_loss(&mut g, v, &[], 0.2).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn contrastive_matches_oracle_and_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let r = rand_tensor(&mut rng, &[8, 8]);
        let samples: Vec<PairSample> = (0..6)
            .map(|i| PairSample {
                anchor: i,
                positive: (i + 1 + rng.gen_range(0..6)) % 8,
                negative: (i + 2 + rng.gen_range(0..5)) % 8,
                kind: SampleKind::Semantic,
            })
            .collect();
        let want = contrastive_oracle(&r, &samples, 0.2);
        for semantic in [true, false] {
            let got = loss_value(r.clone(), &samples, semantic);
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            assert!((0.0..=2.0 * 1.2).contains(&got));
        }
    }
}

#[test]
fn semantic_loss_grad_check_through_pooling() {
    // 2 pairs = 4 sentences, pooled from [4, 5, 8] states
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let l = layout(&[0, 0], &[1, 2]);
    for _ in 0..3 {
        let x = rand_tensor(&mut rng, &[4, 5, 8]);
        let mask = Tensor::new(
            vec![4, 5],
            [5, 3, 4, 2]
                .iter()
                .flat_map(|&n| (0..5).map(move |j| if j < n { 1.0 } else { 0.0 }))
                .collect(),
        )
        .unwrap();
        let s = sample_pairs(&l, &mut rng).unwrap();
        for semantic in [true, false] {
            let report = grad_check(
                |g, v| {
                    let pooled = pool(g, v, &mask)?;
                    if semantic {
                        semantic_loss(g, pooled, &s.semantic, 0.2)
                    } else {
                        language_loss(g, pooled, &s.language, 0.2)
                    }
                },
                &x,
                1e-5,
                1e-4,
                None,
            )
            .unwrap();
            assert!(report.passed, "max error {}", report.max_error);
        }
    }
}

#[test]
fn reconstruction_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = rand_tensor(&mut rng, &[2, 5, 8]);
    let s = rand_tensor(&mut rng, &[2, 5, 8]);
    let lang = Tensor::new(
        vec![2, 5, 8],
        h.data().iter().zip(s.data()).map(|(a, b)| a - b).collect(),
    )
    .unwrap();
    let mask = Tensor::full(&[2, 5], 1.0);
    let mut g = Graph::eval();
    let (hv, sv, lv) = (
        g.constant(h.clone()),
        g.constant(s.clone()),
        g.constant(lang),
    );
    let r = reconstruction_loss(&mut g, hv, sv, lv, &mask, 5.0).unwrap();
    assert!(g.value(r).item() <= 1e-12);

    // all-ones single sentence of length L, width D: √(L·D)/L
    let (len, d) = (6, 4);
    let ones = g.constant(Tensor::full(&[1, len, d], 1.0));
    let zeros = g.constant(Tensor::zeros(&[1, len, d]));
    let r = reconstruction_loss(
        &mut g,
        ones,
        zeros,
        zeros,
        &Tensor::full(&[1, len], 1.0),
        len as f64,
    )
    .unwrap();
    let want = ((len * d) as f64).sqrt() / len as f64;
    assert!((g.value(r).item() - want).abs() < 1e-15);

    let bad = g.constant(Tensor::zeros(&[1, len, d + 1]));
    assert!(
        reconstruction_loss(&mut g, ones, zeros, bad, &Tensor::full(&[1, len], 1.0), 1.0).is_err()
    );
}

#[test]
fn reconstruction_matches_oracle_and_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let valid: Vec<bool> = (0..10).map(|i| i % 5 < 4 || i < 5).collect();
    let mask = Tensor::new(
        vec![2, 5],
        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let d_avg = 4.5;
    for _ in 0..3 {
        let h = rand_tensor(&mut rng, &[2, 5, 8]);
        let s = rand_tensor(&mut rng, &[2, 5, 8]);
        let l = rand_tensor(&mut rng, &[2, 5, 8]);
        let mut g = Graph::eval();
        let (hv, sv, lv) = (
            g.constant(h.clone()),
            g.constant(s.clone()),
            g.constant(l.clone()),
        );
        let r = reconstruction_loss(&mut g, hv, sv, lv, &mask, d_avg).unwrap();
        let want = recon_oracle(&h, &s, &l, &valid, d_avg);
        assert!((g.value(r).item() - want).abs() <= 1e-10);

        for which in 0..3 {
            let (h, s, l) = (h.clone(), s.clone(), l.clone());
            let x = [&h, &s, &l][which].clone();
            let report = grad_check(
                |g, v| {
                    let mut ops = [
                        g.constant(h.clone()),
                        g.constant(s.clone()),
                        g.constant(l.clone()),
                    ];
                    ops[which] = v;
                    reconstruction_loss(g, ops[0], ops[1], ops[2], &mask, d_avg)
                },
                &x,
                1e-5,
                1e-4,
                None,
            )
            .unwrap();
            assert!(report.passed, "operand {which}: {}", report.max_error);
        }
    }
}

fn gold(ids: Vec<usize>, valid: Vec<bool>, batch: usize) -> TokenBatch {
    let len = ids.len() / batch;
    TokenBatch {
        ids,
        valid,
        batch,
        len,
    }
}

#[test]
fn cross_entropy_limits() {
    let mut g = Graph::eval();
    let mut logits = vec![0.0; 2 * 5];
    logits[3] = 1e3;
    logits[5 + 1] = 1e3;
    let lv = g.constant(Tensor::new(vec![2, 5], logits).unwrap());
    let l = cross_entropy(&mut g, lv, &gold(vec![3, 1], vec![true, true], 2), 0.0).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let u = g.constant(Tensor::zeros(&[2, 3, 7]));
    for eps in [0.0, 0.1, 0.5] {
        let l = cross_entropy(
            &mut g,
            u,
            &gold(vec![1, 2, 3, 4, 5, 0], vec![true; 6], 2),
            eps,
        )
        .unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
    }
    assert!(cross_entropy(&mut g, u, &gold(vec![0; 6], vec![false; 6], 2), 0.1).is_err());
}

#[test]
fn cross_entropy_matches_oracle_and_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let x = rand_tensor(&mut rng, &[2, 4, 9]);
        let targets: Vec<usize> = (0..8).map(|_| rng.gen_range(0..9)).collect();
        let valid = vec![true, true, true, false, true, true, false, false];
        let b = gold(targets.clone(), valid.clone(), 2);
        let mut g = Graph::eval();
        let v = g.constant(x.clone());
        let l = cross_entropy(&mut g, v, &b, 0.1).unwrap();
        assert!((g.value(l).item() - ce_oracle(&x, &targets, &valid, 0.1)).abs() <= 1e-10);
        let report = grad_check(|g, v| cross_entropy(g, v, &b, 0.1), &x, 1e-5, 1e-4, None).unwrap();
        assert!(report.passed);
    }
}

#[test]
fn joint_loss_arithmetic() {
    let w = JointWeights {
        lambda: 0.05,
        lambda1: 0.2,
        use_det_loss: true,
    };
    let b = joint_loss(0.0, 0.3, 0.4, 0.5, 1.0, &w).unwrap();
    assert_eq!(b.l_det, 0.8);
    assert!(b.identities_hold(&w));

    // l_det = 1.0 from (0.5, 0.3, 1.0)
    let b = joint_loss(2.0, 0.5, 0.3, 1.0, 10.0, &w).unwrap();
    assert_eq!(b.l_det, 1.0);
    assert_eq!(b.l_joint, 2.5);

    let z = JointWeights { lambda: 0.0, ..w };
    assert_eq!(
        joint_loss(2.0, 0.5, 0.3, 1.0, 10.0, &z).unwrap().l_joint,
        2.0
    );

    let off = JointWeights {
        use_det_loss: false,
        ..w
    };
    let b = joint_loss(1.7, 0.5, 0.3, 1.0, 10.0, &off).unwrap();
    assert_eq!((b.l_joint, b.l_det), (1.7, 0.0));
    assert!(b.identities_hold(&off));

    let neg = JointWeights { lambda1: -0.1, ..w };
    assert!(joint_loss(1.0, 0.0, 0.0, 0.0, 1.0, &neg).is_err());
}

#[test]
fn joint_graph_grad_check() {
    // composed objective over a single shared input feeding every term
    let w = JointWeights {
        lambda: 0.05,
        lambda1: 0.2,
        use_det_loss: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let l = layout(&[0, 0], &[1, 2]);
    let mask = Tensor::full(&[4, 3], 1.0);
    for _ in 0..3 {
        let x = rand_tensor(&mut rng, &[4, 3, 6]);
        let other = rand_tensor(&mut rng, &[4, 3, 6]);
        let targets: Vec<usize> = (0..12).map(|_| rng.gen_range(0..6)).collect();
        let s = sample_pairs(&l, &mut rng).unwrap();
        let b = gold(targets, vec![true; 12], 4);
        let report = grad_check(
            |g, v| {
                let o = g.constant(other.clone());
                let ce = cross_entropy(g, v, &b, 0.1)?;
                let sq = g.mul(v, v)?;
                let ps = pool(g, v, &mask)?;
                let pl = pool(g, sq, &mask)?;
                let sem = semantic_loss(g, ps, &s.semantic, 0.2)?;
                let lang = language_loss(g, pl, &s.language, 0.2)?;
                let rec = reconstruction_loss(g, o, v, sq, &mask, 3.0)?;
                joint_loss_graph(g, ce, Some((sem, lang, rec)), 3.0, &w)
            },
            &x,
            1e-5,
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed, "{}", report.max_error);
    }
}

#[test]
fn loss_record_round_trips_exactly() {
    let r = LossRecord {
        step: 12,
        losses: LossBreakdown {
            l_ce: 1.0 / 3.0,
            l_sem: 0.1 + 0.2,
            l_lang: 1e-17,
            l_recons: 2.5,
            l_det: 0.7999999999999999,
            l_joint: std::f64::consts::PI,
            d_avg: 7.25,
        },
        lr: 7e-4,
        language_skipped: 1,
    };
    let line = r.to_line();
    assert!(!line.contains('\n'));
    assert_eq!(LossRecord::from_line(&line).unwrap(), r);
}
