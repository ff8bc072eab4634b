use newsbench::corpus::synthetic::{keyword_corpus, SyntheticConfig};
use newsbench::corpus::{split, DEFAULT_RATIOS};
use newsbench::diagnostics::{
    calibrate, extract_cls, joint_probabilities, kl_divergence, mc_dropout, silhouette, svg, tsne, write_certainty_csv,
    DiagnosticsError, TsneConfig,
};
use newsbench::model::{Mode, ModelConfig, ModelState};
use newsbench::pipeline::{prepare, Prepared};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn clusters(per: usize, dim: usize, separation: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        let mut center = vec![0.0; dim];
        center[c] = separation;
        for _ in 0..per {
            pts.push(
                center
                    .iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            labels.push(c);
        }
    }
    (pts, labels)
}

/// Perplexity of row `i` recomputed from scratch from the calibrated precision.
fn row_perplexity(points: &[Vec<f64>], i: usize, beta: f64) -> f64 {
    let d: Vec<f64> = points
        .iter()
        .map(|p| p.iter().zip(&points[i]).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let w: Vec<f64> = (0..points.len())
        .map(|j| if j == i { 0.0 } else { (-beta * d[j]).exp() })
        .collect();
    let z: f64 = w.iter().sum();
    let h: f64 = w.iter().filter(|&&v| v > 0.0).map(|v| -(v / z) * (v / z).log2()).sum();
    2f64.powf(h)
}

#[test]
fn calibrated_rows_hit_the_target_perplexity() {
    let (pts, _) = clusters(50, 10, 10.0, 1);
    let cal = calibrate(&pts, 30.0).unwrap();
    for i in 0..pts.len() {
        let p = row_perplexity(&pts, i, cal.betas[i]);
        assert!((p - 30.0).abs() < 1e-3, "row {i}: {p}");
    }
}

#[test]
fn separated_clusters_stay_separated() {
    let (pts, labels) = clusters(50, 10, 10.0, 2);
    let cfg = TsneConfig {
        seed: 9,
        ..Default::default()
    };
    let a = tsne(&pts, &labels, &cfg).unwrap();
    let s = silhouette(&a.coords, &labels);
    assert!(s >= 0.5, "silhouette {s}");
    assert!(a.final_kl < a.initial_kl, "{} !< {}", a.final_kl, a.initial_kl);
    assert!(a.final_kl >= 0.0);
    let b = tsne(&pts, &labels, &cfg).unwrap();
    let bits = |c: &[[f64; 2]]| c.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.coords), bits(&b.coords));
}

#[test]
fn kl_objective_is_invariant_under_rotation_of_inputs() {
    let (pts, labels) = clusters(20, 4, 5.0, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Gram-Schmidt on a random matrix gives an orthogonal one.
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < 4 {
        let mut v: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / norm).collect());
    }
    let rotated: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| {
            q.iter()
                .map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let y = tsne(
        &pts,
        &labels,
        &TsneConfig {
            perplexity: 10.0,
            iterations: 50,
            ..Default::default()
        },
    )
    .unwrap()
    .coords;
    let p1 = joint_probabilities(&calibrate(&pts, 10.0).unwrap());
    let p2 = joint_probabilities(&calibrate(&rotated, 10.0).unwrap());
    let (k1, k2) = (kl_divergence(&p1, &y), kl_divergence(&p2, &y));
    assert!((k1 - k2).abs() < 1e-6, "{k1} vs {k2}");
}

fn prepared() -> Prepared {
    let ds = keyword_corpus(&SyntheticConfig {
        classes: 3,
        per_class: 8,
        body_words: (4, 8),
        ..Default::default()
    });
    let s = split(&ds, 1, DEFAULT_RATIOS, false).unwrap();
    prepare(&ds, &s, None, 64, 16).unwrap()
}

fn model(p: &Prepared, dropout_rate: f64) -> ModelState<f32> {
    ModelState::init(
        &ModelConfig {
            vocab_size: p.vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_len: 16,
            n_classes: 3,
            dropout_rate,
            ..Default::default()
        },
        3,
    )
    .unwrap()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("r{i}")).collect()
}

#[test]
fn mc_dropout_without_dropout_has_no_spread() {
    let p = prepared();
    let m = model(&p, 0.0);
    let run = mc_dropout(&m, &p.test, &ids(p.test.rows()), 50, 1, 4).unwrap();
    for s in &run.samples[1..] {
        assert_eq!(s, &run.samples[0]);
    }
    let logits = m.forward(&p.test, Mode::Eval, None).unwrap().logits.to_f64_vec();
    for (i, r) in run.records.iter().enumerate() {
        assert_eq!(r.spread, 0.0);
        let row = &logits[i * 3..i * 3 + 3];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        assert!((r.certainty - 1.0 / z).abs() < 1e-9);
    }
}

#[test]
fn mc_dropout_probabilities_and_reproducibility() {
    let p = prepared();
    let m = model(&p, 0.3);
    let a = mc_dropout(&m, &p.test, &ids(p.test.rows()), 20, 7, 4).unwrap();
    let b = mc_dropout(&m, &p.test, &ids(p.test.rows()), 20, 7, 4).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.samples, b.samples);
    for probs in a.samples.iter().flatten().chain(&a.mean_probs) {
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(a.records.iter().all(|r| (0.0..=1.0).contains(&r.certainty)));
    assert!(a.records.iter().any(|r| r.spread > 0.0));
    let c = mc_dropout(&m, &p.test, &ids(p.test.rows()), 20, 8, 4).unwrap();
    assert_ne!(a.samples, c.samples);

    let mut csv = Vec::new();
    write_certainty_csv(&a.records, &p.labels, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("id,true,predicted,certainty,spread,correct\nr0,"));
    assert!(svg::certainty_strips(&a.records).contains("incorrect"));
}

#[test]
fn zero_samples_is_an_error() {
    let p = prepared();
    let err = mc_dropout(&model(&p, 0.1), &p.test, &ids(p.test.rows()), 0, 1, 4).unwrap_err();
    assert!(matches!(err, DiagnosticsError::SampleCount));
}

#[test]
fn cls_rows_follow_input_order() {
    let p = prepared();
    let m = model(&p, 0.1);
    let rows = extract_cls(&m, &p.test, 3).unwrap();
    assert_eq!(rows.len(), p.test.rows());
    assert!(rows.iter().all(|r| r.len() == 16));
    let dup = p.test.select(&[2, 0, 2]);
    let again = extract_cls(&m, &dup, 1).unwrap();
    assert_eq!(again[0], again[2]);
    assert_eq!(again[1], rows[0]);
    assert!(matches!(
        extract_cls(&m, &p.test.select(&[]), 4),
        Err(DiagnosticsError::Empty)
    ));
}
