//! Temporary diagnostic — not part of the suite.

use std::path::Path;

use sca_core::data::{self, Dataset};
use sca_core::defenses::{self, DefenseKind, DefenseSpec, ThreatArch};
use sca_core::lca::Dictionary;
use sca_core::nn::{self, Layer, LayerKind, Mode, Model};
use sca_core::rng::Rng;
use sca_core::tensor::{self, Tensor};

/// Largest eigenvalue of the lateral Gram operator v -> conv(recon(v)) via
/// power iteration. This is the quantity the Euler step has to beat:
/// step/tau * lambda_max < 2 or the potentials diverge.
fn gram_lambda_max(dict: &Dictionary, code_shape: &[usize], hw: (usize, usize)) -> f64 {
    let mut rng = Rng::new(99);
    let n: usize = code_shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut lam = 0.0;
    for _ in 0..80 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        let vt = Tensor::from_vec(code_shape, v.clone()).unwrap();
        let recon = dict.reconstruct(&vt, hw).unwrap();
        let w = tensor::conv2d(&recon, dict.atoms(), dict.stride()).unwrap();
        v = w.data().to_vec();
        lam = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    lam
}

fn max_coherence(dict: &Dictionary) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..dict.num_atoms() {
        for j in 0..i {
            let dot: f64 = dict
                .atom(i)
                .iter()
                .zip(dict.atom(j))
                .map(|(a, b)| a * b)
                .sum();
            worst = worst.max(dot.abs());
        }
    }
    worst
}

#[test]
#[ignore]
fn probe_gram_spectrum() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let ds = data::load_idx(
        &root.join("fixtures/digits-images-idx3-ubyte"),
        &root.join("fixtures/digits-labels-idx1-ubyte"),
    )
    .unwrap();
    let (train, _) = data::split(&ds, 0.7, 1).unwrap();
    let idx: Vec<usize> = (0..512).collect();
    let (imgs, labels) = train.batch(&idx);
    let sub = Dataset::new(imgs, labels, train.meta.clone()).unwrap();

    for seed in [1u64, 2, 3, 4, 5] {
        let (mut spec, _, _) = defenses::build(
            &DefenseSpec {
                kind: DefenseKind::Sca { lambda: 0.5 },
                threat_arch: ThreatArch::EndToEnd,
            },
            &sub.meta,
        )
        .unwrap();
        spec.seed = seed;
        let mut model = Model::init(spec).unwrap();
        let report = |model: &Model, stage: &str| {
            for (i, layer) in model.layers.iter().enumerate() {
                if let Layer::Scl { dict, .. } = layer {
                    let hw = (8, 8);
                    let shape = [dict.num_atoms(), hw.0, hw.1];
                    let lam = gram_lambda_max(dict, &shape, hw);
                    let coh = max_coherence(dict);
                    println!(
                        "seed {seed} {stage} layer{i}: lambda_max {lam:.1} coherence {coh:.3} -> min stable tau {:.1}",
                        lam / 2.0
                    );
                }
            }
        };
        report(&model, "random");
        let mut rng = Rng::new(seed.wrapping_mul(11));
        let warm: Vec<usize> = (0..32).collect();
        let (wb, _) = sub.batch(&warm);
        model.warm_start_dictionaries(&wb, &mut rng).unwrap();
        report(&model, "warmed");
    }
}

#[test]
#[ignore]
fn probe_sca_training() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let ds = data::load_idx(
        &root.join("fixtures/digits-images-idx3-ubyte"),
        &root.join("fixtures/digits-labels-idx1-ubyte"),
    )
    .unwrap();
    let (train, test) = data::split(&ds, 0.7, 1).unwrap();
    let envnum = |k: &str, d: f64| -> f64 {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let limit = envnum("LIMIT", train.len() as f64) as usize;
    let epochs = envnum("EPOCHS", 12.0) as usize;
    let idx: Vec<usize> = (0..limit.min(train.len())).collect();
    let (imgs, labels) = train.batch(&idx);
    let sub = Dataset::new(imgs, labels, train.meta.clone()).unwrap();

    let (mut spec, mut cfg, _) = defenses::build(
        &DefenseSpec {
            kind: DefenseKind::Sca { lambda: 0.5 },
            threat_arch: ThreatArch::EndToEnd,
        },
        &sub.meta,
    )
    .unwrap();
    for layer in &mut spec.layers {
        if let LayerKind::Scl { lca, .. } = &mut layer.kind {
            lca.tau = envnum("TAU", 50.0);
            lca.iterations = envnum("ITERS", 300.0) as usize;
        }
    }
    spec.seed = envnum("SEED", 1.0) as u64;
    cfg.learning_rate = 0.2;
    cfg.batch_size = 32;
    if std::env::var("NO_LCA_BP").is_ok() {
        cfg.lca_backprop = false;
    }
    let mut model = Model::init(spec).unwrap();
    let mut rng = Rng::new(7);
    let warm: Vec<usize> = (0..32).collect();
    let (wb, _) = sub.batch(&warm);
    model.warm_start_dictionaries(&wb, &mut rng).unwrap();
    let probe: Vec<usize> = (0..64).collect();
    let (pimgs, _) = test.batch(&probe);
    for epoch in 0..epochs {
        let loss = nn::train_epoch(&mut model, &sub, &cfg, &mut rng).unwrap();
        let last = epoch + 1 == epochs;
        if !last {
            let lams: Vec<f64> = model
                .layers
                .iter()
                .filter_map(|l| {
                    if let Layer::Scl { dict, .. } = l {
                        Some(gram_lambda_max(dict, &[dict.num_atoms(), 8, 8], (8, 8)))
                    } else {
                        None
                    }
                })
                .collect();
            println!("epoch {epoch}: loss {loss:.4} lam [{:.0},{:.0}]", lams[0], lams[1]);
            continue;
        }
        let (_, taps) = model.forward(&pimgs, Mode::Eval).unwrap();
        let stats = |name: &str| {
            let t = &taps[name];
            let shape = t.shape(); // [n, f, h, w]
            let (n, f, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut per_channel = vec![0usize; f];
            for s in 0..n {
                for ch in 0..f {
                    for k in 0..plane {
                        if t.data()[(s * f + ch) * plane + k] > 0.0 {
                            per_channel[ch] += 1;
                        }
                    }
                }
            }
            let total = (n * plane) as f64;
            let fracs: Vec<f64> = per_channel.iter().map(|&c| c as f64 / total).collect();
            let max_abs = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (fracs, max_abs)
        };
        let (f1, m1) = stats("scl1");
        let (f2, m2) = stats("scl2");
        let acc = nn::evaluate(&model, &test).unwrap();
        let tr_acc = nn::evaluate(&model, &sub).unwrap();
        let fmt = |f: &[f64]| {
            f.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(",")
        };
        let lams: Vec<f64> = model
            .layers
            .iter()
            .filter_map(|l| {
                if let Layer::Scl { dict, .. } = l {
                    Some(gram_lambda_max(dict, &[dict.num_atoms(), 8, 8], (8, 8)))
                } else {
                    None
                }
            })
            .collect();
        println!(
            "epoch {epoch}: loss {loss:.4} scl1 [{}] max {m1:.2} scl2 [{}] max {m2:.2} lam [{:.0},{:.0}] train {tr_acc:.3} test {acc:.3}",
            fmt(&f1),
            fmt(&f2),
            lams[0],
            lams[1]
        );
    }
}
