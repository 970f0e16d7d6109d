use super::*;
use crate::gradcheck::{check_inputs, rel_err};

fn model<T: Scalar>(arch: &ArchConfig, latent: &LatentConfig, seed: u64) -> ModelParams<T> {
    ModelParams::init(arch, latent, &mut Stream::from_seed(seed)).unwrap()
}

fn images<T: Scalar>(arch: &ArchConfig, batch: usize, seed: u64) -> Tensor<T> {
    let shape = arch.image_shape(batch).to_vec();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| T::lit((((i as u64 + 1) * (seed * 2 + 7)) % 256) as f64 / 255.0))
        .collect();
    Tensor::from_vec(shape, data)
}

#[test]
fn default_shapes_match_the_reference_stack() {
    let arch = ArchConfig::default();
    let latent = LatentConfig::default();
    let m: ModelParams<f32> = model(&arch, &latent, 0);
    assert_eq!(m.encoder.conv1.weight.value.shape(), &[64, 1, 4, 4]);
    assert_eq!(m.encoder.conv2.weight.value.shape(), &[128, 64, 4, 4]);
    assert_eq!(m.encoder.fc.weight.value.shape(), &[128 * 7 * 7, 1024]);
    assert_eq!(m.decoder.fc2.weight.value.shape(), &[1024, 128 * 7 * 7]);
    assert_eq!(m.decoder.bn2.gamma.value.shape(), &[128 * 7 * 7]);
    assert_eq!(m.decoder.deconv1.weight.value.shape(), &[128, 64, 4, 4]);
    assert_eq!(m.critics.len(), 3);
    assert_eq!(m.critic(Slot::Noise).unwrap().fc1.weight.value.shape(), &[20, 3000]);
    assert_eq!(m.critic(Slot::Categorical).unwrap().fc3.weight.value.shape(), &[3000, 1]);

    let x = images::<f32>(&arch, 2, 1);
    let Encoded::Disentangled { c_probs, s_mu, s_sigma, n } = m.encode(&x).unwrap() else {
        panic!("expected disentangled output");
    };
    assert_eq!(c_probs.shape(), &[2, 10]);
    assert_eq!(s_mu.shape(), &[2, 2]);
    assert_eq!(s_sigma.shape(), &[2, 2]);
    assert_eq!(n.shape(), &[2, 20]);
    let y = m.decode(&Tensor::zeros(vec![2, 32])).unwrap();
    assert_eq!(y.shape(), &[2, 1, 28, 28]);
    assert_eq!(m.discriminate_x(&x).unwrap().shape(), &[2, 1]);
    assert_eq!(m.critic_z(Slot::Continuous, &s_mu).unwrap().shape(), &[2, 1]);
}

#[test]
fn output_ranges() {
    let arch = ArchConfig::tiny(8);
    let m: ModelParams<f64> = model(&arch, &LatentConfig::default(), 2);
    let out = m.encode(&images(&arch, 5, 3)).unwrap();
    let Encoded::Disentangled { c_probs, s_sigma, .. } = &out else { unreachable!() };
    for r in 0..5 {
        let row = c_probs.row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
    assert!(s_sigma.data().iter().all(|&s| (1e-4 * (1.0 - 1e-12)..=1e2 * (1.0 + 1e-12)).contains(&s)));
    let y = m.decode(&out.mean_code()).unwrap();
    assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let d = m.discriminate_x(&y).unwrap();
    assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn init_is_seeded() {
    let arch = ArchConfig::tiny(8);
    let latent = LatentConfig::default();
    let a: ModelParams<f32> = model(&arch, &latent, 11);
    let b: ModelParams<f32> = model(&arch, &latent, 11);
    let c: ModelParams<f32> = model(&arch, &latent, 12);
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    let ids: std::collections::HashSet<_> = a.params().iter().map(|p| p.id).collect();
    assert_eq!(ids.len(), a.params().len());
    let names: std::collections::HashSet<_> = a.named_tensors().iter().map(|(n, _)| n.to_string()).collect();
    assert_eq!(names.len(), a.named_tensors().len());
}

#[test]
fn eval_forward_is_pure() {
    let arch = ArchConfig::tiny(8);
    let m: ModelParams<f32> = model(&arch, &LatentConfig::default(), 4);
    let before = m.checksum();
    let x = images::<f32>(&arch, 3, 5);
    assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
    let z = Tensor::full(vec![3, 32], 0.3f32);
    assert_eq!(m.decode(&z).unwrap(), m.decode(&z).unwrap());
    assert_eq!(m.checksum(), before);
}

#[test]
fn train_forward_moves_running_stats_only() {
    let arch = ArchConfig::tiny(8);
    let mut m: ModelParams<f32> = model(&arch, &LatentConfig::default(), 4);
    let params_before: Vec<_> = m.params().iter().map(|p| p.value.clone()).collect();
    let buffers_before = m.buffers().iter().map(|b| b.value.clone()).collect::<Vec<_>>();
    let mut g = Graph::new();
    let x = g.input(images(&arch, 4, 1));
    m.encoder.forward_train(&mut g, x);
    let z = g.input(Tensor::full(vec![4, 32], 0.5f32));
    let noise = x_noise(&mut g);
    let z = g.add(z, noise);
    m.decoder.forward_train(&mut g, z);
    m.disc_x.forward_train(&mut g, x);
    let params_after: Vec<_> = m.params().iter().map(|p| p.value.clone()).collect();
    assert_eq!(params_before, params_after);
    let changed = m
        .buffers()
        .iter()
        .zip(&buffers_before)
        .filter(|(b, old)| &b.value != *old)
        .count();
    assert_eq!(changed, m.buffers().len());
}

fn x_noise(g: &mut Graph<f32>) -> Var {
    let data = (0..4 * 32).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
    g.input(Tensor::from_vec(vec![4, 32], data))
}

#[test]
fn zero_width_slots_are_skipped() {
    let arch = ArchConfig::tiny(8);
    let latent = LatentConfig {
        ks: 0,
        ..LatentConfig::default()
    };
    let m: ModelParams<f64> = model(&arch, &latent, 0);
    let slots: Vec<_> = m.critics.iter().map(|c| c.slot).collect();
    assert_eq!(slots, vec![Slot::Categorical, Slot::Noise]);
    let Encoded::Disentangled { s_mu, s_sigma, .. } = m.encode(&images(&arch, 2, 0)).unwrap() else {
        unreachable!()
    };
    assert_eq!(s_mu.shape(), &[2, 0]);
    assert_eq!(s_sigma.shape(), &[2, 0]);
    assert_eq!(m.decoder.code_width(), 30);
}

#[test]
fn entangled_variant_has_one_head_and_one_critic() {
    let arch = ArchConfig::tiny(8);
    let m: ModelParams<f64> = model(&arch, &LatentConfig::entangled(7), 0);
    assert!(m.encoder.c.is_none() && m.encoder.n.is_none());
    assert_eq!(m.critics.len(), 1);
    assert_eq!(m.critics[0].slot, Slot::Entangled);
    let Encoded::Entangled { z } = m.encode(&images(&arch, 3, 0)).unwrap() else {
        panic!("expected entangled output");
    };
    assert_eq!(z.shape(), &[3, 7]);
    assert_eq!(m.decode(&z).unwrap().shape(), &[3, 1, 8, 8]);
}

#[test]
fn clipping_bounds_every_critic_parameter() {
    let arch = ArchConfig::tiny(8);
    let mut m: ModelParams<f64> = model(&arch, &LatentConfig::default(), 0);
    for c in &mut m.critics {
        for p in c.critic.params_mut() {
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                *w = if i % 2 == 0 { 0.5 } else { -0.5 };
            }
        }
    }
    let enc = m.encoder.checksum();
    m.clip_critic_weights(0.01);
    for c in &m.critics {
        for p in c.critic.params() {
            assert!(p.value.data().iter().all(|w| w.abs() <= 0.01));
        }
    }
    assert_eq!(m.encoder.checksum(), enc);
}

#[test]
fn named_tensors_round_trip() {
    let arch = ArchConfig::tiny(8);
    let latent = LatentConfig::default();
    let a: ModelParams<f64> = model(&arch, &latent, 1);
    let mut b: ModelParams<f64> = model(&arch, &latent, 2);
    let map: HashMap<String, Tensor<f64>> =
        a.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    b.load_named_tensors(map.clone()).unwrap();
    assert_eq!(a.checksum(), b.checksum());

    let mut missing = map.clone();
    missing.remove("decoder.fc1.weight");
    assert!(b.load_named_tensors(missing).is_err());
    let mut extra = map.clone();
    extra.insert("bogus".into(), Tensor::zeros(vec![1]));
    assert!(b.load_named_tensors(extra).is_err());
    let mut wrong = map;
    wrong.insert("decoder.fc1.bias".into(), Tensor::zeros(vec![3]));
    assert!(b.load_named_tensors(wrong).is_err());
}

#[test]
fn rejects_bad_configs() {
    let bad = [
        ArchConfig { stride: 1, ..ArchConfig::default() },
        ArchConfig { kernel: 3, ..ArchConfig::default() },
        ArchConfig { image_side: 30, ..ArchConfig::default() },
        ArchConfig { fc_width: 0, ..ArchConfig::default() },
        ArchConfig { sigma_min: 2.0, sigma_max: 1.0, ..ArchConfig::default() },
        ArchConfig { bn_momentum: 0.0, ..ArchConfig::default() },
    ];
    for arch in bad {
        assert!(arch.validate().is_err(), "{arch:?}");
    }
    let m: ModelParams<f32> = model(&ArchConfig::tiny(8), &LatentConfig::default(), 0);
    assert!(m.encode(&Tensor::zeros(vec![2, 1, 28, 28])).is_err());
    assert!(m.decode(&Tensor::zeros(vec![2, 31])).is_err());
}

fn micro_arch() -> ArchConfig {
    ArchConfig {
        image_side: 4,
        conv_widths: [2, 3],
        fc_width: 5,
        critic_width: 4,
        ..ArchConfig::default()
    }
}

fn micro_latent() -> LatentConfig {
    LatentConfig {
        kc: 3,
        ks: 2,
        kn: 2,
        ..LatentConfig::default()
    }
}

/// Weighted sum so that every output coordinate contributes differently.
fn weighted(g: &mut Graph<f64>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = g.input(Tensor::from_vec(shape, (0..n).map(|i| ((i * 7) % 5) as f64 - 1.7).collect()));
    let p = g.mul(v, w);
    g.sum(p)
}

#[test]
fn encoder_input_gradients_match_finite_differences() {
    let arch = micro_arch();
    let m: ModelParams<f64> = model(&arch, &micro_latent(), 9);
    let x = images::<f64>(&arch, 3, 2);
    let report = check_inputs(
        &[x],
        |g, v| {
            let out = m.encoder.run(g, v[0], Mode::Train, &mut Vec::new());
            let Encoded::Disentangled { c_probs, s_mu, s_sigma, n } = out else { unreachable!() };
            let parts = g.concat_cols(&[c_probs, s_mu, s_sigma, n]);
            weighted(g, parts)
        },
        1e-6,
        48,
    );
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn decoder_and_discriminator_gradients_match_finite_differences() {
    let arch = micro_arch();
    let m: ModelParams<f64> = model(&arch, &micro_latent(), 9);
    let z = Tensor::from_vec(vec![3, 7], (0..21).map(|i| ((i * 13) % 9) as f64 / 4.0 - 1.0).collect());
    let report = check_inputs(
        &[z],
        |g, v| {
            let y = m.decoder.run(g, v[0], Mode::Train, &mut Vec::new());
            let d = m.disc_x.run(g, y, Mode::Train, &mut Vec::new());
            let a = weighted(g, y);
            let b = weighted(g, d);
            g.add(a, b)
        },
        1e-6,
        21,
    );
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let arch = micro_arch();
    let latent = micro_latent();
    let base: ModelParams<f64> = model(&arch, &latent, 5);
    let x = images::<f64>(&arch, 4, 1);
    let loss = |m: &ModelParams<f64>, g: &mut Graph<f64>| -> Var {
        let xv = g.input(x.clone());
        let out = m.encoder.run(g, xv, Mode::Train, &mut Vec::new());
        let Encoded::Disentangled { c_probs, s_mu, n, .. } = out else { unreachable!() };
        let code = g.concat_cols(&[c_probs, s_mu, n]);
        let y = m.decoder.run(g, code, Mode::Train, &mut Vec::new());
        let c = m.critic(Slot::Noise).unwrap().forward(g, n);
        let a = weighted(g, y);
        let b = weighted(g, c);
        g.add(a, b)
    };
    let mut g = Graph::new();
    let out = loss(&base, &mut g);
    let grads = g.backward(out);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    for (pi, p) in base.params().iter().enumerate() {
        let Some(analytic) = grads.param(p.id) else {
            // Parameters outside this loss: disc_x and the c and s critics.
            assert!(p.name.starts_with("disc_x") || p.name.starts_with("critic_c") || p.name.starts_with("critic_s")
                || p.name.starts_with("encoder.s_sigma"), "{}", p.name);
            continue;
        };
        let n = p.value.numel();
        for idx in [0, n / 2, n - 1] {
            let eval = |delta: f64| {
                let mut m = base.clone();
                m.params_mut()[pi].value.data_mut()[idx] += delta;
                let mut g = Graph::new();
                let out = loss(&m, &mut g);
                g.value(out).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[idx], numeric, 1e-6));
            probed += 1;
        }
    }
    assert!(probed > 60);
    assert!(worst < 1e-4, "worst relative error {worst}");
}
