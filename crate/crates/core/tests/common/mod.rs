#![allow(dead_code)]

use conftransfer::imitate::{gail_disc_loss, GailDiscriminator};
use conftransfer::nn::{
    bce_with_logits, bce_with_logits_const, mse_loss, weighted_bce_with_logits, weighted_mse_loss,
    HiddenActivation, Matrix, Mlp, OutputActivation,
};
use conftransfer::seed;
use conftransfer::transfer::{
    confidence_disc_loss, discriminator_loss, feature_disc_loss, PartialTrajBatch, TransferHyper, TransferModel,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn random_net(input: usize, output: usize, out_act: OutputActivation, rng: &mut ChaCha8Rng) -> Mlp {
    let mut dims = vec![input];
    for _ in 0..rng.random_range(0..3) {
        dims.push(rng.random_range(1..7));
    }
    dims.push(output);
    let act = if rng.random_bool(0.5) { HiddenActivation::Tanh } else { HiddenActivation::Relu };
    let mut net = Mlp::new(&dims, act, out_act, rng.random()).unwrap();
    // nonzero biases exercise the bias gradients
    let p: Vec<f64> = net.flat_params().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    net.set_flat_params(&p).unwrap();
    net
}

fn weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
    w[0] = w[0].max(0.5);
    w
}

fn labels(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Central differences of `f` around `x`, compared against `analytic`.
fn compare(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Plain network plus one of the scalar losses; checks parameter and input gradients.
fn check_network_loss(rng: &mut ChaCha8Rng) -> (String, f64) {
    let kind = rng.random_range(0..5);
    let batch = rng.random_range(1..7);
    let input = rng.random_range(1..6);
    let output = if kind >= 4 { 1 } else { rng.random_range(1..4) };
    let out_act = if kind <= 1 && rng.random_bool(0.5) { OutputActivation::Sigmoid } else { OutputActivation::Linear };
    let net = random_net(input, output, out_act, rng);
    let x = random_matrix(batch, input, rng);
    let target = random_matrix(batch, output, rng);
    let lab = labels(batch, output, rng);
    let const_label = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    let w = weights(batch, rng);
    let loss = |pred: &Matrix| -> (f64, Matrix) {
        match kind {
            0 => mse_loss(pred, &target).unwrap(),
            1 => weighted_mse_loss(pred, &target, &w).unwrap(),
            2 => bce_with_logits(pred, &lab).unwrap(),
            3 => bce_with_logits_const(pred, const_label).unwrap(),
            _ => weighted_bce_with_logits(pred, const_label, &w, w.iter().sum()).unwrap(),
        }
    };
    let (pred, tape) = net.forward(&x).unwrap();
    let (_, upstream) = loss(&pred);
    let (g, gx) = net.backward(tape, &upstream).unwrap();
    let params = net.flat_params();
    let mut probe_net = net.clone();
    let e_params = compare(&params, &g.to_flat(), |p| {
        probe_net.set_flat_params(p).unwrap();
        loss(&probe_net.predict(&x).unwrap()).0
    });
    let e_input = compare(x.as_slice(), gx.as_slice(), |v| {
        loss(&net.predict(&Matrix::from_vec(batch, input, v.to_vec()).unwrap()).unwrap()).0
    });
    let name = ["mse", "weighted_mse", "bce", "bce_const", "weighted_bce"][kind];
    (format!("{name} {:?}", net.layer_dims()), e_params.max(e_input))
}

fn check_discriminator(rng: &mut ChaCha8Rng) -> (String, f64) {
    let input = rng.random_range(1..6);
    let d = random_net(input, 1, OutputActivation::Linear, rng);
    let real = random_matrix(rng.random_range(1..6), input, rng);
    let fake = random_matrix(rng.random_range(1..6), input, rng);
    let (_, g) = discriminator_loss(&d, &real, &fake).unwrap();
    let mut probe = d.clone();
    let e = compare(&d.flat_params(), &g.to_flat(), |p| {
        probe.set_flat_params(p).unwrap();
        discriminator_loss(&probe, &real, &fake).unwrap().0
    });
    (format!("discriminator {:?}", d.layer_dims()), e)
}

fn check_gail(rng: &mut ChaCha8Rng) -> (String, f64) {
    let (sd, ad) = (rng.random_range(1..4), rng.random_range(1..3));
    let mut d = GailDiscriminator::new(sd, ad, &[rng.random_range(2..6)], rng.random()).unwrap();
    d.d_omega = random_net(sd + ad, 1, OutputActivation::Linear, rng);
    let pol = random_matrix(rng.random_range(1..6), sd + ad, rng);
    let n = rng.random_range(1..6);
    let demo = random_matrix(n, sd + ad, rng);
    let w = weights(n, rng);
    let g = gail_disc_loss(&d, &pol, &demo, &w).unwrap().grads;
    let mut probe = d.clone();
    let e = compare(&d.d_omega.flat_params(), &g.to_flat(), |p| {
        probe.d_omega.set_flat_params(p).unwrap();
        gail_disc_loss(&probe, &pol, &demo, &w).unwrap().loss
    });
    (format!("gail {:?}", d.d_omega.layer_dims()), e)
}

/// Generator gradient of one adversarial term with respect to the target encoder.
fn check_adversarial(rng: &mut ChaCha8Rng, confidence: bool) -> (String, f64) {
    let hyper = TransferHyper {
        latent_dim: rng.random_range(1..4),
        max_len: rng.random_range(1..4),
        encoder_hidden: vec![rng.random_range(2..6)],
        disc_hidden: vec![rng.random_range(2..6)],
        seed: rng.random(),
        ..TransferHyper::default()
    };
    let (src_in, tar_in) = (rng.random_range(1..5), rng.random_range(1..5));
    let model = TransferModel::new(src_in, tar_in, &hyper).unwrap();
    let k = rng.random_range(1..=hyper.max_len);
    let b = rng.random_range(1..5);
    let batch = |width: usize, rng: &mut ChaCha8Rng| PartialTrajBatch {
        k,
        windows: (0..b).map(|i| (i, 0)).collect(),
        inputs: random_matrix(b * k, width, rng),
    };
    let (src, tar) = (batch(src_in, rng), batch(tar_in, rng));
    let term = |m: &TransferModel| {
        if confidence {
            confidence_disc_loss(m, k, &src, &tar).unwrap()
        } else {
            feature_disc_loss(m, k, &src, &tar).unwrap()
        }
    };
    let analytic = term(&model);
    let mut probe = model.clone();
    let e_enc = compare(&model.e_tar.flat_params(), &analytic.enc_grads.to_flat(), |p| {
        probe.e_tar.set_flat_params(p).unwrap();
        term(&probe).gen_loss
    });
    let mut probe = model.clone();
    fn disc(m: &mut TransferModel, k: usize, confidence: bool) -> &mut Mlp {
        if confidence {
            &mut m.conf_discs[k - 1]
        } else {
            &mut m.feat_discs[k - 1]
        }
    }
    let start = disc(&mut probe, k, confidence).flat_params();
    let e_disc = compare(&start, &analytic.disc_grads.to_flat(), |p| {
        disc(&mut probe, k, confidence).set_flat_params(p).unwrap();
        term(&probe).loss
    });
    let name = if confidence { "confidence_term" } else { "feature_term" };
    (format!("{name} k={k} z={}", hyper.latent_dim), e_enc.max(e_disc))
}

/// One randomly drawn gradient-check configuration; returns a label and its
/// maximum relative error.
pub fn gradient_case(case_seed: u64) -> (String, f64) {
    let mut rng = seed::rng(seed::derive(case_seed, "gradient_case"));
    match case_seed % 8 {
        0..=3 => check_network_loss(&mut rng),
        4 => check_discriminator(&mut rng),
        5 => check_gail(&mut rng),
        6 => check_adversarial(&mut rng, false),
        _ => check_adversarial(&mut rng, true),
    }
}
