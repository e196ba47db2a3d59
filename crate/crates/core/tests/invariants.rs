use msdgp::model::{ConditioningSpec, DgpArchitecture, DgpModel, FeedLayers, Propagation};
use msdgp::rng::gaussian_sample;
use msdgp::{Rng, Tensor};

const K: usize = 4;

fn arch(conditioning: ConditioningSpec, hidden: Vec<usize>) -> DgpArchitecture {
    DgpArchitecture {
        input_dim: 3,
        output_dim: 2,
        hidden_dims: hidden,
        inducing: 5,
        speaker_inducing: 3,
        conditioning,
    }
}

/// Initialized model with random variational means everywhere.
fn trained_like(a: DgpArchitecture, seed: u64) -> DgpModel {
    let mut rng = Rng::new(seed);
    let mut m = DgpModel::init(a, &mut rng).unwrap();
    for l in m.layers.iter_mut().chain(m.speaker_layers.iter_mut().map(|(_, l)| l)) {
        l.q_mu = gaussian_sample(l.q_mu.shape(), &mut rng);
    }
    if let Some(lat) = &mut m.speaker_latent {
        lat.mu = gaussian_sample(lat.mu.shape(), &mut rng);
    }
    m
}

fn mean_field(m: &DgpModel, x: &Tensor, spk: &[usize]) -> Tensor {
    m.forward(x, spk, 1, Propagation::MeanField, &mut Rng::new(0))
        .unwrap()
        .remove(0)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = t.clone();
    for (k, &p) in perm.iter().enumerate() {
        for j in 0..t.cols() {
            out.set(p, j, t.at(k, j));
        }
    }
    out
}

const PERM: [usize; K] = [2, 0, 3, 1];

fn batch() -> (Tensor, Vec<usize>) {
    let x = gaussian_sample(&[12, 3], &mut Rng::new(77));
    (x, (0..12).map(|i| (i * 7) % K).collect())
}

#[test]
fn latent_relabeling_is_bitwise_invariant() {
    let m = trained_like(arch(ConditioningSpec::latent(K, 2, FeedLayers::all()), vec![3, 3]), 1);
    let mut relabeled = m.clone();
    let lat = relabeled.speaker_latent.as_mut().unwrap();
    lat.mu = permute_rows(&lat.mu, &PERM);
    lat.log_sigma = permute_rows(&lat.log_sigma, &PERM);
    let (x, spk) = batch();
    let spk2: Vec<usize> = spk.iter().map(|&s| PERM[s]).collect();
    assert_eq!(mean_field(&m, &x, &spk), mean_field(&relabeled, &x, &spk2));
    assert_eq!(m.kl().unwrap(), relabeled.kl().unwrap());
}

#[test]
fn speaker_code_relabeling_is_invariant() {
    let m = trained_like(arch(ConditioningSpec::speaker_code(K, FeedLayers::all()), vec![3, 3]), 2);
    let mut relabeled = m.clone();
    for (_, l) in &mut relabeled.speaker_layers {
        // Permuting the code coordinates of the inducing inputs.
        let z = l.inducing.transpose();
        l.inducing = permute_rows(&z, &PERM).transpose();
    }
    let (x, spk) = batch();
    let spk2: Vec<usize> = spk.iter().map(|&s| PERM[s]).collect();
    let a = mean_field(&m, &x, &spk);
    let b = mean_field(&relabeled, &x, &spk2);
    assert!(a.max_abs_diff(&b) <= 1e-12, "{}", a.max_abs_diff(&b));
}

#[test]
fn speaker_offsets_add_to_hidden_outputs() {
    let m = trained_like(arch(ConditioningSpec::speaker_code(K, FeedLayers::all()), vec![3]), 3);
    let (x, spk) = batch();
    let (h, _) = m.layers[0].conditional(&x).unwrap();
    let (g, _) = m.speaker_layers[0].1.conditional(&Tensor::eye(K)).unwrap();
    let mut shifted = h.clone();
    for (i, &s) in spk.iter().enumerate() {
        for j in 0..h.cols() {
            shifted.set(i, j, h.at(i, j) + g.at(s, j));
        }
    }
    let (expected, _) = m.layers[1].conditional(&shifted).unwrap();
    let got = mean_field(&m, &x, &spk);
    assert!(got.max_abs_diff(&expected) <= 1e-12);

    let mut zeroed = m.clone();
    for (_, l) in &mut zeroed.speaker_layers {
        l.q_mu = Tensor::zeros(l.q_mu.shape());
    }
    let (plain, _) = m.layers[1].conditional(&h).unwrap();
    assert!(mean_field(&zeroed, &x, &spk).max_abs_diff(&plain) <= 1e-12);
}

#[test]
fn minibatch_estimates_average_to_full_batch_elbo() {
    let m = trained_like(arch(ConditioningSpec::none(K), vec![]), 4);
    let mut rng = Rng::new(5);
    let x = gaussian_sample(&[32, 3], &mut rng);
    let y = gaussian_sample(&[32, 2], &mut rng);
    let spk = vec![0; 32];
    let full = m.elbo(&x, &y, &spk, 32, 1, &mut rng).unwrap();
    let mut sum = 0.0;
    for i in 0..32 {
        let xi = Tensor::from_rows(&[x.row(i).to_vec()]);
        let yi = Tensor::from_rows(&[y.row(i).to_vec()]);
        sum += m.elbo(&xi, &yi, &[0], 32, 1, &mut rng).unwrap();
    }
    let avg = sum / 32.0;
    assert!((avg - full).abs() <= 1e-9 * full.abs().max(1.0), "{avg} vs {full}");
}

#[test]
fn stochastic_minibatch_estimates_are_unbiased() {
    let m = trained_like(arch(ConditioningSpec::latent(K, 2, FeedLayers::all()), vec![3]), 6);
    let mut rng = Rng::new(7);
    let x = gaussian_sample(&[8, 3], &mut rng);
    let y = gaussian_sample(&[8, 2], &mut rng);
    let spk: Vec<usize> = (0..8).map(|i| i % K).collect();
    let draws = 4000;
    let mut full = Vec::with_capacity(draws);
    let mut halves = Vec::with_capacity(draws);
    for _ in 0..draws {
        full.push(m.elbo(&x, &y, &spk, 8, 1, &mut rng).unwrap());
        let rows = if rng.below(2) == 0 { 0..4 } else { 4..8 };
        let xb = Tensor::from_rows(&rows.clone().map(|i| x.row(i).to_vec()).collect::<Vec<_>>());
        let yb = Tensor::from_rows(&rows.clone().map(|i| y.row(i).to_vec()).collect::<Vec<_>>());
        halves.push(m.elbo(&xb, &yb, &spk[rows], 8, 1, &mut rng).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let se = (sd(&full).powi(2) / draws as f64 + sd(&halves).powi(2) / draws as f64).sqrt();
    assert!((mean(&full) - mean(&halves)).abs() < 5.0 * se, "{} vs {} (se {se})", mean(&full), mean(&halves));
}
