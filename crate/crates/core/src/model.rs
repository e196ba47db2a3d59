//! Deep GP stacks with optional speaker conditioning.
//!
//! Three architectures share one type:
//!
//! * plain: `h^ℓ = f^ℓ(h^{ℓ−1})`;
//! * speaker code: `h^ℓ = f^ℓ(h^{ℓ−1}) + f_S^ℓ(S)` at the fed layers, where
//!   `f_S^ℓ` is a GP over one-hot speaker codes;
//! * latent: `f^ℓ` takes `[h^{ℓ−1}; r_k]` at the fed layers, with a
//!   variational Gaussian `q(r_k)` per speaker.
//!
//! Layers are numbered from 1; layers `1..=L` are hidden and `L+1` is the
//! output layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::gp_layer::{GpLayer, LayerDims, MeanFn, PreparedLayer};
use crate::params::{Binder, Parameterized};
use crate::rng::{gaussian_sample, Rng};
use crate::tensor::Tensor;

/// Initial standard deviation of `q(u)` for hidden and speaker GPs.
pub const HIDDEN_Q_STD: f64 = 1e-3;
/// Initial standard deviation of `q(u)` for the output layer.
pub const OUTPUT_Q_STD: f64 = 1.0;
/// Initial standard deviation of `q(r_k)` and of the random `μ_k`.
pub const LATENT_INIT_STD: f64 = 1e-2;
/// Initial likelihood noise variance.
pub const NOISE_INIT_VARIANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    None,
    SpeakerCode,
    Latent,
}

/// Hidden layers that receive speaker information.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeedLayers {
    All(AllLayers),
    Set(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllLayers {
    All,
}

impl FeedLayers {
    pub fn all() -> Self {
        FeedLayers::All(AllLayers::All)
    }

    pub fn single(layer: usize) -> Self {
        FeedLayers::Set(vec![layer])
    }

    /// Sorted, deduplicated 1-based layer indices for `hidden` hidden layers.
    pub fn resolve(&self, hidden: usize) -> Vec<usize> {
        match self {
            FeedLayers::All(_) => (1..=hidden).collect(),
            FeedLayers::Set(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            FeedLayers::All(_) => "all".to_string(),
            FeedLayers::Set(v) => v
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join("+"),
        }
    }
}

impl Default for FeedLayers {
    fn default() -> Self {
        FeedLayers::all()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningSpec {
    pub mode: ConditioningMode,
    #[serde(default)]
    pub feed_layers: FeedLayers,
    #[serde(default)]
    pub latent_dim: usize,
    pub n_speakers: usize,
}

impl ConditioningSpec {
    pub fn none(n_speakers: usize) -> Self {
        ConditioningSpec {
            mode: ConditioningMode::None,
            feed_layers: FeedLayers::all(),
            latent_dim: 0,
            n_speakers,
        }
    }

    pub fn speaker_code(n_speakers: usize, feed_layers: FeedLayers) -> Self {
        ConditioningSpec {
            mode: ConditioningMode::SpeakerCode,
            feed_layers,
            latent_dim: 0,
            n_speakers,
        }
    }

    pub fn latent(n_speakers: usize, latent_dim: usize, feed_layers: FeedLayers) -> Self {
        ConditioningSpec {
            mode: ConditioningMode::Latent,
            feed_layers,
            latent_dim,
            n_speakers,
        }
    }
}

/// Layer sizes and conditioning of a deep GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpArchitecture {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Widths `D_1..D_L` of the hidden layers; may be empty.
    pub hidden_dims: Vec<usize>,
    /// Inducing points per hidden or output GP.
    pub inducing: usize,
    /// Inducing points per speaker GP.
    pub speaker_inducing: usize,
    pub conditioning: ConditioningSpec,
}

impl DgpArchitecture {
    pub fn n_hidden(&self) -> usize {
        self.hidden_dims.len()
    }

    /// Hidden layers that receive speaker information; empty without conditioning.
    pub fn fed_layers(&self) -> Vec<usize> {
        match self.conditioning.mode {
            ConditioningMode::None => Vec::new(),
            _ => self.conditioning.feed_layers.resolve(self.n_hidden()),
        }
    }

    fn latent_fed(&self, layer: usize) -> bool {
        self.conditioning.mode == ConditioningMode::Latent && self.fed_layers().contains(&layer)
    }

    /// Dimensions of layer `layer` (1-based).
    pub fn layer_dims(&self, layer: usize) -> LayerDims {
        let l = self.n_hidden();
        let mut input = if layer == 1 {
            self.input_dim
        } else {
            self.hidden_dims[layer - 2]
        };
        if self.latent_fed(layer) {
            input += self.conditioning.latent_dim;
        }
        let output = if layer == l + 1 {
            self.output_dim
        } else {
            self.hidden_dims[layer - 1]
        };
        LayerDims {
            input,
            output,
            inducing: self.inducing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input and output dimensions must be positive".into());
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.inducing == 0 {
            return bad("at least one inducing point is required".into());
        }
        let c = &self.conditioning;
        if c.n_speakers == 0 {
            return bad("n_speakers must be positive".into());
        }
        if c.mode == ConditioningMode::None {
            return Ok(());
        }
        let fed = c.feed_layers.resolve(self.n_hidden());
        if fed.is_empty() {
            return bad("conditioning needs at least one hidden layer to feed".into());
        }
        if let Some(&l) = fed.iter().find(|&&l| l == 0 || l > self.n_hidden()) {
            return bad(format!(
                "feed layer {l} is not a hidden layer (1..={})",
                self.n_hidden()
            ));
        }
        match c.mode {
            ConditioningMode::Latent if c.latent_dim == 0 => {
                bad("latent_dim must be positive in latent mode".into())
            }
            ConditioningMode::SpeakerCode if self.speaker_inducing == 0 => {
                bad("speaker GPs need at least one inducing point".into())
            }
            _ => Ok(()),
        }
    }
}

/// Per-speaker variational Gaussian `q(r_k) = N(μ_k, diag σ_k²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerLatent {
    /// `K x Q`, row `k` is `μ_k`.
    pub mu: Tensor,
    /// `K x Q`, elementwise `log σ_k`.
    pub log_sigma: Tensor,
}

impl SpeakerLatent {
    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }

    /// `Σ_k KL[q(r_k) ‖ N(0, I)]`.
    pub fn kl_to_prior(&self) -> f64 {
        self.mu
            .data()
            .iter()
            .zip(self.log_sigma.data())
            .map(|(m, ls)| 0.5 * ((2.0 * ls).exp() + m * m - 1.0 - 2.0 * ls))
            .sum()
    }
}

fn latent_kl<'t>(mu: Var<'t>, log_sigma: Var<'t>) -> Var<'t> {
    let two_ls = log_sigma.scale(2.0);
    (two_ls.exp() + mu.square() - two_ls)
        .offset(-1.0)
        .sum()
        .scale(0.5)
}

/// One-hot code of speaker `k` among `n`.
pub fn speaker_code(k: usize, n: usize) -> Result<Vec<f64>> {
    if k >= n {
        return Err(Error::IndexOutOfRange { index: k, len: n });
    }
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Propagation {
    /// Reparameterized draws at every layer and for `r_k`.
    Stochastic,
    /// Conditional means only; `r_k = μ_k`.
    MeanField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgpModel {
    pub arch: DgpArchitecture,
    /// `f^1..f^{L+1}`.
    pub layers: Vec<GpLayer>,
    /// `(ℓ, f_S^ℓ)` for every fed layer in speaker-code mode.
    pub speaker_layers: Vec<(usize, GpLayer)>,
    pub speaker_latent: Option<SpeakerLatent>,
    /// `1 x D_y` log noise variances.
    pub noise_log_variance: Tensor,
}

impl DgpModel {
    /// Deterministic skeleton: zero inducing inputs and latent means.
    pub fn new(arch: DgpArchitecture) -> Result<Self> {
        arch.validate()?;
        let l = arch.n_hidden();
        let layers = (1..=l + 1)
            .map(|i| {
                let (mean_fn, q_std) = if i == l + 1 {
                    (MeanFn::Zero, OUTPUT_Q_STD)
                } else {
                    (MeanFn::Identity, HIDDEN_Q_STD)
                };
                GpLayer::new(arch.layer_dims(i), mean_fn, q_std)
            })
            .collect();
        let c = &arch.conditioning;
        let speaker_layers = if c.mode == ConditioningMode::SpeakerCode {
            arch.fed_layers()
                .into_iter()
                .map(|i| {
                    let dims = LayerDims {
                        input: c.n_speakers,
                        output: arch.hidden_dims[i - 1],
                        inducing: arch.speaker_inducing,
                    };
                    (i, GpLayer::new(dims, MeanFn::Zero, HIDDEN_Q_STD))
                })
                .collect()
        } else {
            Vec::new()
        };
        let speaker_latent = (c.mode == ConditioningMode::Latent).then(|| SpeakerLatent {
            mu: Tensor::zeros(&[c.n_speakers, c.latent_dim]),
            log_sigma: Tensor::full(&[c.n_speakers, c.latent_dim], LATENT_INIT_STD.ln()),
        });
        Ok(DgpModel {
            noise_log_variance: Tensor::full(&[1, arch.output_dim], NOISE_INIT_VARIANCE.ln()),
            arch,
            layers,
            speaker_layers,
            speaker_latent,
        })
    }

    /// Random initialization: `Z ~ N(0, 1)` for every GP, then
    /// `μ_k ~ N(0, 10⁻⁴)`, drawn in that order.
    pub fn init(arch: DgpArchitecture, rng: &mut Rng) -> Result<Self> {
        let mut model = DgpModel::new(arch)?;
        for layer in &mut model.layers {
            layer.init_inducing(rng);
        }
        for (_, layer) in &mut model.speaker_layers {
            layer.init_inducing(rng);
        }
        if let Some(lat) = &mut model.speaker_latent {
            lat.mu = gaussian_sample(lat.mu.shape(), rng).scale(LATENT_INIT_STD);
        }
        Ok(model)
    }

    pub fn n_speakers(&self) -> usize {
        self.arch.conditioning.n_speakers
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let mut reference = DgpModel::new(self.arch.clone())?;
        reference.load_param_map(&self.param_map())?;
        for layer in self.layers.iter().chain(self.speaker_layers.iter().map(|(_, l)| l)) {
            layer.validate()?;
        }
        Ok(())
    }

    fn check_speakers(&self, x: &Tensor, speakers: &[usize]) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {} columns, model expects {}",
                x.cols(),
                self.arch.input_dim
            )));
        }
        if speakers.len() != x.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} speaker ids for {} frames",
                speakers.len(),
                x.rows()
            )));
        }
        let k = self.n_speakers();
        if let Some(&s) = speakers.iter().find(|&&s| s >= k) {
            return Err(Error::IndexOutOfRange { index: s, len: k });
        }
        Ok(())
    }

    /// Place every parameter on `binder`'s tape and factorize each `K_ZZ`.
    pub fn bind<'t>(&self, binder: &mut Binder<'t>) -> Result<BoundModel<'t>> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.prepare(&format!("layer.{}", i + 1), binder))
            .collect::<Result<Vec<_>>>()?;
        let speakers = self
            .speaker_layers
            .iter()
            .map(|(i, l)| Ok((*i, l.prepare(&format!("speaker.{i}"), binder)?)))
            .collect::<Result<Vec<_>>>()?;
        let latent = self.speaker_latent.as_ref().map(|lat| {
            (
                binder.bind("latent.mu", &lat.mu),
                binder.bind("latent.log_sigma", &lat.log_sigma),
            )
        });
        let noise = binder.bind("likelihood.log_variance", &self.noise_log_variance);
        Ok(BoundModel {
            arch: self.arch.clone(),
            tape: binder.tape(),
            layers,
            speakers,
            latent,
            noise,
        })
    }

    /// Predictions `f(X)` for each of `n_samples` passes.
    ///
    /// Stochastic passes sample every layer including the output; mean-field
    /// passes are identical to each other.
    pub fn forward(
        &self,
        x: &Tensor,
        speakers: &[usize],
        n_samples: usize,
        mode: Propagation,
        rng: &mut Rng,
    ) -> Result<Vec<Tensor>> {
        self.check_speakers(x, speakers)?;
        let tape = Tape::new();
        let mut binder = Binder::with_frozen(&tape, &[String::new()]);
        let bound = self.bind(&mut binder)?;
        let xv = tape.constant(x.clone());
        let mut out = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let (mean, var) = bound.output_conditional(xv, speakers, mode, rng);
            let mut y = (*mean.value()).clone();
            if mode == Propagation::Stochastic {
                let eps = gaussian_sample(y.shape(), rng);
                for ((o, v), e) in y.data_mut().iter_mut().zip(var.value().data()).zip(eps.data()) {
                    *o += v.sqrt() * e;
                }
            }
            out.push(y);
        }
        Ok(out)
    }

    /// Point prediction: the mean-field pass, or the average of
    /// `n_samples` stochastic passes when `n_samples > 0`.
    pub fn predict(
        &self,
        x: &Tensor,
        speakers: &[usize],
        n_samples: usize,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        if n_samples == 0 {
            let mut v = self.forward(x, speakers, 1, Propagation::MeanField, rng)?;
            return Ok(v.pop().expect("one pass"));
        }
        let passes = self.forward(x, speakers, n_samples, Propagation::Stochastic, rng)?;
        let mut acc = Tensor::zeros(passes[0].shape());
        for p in &passes {
            acc.add_assign(p);
        }
        Ok(acc.scale(1.0 / n_samples as f64))
    }

    /// Minibatch ELBO estimate; see [`BoundModel::elbo`].
    pub fn elbo(
        &self,
        x: &Tensor,
        y: &Tensor,
        speakers: &[usize],
        n_total: usize,
        n_samples: usize,
        rng: &mut Rng,
    ) -> Result<f64> {
        let tape = Tape::new();
        let mut binder = Binder::with_frozen(&tape, &[String::new()]);
        let bound = self.bind(&mut binder)?;
        Ok(bound.elbo(x, y, speakers, n_total, n_samples, rng)?.value().item())
    }

    /// ELBO and its gradient w.r.t. every parameter not under a frozen prefix.
    pub fn elbo_and_grad(
        &self,
        batch: Batch<'_>,
        n_total: usize,
        n_samples: usize,
        frozen: &[String],
        rng: &mut Rng,
    ) -> Result<(f64, crate::params::ParamMap)> {
        let tape = Tape::new();
        let mut binder = Binder::with_frozen(&tape, frozen);
        let bound = self.bind(&mut binder)?;
        let elbo = bound.elbo(batch.x, batch.y, batch.speakers, n_total, n_samples, rng)?;
        let grads = binder.collect(&tape.backward(elbo));
        Ok((elbo.value().item(), grads))
    }

    /// Total KL of all GPs plus the latent speakers.
    pub fn kl(&self) -> Result<f64> {
        let mut total = 0.0;
        for l in self.layers.iter().chain(self.speaker_layers.iter().map(|(_, l)| l)) {
            total += l.kl_to_prior()?;
        }
        if let Some(lat) = &self.speaker_latent {
            total += lat.kl_to_prior();
        }
        Ok(total)
    }
}

/// Borrowed minibatch: inputs, targets and speaker ids.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub y: &'a Tensor,
    pub speakers: &'a [usize],
}

impl Parameterized for DgpModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layer.{}", i + 1), f);
        }
        for (i, l) in &self.speaker_layers {
            l.visit(&format!("speaker.{i}"), f);
        }
        if let Some(lat) = &self.speaker_latent {
            f("latent.log_sigma", &lat.log_sigma);
            f("latent.mu", &lat.mu);
        }
        f("likelihood.log_variance", &self.noise_log_variance);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layer.{}", i + 1), f);
        }
        for (i, l) in &mut self.speaker_layers {
            l.visit_mut(&format!("speaker.{i}"), f);
        }
        if let Some(lat) = &mut self.speaker_latent {
            f("latent.log_sigma", &mut lat.log_sigma);
            f("latent.mu", &mut lat.mu);
        }
        f("likelihood.log_variance", &mut self.noise_log_variance);
    }
}

/// A model whose parameters live on a tape.
pub struct BoundModel<'t> {
    arch: DgpArchitecture,
    tape: &'t Tape,
    pub layers: Vec<PreparedLayer<'t>>,
    pub speakers: Vec<(usize, PreparedLayer<'t>)>,
    /// `(μ, log σ)`.
    pub latent: Option<(Var<'t>, Var<'t>)>,
    pub noise: Var<'t>,
}

impl<'t> BoundModel<'t> {
    /// Output-layer conditional `(mean, var)` after one pass through the
    /// hidden layers.
    ///
    /// Stochastic draw order: `r` (all `K` speakers), then per hidden layer
    /// the layer noise followed by the speaker-GP noise.
    pub fn output_conditional(
        &self,
        x: Var<'t>,
        speakers: &[usize],
        mode: Propagation,
        rng: &mut Rng,
    ) -> (Var<'t>, Var<'t>) {
        let stochastic = mode == Propagation::Stochastic;
        let latent_rows = self.latent.map(|(mu, log_sigma)| {
            let r = if stochastic {
                let eps = self.tape.constant(gaussian_sample(&mu.shape(), rng));
                mu + log_sigma.exp() * eps
            } else {
                mu
            };
            r.gather_rows(speakers)
        });
        let fed = self.arch.fed_layers();
        let mut h = x;
        let n = self.layers.len();
        for (idx, layer) in self.layers.iter().enumerate() {
            let ell = idx + 1;
            let input = match latent_rows {
                Some(r) if fed.contains(&ell) => concat(&[h, r], 1),
                _ => h,
            };
            let (mean, var) = layer.conditional(input);
            if ell == n {
                return (mean, var);
            }
            h = if stochastic {
                self.sample(mean, var, rng)
            } else {
                mean
            };
            if let Some((_, sgp)) = self.speakers.iter().find(|(i, _)| *i == ell) {
                h = h + self.speaker_offset(sgp, speakers, stochastic, rng);
            }
        }
        unreachable!("a model has at least one layer")
    }

    fn sample(&self, mean: Var<'t>, var: Var<'t>, rng: &mut Rng) -> Var<'t> {
        let eps = self.tape.constant(gaussian_sample(&mean.shape(), rng));
        mean + var.sqrt() * eps
    }

    /// `f_S(S)` per frame; the GP is evaluated once at the `K` codes.
    fn speaker_offset(
        &self,
        sgp: &PreparedLayer<'t>,
        speakers: &[usize],
        stochastic: bool,
        rng: &mut Rng,
    ) -> Var<'t> {
        let codes = self.tape.constant(Tensor::eye(self.arch.conditioning.n_speakers));
        let (mean, var) = sgp.conditional(codes);
        let mean = mean.gather_rows(speakers);
        if stochastic {
            self.sample(mean, var.gather_rows(speakers), rng)
        } else {
            mean
        }
    }

    /// Sum of every KL term: output and hidden GPs, speaker GPs, latents.
    pub fn kl(&self) -> Var<'t> {
        let mut terms: Vec<Var<'t>> = self.layers.iter().map(|l| l.kl()).collect();
        terms.extend(self.speakers.iter().map(|(_, l)| l.kl()));
        if let Some((mu, log_sigma)) = self.latent {
            terms.push(latent_kl(mu, log_sigma));
        }
        concat(&terms, 0).sum()
    }

    /// Expected log-likelihood of `y` under `N(mean, var)` plus noise,
    /// summed over the batch.
    pub fn expected_log_lik(&self, mean: Var<'t>, var: Var<'t>, y: Var<'t>) -> Var<'t> {
        let resid = (y - mean).square() + var;
        let per = resid * self.noise.neg().exp() + self.noise;
        let b = mean.rows() as f64;
        let d = mean.cols() as f64;
        per.sum()
            .offset(b * d * (2.0 * std::f64::consts::PI).ln())
            .scale(-0.5)
    }

    /// `(N_total / B)(1 / N_s) Σ_j Σ_{i,d} E[log p(y | f)] − KL`, with the
    /// expectation at the output layer in closed form.
    pub fn elbo(
        &self,
        x: &Tensor,
        y: &Tensor,
        speakers: &[usize],
        n_total: usize,
        n_samples: usize,
        rng: &mut Rng,
    ) -> Result<Var<'t>> {
        let b = x.rows();
        if b == 0 {
            return Err(Error::InsufficientData("empty minibatch".into()));
        }
        if n_total < b {
            return Err(Error::InvalidConfig(format!(
                "N_total {n_total} is smaller than the batch size {b}"
            )));
        }
        if n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        if y.shape() != [b, self.arch.output_dim] {
            return Err(Error::ShapeMismatch(format!(
                "targets must be {b}x{}, found {:?}",
                self.arch.output_dim,
                y.shape()
            )));
        }
        check_batch(&self.arch, x, speakers)?;
        let xv = self.tape.constant(x.clone());
        let yv = self.tape.constant(y.clone());
        let mut lik = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let (mean, var) = self.output_conditional(xv, speakers, Propagation::Stochastic, rng);
            lik.push(self.expected_log_lik(mean, var, yv));
        }
        let scale = n_total as f64 / (b as f64 * n_samples as f64);
        Ok(concat(&lik, 0).sum().scale(scale) - self.kl())
    }
}

fn check_batch(arch: &DgpArchitecture, x: &Tensor, speakers: &[usize]) -> Result<()> {
    if x.cols() != arch.input_dim || speakers.len() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {:?} inputs with {} speaker ids for input width {}",
            x.shape(),
            speakers.len(),
            arch.input_dim
        )));
    }
    let k = arch.conditioning.n_speakers;
    match speakers.iter().find(|&&s| s >= k) {
        Some(&s) => Err(Error::IndexOutOfRange { index: s, len: k }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(mode: ConditioningMode, hidden: Vec<usize>) -> DgpArchitecture {
        let conditioning = match mode {
            ConditioningMode::None => ConditioningSpec::none(3),
            ConditioningMode::SpeakerCode => ConditioningSpec::speaker_code(3, FeedLayers::all()),
            ConditioningMode::Latent => ConditioningSpec::latent(3, 2, FeedLayers::all()),
        };
        DgpArchitecture {
            input_dim: 2,
            output_dim: 2,
            hidden_dims: hidden,
            inducing: 4,
            speaker_inducing: 3,
            conditioning,
        }
    }

    #[test]
    fn one_hot_codes() {
        assert_eq!(speaker_code(1, 3).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(speaker_code(0, 1).unwrap(), vec![1.0]);
        assert!(matches!(
            speaker_code(3, 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn layer_dimensions_chain() {
        let a = arch(ConditioningMode::Latent, vec![5, 4]);
        let dims: Vec<_> = (1..=3).map(|i| a.layer_dims(i)).collect();
        assert_eq!((dims[0].input, dims[0].output), (4, 5));
        assert_eq!((dims[1].input, dims[1].output), (7, 4));
        assert_eq!((dims[2].input, dims[2].output), (4, 2));

        let mut a = arch(ConditioningMode::SpeakerCode, vec![5]);
        a.conditioning.feed_layers = FeedLayers::single(2);
        assert!(matches!(a.validate(), Err(Error::InvalidConfig(_))));
        let a = arch(ConditioningMode::Latent, vec![]);
        assert!(a.validate().is_err());
    }

    #[test]
    fn feed_layers_serde() {
        let all: FeedLayers = serde_json::from_str("\"all\"").unwrap();
        assert_eq!(all, FeedLayers::all());
        let set: FeedLayers = serde_json::from_str("[3, 1]").unwrap();
        assert_eq!(set.resolve(5), vec![1, 3]);
        assert_eq!(serde_json::to_string(&FeedLayers::all()).unwrap(), "\"all\"");
    }

    #[test]
    fn initialization_follows_recipe() {
        let mut rng = Rng::new(3);
        let m = DgpModel::init(arch(ConditioningMode::SpeakerCode, vec![3, 3]), &mut rng).unwrap();
        let all = m.layers.iter().chain(m.speaker_layers.iter().map(|(_, l)| l));
        for l in all {
            assert!(l.q_mu.data().iter().all(|&v| v == 0.0));
        }
        let last = m.layers.last().unwrap();
        for d in 0..last.dims.output {
            assert_eq!(last.q_chol(d), Tensor::eye(4));
        }
        let first = &m.layers[0];
        assert!((first.q_chol(0).at(0, 0) - 1e-3).abs() < 1e-15);
        assert_eq!(m.speaker_layers.len(), 2);
        assert!((m.noise_log_variance.data()[0].exp() - 0.01).abs() < 1e-15);

        let again = DgpModel::init(m.arch.clone(), &mut Rng::new(3)).unwrap();
        assert_eq!(again, m);

        let lat = DgpModel::init(arch(ConditioningMode::Latent, vec![3]), &mut rng).unwrap();
        let sl = lat.speaker_latent.as_ref().unwrap();
        assert!(sl.sigma().data().iter().all(|s| (s * s - 1e-4).abs() < 1e-16));
    }

    #[test]
    fn plain_single_layer_with_zero_mean_predicts_zero() {
        let m = DgpModel::init(arch(ConditioningMode::None, vec![]), &mut Rng::new(1)).unwrap();
        let x = gaussian_sample(&[5, 2], &mut Rng::new(2));
        let out = m
            .forward(&x, &[0; 5], 1, Propagation::MeanField, &mut Rng::new(0))
            .unwrap();
        assert!(out[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_speaker_means_match_plain_model() {
        let mut rng = Rng::new(11);
        let coded = DgpModel::init(arch(ConditioningMode::SpeakerCode, vec![3, 3]), &mut rng).unwrap();
        let mut coded = coded;
        for l in &mut coded.layers {
            l.q_mu = gaussian_sample(l.q_mu.shape(), &mut rng);
        }
        let mut plain = DgpModel::new(arch(ConditioningMode::None, vec![3, 3])).unwrap();
        plain.layers = coded.layers.clone();
        let x = gaussian_sample(&[6, 2], &mut rng);
        let spk = [0, 1, 2, 0, 1, 2];
        let a = coded.forward(&x, &spk, 1, Propagation::MeanField, &mut Rng::new(0)).unwrap();
        let b = plain.forward(&x, &spk, 1, Propagation::MeanField, &mut Rng::new(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equal_latents_give_equal_outputs() {
        let mut rng = Rng::new(5);
        let mut m = DgpModel::init(arch(ConditioningMode::Latent, vec![3]), &mut rng).unwrap();
        for l in &mut m.layers {
            l.q_mu = gaussian_sample(l.q_mu.shape(), &mut rng);
        }
        let lat = m.speaker_latent.as_mut().unwrap();
        lat.mu = Tensor::from_rows(&[vec![0.5, -0.2], vec![0.5, -0.2], vec![1.0, 1.0]]);
        let x = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7], vec![0.3, 0.7]]);
        let out = m
            .forward(&x, &[0, 1, 2], 1, Propagation::MeanField, &mut Rng::new(0))
            .unwrap()
            .remove(0);
        assert_eq!(out.row(0), out.row(1));
        assert_ne!(out.row(0), out.row(2));
    }

    #[test]
    fn standard_normal_latents_have_zero_kl() {
        let lat = SpeakerLatent {
            mu: Tensor::zeros(&[4, 3]),
            log_sigma: Tensor::zeros(&[4, 3]),
        };
        assert_eq!(lat.kl_to_prior(), 0.0);
        let tape = Tape::new();
        let kl = latent_kl(tape.constant(lat.mu.clone()), tape.constant(lat.log_sigma.clone()));
        assert_eq!(kl.value().item(), 0.0);
    }

    #[test]
    fn stochastic_forward_is_reproducible() {
        let m = DgpModel::init(arch(ConditioningMode::Latent, vec![3, 3]), &mut Rng::new(8)).unwrap();
        let x = gaussian_sample(&[4, 2], &mut Rng::new(9));
        let spk = [0, 1, 2, 1];
        let a = m.forward(&x, &spk, 3, Propagation::Stochastic, &mut Rng::new(4)).unwrap();
        let b = m.forward(&x, &spk, 3, Propagation::Stochastic, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|t| t.all_finite()));
    }

    #[test]
    fn elbo_rejects_bad_batches() {
        let m = DgpModel::init(arch(ConditioningMode::None, vec![3]), &mut Rng::new(1)).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        let y = Tensor::zeros(&[2, 2]);
        let mut rng = Rng::new(0);
        assert!(m.elbo(&x, &y, &[0, 0], 1, 1, &mut rng).is_err());
        assert!(m.elbo(&x, &y, &[0, 5], 2, 1, &mut rng).is_err());
        assert!(m.elbo(&x, &Tensor::zeros(&[2, 3]), &[0, 0], 2, 1, &mut rng).is_err());
        assert!(m.elbo(&x, &y, &[0, 0], 2, 1, &mut rng).unwrap().is_finite());
    }
}
