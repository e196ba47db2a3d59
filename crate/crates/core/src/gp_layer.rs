//! One sparse variational GP layer with inducing points.
//!
//! Each output dimension `d` has a Gaussian variational posterior
//! `q(u_d) = N(m_d, S_d)` over the function values at the inducing inputs
//! `Z`, with `S_d = L_d L_dᵀ` parameterized by its Cholesky factor (log
//! diagonal). At inputs `h` the marginal predictive is
//!
//! ```text
//! μ_d(h) = mean_fn(h)_d + k_hZ K_ZZ⁻¹ m_d
//! v_d(h) = k(h,h) − k_hZ K_ZZ⁻¹ k_Zh + k_hZ K_ZZ⁻¹ S_d K_ZZ⁻¹ k_Zh
//! ```
//!
//! and the regularizer is `Σ_d KL[N(m_d, S_d) ‖ N(0, K_ZZ)]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::kernel::{self, ArcCosParams};
use crate::params::Binder;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Relative jitter added to `K_ZZ` before factorizing, then the retry level.
pub const JITTER: f64 = 1e-6;
pub const JITTER_RETRY: f64 = 1e-4;
/// Floor applied to predictive variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFn {
    Zero,
    /// Fixed projection: the first `min(D_in, D_out)` coordinates are copied,
    /// the rest of the output is zero.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub input: usize,
    pub output: usize,
    pub inducing: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpLayer {
    pub dims: LayerDims,
    pub mean_fn: MeanFn,
    /// `M x D_in`.
    pub inducing: Tensor,
    /// `M x D_out`, column `d` is `m_d`.
    pub q_mu: Tensor,
    /// `D_out` stacked `M x M` blocks; strict lower part free, diagonal as log.
    pub q_sqrt: Tensor,
    /// `1 x 1` log of the kernel output variance.
    pub kernel_log_variance: Tensor,
}

impl GpLayer {
    /// Layer with `Z = 0`, `m = 0`, `S_d = q_std² I` and unit kernel variance.
    pub fn new(dims: LayerDims, mean_fn: MeanFn, q_std: f64) -> Self {
        let LayerDims {
            input,
            output,
            inducing: m,
        } = dims;
        let mut q_sqrt = Tensor::zeros(&[output * m, m]);
        for r in 0..output * m {
            q_sqrt.set(r, r % m, q_std.ln());
        }
        GpLayer {
            dims,
            mean_fn,
            inducing: Tensor::zeros(&[m, input]),
            q_mu: Tensor::zeros(&[m, output]),
            q_sqrt,
            kernel_log_variance: Tensor::scalar(0.0),
        }
    }

    /// Inducing inputs drawn i.i.d. from the standard normal.
    pub fn init_inducing(&mut self, rng: &mut Rng) {
        for v in self.inducing.data_mut() {
            *v = rng.normal();
        }
    }

    pub fn kernel(&self) -> ArcCosParams {
        ArcCosParams {
            log_variance: self.kernel_log_variance.item(),
        }
    }

    /// Lower Cholesky factor of `S_d`.
    pub fn q_chol(&self, d: usize) -> Tensor {
        let m = self.dims.inducing;
        let mut l = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..i {
                l.set(i, j, self.q_sqrt.at(d * m + i, j));
            }
            l.set(i, i, self.q_sqrt.at(d * m + i, i).exp());
        }
        l
    }

    /// Store `L` (lower triangular, positive diagonal) as the factor of `S_d`.
    pub fn set_q_chol(&mut self, d: usize, l: &Tensor) -> Result<()> {
        let m = self.dims.inducing;
        if l.shape() != [m, m] {
            return Err(Error::ShapeMismatch(format!("q_chol must be {m}x{m}")));
        }
        for i in 0..m {
            for j in 0..m {
                let v = match j.cmp(&i) {
                    std::cmp::Ordering::Less => l.at(i, j),
                    std::cmp::Ordering::Equal => {
                        if !(l.at(i, i) > 0.0) {
                            return Err(Error::NotPositiveDefinite {
                                row: i,
                                pivot: l.at(i, i),
                            });
                        }
                        l.at(i, i).ln()
                    }
                    std::cmp::Ordering::Greater => 0.0,
                };
                self.q_sqrt.set(d * m + i, j, v);
            }
        }
        Ok(())
    }

    /// Shape checks plus the distinct-inducing-inputs invariant.
    pub fn validate(&self) -> Result<()> {
        let LayerDims {
            input,
            output,
            inducing: m,
        } = self.dims;
        let expect = |t: &Tensor, shape: [usize; 2], what: &str| {
            if t.shape() != shape {
                Err(Error::ShapeMismatch(format!(
                    "{what}: expected {shape:?}, found {:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        expect(&self.inducing, [m, input], "inducing inputs")?;
        expect(&self.q_mu, [m, output], "variational means")?;
        expect(&self.q_sqrt, [output * m, m], "variational factors")?;
        expect(&self.kernel_log_variance, [1, 1], "kernel variance")?;
        for i in 0..m {
            for j in 0..i {
                let d2: f64 = self
                    .inducing
                    .row(i)
                    .iter()
                    .zip(self.inducing.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2.sqrt() <= 1e-8 {
                    return Err(Error::InvalidConfig(format!(
                        "inducing inputs {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.inducing"), &self.inducing);
        f(&format!("{prefix}.kernel_log_variance"), &self.kernel_log_variance);
        f(&format!("{prefix}.q_mu"), &self.q_mu);
        f(&format!("{prefix}.q_sqrt"), &self.q_sqrt);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.inducing"), &mut self.inducing);
        f(
            &format!("{prefix}.kernel_log_variance"),
            &mut self.kernel_log_variance,
        );
        f(&format!("{prefix}.q_mu"), &mut self.q_mu);
        f(&format!("{prefix}.q_sqrt"), &mut self.q_sqrt);
    }

    /// Bind the parameters and factorize `K_ZZ` once.
    pub fn prepare<'t>(&self, prefix: &str, binder: &mut Binder<'t>) -> Result<PreparedLayer<'t>> {
        let z = binder.bind(&format!("{prefix}.inducing"), &self.inducing);
        let log_var = binder.bind(
            &format!("{prefix}.kernel_log_variance"),
            &self.kernel_log_variance,
        );
        let q_mu = binder.bind(&format!("{prefix}.q_mu"), &self.q_mu);
        let q_sqrt = binder.bind(&format!("{prefix}.q_sqrt"), &self.q_sqrt);
        PreparedLayer::new(self.dims, self.mean_fn, z, log_var, q_mu, q_sqrt)
    }

    /// Marginal predictive mean and variance at the rows of `h`.
    pub fn conditional(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = crate::autodiff::Tape::new();
        let mut binder = Binder::with_frozen(&tape, &[String::new()]);
        let layer = self.prepare("layer", &mut binder)?;
        let (mean, var) = layer.conditional(tape.constant(h.clone()));
        let (mean, var) = (mean.value(), var.value());
        Ok(((*mean).clone(), (*var).clone()))
    }

    /// One reparameterized draw `μ + √v ⊙ ε` at the rows of `h`.
    pub fn sample_output(&self, h: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let (mean, var) = self.conditional(h)?;
        let eps = crate::rng::gaussian_sample(mean.shape(), rng);
        let mut out = mean;
        for ((o, v), e) in out.data_mut().iter_mut().zip(var.data()).zip(eps.data()) {
            *o += v.sqrt() * e;
        }
        Ok(out)
    }

    /// `Σ_d KL[q(u_d) ‖ p(u_d | Z)]`.
    pub fn kl_to_prior(&self) -> Result<f64> {
        let tape = crate::autodiff::Tape::new();
        let mut binder = Binder::with_frozen(&tape, &[String::new()]);
        let layer = self.prepare("layer", &mut binder)?;
        let kl = layer.kl().value().item();
        Ok(kl)
    }

    /// `K_ZZ` with the jitter actually used for factorization.
    pub fn jittered_kzz(&self) -> Tensor {
        let k = kernel::arccos_gram(&self.inducing, &self.inducing, &self.kernel());
        let m = self.dims.inducing as f64;
        let mean_diag = k.diagonal().iter().sum::<f64>() / m;
        let base = k.add_diagonal(JITTER * mean_diag);
        if base.cholesky().is_ok() {
            base
        } else {
            k.add_diagonal(JITTER_RETRY * mean_diag)
        }
    }
}

/// A layer bound to a tape with `K_ZZ` factorized, ready for repeated use
/// within one objective evaluation.
pub struct PreparedLayer<'t> {
    pub dims: LayerDims,
    pub mean_fn: MeanFn,
    pub z: Var<'t>,
    pub log_variance: Var<'t>,
    /// Cholesky factor of the jittered `K_ZZ`.
    pub lz: Var<'t>,
    /// `Lz⁻¹ m`.
    pub whitened_mean: Var<'t>,
    /// Raw variational factor storage, `D_out` stacked blocks.
    pub q_sqrt: Var<'t>,
    /// `L_d` per output dimension.
    pub factors: Vec<Var<'t>>,
    projection: Option<Var<'t>>,
}

impl<'t> PreparedLayer<'t> {
    pub fn new(
        dims: LayerDims,
        mean_fn: MeanFn,
        z: Var<'t>,
        log_variance: Var<'t>,
        q_mu: Var<'t>,
        q_sqrt: Var<'t>,
    ) -> Result<Self> {
        let tape = z.tape();
        let m = dims.inducing;
        let kzz = kernel::gram(z, z, log_variance);
        let mean_diag = kzz.diag().sum().scale(1.0 / m as f64);
        let lz = match kzz.add_diag(mean_diag.scale(JITTER)).cholesky() {
            Ok(l) => l,
            Err(_) => kzz.add_diag(mean_diag.scale(JITTER_RETRY)).cholesky()?,
        };
        let whitened_mean = lz.solve_lower(q_mu);
        let all = q_sqrt.chol_factor();
        let factors = (0..dims.output).map(|d| all.slice_rows(d * m, m)).collect();
        let projection = match mean_fn {
            MeanFn::Zero => None,
            MeanFn::Identity => {
                let mut p = Tensor::zeros(&[dims.input, dims.output]);
                for i in 0..dims.input.min(dims.output) {
                    p.set(i, i, 1.0);
                }
                Some(tape.constant(p))
            }
        };
        Ok(PreparedLayer {
            dims,
            mean_fn,
            z,
            log_variance,
            lz,
            whitened_mean,
            q_sqrt,
            factors,
            projection,
        })
    }

    /// Predictive `(mean, variance)`, both `B x D_out`.
    pub fn conditional(&self, h: Var<'t>) -> (Var<'t>, Var<'t>) {
        assert_eq!(h.cols(), self.dims.input, "layer input width");
        let kzx = kernel::gram(self.z, h, self.log_variance);
        let a = self.lz.solve_lower(kzx);
        let mut mean = a.t().matmul(self.whitened_mean);
        if let Some(p) = self.projection {
            mean = h.matmul(p) + mean;
        }
        // K_ZZ⁻¹ k_Zh, transposed to B x M.
        let p = self.lz.solve_lower_t(a).t();
        let prior = kernel::diag(h, self.log_variance) - a.square().sum_cols().t();
        let inflation: Vec<Var<'t>> = self
            .factors
            .iter()
            .map(|&l| p.matmul(l).square().sum_rows())
            .collect();
        let var = (concat(&inflation, 1) + prior).clamp_min(VARIANCE_FLOOR);
        (mean, var)
    }

    /// `Σ_d ½(tr(K⁻¹S_d) + m_dᵀK⁻¹m_d − M + log|K| − log|S_d|)`.
    pub fn kl(&self) -> Var<'t> {
        let m = self.dims.inducing;
        let d_out = self.dims.output;
        let trace = concat(
            &self
                .factors
                .iter()
                .map(|&l| self.lz.solve_lower(l).square().sum())
                .collect::<Vec<_>>(),
            0,
        )
        .sum();
        let mahalanobis = self.whitened_mean.square().sum();
        let logdet_k = self.lz.diag().log().sum().scale(2.0 * d_out as f64);
        // Diagonal of the raw storage is log diag(L_d) for every block.
        let logdet_s = concat(
            &(0..d_out)
                .map(|d| self.q_sqrt.slice_rows(d * m, m).diag())
                .collect::<Vec<_>>(),
            0,
        )
        .sum()
        .scale(2.0);
        (trace + mahalanobis + logdet_k - logdet_s)
            .offset(-((m * d_out) as f64))
            .scale(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error, Tape};
    use crate::params::ParamMap;
    use crate::rng::gaussian_sample;

    fn random_layer(dims: LayerDims, mean_fn: MeanFn, seed: u64) -> GpLayer {
        let mut rng = Rng::new(seed);
        let mut layer = GpLayer::new(dims, mean_fn, 1.0);
        layer.init_inducing(&mut rng);
        layer.q_mu = gaussian_sample(layer.q_mu.shape(), &mut rng);
        layer.q_sqrt = gaussian_sample(layer.q_sqrt.shape(), &mut rng).scale(0.3);
        layer.kernel_log_variance = Tensor::scalar(0.2);
        layer
    }

    #[test]
    fn zero_mean_gives_zero_prediction() {
        let dims = LayerDims {
            input: 2,
            output: 3,
            inducing: 4,
        };
        let mut layer = GpLayer::new(dims, MeanFn::Zero, 1.0);
        layer.init_inducing(&mut Rng::new(1));
        let h = gaussian_sample(&[5, 2], &mut Rng::new(2));
        let (mean, var) = layer.conditional(&h).unwrap();
        assert!(mean.data().iter().all(|&v| v == 0.0));
        assert!(var.data().iter().all(|&v| v >= VARIANCE_FLOOR));
    }

    #[test]
    fn single_inducing_point_closed_form() {
        let dims = LayerDims {
            input: 2,
            output: 1,
            inducing: 1,
        };
        let mut layer = GpLayer::new(dims, MeanFn::Zero, 1e-6);
        layer.inducing = Tensor::matrix(1, 2, vec![1.0, 0.0]);
        layer.q_mu = Tensor::scalar(2.0);
        let (mean, _) = layer
            .conditional(&Tensor::matrix(1, 2, vec![1.0, 0.0]))
            .unwrap();
        // k(h,Z)/k(Z,Z) = 1 before jitter; jitter shrinks it by 1/(1 + 1e-6).
        assert!((mean.item() - 2.0 / (1.0 + JITTER)).abs() < 1e-12);
        assert!((mean.item() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn prior_variance_recovered_when_q_equals_p() {
        let dims = LayerDims {
            input: 3,
            output: 2,
            inducing: 5,
        };
        let mut layer = random_layer(dims, MeanFn::Zero, 4);
        layer.q_mu = Tensor::zeros(&[5, 2]);
        let l = layer.jittered_kzz().cholesky().unwrap();
        for d in 0..2 {
            layer.set_q_chol(d, &l).unwrap();
        }
        let h = gaussian_sample(&[6, 3], &mut Rng::new(8));
        let (_, var) = layer.conditional(&h).unwrap();
        let prior = kernel::kernel_diag(&h, &layer.kernel());
        for b in 0..6 {
            for d in 0..2 {
                assert!((var.at(b, d) - prior[b]).abs() < 1e-8, "{} vs {}", var.at(b, d), prior[b]);
            }
        }
        assert!(layer.kl_to_prior().unwrap().abs() < 1e-8);
    }

    #[test]
    fn kl_closed_form_scalar() {
        // K_ZZ = [1], m = [1], S = [1]: ½(1 + 1 − 1 + 0 − 0) = 0.5 before jitter.
        let dims = LayerDims {
            input: 1,
            output: 1,
            inducing: 1,
        };
        let mut layer = GpLayer::new(dims, MeanFn::Zero, 1.0);
        layer.inducing = Tensor::scalar(1.0);
        layer.q_mu = Tensor::scalar(1.0);
        let kl = layer.kl_to_prior().unwrap();
        let k = 1.0 + JITTER;
        let exact = 0.5 * (1.0 / k + 1.0 / k - 1.0 + k.ln());
        assert!((kl - exact).abs() < 1e-14);
        assert!((kl - 0.5).abs() < 1e-5);
    }

    #[test]
    fn variance_bounded_by_prior_without_s() {
        let dims = LayerDims {
            input: 2,
            output: 1,
            inducing: 6,
        };
        let mut layer = random_layer(dims, MeanFn::Zero, 3);
        layer.q_sqrt = GpLayer::new(dims, MeanFn::Zero, 1e-30).q_sqrt;
        let h = gaussian_sample(&[20, 2], &mut Rng::new(1));
        let (_, var) = layer.conditional(&h).unwrap();
        let prior = kernel::kernel_diag(&h, &layer.kernel());
        for b in 0..20 {
            assert!(var.at(b, 0) <= prior[b] + 1e-10);
        }
    }

    #[test]
    fn identity_mean_projection() {
        let dims = LayerDims {
            input: 3,
            output: 2,
            inducing: 2,
        };
        let mut layer = GpLayer::new(dims, MeanFn::Identity, 1.0);
        layer.init_inducing(&mut Rng::new(0));
        let h = Tensor::from_rows(&[vec![0.5, -1.0, 9.0]]);
        let (mean, _) = layer.conditional(&h).unwrap();
        assert_eq!(mean.row(0), &[0.5, -1.0]);
        let wide = LayerDims {
            input: 1,
            output: 3,
            inducing: 2,
        };
        let mut layer = GpLayer::new(wide, MeanFn::Identity, 1.0);
        layer.init_inducing(&mut Rng::new(0));
        let (mean, _) = layer.conditional(&Tensor::scalar(0.25)).unwrap();
        assert_eq!(mean.row(0), &[0.25, 0.0, 0.0]);
    }

    #[test]
    fn sampling_is_deterministic_and_unbiased() {
        let dims = LayerDims {
            input: 2,
            output: 1,
            inducing: 3,
        };
        let layer = random_layer(dims, MeanFn::Identity, 6);
        let h = Tensor::matrix(1, 2, vec![0.3, -0.7]);
        let a = layer.sample_output(&h, &mut Rng::new(9)).unwrap();
        let b = layer.sample_output(&h, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);

        let (mean, var) = layer.conditional(&h).unwrap();
        let n = 100_000;
        let hs = Tensor::matrix(n, 2, h.data().repeat(n));
        let draws = layer.sample_output(&hs, &mut Rng::new(10)).unwrap();
        let avg = draws.sum() / n as f64;
        let tol = 3.0 * (var.item() / n as f64).sqrt();
        assert!((avg - mean.item()).abs() < tol, "{avg} vs {}", mean.item());
    }

    #[test]
    fn collapsed_variance_sample_stays_at_mean() {
        let dims = LayerDims {
            input: 2,
            output: 2,
            inducing: 3,
        };
        let mut layer = random_layer(dims, MeanFn::Zero, 2);
        layer.q_sqrt = GpLayer::new(dims, MeanFn::Zero, 1e-30).q_sqrt;
        // Inputs equal to inducing points collapse the prior term to the floor.
        let h = layer.inducing.clone();
        let (mean, var) = layer.conditional(&h).unwrap();
        assert!(var.data().iter().all(|&v| v < 1e-5));
        let s = layer.sample_output(&h, &mut Rng::new(1)).unwrap();
        for ((a, b), v) in s.data().iter().zip(mean.data()).zip(var.data()) {
            assert!((a - b).abs() <= 6.0 * v.sqrt());
        }
    }

    /// `E_q[log q(u) − log p(u)]` from `n` draws per output dimension.
    fn monte_carlo_kl(layer: &GpLayer, n: usize, rng: &mut Rng) -> f64 {
        let m = layer.dims.inducing;
        let lz = layer.jittered_kzz().cholesky().unwrap();
        let logdet_z: f64 = lz.diagonal().iter().map(|v| v.ln()).sum();
        let mut total = 0.0;
        for d in 0..layer.dims.output {
            let l = layer.q_chol(d);
            let logdet_q: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
            let mut acc = 0.0;
            for _ in 0..n {
                let eps = gaussian_sample(&[m, 1], rng);
                let mut u = l.matmul(&eps);
                for i in 0..m {
                    u.data_mut()[i] += layer.q_mu.at(i, d);
                }
                let w = lz.solve_lower(&u);
                let log_q = -0.5 * eps.data().iter().map(|e| e * e).sum::<f64>() - logdet_q;
                let log_p = -0.5 * w.data().iter().map(|e| e * e).sum::<f64>() - logdet_z;
                acc += log_q - log_p;
            }
            total += acc / n as f64;
        }
        total
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let dims = LayerDims {
            input: 3,
            output: 2,
            inducing: 4,
        };
        let layer = random_layer(dims, MeanFn::Zero, 17);
        let exact = layer.kl_to_prior().unwrap();
        let mc = monte_carlo_kl(&layer, 1_000_000, &mut Rng::new(18));
        assert!(exact >= 0.0);
        assert!((mc - exact).abs() < 0.01 * exact, "{mc} vs {exact}");
    }

    /// Frozen-input objective: sum(w1 ∘ mean) + sum(w2 ∘ var) + kl.
    fn objective(layer: &GpLayer, h: &Tensor, w: &Tensor, map: Option<&ParamMap>) -> f64 {
        let mut layer = layer.clone();
        if let Some(map) = map {
            use crate::params::Parameterized;
            struct Wrap<'a>(&'a mut GpLayer);
            impl Parameterized for Wrap<'_> {
                fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
                    self.0.visit("l", f)
                }
                fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
                    self.0.visit_mut("l", f)
                }
            }
            Wrap(&mut layer).load_param_map(map).unwrap();
        }
        let (mean, var) = layer.conditional(h).unwrap();
        let wm: f64 = mean.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let wv: f64 = var.data().iter().zip(w.data()).map(|(a, b)| a * b * b).sum();
        wm + wv + layer.kl_to_prior().unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = LayerDims {
            input: 2,
            output: 2,
            inducing: 4,
        };
        let layer = random_layer(dims, MeanFn::Identity, 21);
        let mut rng = Rng::new(22);
        let h = gaussian_sample(&[5, 2], &mut rng);
        let w = gaussian_sample(&[5, 2], &mut rng);

        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let prepared = layer.prepare("l", &mut binder).unwrap();
        let (mean, var) = prepared.conditional(tape.constant(h.clone()));
        let wv = tape.constant(w.clone());
        let out = (mean * wv).sum() + (var * wv * wv).sum() + prepared.kl();
        let grads = binder.collect(&tape.backward(out));

        let base = {
            let mut map = ParamMap::new();
            layer.visit("l", &mut |n, t| {
                map.insert(n.to_string(), t.clone());
            });
            map
        };
        for (name, analytic) in &grads {
            let numeric = finite_difference(
                |t| {
                    let mut map = base.clone();
                    map.insert(name.clone(), t.clone());
                    objective(&layer, &h, &w, Some(&map))
                },
                &base[name],
                1e-5,
            );
            let err = max_relative_error(analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
