//! Feed-forward baseline with additive speaker codes:
//! `h^{ℓ+1} = φ(W^{ℓ+1}(h^ℓ + W_S^ℓ S) + b^{ℓ+1})`, linear output layer.
//!
//! Row-vector convention: activations are `B x D` and weights are
//! `D_in x D_out`. `W_S^ℓ S` for a one-hot `S` is row `k` of a `K x D_ℓ`
//! table, so it is implemented as a gather.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamMap, Parameterized};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnnArchitecture {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Layers `ℓ` (0 = input) whose value receives `W_S^ℓ S`; `None` means
    /// every hidden layer.
    #[serde(default)]
    pub speaker_layers: Option<Vec<usize>>,
    pub n_speakers: usize,
}

impl DnnArchitecture {
    pub fn injected(&self) -> Vec<usize> {
        let mut v = match &self.speaker_layers {
            Some(v) => v.clone(),
            None => (1..=self.hidden_dims.len()).collect(),
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Width of `h^ℓ`.
    fn width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_dims[layer - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.n_speakers == 0 {
            return Err(Error::InvalidConfig("n_speakers must be positive".into()));
        }
        if let Some(&l) = self.injected().iter().find(|&&l| l > self.hidden_dims.len()) {
            return Err(Error::InvalidConfig(format!(
                "speaker layer {l} exceeds the {} hidden layers",
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DnnModel {
    pub arch: DnnArchitecture,
    /// `(W^ℓ, b^ℓ)` for `ℓ = 1..=L+1`.
    pub dense: Vec<(Tensor, Tensor)>,
    /// `(ℓ, W_S^ℓ)` with `W_S^ℓ` of shape `K x D_ℓ`.
    pub speaker: Vec<(usize, Tensor)>,
}

impl DnnModel {
    /// All weights zero.
    pub fn zeros(arch: DnnArchitecture) -> Result<Self> {
        arch.validate()?;
        let mut widths = vec![arch.input_dim];
        widths.extend(&arch.hidden_dims);
        widths.push(arch.output_dim);
        let dense = widths
            .windows(2)
            .map(|w| (Tensor::zeros(&[w[0], w[1]]), Tensor::zeros(&[1, w[1]])))
            .collect();
        let speaker = arch
            .injected()
            .into_iter()
            .map(|l| (l, Tensor::zeros(&[arch.n_speakers, arch.width(l)])))
            .collect();
        Ok(DnnModel {
            arch,
            dense,
            speaker,
        })
    }

    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)`; the
    /// speaker tables use fan-in `K`.
    pub fn init(arch: DnnArchitecture, rng: &mut Rng) -> Result<Self> {
        let mut model = DnnModel::zeros(arch)?;
        let mut fill = |t: &mut Tensor, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = bound * (2.0 * rng.uniform() - 1.0);
            }
        };
        for (w, b) in &mut model.dense {
            let fan_in = w.rows();
            fill(w, fan_in);
            fill(b, fan_in);
        }
        let k = model.arch.n_speakers;
        for (_, ws) in &mut model.speaker {
            fill(ws, k);
        }
        Ok(model)
    }

    fn build<'t>(&self, binder: &mut Binder<'t>, x: &Tensor, speakers: &[usize]) -> Result<Var<'t>> {
        let k = self.arch.n_speakers;
        if let Some(&s) = speakers.iter().find(|&&s| s >= k) {
            return Err(Error::IndexOutOfRange { index: s, len: k });
        }
        if x.cols() != self.arch.input_dim || x.rows() != speakers.len() {
            return Err(Error::ShapeMismatch(format!(
                "inputs {:?} with {} speaker ids for input width {}",
                x.shape(),
                speakers.len(),
                self.arch.input_dim
            )));
        }
        let tape = binder.tape();
        let mut h = tape.constant(x.clone());
        let last = self.dense.len();
        for (i, (w, b)) in self.dense.iter().enumerate() {
            if let Some((l, ws)) = self.speaker.iter().find(|(l, _)| *l == i) {
                let table = binder.bind(&format!("speaker.{l}.weight"), ws);
                h = h + table.gather_rows(speakers);
            }
            let w = binder.bind(&format!("dense.{}.weight", i + 1), w);
            let b = binder.bind(&format!("dense.{}.bias", i + 1), b);
            h = h.matmul(w) + b;
            if i + 1 < last && self.arch.activation == Activation::Relu {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor, speakers: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let mut binder = Binder::with_frozen(&tape, &[String::new()]);
        let out = self.build(&mut binder, x, speakers)?;
        let v = out.value();
        Ok((*v).clone())
    }

    /// Mean squared error over every output entry, and its gradient.
    pub fn mse_and_grad(
        &self,
        x: &Tensor,
        y: &Tensor,
        speakers: &[usize],
        frozen: &[String],
    ) -> Result<(f64, ParamMap)> {
        let tape = Tape::new();
        let mut binder = Binder::with_frozen(&tape, frozen);
        let out = self.build(&mut binder, x, speakers)?;
        if y.shape() != out.shape().as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "targets {:?} for predictions {:?}",
                y.shape(),
                out.shape()
            )));
        }
        let loss = (out - tape.constant(y.clone()))
            .square()
            .sum()
            .scale(1.0 / y.len() as f64);
        let grads = binder.collect(&tape.backward(loss));
        Ok((loss.value().item(), grads))
    }
}

impl Parameterized for DnnModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (w, b)) in self.dense.iter().enumerate() {
            f(&format!("dense.{}.bias", i + 1), b);
            f(&format!("dense.{}.weight", i + 1), w);
        }
        for (l, ws) in &self.speaker {
            f(&format!("speaker.{l}.weight"), ws);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (w, b)) in self.dense.iter_mut().enumerate() {
            f(&format!("dense.{}.bias", i + 1), b);
            f(&format!("dense.{}.weight", i + 1), w);
        }
        for (l, ws) in &mut self.speaker {
            f(&format!("speaker.{l}.weight"), ws);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error};
    use crate::rng::gaussian_sample;

    fn arch(hidden: Vec<usize>, speaker_layers: Option<Vec<usize>>) -> DnnArchitecture {
        DnnArchitecture {
            input_dim: 3,
            output_dim: 2,
            hidden_dims: hidden,
            activation: Activation::Relu,
            speaker_layers,
            n_speakers: 4,
        }
    }

    #[test]
    fn zero_speaker_weights_ignore_speaker() {
        let mut m = DnnModel::init(arch(vec![5, 5], None), &mut Rng::new(1)).unwrap();
        for (_, ws) in &mut m.speaker {
            *ws = Tensor::zeros(ws.shape());
        }
        let x = gaussian_sample(&[1, 3], &mut Rng::new(2));
        let a = m.forward(&x, &[0]).unwrap();
        for k in 1..4 {
            assert_eq!(m.forward(&x, &[k]).unwrap(), a);
        }
    }

    #[test]
    fn identity_network() {
        let a = DnnArchitecture {
            input_dim: 2,
            output_dim: 2,
            hidden_dims: vec![2],
            activation: Activation::Identity,
            speaker_layers: None,
            n_speakers: 1,
        };
        let mut m = DnnModel::zeros(a).unwrap();
        m.dense[0].0 = Tensor::eye(2);
        m.dense[1].0 = Tensor::eye(2);
        let x = Tensor::from_rows(&[vec![0.25, -3.0]]);
        assert_eq!(m.forward(&x, &[0]).unwrap(), x);
    }

    #[test]
    fn single_unit_hand_evaluation() {
        let a = DnnArchitecture {
            input_dim: 1,
            output_dim: 1,
            hidden_dims: vec![1],
            activation: Activation::Relu,
            speaker_layers: Some(vec![0]),
            n_speakers: 2,
        };
        let mut m = DnnModel::zeros(a).unwrap();
        m.dense[0] = (Tensor::scalar(1.0), Tensor::scalar(-1.0));
        m.dense[1] = (Tensor::scalar(1.0), Tensor::scalar(0.0));
        m.speaker[0].1 = Tensor::matrix(2, 1, vec![0.7, 0.0]);
        let out = m.forward(&Tensor::scalar(0.5), &[0]).unwrap().item();
        assert!((out - 0.2).abs() < 1e-15);
        assert_eq!(m.forward(&Tensor::scalar(0.5), &[1]).unwrap().item(), 0.0);
    }

    #[test]
    fn relabeling_speakers_and_tables_is_invisible() {
        let m = DnnModel::init(arch(vec![4], Some(vec![0, 1])), &mut Rng::new(3)).unwrap();
        let perm = [2, 0, 3, 1];
        let mut p = m.clone();
        for (_, ws) in &mut p.speaker {
            let old = ws.clone();
            for (k, &pk) in perm.iter().enumerate() {
                for j in 0..old.cols() {
                    ws.set(pk, j, old.at(k, j));
                }
            }
        }
        let x = gaussian_sample(&[4, 3], &mut Rng::new(4));
        let spk = [0, 1, 2, 3];
        let spk_p: Vec<usize> = spk.iter().map(|&k| perm[k]).collect();
        assert_eq!(m.forward(&x, &spk).unwrap(), p.forward(&x, &spk_p).unwrap());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let m = DnnModel::init(arch(vec![6, 5], Some(vec![0, 2])), &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(6);
        let x = gaussian_sample(&[7, 3], &mut rng);
        let y = gaussian_sample(&[7, 2], &mut rng);
        let spk = [0, 1, 2, 3, 0, 1, 2];
        let (_, grads) = m.mse_and_grad(&x, &y, &spk, &[]).unwrap();
        let base = m.param_map();
        assert_eq!(grads.len(), base.len());
        for (name, g) in &grads {
            let numeric = finite_difference(
                |t| {
                    let mut map = base.clone();
                    map.insert(name.clone(), t.clone());
                    let mut q = m.clone();
                    q.load_param_map(&map).unwrap();
                    q.mse_and_grad(&x, &y, &spk, &[]).unwrap().0
                },
                &base[name],
                1e-5,
            );
            let err = max_relative_error(g, &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn rejects_bad_speaker_layers() {
        assert!(DnnModel::zeros(arch(vec![3], Some(vec![2]))).is_err());
        let m = DnnModel::zeros(arch(vec![3], None)).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 3]), &[4]).is_err());
    }
}
