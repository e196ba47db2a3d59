//! Synthetic multi-speaker corpora.
//!
//! Each speaker `k` has a true embedding `e_k` drawn around one of a few
//! group centres. Utterances are phone sequences; a frame's input is the
//! phone's linguistic vector plus a smooth per-utterance trajectory, and its
//! output is a fixed random two-layer tanh network of `[x; position; e_k]`
//! plus noise. Phone durations depend on the phone and on a speaker rate
//! derived from `e_k`.
//!
//! Acoustic outputs follow the layout `[c_0 .. c_{D−3}, log f0, voiced]`.
//! Duration corpora have one record per phone with the duration in ms as
//! the only output.
//!
//! Frames are stored raw; normalization statistics live in the metadata and
//! are applied by [`Corpus::inputs`] and [`Corpus::outputs`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::TrainData;

/// Milliseconds per acoustic frame.
pub const FRAME_MS: f64 = 5.0;
/// Number of frame-position features.
pub const POSITION_DIM: usize = 4;
const PHONE_INVENTORY: usize = 24;
const GENERATOR_HIDDEN: usize = 32;
const MEAN_FRAMES_PER_PHONE: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Acoustic,
    Duration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Situation {
    #[default]
    Balanced,
    Imbalanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Unused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub task: Task,
    pub n_speakers: usize,
    pub n_groups: usize,
    /// Dimension `Q*` of the true speaker embeddings.
    pub true_latent_dim: usize,
    pub group_separation: f64,
    pub within_group_std: f64,
    pub n_utterances: usize,
    /// The first `n_parallel` utterances share text across speakers.
    pub n_parallel: usize,
    pub frames_per_utterance: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub noise_std: f64,
    pub situation: Situation,
    /// Held-out parallel utterances per speaker.
    pub test_utterances: usize,
    /// Training utterances per target speaker in the imbalanced situation.
    pub target_budget: usize,
    /// Explicit target speakers; by default one central and one peripheral
    /// speaker per group.
    pub targets: Option<Vec<usize>>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            task: Task::Acoustic,
            n_speakers: 10,
            n_groups: 2,
            true_latent_dim: 2,
            group_separation: 6.0,
            within_group_std: 1.0,
            n_utterances: 20,
            n_parallel: 10,
            frames_per_utterance: 50,
            input_dim: 12,
            output_dim: 8,
            noise_std: 0.05,
            situation: Situation::Balanced,
            test_utterances: 2,
            target_budget: 5,
            targets: None,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_speakers == 0 || self.n_groups == 0 || self.n_groups > self.n_speakers {
            return bad("need 1 <= n_groups <= n_speakers".into());
        }
        if self.true_latent_dim == 0 || self.input_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_utterances == 0 || self.n_parallel > self.n_utterances {
            return bad("need 0 < n_parallel <= n_utterances".into());
        }
        if self.frames_per_utterance < 1 {
            return bad("frames_per_utterance must be positive".into());
        }
        match self.task {
            Task::Acoustic if self.output_dim < 4 => {
                return bad("acoustic corpora need output_dim >= 4".into())
            }
            Task::Duration if self.output_dim != 1 => {
                return bad("duration corpora have output_dim 1".into())
            }
            _ => {}
        }
        if !(self.noise_std >= 0.0) || !(self.within_group_std >= 0.0) {
            return bad("standard deviations must be nonnegative".into());
        }
        if self.target_budget == 0 {
            return bad("target_budget must be at least 1".into());
        }
        if let Some(t) = &self.targets {
            if let Some(&k) = t.iter().find(|&&k| k >= self.n_speakers) {
                return bad(format!("target speaker {k} does not exist"));
            }
        }
        Ok(())
    }

    pub fn model_input_dim(&self) -> usize {
        POSITION_DIM + self.input_dim
    }
}

/// One frame (acoustic) or one phone (duration).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub speaker_id: usize,
    pub utterance_id: usize,
    pub pos: [f64; POSITION_DIM],
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    /// Per model-input dimension (positions first).
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub spec: GeneratorSpec,
    pub seed: u64,
    /// Group label per speaker.
    pub groups: Vec<usize>,
    pub true_embeddings: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    /// `similar` or `dissimilar`, parallel to `targets`.
    pub target_roles: Vec<String>,
    /// Utterance id to split.
    pub splits: BTreeMap<usize, Split>,
    pub norm_stats: Option<NormStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub frames: Vec<Frame>,
}

fn utterance_id(spec: &GeneratorSpec, speaker: usize, u: usize) -> usize {
    speaker * spec.n_utterances + u
}

/// Group index of each speaker: contiguous blocks of near-equal size.
fn group_of(spec: &GeneratorSpec, k: usize) -> usize {
    k * spec.n_groups / spec.n_speakers
}

fn group_centre(spec: &GeneratorSpec, g: usize) -> Vec<f64> {
    let mut c = vec![0.0; spec.true_latent_dim];
    let r = spec.group_separation / 2.0;
    if spec.n_groups == 1 {
        return c;
    }
    let angle = 2.0 * std::f64::consts::PI * g as f64 / spec.n_groups as f64;
    c[0] = r * angle.cos();
    if spec.true_latent_dim > 1 {
        c[1] = r * angle.sin();
    }
    c
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroid(points: &[&Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; points[0].len()];
    for p in points {
        for (ci, pi) in c.iter_mut().zip(p.iter()) {
            *ci += pi / points.len() as f64;
        }
    }
    c
}

/// Per group, the member nearest to and farthest from the group centroid.
pub fn central_and_peripheral(groups: &[usize], embeddings: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    (0..n_groups)
        .filter_map(|g| {
            let members: Vec<usize> = (0..groups.len()).filter(|&k| groups[k] == g).collect();
            if members.is_empty() {
                return None;
            }
            let c = centroid(&members.iter().map(|&k| &embeddings[k]).collect::<Vec<_>>());
            let d = |k: &usize| dist(&embeddings[*k], &c);
            let by = |a: &usize, b: &usize| d(a).total_cmp(&d(b)).then(a.cmp(b));
            let near = *members.iter().min_by(|a, b| by(a, b))?;
            let far = *members.iter().max_by(|a, b| by(a, b))?;
            Some((near, far))
        })
        .collect()
}

/// Random two-layer tanh network, drawn once per corpus.
struct Generator {
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
    rate: Vec<f64>,
}

impl Generator {
    fn draw(spec: &GeneratorSpec, rng: &mut Rng) -> Self {
        let fan_in = spec.input_dim + POSITION_DIM + spec.true_latent_dim;
        let w1 = Tensor::matrix(
            fan_in,
            GENERATOR_HIDDEN,
            rng.normal_vec(fan_in * GENERATOR_HIDDEN)
                .into_iter()
                .map(|v| 2.0 * v / (fan_in as f64).sqrt())
                .collect(),
        );
        let b1 = rng.normal_vec(GENERATOR_HIDDEN).iter().map(|v| 0.5 * v).collect();
        let out = spec.output_dim;
        let w2 = Tensor::matrix(
            GENERATOR_HIDDEN,
            out,
            rng.normal_vec(GENERATOR_HIDDEN * out)
                .into_iter()
                .map(|v| v / (GENERATOR_HIDDEN as f64).sqrt())
                .collect(),
        );
        let b2 = rng.normal_vec(out).iter().map(|v| 0.1 * v).collect();
        let rate = rng.normal_vec(spec.true_latent_dim);
        Generator {
            w1,
            b1,
            w2,
            b2,
            rate,
        }
    }

    fn eval(&self, input: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..GENERATOR_HIDDEN)
            .map(|j| {
                let s: f64 = input.iter().enumerate().map(|(i, v)| v * self.w1.at(i, j)).sum();
                (s + self.b1[j]).tanh()
            })
            .collect();
        (0..self.w2.cols())
            .map(|d| {
                hidden.iter().enumerate().map(|(j, h)| h * self.w2.at(j, d)).sum::<f64>() + self.b2[d]
            })
            .collect()
    }

    /// Log speaking-rate offset of a speaker.
    fn speaker_rate(&self, e: &[f64]) -> f64 {
        let s: f64 = e.iter().zip(&self.rate).map(|(a, b)| a * b).sum();
        0.3 * (s / (e.len() as f64).sqrt()).tanh()
    }
}

/// Text of one utterance: phone ids and a smooth input trajectory.
struct Text {
    phones: Vec<usize>,
    /// Per input dim: (amplitude, cycles per utterance, phase).
    waves: Vec<(f64, f64, f64)>,
}

impl Text {
    fn draw(spec: &GeneratorSpec, rng: &mut Rng) -> Self {
        let n = ((spec.frames_per_utterance as f64 / MEAN_FRAMES_PER_PHONE).round() as usize).max(1);
        let phones = (0..n).map(|_| rng.below(PHONE_INVENTORY)).collect();
        let waves = (0..spec.input_dim)
            .map(|_| {
                (
                    0.3 * rng.uniform(),
                    0.5 + 1.5 * rng.uniform(),
                    2.0 * std::f64::consts::PI * rng.uniform(),
                )
            })
            .collect();
        Text { phones, waves }
    }

    fn input(&self, phone_feats: &[Vec<f64>], phone: usize, t: f64) -> Vec<f64> {
        phone_feats[phone]
            .iter()
            .zip(&self.waves)
            .map(|(f, (a, c, p))| f + a * (2.0 * std::f64::consts::PI * c * t + p).sin())
            .collect()
    }
}

/// Split `total` frames in proportion to `weights`, each phone getting at
/// least one frame (largest-remainder rounding).
fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let n = weights.len();
    if total <= n {
        let mut v = vec![0; n];
        for slot in v.iter_mut().take(total) {
            *slot = 1;
        }
        return v;
    }
    let spare = (total - n) as f64;
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| spare * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| 1 + e.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in &order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Deterministic corpus from `spec` and `seed`; splits are assigned and
/// normalization statistics computed.
pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let k_total = spec.n_speakers;
    let mut emb_rng = Rng::stream(seed, 1);
    let groups: Vec<usize> = (0..k_total).map(|k| group_of(spec, k)).collect();
    let true_embeddings: Vec<Vec<f64>> = (0..k_total)
        .map(|k| {
            group_centre(spec, groups[k])
                .into_iter()
                .map(|c| c + spec.within_group_std * emb_rng.normal())
                .collect()
        })
        .collect();
    let generator = Generator::draw(spec, &mut Rng::stream(seed, 2));
    let mut inv_rng = Rng::stream(seed, 4);
    let phone_feats: Vec<Vec<f64>> = (0..PHONE_INVENTORY)
        .map(|_| (0..spec.input_dim).map(|_| inv_rng.uniform()).collect())
        .collect();
    let phone_log_dur: Vec<f64> = (0..PHONE_INVENTORY)
        .map(|_| MEAN_FRAMES_PER_PHONE.ln() + 0.4 * inv_rng.normal())
        .collect();

    let (targets, target_roles) = match &spec.targets {
        Some(t) => (t.clone(), vec!["target".to_string(); t.len()]),
        None => {
            let mut t = Vec::new();
            let mut r = Vec::new();
            for (near, far) in central_and_peripheral(&groups, &true_embeddings) {
                t.push(near);
                r.push("similar".to_string());
                if far != near {
                    t.push(far);
                    r.push("dissimilar".to_string());
                }
            }
            (t, r)
        }
    };

    let mut noise = Rng::stream(seed, 3);
    let mut frames = Vec::new();
    for k in 0..k_total {
        let e = &true_embeddings[k];
        let rate = generator.speaker_rate(e);
        for u in 0..spec.n_utterances {
            let mut text_rng = if u < spec.n_parallel {
                Rng::stream(seed, 1000 + u as u64)
            } else {
                Rng::stream(seed, 1_000_000 + utterance_id(spec, k, u) as u64)
            };
            let text = Text::draw(spec, &mut text_rng);
            let n_ph = text.phones.len();
            let durations_ms: Vec<f64> = text
                .phones
                .iter()
                .map(|&p| FRAME_MS * (phone_log_dur[p] + rate + 0.1 * noise.normal()).exp())
                .collect();
            let uid = utterance_id(spec, k, u);
            match spec.task {
                Task::Duration => {
                    for (j, &p) in text.phones.iter().enumerate() {
                        let t = (j as f64 + 0.5) / n_ph as f64;
                        let x = text.input(&phone_feats, p, t);
                        frames.push(Frame {
                            speaker_id: k,
                            utterance_id: uid,
                            pos: [t, 1.0 - t, 0.5, 0.5],
                            x,
                            y: vec![durations_ms[j]],
                        });
                    }
                }
                Task::Acoustic => {
                    let counts = allocate(spec.frames_per_utterance, &durations_ms);
                    let total = spec.frames_per_utterance as f64;
                    let mut t_index = 0usize;
                    for (j, &p) in text.phones.iter().enumerate() {
                        for i in 0..counts[j] {
                            let t = (t_index as f64 + 0.5) / total;
                            let s = (i as f64 + 0.5) / counts[j] as f64;
                            let pos = [t, 1.0 - t, s, 1.0 - s];
                            let x = text.input(&phone_feats, p, t);
                            let mut input = x.clone();
                            input.extend_from_slice(&pos);
                            input.extend_from_slice(e);
                            let g = generator.eval(&input);
                            let d = spec.output_dim;
                            let mut y = Vec::with_capacity(d);
                            for gd in &g[..d - 2] {
                                y.push(gd + spec.noise_std * noise.normal());
                            }
                            y.push(150f64.ln() + 0.25 * g[d - 2] + spec.noise_std * noise.normal());
                            y.push(if g[d - 1] + 0.8 > 0.0 { 1.0 } else { 0.0 });
                            frames.push(Frame {
                                speaker_id: k,
                                utterance_id: uid,
                                pos,
                                x,
                                y,
                            });
                            t_index += 1;
                        }
                    }
                }
            }
        }
    }
    let mut corpus = Corpus {
        meta: CorpusMeta {
            spec: spec.clone(),
            seed,
            groups,
            true_embeddings,
            targets,
            target_roles,
            splits: BTreeMap::new(),
            norm_stats: None,
        },
        frames,
    };
    make_splits(&mut corpus)?;
    normalize(&mut corpus)?;
    Ok(corpus)
}

/// Assign every utterance to train, test or unused according to the
/// situation in the corpus spec.
pub fn make_splits(corpus: &mut Corpus) -> Result<()> {
    let spec = &corpus.meta.spec;
    let n_test = spec.test_utterances;
    if n_test > spec.n_parallel {
        return Err(Error::InsufficientData(format!(
            "{n_test} test utterances requested but only {} are parallel",
            spec.n_parallel
        )));
    }
    let test: Vec<usize> = (spec.n_parallel - n_test..spec.n_parallel).collect();
    let non_parallel: Vec<usize> = (spec.n_parallel..spec.n_utterances).collect();
    if spec.situation == Situation::Imbalanced && spec.target_budget > non_parallel.len() {
        return Err(Error::InsufficientData(format!(
            "target budget {} exceeds the {} non-parallel utterances",
            spec.target_budget,
            non_parallel.len()
        )));
    }
    if spec.n_utterances == n_test {
        return Err(Error::InsufficientData(
            "no utterances left for training".into(),
        ));
    }
    let mut splits = BTreeMap::new();
    for k in 0..spec.n_speakers {
        let is_target = corpus.meta.targets.contains(&k);
        for u in 0..spec.n_utterances {
            let held_out = test.contains(&u);
            let split = match spec.situation {
                Situation::Balanced => {
                    if held_out {
                        Split::Test
                    } else {
                        Split::Train
                    }
                }
                Situation::Imbalanced if is_target => {
                    if held_out {
                        Split::Test
                    } else if non_parallel[..spec.target_budget].contains(&u) {
                        Split::Train
                    } else {
                        Split::Unused
                    }
                }
                Situation::Imbalanced => {
                    if held_out {
                        Split::Unused
                    } else {
                        Split::Train
                    }
                }
            };
            splits.insert(utterance_id(spec, k, u), split);
        }
    }
    corpus.meta.splits = splits;
    Ok(())
}

/// Compute normalization statistics from the training split.
pub fn normalize(corpus: &mut Corpus) -> Result<()> {
    corpus.meta.norm_stats = Some(compute_norm_stats(corpus)?);
    Ok(())
}

pub fn compute_norm_stats(corpus: &Corpus) -> Result<NormStats> {
    let train: Vec<&Frame> = corpus
        .frames
        .iter()
        .filter(|f| corpus.split_of(f) == Split::Train)
        .collect();
    if train.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    let dx = corpus.meta.spec.model_input_dim();
    let dy = corpus.meta.spec.output_dim;
    let mut x_min = vec![f64::INFINITY; dx];
    let mut x_max = vec![f64::NEG_INFINITY; dx];
    let mut y_mean = vec![0.0; dy];
    for f in &train {
        for (i, v) in raw_input(f).into_iter().enumerate() {
            x_min[i] = x_min[i].min(v);
            x_max[i] = x_max[i].max(v);
        }
        for (d, v) in f.y.iter().enumerate() {
            y_mean[d] += v;
        }
    }
    let n = train.len() as f64;
    for m in &mut y_mean {
        *m /= n;
    }
    let mut y_std = vec![0.0; dy];
    for f in &train {
        for (d, v) in f.y.iter().enumerate() {
            y_std[d] += (v - y_mean[d]).powi(2);
        }
    }
    for s in &mut y_std {
        *s = (*s / n).sqrt();
    }
    Ok(NormStats {
        x_min,
        x_max,
        y_mean,
        y_std,
    })
}

/// Positions followed by linguistic inputs.
fn raw_input(f: &Frame) -> Vec<f64> {
    let mut v = f.pos.to_vec();
    v.extend_from_slice(&f.x);
    v
}

impl NormStats {
    pub fn normalize_x(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = (self.x_min[i], self.x_max[i]);
                if hi > lo {
                    0.01 + 0.98 * (v - lo) / (hi - lo)
                } else {
                    0.5
                }
            })
            .collect()
    }

    fn std_floor(&self, d: usize) -> f64 {
        self.y_std[d].max(1e-8)
    }

    pub fn normalize_y(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(d, &v)| (v - self.y_mean[d]) / self.std_floor(d))
            .collect()
    }

    pub fn denormalize_y(&self, norm: &[f64]) -> Vec<f64> {
        norm.iter()
            .enumerate()
            .map(|(d, &v)| v * self.std_floor(d) + self.y_mean[d])
            .collect()
    }

    /// Row-wise [`NormStats::denormalize_y`].
    pub fn denormalize_rows(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for i in 0..t.rows() {
            let row = self.denormalize_y(t.row(i));
            out.data_mut()[i * t.cols()..(i + 1) * t.cols()].copy_from_slice(&row);
        }
        out
    }
}

impl Corpus {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.meta.spec
    }

    pub fn stats(&self) -> Result<&NormStats> {
        self.meta
            .norm_stats
            .as_ref()
            .ok_or_else(|| Error::Format("corpus has no normalization statistics".into()))
    }

    pub fn split_of(&self, f: &Frame) -> Split {
        self.meta
            .splits
            .get(&f.utterance_id)
            .copied()
            .unwrap_or(Split::Unused)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| self.split_of(&self.frames[i]) == split)
            .collect()
    }

    /// Normalized model inputs of the given frames.
    pub fn inputs(&self, idx: &[usize]) -> Result<Tensor> {
        let stats = self.stats()?;
        let d = self.spec().model_input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(stats.normalize_x(&raw_input(&self.frames[i])));
        }
        Ok(Tensor::matrix(idx.len(), d, data))
    }

    /// Normalized outputs of the given frames.
    pub fn outputs(&self, idx: &[usize]) -> Result<Tensor> {
        let stats = self.stats()?;
        let d = self.spec().output_dim;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(stats.normalize_y(&self.frames[i].y));
        }
        Ok(Tensor::matrix(idx.len(), d, data))
    }

    /// Raw outputs of the given frames.
    pub fn raw_outputs(&self, idx: &[usize]) -> Tensor {
        let d = self.spec().output_dim;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.frames[i].y);
        }
        Tensor::matrix(idx.len(), d, data)
    }

    pub fn speakers(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.frames[i].speaker_id).collect()
    }

    /// Normalized training set; in the imbalanced situation target-speaker
    /// frames are replicated `oversample_factor` times.
    pub fn train_data(&self, oversample_factor: usize) -> Result<TrainData> {
        let idx = self.indices(Split::Train);
        if idx.is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        let mut data = TrainData::new(self.inputs(&idx)?, self.outputs(&idx)?, self.speakers(&idx));
        if self.spec().situation == Situation::Imbalanced {
            for (r, &i) in data.repeats.iter_mut().zip(&idx) {
                if self.meta.targets.contains(&self.frames[i].speaker_id) {
                    *r = oversample_factor;
                }
            }
        }
        Ok(data)
    }

    /// Speakers scored on the test split.
    pub fn test_speakers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .indices(Split::Test)
            .into_iter()
            .map(|i| self.frames[i].speaker_id)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Stable identifier derived from the generating spec and seed.
    pub fn id(&self) -> String {
        let s = self.spec();
        let task = match s.task {
            Task::Acoustic => "acoustic",
            Task::Duration => "duration",
        };
        let situation = match s.situation {
            Situation::Balanced => "balanced",
            Situation::Imbalanced => "imbalanced",
        };
        format!("{task}-{situation}-k{}-seed{}", s.n_speakers, self.meta.seed)
    }

    fn csv_header(&self) -> String {
        let mut cols = vec!["speaker_id".to_string(), "utterance_id".to_string()];
        cols.extend((0..POSITION_DIM).map(|i| format!("pos{i}")));
        cols.extend((0..self.spec().input_dim).map(|i| format!("x{i}")));
        cols.extend((0..self.spec().output_dim).map(|i| format!("y{i}")));
        cols.join(",")
    }

    pub fn frames_csv(&self) -> String {
        let mut s = self.csv_header();
        s.push('\n');
        for f in &self.frames {
            write!(s, "{},{}", f.speaker_id, f.utterance_id).expect("string write");
            for v in f.pos.iter().chain(&f.x).chain(&f.y) {
                write!(s, ",{v:?}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn meta_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.meta)?;
        s.push('\n');
        Ok(s)
    }

    /// Write `meta.json` and `frames.csv` into `dir`, creating it.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = dir.join("meta.json");
        std::fs::write(&meta, self.meta_json()?).map_err(|e| Error::io(&meta, e))?;
        let frames = dir.join("frames.csv");
        std::fs::write(&frames, self.frames_csv()).map_err(|e| Error::io(&frames, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CorpusMeta = serde_json::from_str(&meta_text)?;
        meta.spec.validate()?;
        let frames_path = dir.join("frames.csv");
        let text = std::fs::read_to_string(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
        Corpus::from_parts(meta, &text)
    }

    fn from_parts(meta: CorpusMeta, csv: &str) -> Result<Self> {
        let mut corpus = Corpus {
            meta,
            frames: Vec::new(),
        };
        let mut lines = csv.lines();
        if lines.next() != Some(corpus.csv_header().as_str()) {
            return Err(Error::Format("frames.csv header does not match meta.json".into()));
        }
        let dx = corpus.spec().input_dim;
        let dy = corpus.spec().output_dim;
        for (n, line) in lines.enumerate() {
            let bad = |what: &str| Error::Format(format!("frames.csv line {}: {what}", n + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + POSITION_DIM + dx + dy {
                return Err(bad("wrong number of fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            let nums = fields[2..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<Result<Vec<f64>>>()?;
            let frame = Frame {
                speaker_id: int(fields[0])?,
                utterance_id: int(fields[1])?,
                pos: nums[..POSITION_DIM].try_into().expect("length checked"),
                x: nums[POSITION_DIM..POSITION_DIM + dx].to_vec(),
                y: nums[POSITION_DIM + dx..].to_vec(),
            };
            if frame.speaker_id >= corpus.spec().n_speakers {
                return Err(bad("speaker id out of range"));
            }
            corpus.frames.push(frame);
        }
        Ok(corpus)
    }
}

/// Mean silhouette of `points` under `labels` (Euclidean distance).
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; n_labels];
        let mut counts = vec![0usize; n_labels];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(&points[i], &points[j]);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..n_labels)
            .filter(|&l| l != own && counts[l] > 0)
            .map(|l| sums[l] / counts[l] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}
