//! Objective metrics, evaluation reports, latent export and tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Model;
use crate::data::{Corpus, Situation, Split, Task};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// `10 / ln 10`.
pub const MCD_SCALE: f64 = 4.342_944_819_032_518;

/// Mean over frames of `(10/ln 10)·√(2 Σ_{d≥1} (c_d − ĉ_d)²)`.
pub fn mcd(reference: &Tensor, predicted: &Tensor) -> Result<f64> {
    if reference.shape() != predicted.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mel-cepstra {:?} vs {:?}",
            reference.shape(),
            predicted.shape()
        )));
    }
    let (n, c) = reference.dims2();
    if c < 2 {
        return Err(Error::ShapeMismatch("MCD needs at least 2 coefficients".into()));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n)
        .map(|i| {
            let s: f64 = reference.row(i)[1..]
                .iter()
                .zip(&predicted.row(i)[1..])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            MCD_SCALE * (2.0 * s).sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F0Error {
    pub cents: f64,
    /// Frames voiced in both sequences.
    pub frames: usize,
}

impl F0Error {
    /// True when no frame was voiced in both, in which case `cents` is 0.
    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }
}

/// RMSE of `1200·log₂(f / f̂)` over frames where `voiced` is set.
pub fn f0_rmse_cents(reference: &[f64], predicted: &[f64], voiced: &[bool]) -> Result<F0Error> {
    if reference.len() != predicted.len() || reference.len() != voiced.len() {
        return Err(Error::ShapeMismatch(format!(
            "f0 sequences of lengths {}, {} and mask {}",
            reference.len(),
            predicted.len(),
            voiced.len()
        )));
    }
    let mut sum = 0.0;
    let mut frames = 0;
    for (i, ((&f, &g), &v)) in reference.iter().zip(predicted).zip(voiced).enumerate() {
        if !v {
            continue;
        }
        for value in [f, g] {
            if !(value > 0.0) {
                return Err(Error::NonPositiveF0 { frame: i, value });
            }
        }
        let e = 1200.0 * (f / g).log2();
        sum += e * e;
        frames += 1;
    }
    if frames == 0 {
        log::warn!("no frame is voiced in both sequences; F0 error reported as 0");
        return Ok(F0Error { cents: 0.0, frames });
    }
    Ok(F0Error {
        cents: (sum / frames as f64).sqrt(),
        frames,
    })
}

pub fn dur_rmse(reference: &[f64], predicted: &[f64]) -> Result<f64> {
    rmse(reference, predicted)
}

fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "sequences of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / a.len() as f64).sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mcd_db: Option<f64>,
    pub f0_rmse_cent: Option<f64>,
    pub dur_rmse_ms: Option<f64>,
    /// RMSE per output dimension in raw units.
    pub rmse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMetrics {
    pub speaker_id: usize,
    pub frames: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Set when no frame was voiced in both reference and prediction.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub f0_empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub corpus: String,
    pub split: Split,
    pub situation: Situation,
    /// Free-form setting label (feed layers, latent dimension, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<String>,
    pub per_speaker: Vec<SpeakerMetrics>,
    pub aggregate: Metrics,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: Report = serde_json::from_str(&text)?;
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .per_speaker
            .iter()
            .map(|s| &s.metrics)
            .chain(std::iter::once(&self.aggregate));
        for m in all {
            let values = [m.mcd_db, m.f0_rmse_cent, m.dur_rmse_ms]
                .into_iter()
                .flatten()
                .chain(m.rmse.iter().copied());
            for v in values {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Format(format!("metric value {v} in report")));
                }
            }
        }
        Ok(())
    }
}

fn weighted(values: &[(Option<f64>, usize)]) -> Option<f64> {
    let present: Vec<(f64, usize)> = values.iter().filter_map(|&(v, n)| v.map(|v| (v, n))).collect();
    let total: usize = present.iter().map(|p| p.1).sum();
    if present.is_empty() || total == 0 {
        return None;
    }
    Some(present.iter().map(|&(v, n)| v * n as f64).sum::<f64>() / total as f64)
}

fn column(t: &Tensor, d: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.at(i, d)).collect()
}

fn speaker_metrics(task: Task, reference: &Tensor, predicted: &Tensor) -> Result<(Metrics, bool)> {
    let dy = reference.cols();
    let rmse_per_dim = (0..dy)
        .map(|d| rmse(&column(reference, d), &column(predicted, d)))
        .collect::<Result<Vec<_>>>()?;
    match task {
        Task::Duration => Ok((
            Metrics {
                dur_rmse_ms: Some(dur_rmse(&column(reference, 0), &column(predicted, 0))?),
                rmse: rmse_per_dim,
                ..Metrics::default()
            },
            false,
        )),
        Task::Acoustic => {
            let n = reference.rows();
            let cep = |t: &Tensor| {
                let mut data = Vec::with_capacity(n * (dy - 2));
                for i in 0..n {
                    data.extend_from_slice(&t.row(i)[..dy - 2]);
                }
                Tensor::matrix(n, dy - 2, data)
            };
            let hz = |t: &Tensor| column(t, dy - 2).into_iter().map(f64::exp).collect::<Vec<_>>();
            let voiced: Vec<bool> = (0..n)
                .map(|i| reference.at(i, dy - 1) >= 0.5 && predicted.at(i, dy - 1) >= 0.5)
                .collect();
            let f0 = f0_rmse_cents(&hz(reference), &hz(predicted), &voiced)?;
            Ok((
                Metrics {
                    mcd_db: Some(mcd(&cep(reference), &cep(predicted))?),
                    f0_rmse_cent: Some(f0.cents),
                    rmse: rmse_per_dim,
                    ..Metrics::default()
                },
                f0.is_empty(),
            ))
        }
    }
}

/// Score `model` on `split` of `corpus`, in raw output units.
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split, model_id: &str) -> Result<Report> {
    let stats = corpus.stats()?;
    evaluate_with(corpus, split, model_id, |_, x, spk| {
        Ok(stats.denormalize_rows(&model.predict(x, spk)?))
    })
}

/// Score an arbitrary predictor returning outputs in raw units. The predictor
/// receives the frame indices, the normalized inputs and the speaker ids.
pub fn evaluate_with(
    corpus: &Corpus,
    split: Split,
    model_id: &str,
    predict: impl Fn(&[usize], &Tensor, &[usize]) -> Result<Tensor> + Sync,
) -> Result<Report> {
    let idx = corpus.indices(split);
    let mut speakers: Vec<usize> = corpus.speakers(&idx);
    speakers.sort_unstable();
    speakers.dedup();
    let task = corpus.spec().task;
    let work = idx.len() * 4096;
    let per_speaker = parallel::map_indexed(speakers.len(), work, |s| {
        let k = speakers[s];
        let rows: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| corpus.frames[i].speaker_id == k)
            .collect();
        let x = corpus.inputs(&rows)?;
        let pred = predict(&rows, &x, &corpus.speakers(&rows))?;
        let reference = corpus.raw_outputs(&rows);
        if pred.shape() != reference.shape() {
            return Err(Error::ShapeMismatch(format!(
                "predictions {:?} for references {:?}",
                pred.shape(),
                reference.shape()
            )));
        }
        let (metrics, f0_empty) = speaker_metrics(task, &reference, &pred)?;
        Ok(SpeakerMetrics {
            speaker_id: k,
            frames: rows.len(),
            metrics,
            f0_empty,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let dy = per_speaker.first().map_or(0, |s| s.metrics.rmse.len());
    let dims: Vec<Vec<(Option<f64>, usize)>> = (0..dy)
        .map(|d| per_speaker.iter().map(|s| (Some(s.metrics.rmse[d]), s.frames)).collect())
        .collect();
    let pick = |f: fn(&Metrics) -> Option<f64>| {
        weighted(
            &per_speaker
                .iter()
                .map(|s| (f(&s.metrics), s.frames))
                .collect::<Vec<_>>(),
        )
    };
    let aggregate = Metrics {
        mcd_db: pick(|m| m.mcd_db),
        f0_rmse_cent: pick(|m| m.f0_rmse_cent),
        dur_rmse_ms: pick(|m| m.dur_rmse_ms),
        rmse: dims.iter().map(|d| weighted(d).unwrap_or(0.0)).collect(),
    };
    Ok(Report {
        model: model_id.to_string(),
        corpus: corpus.id(),
        split,
        situation: corpus.spec().situation,
        setting: None,
        per_speaker,
        aggregate,
        provenance: serde_json::Value::Null,
    })
}

/// Format with three significant digits.
pub fn format_sig3(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.2}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (2 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // Rounding may carry into a new digit (9.995 -> 10.00).
    let carried = s.trim_start_matches('-').split('.').next().map_or(0, str::len) as i32;
    if carried > magnitude.max(0) + 1 && decimals > 0 {
        format!("{v:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Metric {
    Mcd,
    F0,
    Dur,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Mcd => "MCD",
            Metric::F0 => "F0",
            Metric::Dur => "DUR",
        }
    }

    fn get(self, m: &Metrics) -> Option<f64> {
        match self {
            Metric::Mcd => m.mcd_db,
            Metric::F0 => m.f0_rmse_cent,
            Metric::Dur => m.dur_rmse_ms,
        }
    }

    fn format(self, v: f64) -> String {
        match self {
            Metric::Mcd => format_sig3(v),
            Metric::F0 => format!("{v:.0}"),
            Metric::Dur => format!("{v:.1}"),
        }
    }
}

fn situation_label(s: Situation) -> &'static str {
    match s {
        Situation::Balanced => "balanced",
        Situation::Imbalanced => "imbalanced",
    }
}

/// Markdown table: one row per model (with its setting), one column per
/// situation and metric; the lowest formatted value of each column is bold.
pub fn render_table(reports: &[Report]) -> String {
    let row_label = |r: &Report| match &r.setting {
        Some(s) => format!("{} ({s})", r.model),
        None => r.model.clone(),
    };
    let mut rows: Vec<String> = Vec::new();
    let mut situations: Vec<Situation> = Vec::new();
    for r in reports {
        let l = row_label(r);
        if !rows.contains(&l) {
            rows.push(l);
        }
        if !situations.contains(&r.situation) {
            situations.push(r.situation);
        }
    }
    let mut columns: Vec<(Situation, Metric)> = Vec::new();
    for &s in &situations {
        for m in [Metric::Mcd, Metric::F0, Metric::Dur] {
            if reports.iter().any(|r| r.situation == s && m.get(&r.aggregate).is_some()) {
                columns.push((s, m));
            }
        }
    }
    let cell = |row: &str, (s, m): (Situation, Metric)| {
        reports
            .iter()
            .find(|r| row_label(r) == row && r.situation == s)
            .and_then(|r| m.get(&r.aggregate))
            .map(|v| m.format(v))
    };
    let best: Vec<Option<f64>> = columns
        .iter()
        .map(|&c| {
            rows.iter()
                .filter_map(|r| cell(r, c))
                .filter_map(|s| s.parse::<f64>().ok())
                .reduce(f64::min)
        })
        .collect();

    let mut out = String::from("| Model |");
    for (s, m) in &columns {
        write!(out, " {} {} |", situation_label(*s), m.label()).expect("string write");
    }
    out.push_str("\n|---|");
    for _ in &columns {
        out.push_str("---:|");
    }
    out.push('\n');
    for row in &rows {
        write!(out, "| {row} |").expect("string write");
        for (c, b) in columns.iter().zip(&best) {
            match cell(row, *c) {
                Some(s) if s.parse::<f64>().ok() == *b => {
                    write!(out, " **{s}** |").expect("string write")
                }
                Some(s) => write!(out, " {s} |").expect("string write"),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Learned latent means projected to two dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoint {
    pub speaker_id: usize,
    pub group: usize,
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
}

/// First two latent dimensions of every speaker (zero-padded when `Q = 1`).
pub fn latent_points(model: &Model, groups: &[usize]) -> Result<Vec<LatentPoint>> {
    let Model::Dgp(m) = model else {
        return Err(Error::WrongModelKind("latent export needs a dgplvm model".into()));
    };
    let Some(lat) = &m.speaker_latent else {
        return Err(Error::WrongModelKind(format!(
            "latent export needs a dgplvm model, found {}",
            model.kind_name()
        )));
    };
    let sigma = lat.sigma();
    let q = lat.mu.cols();
    let two = |t: &Tensor, k: usize| [t.at(k, 0), if q > 1 { t.at(k, 1) } else { 0.0 }];
    Ok((0..lat.mu.rows())
        .map(|k| LatentPoint {
            speaker_id: k,
            group: groups.get(k).copied().unwrap_or(0),
            mu: two(&lat.mu, k),
            sigma: two(&sigma, k),
        })
        .collect())
}

pub fn latents_csv(points: &[LatentPoint]) -> String {
    let mut s = String::from("speaker_id,group,mu0,mu1,sigma0,sigma1\n");
    for p in points {
        writeln!(
            s,
            "{},{},{:?},{:?},{:?},{:?}",
            p.speaker_id, p.group, p.mu[0], p.mu[1], p.sigma[0], p.sigma[1]
        )
        .expect("string write");
    }
    s
}

const SVG_SIZE: f64 = 400.0;
const SVG_MARGIN: f64 = 40.0;
const GROUP_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Scatter plot of the latent means, one labelled marker per speaker.
pub fn latents_svg(points: &[LatentPoint]) -> String {
    let centre = SVG_SIZE / 2.0;
    let extent = points
        .iter()
        .flat_map(|p| p.mu.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let scale = if extent > 0.0 {
        (centre - SVG_MARGIN) / extent
    } else {
        1.0
    };
    let mut s = String::new();
    writeln!(
        s,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{SVG_SIZE}\" height=\"{SVG_SIZE}\" viewBox=\"0 0 {SVG_SIZE} {SVG_SIZE}\">"
    )
    .expect("string write");
    writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").expect("string write");
    writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{centre}\" x2=\"{e}\" y2=\"{centre}\" stroke=\"#cccccc\"/>\n<line x1=\"{centre}\" y1=\"{m}\" x2=\"{centre}\" y2=\"{e}\" stroke=\"#cccccc\"/>",
        m = SVG_MARGIN / 2.0,
        e = SVG_SIZE - SVG_MARGIN / 2.0
    )
    .expect("string write");
    for p in points {
        let cx = centre + scale * p.mu[0];
        let cy = centre - scale * p.mu[1];
        let color = GROUP_COLORS[p.group % GROUP_COLORS.len()];
        writeln!(
            s,
            "<circle cx=\"{cx:.3}\" cy=\"{cy:.3}\" r=\"5\" fill=\"{color}\"/>\n<text x=\"{tx:.3}\" y=\"{ty:.3}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>",
            p.speaker_id,
            tx = cx + 7.0,
            ty = cy - 7.0
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

/// Write the latent CSV and SVG for a latent-mode model.
pub fn export_latents(
    model: &Model,
    groups: &[usize],
    out_csv: impl AsRef<Path>,
    out_svg: impl AsRef<Path>,
) -> Result<Vec<LatentPoint>> {
    let points = latent_points(model, groups)?;
    let (csv, svg) = (out_csv.as_ref(), out_svg.as_ref());
    std::fs::write(csv, latents_csv(&points)).map_err(|e| Error::io(csv, e))?;
    std::fs::write(svg, latents_svg(&points)).map_err(|e| Error::io(svg, e))?;
    Ok(points)
}

/// Agreement between learned latents and the generator's groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecovery {
    /// Best-permutation accuracy of k-means labels against true groups.
    pub accuracy: f64,
    /// Mean distance of "similar" targets to their group's learned centroid.
    pub central_distance: f64,
    /// Mean distance of "dissimilar" targets to their group's learned centroid.
    pub peripheral_distance: f64,
}

impl LatentRecovery {
    pub fn peripheral_farther(&self) -> bool {
        self.peripheral_distance > self.central_distance
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means seeded with farthest-point initialization from row 0.
pub fn kmeans(points: &Tensor, k: usize, iterations: usize) -> Vec<usize> {
    let n = points.rows();
    let mut centres: Vec<Vec<f64>> = vec![points.row(0).to_vec()];
    while centres.len() < k.min(n) {
        let next = (0..n)
            .max_by(|&a, &b| {
                let da = centres.iter().map(|c| sq_dist(points.row(a), c)).fold(f64::INFINITY, f64::min);
                let db = centres.iter().map(|c| sq_dist(points.row(b), c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("nonempty");
        centres.push(points.row(next).to_vec());
    }
    let mut labels = vec![0; n];
    for _ in 0..iterations {
        let new: Vec<usize> = (0..n)
            .map(|i| {
                (0..centres.len())
                    .min_by(|&a, &b| {
                        sq_dist(points.row(i), &centres[a])
                            .total_cmp(&sq_dist(points.row(i), &centres[b]))
                            .then(a.cmp(&b))
                    })
                    .expect("nonempty")
            })
            .collect();
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| new[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in centre.iter_mut().enumerate() {
                *v = members.iter().map(|&i| points.at(i, d)).sum::<f64>() / members.len() as f64;
            }
        }
        if new == labels {
            break;
        }
        labels = new;
    }
    labels
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Score learned means `mu` (`K x Q`) against true groups and target roles.
pub fn score_latents(mu: &Tensor, groups: &[usize], targets: &[usize], roles: &[String]) -> LatentRecovery {
    let n_groups = groups.iter().max().map_or(1, |g| g + 1);
    let labels = kmeans(mu, n_groups, 100);
    let accuracy = permutations(n_groups)
        .iter()
        .map(|p| {
            labels.iter().zip(groups).filter(|(l, g)| p[**l] == **g).count() as f64 / groups.len() as f64
        })
        .fold(0.0, f64::max);
    let centroid = |g: usize| {
        let members: Vec<usize> = (0..groups.len()).filter(|&k| groups[k] == g).collect();
        (0..mu.cols())
            .map(|d| members.iter().map(|&k| mu.at(k, d)).sum::<f64>() / members.len() as f64)
            .collect::<Vec<_>>()
    };
    let mean_dist = |role: &str| {
        let ds: Vec<f64> = targets
            .iter()
            .zip(roles)
            .filter(|(_, r)| r.as_str() == role)
            .map(|(&k, _)| sq_dist(mu.row(k), &centroid(groups[k])).sqrt())
            .collect();
        if ds.is_empty() {
            0.0
        } else {
            ds.iter().sum::<f64>() / ds.len() as f64
        }
    };
    LatentRecovery {
        accuracy,
        central_distance: mean_dist("similar"),
        peripheral_distance: mean_dist("dissimilar"),
    }
}
