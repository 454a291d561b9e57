//! Evaluation: per-observation likelihood scores, PRD curves, time–feature
//! correlation and duration statistics.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, EventSequence};
use crate::error::{Error, Result};
use crate::exec::map_slice;
use crate::model::Model;
use crate::nn::DropoutPlan;
use crate::training::loglik_terms;

/// Per-observation log-likelihood split into its temporal and feature parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub temporal: f64,
    pub feature: f64,
}

/// Summed temporal and feature log-likelihood of one standardized sequence
/// under the model, plus its event count.
pub fn sequence_scores(model: &Model, seq: &EventSequence) -> Result<(f64, f64, usize)> {
    let tape = Tape::new(&model.params);
    let plan = DropoutPlan::none();
    let s = model.encode(&tape, seq, &plan)?;
    let (terms, _) = loglik_terms(model, &tape, seq, s, &plan)?;
    Ok((terms.temporal().scalar(), terms.feature().scalar(), terms.events()))
}

/// Scores divided by each sequence's event count, then averaged over
/// sequences. Sequences without events carry no per-observation score and
/// are skipped. `ds` must already be in the model's standardized space.
pub fn eval_scores(model: &Model, ds: &Dataset) -> Result<Scores> {
    if ds.event_count() == 0 {
        return Err(Error::EmptyDataset);
    }
    let per = map_slice(&ds.sequences, |_, s| sequence_scores(model, s));
    let (mut t, mut f, mut n) = (0.0, 0.0, 0usize);
    for r in per {
        let (ts, fs, k) = r?;
        if k > 0 {
            t += ts / k as f64;
            f += fs / k as f64;
            n += 1;
        }
    }
    Ok(Scores { temporal: t / n as f64, feature: f / n as f64 })
}

/// Fixed-length description of a sequence: event count, mean inter-arrival
/// time (gaps measured from 0), and the mean observed value per dimension.
pub fn summary_vector(seq: &EventSequence) -> Vec<f64> {
    let n = seq.len();
    let gap = if n == 0 { seq.t_max() } else { seq.last_time() / n as f64 };
    let mut v = vec![n as f64, gap];
    for j in 0..seq.dim() {
        let (mut s, mut c) = (0.0, 0usize);
        for e in seq.events() {
            if e.mask[j] {
                s += e.x[j];
                c += 1;
            }
        }
        v.push(if c == 0 { 0.0 } else { s / c as f64 });
    }
    v
}

pub fn summary_vectors(ds: &Dataset) -> Vec<Vec<f64>> {
    ds.sequences.iter().map(summary_vector).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrdCurve {
    /// `(precision, recall)` per ratio in the sweep.
    pub points: Vec<(f64, f64)>,
}

impl PrdCurve {
    pub fn max_precision(&self) -> f64 {
        self.points.iter().map(|p| p.0).fold(0.0, f64::max)
    }

    pub fn max_recall(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    /// Best `min(precision, recall)` over the sweep.
    pub fn balanced(&self) -> f64 {
        self.points.iter().map(|p| p.0.min(p.1)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrdOptions {
    pub clusters: usize,
    pub restarts: usize,
    pub ratios: usize,
    pub seed: u64,
}

impl Default for PrdOptions {
    fn default() -> Self {
        PrdOptions { clusters: 20, restarts: 5, ratios: 51, seed: 0 }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm from k-means++ seeds; the run with least inertia wins.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let idx = if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                d.iter().position(|&w| {
                    r -= w;
                    r <= 0.0
                })
                .unwrap_or(points.len() - 1)
            } else {
                rng.random_range(0..points.len())
            };
            centers.push(points[idx].clone());
        }
        let mut assign = vec![0usize; points.len()];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let c = (0..k)
                    .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                    .unwrap_or(0);
                if c != assign[i] {
                    assign[i] = c;
                    changed = true;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if !members.is_empty() {
                    for (d, v) in center.iter_mut().enumerate() {
                        *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, assign));
        }
    }
    best.expect("at least one restart").1
}

/// Precision–recall curve between two sets of fixed-length samples.
pub fn prd_curve(real: &[Vec<f64>], fake: &[Vec<f64>], opts: &PrdOptions) -> Result<PrdCurve> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = real.len() + fake.len();
    if opts.clusters == 0 || opts.clusters > n {
        return Err(Error::InvalidArgument(format!("{} clusters for {n} samples", opts.clusters)));
    }
    // (values, source) sorted so the clustering cannot depend on argument order
    let mut union: Vec<(Vec<f64>, bool)> = real
        .iter()
        .map(|v| (v.clone(), true))
        .chain(fake.iter().map(|v| (v.clone(), false)))
        .collect();
    union.sort_by(|a, b| {
        a.0.iter().zip(&b.0).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let width = union[0].0.len();
    let mut z: Vec<Vec<f64>> = union.iter().map(|u| u.0.clone()).collect();
    for d in 0..width {
        let mean = z.iter().map(|v| v[d]).sum::<f64>() / n as f64;
        let sd = (z.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for v in &mut z {
            v[d] = if sd > 1e-12 { (v[d] - mean) / sd } else { 0.0 };
        }
    }
    let assign = kmeans(&z, opts.clusters, opts.restarts, opts.seed);
    let mut p = vec![0.0; opts.clusters];
    let mut q = vec![0.0; opts.clusters];
    for (u, &a) in union.iter().zip(&assign) {
        if u.1 {
            p[a] += 1.0 / real.len() as f64;
        } else {
            q[a] += 1.0 / fake.len() as f64;
        }
    }
    let points = (0..opts.ratios)
        .map(|i| {
            let e = if opts.ratios == 1 { 0.0 } else { -2.0 + 4.0 * i as f64 / (opts.ratios - 1) as f64 };
            let lam = 10f64.powf(e);
            let prec: f64 = p.iter().zip(&q).map(|(pi, qi)| (lam * pi).min(*qi)).sum();
            let rec: f64 = p.iter().zip(&q).map(|(pi, qi)| pi.min(qi / lam)).sum();
            (prec.clamp(0.0, 1.0), rec.clamp(0.0, 1.0))
        })
        .collect();
    Ok(PrdCurve { points })
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 1e-24 * n || sbb <= 1e-24 * n {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Mean over dimensions of `|corr(t, x_j)|`, pooling every observed cell of
/// every sequence. A dimension without spread contributes 0.
pub fn tfc_score(ds: &Dataset) -> Result<f64> {
    if ds.event_count() < 2 {
        return Err(Error::TooFewEvents { needed: 2, found: ds.event_count() });
    }
    let dim = ds.dim();
    let mut total = 0.0;
    for j in 0..dim {
        let (mut ts, mut xs) = (Vec::new(), Vec::new());
        for e in ds.sequences.iter().flat_map(|s| s.events()) {
            if e.mask[j] {
                ts.push(e.t);
                xs.push(e.x[j]);
            }
        }
        match (ts.len() >= 2).then(|| pearson(&ts, &xs)).flatten() {
            Some(r) => total += r.abs(),
            None => log::warn!("dimension {j} has no spread; it contributes 0 to the correlation score"),
        }
    }
    Ok((total / dim as f64).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
}

/// `t_N − t_1` for every sequence with at least one event.
pub fn durations(ds: &Dataset) -> Vec<f64> {
    ds.sequences.iter().filter(|s| !s.is_empty()).map(|s| s.duration()).collect()
}

pub fn histogram(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    let (lo, hi) = (edges[0], edges[bins]);
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let b = if hi > lo { (((v - lo) / (hi - lo)) * bins as f64) as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

/// `bins` equal-width bins spanning `[lo, hi]`.
pub fn edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

pub fn duration_stats_with_edges(ds: &Dataset, edges: Vec<f64>) -> DurationStats {
    let d = durations(ds);
    let n = d.len().max(1) as f64;
    let mean = d.iter().sum::<f64>() / n;
    let variance = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    DurationStats { counts: histogram(&d, &edges), edges, mean, variance }
}

pub fn duration_stats(ds: &Dataset, bins: usize) -> DurationStats {
    let d = durations(ds);
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if d.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    duration_stats_with_edges(ds, edges(lo, hi, bins.max(1)))
}

/// Total-variation distance between two count histograms on shared bins.
pub fn tv_distance(p: &[usize], q: &[usize]) -> f64 {
    let sp = p.iter().sum::<usize>().max(1) as f64;
    let sq = q.iter().sum::<usize>().max(1) as f64;
    0.5 * p.iter().zip(q).map(|(a, b)| (*a as f64 / sp - *b as f64 / sq).abs()).sum::<f64>()
}

/// Duration histograms of two datasets on common edges spanning both, and
/// their total-variation distance.
pub fn compare_durations(a: &Dataset, b: &Dataset, bins: usize) -> (DurationStats, DurationStats, f64) {
    let all: Vec<f64> = durations(a).into_iter().chain(durations(b)).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = if all.is_empty() { edges(0.0, 0.0, bins) } else { edges(lo, hi, bins) };
    let sa = duration_stats_with_edges(a, e.clone());
    let sb = duration_stats_with_edges(b, e);
    let tv = tv_distance(&sa.counts, &sb.counts);
    (sa, sb, tv)
}

pub const DURATION_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub temporal: f64,
    pub feature: f64,
    pub prd: Option<PrdCurve>,
    pub tfc: f64,
    pub tfc_synth: Option<f64>,
    pub durations: DurationStats,
    pub durations_synth: Option<DurationStats>,
    pub duration_tv: Option<f64>,
}

/// Full report for raw `data` and optional raw `synth` under `model`.
pub fn evaluate(model: &Model, data: &Dataset, synth: Option<&Dataset>) -> Result<EvalReport> {
    let std = data.apply_standardization(&model.standardization)?;
    let scores = eval_scores(model, &std)?;
    let tfc = tfc_score(data)?;
    let (prd, tfc_synth, durations, durations_synth, duration_tv) = match synth {
        Some(s) => {
            let opts = PrdOptions { clusters: PrdOptions::default().clusters.min(data.len() + s.len()), ..PrdOptions::default() };
            let prd = prd_curve(&summary_vectors(data), &summary_vectors(s), &opts)?;
            let (a, b, tv) = compare_durations(data, s, DURATION_BINS);
            let tfc_synth = match tfc_score(s) {
                Ok(v) => Some(v),
                Err(Error::TooFewEvents { found, .. }) => {
                    log::warn!("synthetic set has {found} events; correlation score skipped");
                    None
                }
                Err(e) => return Err(e),
            };
            (Some(prd), tfc_synth, a, Some(b), Some(tv))
        }
        None => (None, None, duration_stats(data, DURATION_BINS), None, None),
    };
    Ok(EvalReport {
        temporal: scores.temporal,
        feature: scores.feature,
        prd,
        tfc,
        tfc_synth,
        durations,
        durations_synth,
        duration_tv,
    })
}

impl EvalReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// `precision,recall` rows.
    pub fn write_prd_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "precision,recall")?;
        if let Some(c) = &self.prd {
            for (p, r) in &c.points {
                writeln!(w, "{p},{r}")?;
            }
        }
        Ok(())
    }

    /// `lo,hi,real,synth` rows.
    pub fn write_duration_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "lo,hi,real,synth")?;
        let d = &self.durations;
        for i in 0..d.counts.len() {
            let s = self.durations_synth.as_ref().map_or(String::new(), |s| s.counts[i].to_string());
            writeln!(w, "{},{},{},{}", d.edges[i], d.edges[i + 1], d.counts[i], s)?;
        }
        Ok(())
    }
}
