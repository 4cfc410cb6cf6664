//! Few-shot splits, accuracy, repeated-run statistics, layer-wise
//! representation similarity and throughput measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{graph, EncoderState, ParamMap, PatchBatch};
use crate::error::{Error, Result};
use crate::mcft::view_patches;
use crate::pointcloud::{generate_dataset, PatchSet, PointCloud, SyntheticSpec};
use crate::scalar::Scalar;

/// Labeled clouds with a designated train/test partition.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// The first `train_per_class` instances of each class form the train
    /// partition, the next `test_per_class` the test partition.
    pub fn synthetic(spec: &SyntheticSpec, train_per_class: usize, test_per_class: usize) -> Result<Dataset> {
        let all = generate_dataset(spec, train_per_class + test_per_class)?;
        let per = train_per_class + test_per_class;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, c) in all.into_iter().enumerate() {
            if i % per < train_per_class {
                train.push(c);
            } else {
                test.push(c);
            }
        }
        Ok(Dataset {
            train,
            test,
            class_names: spec.class_catalog.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Protocol {
    /// Every class, tested on the full test partition.
    FullFewShot,
    /// `n_way` classes drawn per seed.
    NWayMShot { n_way: usize },
}

impl Protocol {
    pub fn describe(&self, m_shot: usize) -> String {
        match self {
            Protocol::FullFewShot => format!("full_few_shot/{m_shot}-shot"),
            Protocol::NWayMShot { n_way } => format!("{n_way}-way/{m_shot}-shot"),
        }
    }
}

/// Index sets of one few-shot episode. `support` and `pool` index the train
/// partition, `test` the test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub protocol: Protocol,
    pub m_shot: usize,
    /// Selected classes in label order; position = remapped label.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub pool: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

pub fn sample_split(dataset: &Dataset, protocol: Protocol, m_shot: usize, seed: u64) -> Result<FewShotSplit> {
    let c = dataset.num_classes();
    if m_shot == 0 {
        return Err(Error::Protocol("m_shot must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = match protocol {
        Protocol::FullFewShot => (0..c).collect(),
        Protocol::NWayMShot { n_way } => {
            if n_way == 0 || n_way > c {
                return Err(Error::Protocol(format!("cannot draw {n_way} of {c} classes")));
            }
            let mut picked = index::sample(&mut rng, c, n_way).into_vec();
            picked.sort_unstable();
            picked
        }
    };
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, cloud) in dataset.train.iter().enumerate() {
        if let Some(l) = cloud.label {
            by_class.entry(l).or_default().push(i);
        }
    }
    let mut support = Vec::new();
    let mut pool = Vec::new();
    for &class in &classes {
        let members = by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() < m_shot {
            return Err(Error::Protocol(format!(
                "class '{}' has {} train samples, {m_shot} needed",
                dataset.class_names.get(class).map(String::as_str).unwrap_or("?"),
                members.len()
            )));
        }
        let mut shuffled = members.to_vec();
        shuffled.shuffle(&mut rng);
        support.extend_from_slice(&shuffled[..m_shot]);
        pool.extend_from_slice(&shuffled[m_shot..]);
    }
    support.sort_unstable();
    pool.sort_unstable();
    let test = dataset
        .test
        .iter()
        .enumerate()
        .filter(|(_, t)| t.label.is_some_and(|l| classes.contains(&l)))
        .map(|(i, _)| i)
        .collect();
    Ok(FewShotSplit {
        protocol,
        m_shot,
        classes,
        support,
        pool,
        test,
        seed,
    })
}

/// Clouds of a split with labels remapped to positions in `classes`.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub support: Vec<PointCloud>,
    pub pool: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

impl FewShotSplit {
    pub fn materialize(&self, dataset: &Dataset) -> SplitData {
        let relabel = |c: &PointCloud| {
            let mut c = c.clone();
            c.label = c.label.and_then(|l| self.classes.iter().position(|&k| k == l));
            c
        };
        SplitData {
            support: self.support.iter().map(|&i| relabel(&dataset.train[i])).collect(),
            pool: self.pool.iter().map(|&i| relabel(&dataset.train[i])).collect(),
            test: self.test.iter().map(|&i| relabel(&dataset.test[i])).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    pub correct: usize,
    pub total: usize,
}

/// Scores predictions against labels over `num_classes` classes.
pub fn accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Accuracy> {
    if labels.is_empty() {
        return Err(Error::Protocol("empty evaluation set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::validation("one prediction per label required"));
    }
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= num_classes {
            return Err(Error::validation(format!("label {l} outside [0, {num_classes})")));
        }
        counts[l] += 1;
        hits[l] += usize::from(p == l);
    }
    let correct: usize = hits.iter().sum();
    Ok(Accuracy {
        overall: correct as f64 / labels.len() as f64,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
        correct,
        total: labels.len(),
    })
}

const EVAL_BATCH: usize = 64;

/// Argmax class of every cloud.
pub fn predict<T: Scalar>(state: &EncoderState<T>, head: &ParamMap<T>, clouds: &[PointCloud]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(EVAL_BATCH) {
        let sets = chunk
            .iter()
            .map(|c| view_patches(&state.config, c, None, 0))
            .collect::<Result<Vec<PatchSet>>>()?;
        let refs: Vec<&PatchSet> = sets.iter().collect();
        let batch = PatchBatch::new(&state.config, &refs)?;
        let z = graph::infer_batch(state, Some(head), &batch, false)?
            .logits
            .expect("head given");
        for row in z.rows() {
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            out.push(best.0);
        }
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(state: &EncoderState<T>, head: &ParamMap<T>, clouds: &[PointCloud]) -> Result<Accuracy> {
    if clouds.is_empty() {
        return Err(Error::Protocol("empty evaluation set".into()));
    }
    let labels = clouds
        .iter()
        .map(|c| c.label.ok_or_else(|| Error::validation(format!("{} has no label", c.id))))
        .collect::<Result<Vec<_>>>()?;
    let predictions = predict(state, head, clouds)?;
    accuracy(&predictions, &labels, state.config.num_classes)
}

/// Per-run accuracies with their mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub protocol: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub single_run: bool,
    /// `(seed, message)` of runs that failed.
    pub failures: Vec<(u64, String)>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RunSummary {
    pub fn new(protocol: impl Into<String>, seeds: Vec<u64>, accuracies: Vec<f64>, failures: Vec<(u64, String)>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        RunSummary {
            protocol: protocol.into(),
            single_run: accuracies.len() == 1,
            std: if accuracies.len() == 1 { 0.0 } else { std },
            mean,
            seeds,
            accuracies,
            failures,
        }
    }

    /// Whether the stored mean and std follow from the stored accuracies.
    pub fn is_consistent(&self) -> bool {
        let again = RunSummary::new(self.protocol.clone(), self.seeds.clone(), self.accuracies.clone(), vec![]);
        again.mean.to_bits() == self.mean.to_bits() && again.std.to_bits() == self.std.to_bits()
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    /// `mean±std` in percent.
    pub fn format_pct(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Runs `experiment` for seeds `base_seed..base_seed + num_runs`.
pub fn repeat_runs(
    protocol: &str,
    num_runs: usize,
    base_seed: u64,
    mut experiment: impl FnMut(u64) -> Result<f64>,
) -> Result<RunSummary> {
    if num_runs == 0 {
        return Err(Error::validation("num_runs must be >= 1"));
    }
    let mut seeds = Vec::with_capacity(num_runs);
    let mut accs = Vec::with_capacity(num_runs);
    let mut failures = Vec::new();
    for seed in base_seed..base_seed + num_runs as u64 {
        match experiment(seed) {
            Ok(acc) => {
                seeds.push(seed);
                accs.push(acc);
            }
            Err(e) => {
                log::error!("run with seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    Ok(RunSummary::new(protocol, seeds, accs, failures))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Class-token vector of each layer.
    Cls,
    /// Mean over all tokens of each layer.
    TokenMean,
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let d = (a.dot(a) * b.dot(b)).sqrt();
    if d == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (a.dot(b) / d).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between the layer outputs of two encoders over the
/// probe set, one value per layer.
pub fn layer_similarity<T: Scalar>(
    a: &EncoderState<T>,
    b: &EncoderState<T>,
    probes: &[PatchSet],
    mode: SimilarityMode,
) -> Result<Vec<f64>> {
    if a.config != b.config {
        let field = a.config.first_difference(&b.config).map(|f| f.0).unwrap_or("config");
        return Err(Error::Comparison(format!("encoders differ in {field}")));
    }
    if a.layer_mask != b.layer_mask {
        return Err(Error::Comparison("encoders have different active layers".into()));
    }
    if probes.is_empty() {
        return Err(Error::EmptyInput("no probe clouds".into()));
    }
    let layers = a.config.num_layers;
    let mut sums = vec![0.0; layers];
    for chunk in probes.chunks(EVAL_BATCH) {
        let refs: Vec<&PatchSet> = chunk.iter().collect();
        let batch = PatchBatch::new(&a.config, &refs)?;
        let ta = graph::infer_batch(a, None, &batch, true)?.trace.expect("captured");
        let tb = graph::infer_batch(b, None, &batch, true)?.trace.expect("captured");
        for (layer, sum) in sums.iter_mut().enumerate() {
            for s in 0..chunk.len() {
                let (xa, xb) = (ta.sample(layer, s), tb.sample(layer, s));
                let (va, vb) = match mode {
                    SimilarityMode::Cls => (xa.row(0).mapv(|v| v.as_f64()), xb.row(0).mapv(|v| v.as_f64())),
                    SimilarityMode::TokenMean => (
                        xa.mapv(|v| v.as_f64()).mean_axis(ndarray::Axis(0)).expect("non-empty"),
                        xb.mapv(|v| v.as_f64()).mean_axis(ndarray::Axis(0)).expect("non-empty"),
                    ),
                };
                *sum += cosine(&va, &vb);
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / probes.len() as f64).collect())
}

/// CSV with one row per layer and one column per series.
pub fn similarity_csv(series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("layer");
    for (name, _) in series {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let layers = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    for l in 0..layers {
        let _ = write!(out, "{}", l + 1);
        for (_, v) in series {
            match v.get(l) {
                Some(x) => {
                    let _ = write!(out, ",{x:.6}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Line plot of per-layer similarities as a standalone SVG document.
pub fn similarity_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let layers = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let lo = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(1.0f64, f64::min)
        .min(0.0);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (layers - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (1.0 - lo).max(1e-9);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD
    );
    for i in 0..layers {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            x(i),
            H - PAD + 16.0,
            i + 1
        );
    }
    for v in [lo, (lo + 1.0) / 2.0, 1.0] {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{v:.2}</text>",
            PAD - 6.0,
            y(v) + 4.0
        );
    }
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = values.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>",
            W - PAD - 90.0,
            PAD + 16.0 * k as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Frames per second of each trial and their median.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub batch_size: usize,
    pub trials: Vec<f64>,
    pub median: f64,
}

/// Fixed synthetic inputs for throughput runs.
pub fn benchmark_inputs(config: &crate::encoder::EncoderConfig, batch_size: usize) -> Result<Vec<PatchSet>> {
    let spec = SyntheticSpec {
        seed: 0xBE7C,
        ..Default::default()
    };
    let clouds = generate_dataset(&spec, batch_size.div_ceil(spec.class_catalog.len()))?;
    clouds
        .iter()
        .take(batch_size)
        .map(|c| view_patches(config, c, None, 0))
        .collect()
}

/// Forward throughput on fixed inputs: `warmup` untimed batches, then three
/// trials of `timed` batches each.
pub fn measure_throughput<T: Scalar>(
    state: &EncoderState<T>,
    head: Option<&ParamMap<T>>,
    batch_size: usize,
    warmup: usize,
    timed: usize,
) -> Result<Throughput> {
    if timed == 0 || batch_size == 0 {
        return Err(Error::validation("batch_size and timed iterations must be >= 1"));
    }
    let sets = benchmark_inputs(&state.config, batch_size)?;
    let refs: Vec<&PatchSet> = sets.iter().collect();
    let batch = PatchBatch::new(&state.config, &refs)?;
    for _ in 0..warmup {
        graph::infer_batch(state, head, &batch, false)?;
    }
    let mut trials = Vec::with_capacity(3);
    for _ in 0..3 {
        let t0 = Instant::now();
        for _ in 0..timed {
            std::hint::black_box(graph::infer_batch(state, head, &batch, false)?);
        }
        let secs = t0.elapsed().as_secs_f64().max(1e-9);
        trials.push((batch_size * timed) as f64 / secs);
    }
    let mut sorted = trials.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(Throughput {
        batch_size,
        median: sorted[1],
        trials,
    })
}

/// One accuracy row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub protocol: String,
    pub shots: usize,
    pub seed: u64,
    pub oa: f64,
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("method,protocol,shots,seed,oa\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.6}", r.method, r.protocol, r.shots, r.seed, r.oa);
    }
    out
}

/// Markdown table of `mean±std` accuracy (percent) per method and protocol.
pub fn markdown_summary(rows: &[ResultRow]) -> String {
    let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method.clone(), r.protocol.clone(), r.shots))
            .or_default()
            .push(r.oa);
    }
    let mut out = String::from("| Method | Protocol | Shots | Runs | OA (%) |\n|---|---|---|---|---|\n");
    for ((method, protocol, shots), accs) in groups {
        let (mean, std) = mean_std(&accs);
        let _ = writeln!(
            out,
            "| {method} | {protocol} | {shots} | {} | {:.2}±{:.2} |",
            accs.len(),
            100.0 * mean,
            100.0 * std
        );
    }
    out
}
