//! Evaluation: referee-based phoneme match accuracy, viseme/phoneme
//! confusion matrices, Hungarian alignment, cluster coverage and CSV
//! exports of bank centers and frame features.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterBank};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::trainer::{Batch, TrainerState};

/// Minimum clean accuracy (percent) for a referee to be trusted.
pub const REFEREE_GATE: f64 = 99.0;

/// Nearest-class-mean phoneme classifier used as a frozen referee.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceClassifier {
    means: Option<Vec<Option<Vec<f64>>>>,
    clean_accuracy: f64,
}

impl ReferenceClassifier {
    pub fn untrained() -> Self {
        Self {
            means: None,
            clean_accuracy: 0.0,
        }
    }

    /// Class means of `features`; classes absent from `labels` are never
    /// predicted.
    pub fn fit(features: ArrayView2<f64>, labels: &[usize], classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let d = features.ncols();
        let mut sums = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (row, &l) in features.rows().into_iter().zip(labels) {
            if l >= classes {
                return Err(Error::Shape(format!("label {l} outside {classes} classes")));
            }
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(row) {
                *s += v;
            }
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        let mut referee = Self {
            means: Some(means),
            clean_accuracy: 0.0,
        };
        referee.clean_accuracy = referee.accuracy(features, labels)?;
        Ok(referee)
    }

    pub fn is_trained(&self) -> bool {
        self.means.is_some()
    }

    /// Accuracy in percent on the data it was fitted on.
    pub fn clean_accuracy(&self) -> f64 {
        self.clean_accuracy
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<usize>> {
        let means = self
            .means
            .as_ref()
            .ok_or_else(|| Error::State("referee classifier has not been fitted".into()))?;
        let d = means.iter().flatten().next().map(Vec::len).unwrap_or(0);
        if features.ncols() != d {
            return Err(Error::Shape(format!("features have {} columns, referee expects {d}", features.ncols())));
        }
        Ok(features
            .rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                let mut best = (usize::MAX, f64::INFINITY);
                for (k, m) in means.iter().enumerate() {
                    if let Some(m) = m {
                        let dist = clustering::squared_distance(m, &row);
                        if dist < best.1 {
                            best = (k, dist);
                        }
                    }
                }
                best.0
            })
            .collect())
    }

    pub fn accuracy(&self, features: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        Ok(percent(pred.iter().zip(labels).filter(|(p, l)| p == l).count(), labels.len()))
    }
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Percentage of rows on which the referee gives the same label to `a` and
/// `b`. No gate is applied.
pub fn agreement(referee: &ReferenceClassifier, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let pa = referee.predict(a)?;
    let pb = referee.predict(b)?;
    Ok(percent(pa.iter().zip(&pb).filter(|(x, y)| x == y).count(), pa.len()))
}

/// Agreement of the referee on restored and clean frames, in percent. The
/// referee must be fitted and pass the clean-accuracy gate.
pub fn phoneme_match_accuracy(
    restored: ArrayView2<f64>,
    clean: ArrayView2<f64>,
    referee: &ReferenceClassifier,
) -> Result<f64> {
    if !referee.is_trained() {
        return Err(Error::State("referee classifier has not been fitted".into()));
    }
    if referee.clean_accuracy() < REFEREE_GATE {
        return Err(Error::State(format!(
            "referee clean accuracy {:.2}% is below the {REFEREE_GATE}% gate",
            referee.clean_accuracy()
        )));
    }
    agreement(referee, restored, clean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: String,
    pub cols: String,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_pairs(rows: &str, cols: &str, n_rows: usize, n_cols: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut counts = vec![vec![0u64; n_cols]; n_rows];
        for (r, c) in pairs {
            counts[r][c] += 1;
        }
        Self {
            rows: rows.into(),
            cols: cols.into(),
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn as_array(&self) -> Array2<f64> {
        let n = self.counts.len();
        let m = self.counts.first().map_or(0, Vec::len);
        Array2::from_shape_fn((n, m), |(i, j)| self.counts[i][j] as f64)
    }

    /// Column of the largest entry in each nonempty row (ties to the lowest
    /// column).
    pub fn dominant_columns(&self) -> Vec<Option<usize>> {
        self.counts
            .iter()
            .map(|row| {
                let max = *row.iter().max()?;
                if max == 0 {
                    return None;
                }
                row.iter().position(|&c| c == max)
            })
            .collect()
    }

    /// Number of nonempty rows whose dominant column is also dominant for
    /// another row.
    pub fn shared_dominant_rows(&self) -> usize {
        let dom = self.dominant_columns();
        dom.iter()
            .flatten()
            .filter(|&&c| dom.iter().flatten().filter(|&&o| o == c).count() >= 2)
            .count()
    }

    /// Fraction of nonempty rows whose dominant entry sits on the column the
    /// count-maximizing assignment matches them to, in percent.
    pub fn aligned_row_accuracy(&self) -> Result<f64> {
        let (assignment, _) = hungarian(self.negated_square()?.view())?;
        let dom = self.dominant_columns();
        let nonempty = dom.iter().flatten().count();
        let hits = dom
            .iter()
            .enumerate()
            .filter(|(i, d)| **d == Some(assignment[*i]))
            .count();
        Ok(percent(hits, nonempty))
    }

    /// Share of all counts on the matched cells of the count-maximizing
    /// assignment, in percent.
    pub fn aligned_frame_accuracy(&self) -> Result<f64> {
        let (_, cost) = hungarian(self.negated_square()?.view())?;
        let total = self.total();
        Ok(if total == 0 { 0.0 } else { 100.0 * -cost / total as f64 })
    }

    fn negated_square(&self) -> Result<Array2<f64>> {
        let a = self.as_array();
        if a.nrows() != a.ncols() {
            return Err(Error::Shape(format!("confusion matrix is {:?}, not square", a.dim())));
        }
        Ok(-a)
    }
}

/// Minimum-cost perfect assignment of rows to columns: `assignment[row]`
/// is the column, plus the total cost.
pub fn hungarian(cost: ArrayView2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::Shape(format!("cost matrix is {:?}, not square", cost.dim())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Shape("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // potentials u (rows), v (cols); p[j] = row matched to column j, 1-based
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((assignment, total))
}

/// Matrix 1: true phoneme × nearest phoneme center of the clean audio.
/// Matrix 2: phoneme center of `f_a` × viseme center of the paired `f_v`.
pub fn mapping_confusion(
    viseme_bank: &ClusterBank,
    phoneme_bank: &ClusterBank,
    f_v: ArrayView2<f64>,
    f_a: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
) -> Result<(ConfusionMatrix, ConfusionMatrix)> {
    if f_v.nrows() != f_a.nrows() || f_a.nrows() != labels.len() {
        return Err(Error::Shape("frames and labels differ in length".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Shape(format!("label {bad} outside {classes} classes")));
    }
    let (_, ids_a) = phoneme_bank.quantize(f_a)?;
    let (_, ids_v) = viseme_bank.quantize(f_v)?;
    let m1 = ConfusionMatrix::from_pairs(
        "phoneme",
        "phoneme_center",
        classes,
        phoneme_bank.config().clusters,
        labels.iter().copied().zip(ids_a.iter().copied()),
    );
    let m2 = ConfusionMatrix::from_pairs(
        "phoneme_center",
        "viseme_center",
        phoneme_bank.config().clusters,
        viseme_bank.config().clusters,
        ids_a.into_iter().zip(ids_v),
    );
    Ok((m1, m2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCoverage {
    pub class: usize,
    pub nearest_center: usize,
    pub distance: f64,
    pub covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub classes: Vec<ClassCoverage>,
    pub covered: usize,
    pub threshold: f64,
    /// Largest over smallest cluster size; infinite when a cluster is empty.
    pub size_ratio: f64,
}

/// A class is covered when some center lies within `3 · spread` of its
/// prototype.
pub fn coverage_report(
    centers: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
    spread: f64,
    cluster_sizes: &[usize],
) -> Result<CoverageReport> {
    if centers.ncols() != prototypes.ncols() {
        return Err(Error::Shape(format!(
            "centers have {} columns, prototypes {}",
            centers.ncols(),
            prototypes.ncols()
        )));
    }
    let rows: Vec<Vec<f64>> = centers.rows().into_iter().map(|r| r.to_vec()).collect();
    let threshold = 3.0 * spread;
    let classes: Vec<ClassCoverage> = prototypes
        .rows()
        .into_iter()
        .enumerate()
        .filter_map(|(class, p)| {
            let (idx, d2) = clustering::nearest_index(&rows, &p.to_vec())?;
            let distance = d2.sqrt();
            Some(ClassCoverage {
                class,
                nearest_center: idx,
                distance,
                covered: distance <= threshold,
            })
        })
        .collect();
    let covered = classes.iter().filter(|c| c.covered).count();
    Ok(CoverageReport {
        classes,
        covered,
        threshold,
        size_ratio: size_ratio(cluster_sizes),
    })
}

pub fn size_ratio(sizes: &[usize]) -> f64 {
    let max = sizes.iter().copied().max().unwrap_or(0);
    let min = sizes.iter().copied().min().unwrap_or(0);
    if min == 0 {
        if max == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        max as f64 / min as f64
    }
}

fn write_matrix_csv(path: &Path, header_lead: &[&str], rows: impl Iterator<Item = (Vec<String>, Vec<f64>)>, dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = header_lead.iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|d| format!("x{d}")));
    w.write_record(&header)?;
    for (lead, values) in rows {
        let mut rec = lead;
        rec.extend(values.iter().map(|&v| (v as f32).to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Writes `centers_{visual,audio}.csv` and `frames_{visual,audio}.csv`
/// (float32 text) into `dir`.
pub fn export_embeddings(
    dir: &Path,
    viseme_bank: &ClusterBank,
    phoneme_bank: &ClusterBank,
    f_v: ArrayView2<f64>,
    f_a: ArrayView2<f64>,
    labels: &[usize],
) -> Result<Vec<String>> {
    if f_v.nrows() != labels.len() || f_a.nrows() != labels.len() {
        return Err(Error::Shape("frames and labels differ in length".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (name, bank) in [("visual", viseme_bank), ("audio", phoneme_bank)] {
        let file = format!("centers_{name}.csv");
        let sizes = bank.cluster_sizes();
        write_matrix_csv(
            &dir.join(&file),
            &["center", "size"],
            bank.centers()
                .iter()
                .enumerate()
                .map(|(i, c)| (vec![i.to_string(), sizes[i].to_string()], c.clone())),
            bank.dim(),
        )?;
        files.push(file);
    }
    for (name, frames) in [("visual", f_v), ("audio", f_a)] {
        let file = format!("frames_{name}.csv");
        write_matrix_csv(
            &dir.join(&file),
            &["frame", "label"],
            frames
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| (vec![i.to_string(), labels[i].to_string()], r.to_vec())),
            frames.ncols(),
        )?;
        files.push(file);
    }
    Ok(files)
}

/// Reads a file written by [`export_embeddings`]: the leading integer
/// columns and the feature matrix.
pub fn read_embedding_csv(path: &Path) -> Result<(Vec<[usize; 2]>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let dim = r.headers()?.len().saturating_sub(2);
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer {s:?}")));
        ids.push([parse_usize(&rec[0])?, parse_usize(&rec[1])?]);
        for v in rec.iter().skip(2) {
            values.push(v.parse::<f64>().map_err(|_| Error::Format(format!("bad number {v:?}")))?);
        }
    }
    let m = Array2::from_shape_vec((ids.len(), dim), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok((ids, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub frames: usize,
    pub banks_seeded_at_eval: bool,
    pub referee_clean_acc: f64,
    pub phoneme_match_acc: f64,
    pub mapping_row_acc: f64,
    pub mapping_frame_acc: f64,
    pub shared_dominant_rows: usize,
    pub coverage_phoneme: CoverageReport,
    pub coverage_viseme: CoverageReport,
    pub confusion_phoneme_center: ConfusionMatrix,
    pub confusion_viseme_phoneme: ConfusionMatrix,
}

/// Encoded frames, prototypes and labels of a corpus under the state's
/// encoders.
pub struct EncodedSet {
    pub f_v: Array2<f64>,
    pub f_a: Array2<f64>,
    pub labels: Vec<usize>,
}

pub fn encode_corpus(state: &TrainerState, corpus: &Corpus) -> Result<EncodedSet> {
    let all: Vec<usize> = (0..corpus.sequences.len()).collect();
    let batch = Batch::from_corpus(corpus, &all, false)?;
    Ok(EncodedSet {
        f_v: state.encode_visual(batch.x_v.view())?,
        f_a: state.encode_audio(batch.x_a.view())?,
        labels: batch.labels,
    })
}

/// Root-mean-square per-dimension deviation of frames from their class
/// means.
fn within_class_spread(x: ArrayView2<f64>, labels: &[usize], classes: usize) -> f64 {
    let d = x.ncols();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &l) in x.rows().into_iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut sq = 0.0;
    for (row, &l) in x.rows().into_iter().zip(labels) {
        for (k, v) in row.iter().enumerate() {
            let m = sums[l][k] / counts[l] as f64;
            sq += (v - m) * (v - m);
        }
    }
    let n = (labels.len() * d).max(1) as f64;
    (sq / n).sqrt()
}

/// The state's banks, with any uninitialized bank seeded by k-means++ over
/// the encoded frames.
pub fn seeded_banks(state: &TrainerState, enc: &EncodedSet) -> Result<(ClusterBank, ClusterBank)> {
    let mut viseme_bank = state.viseme_bank.clone();
    let mut phoneme_bank = state.phoneme_bank.clone();
    for (bank, frames, stream) in [(&mut viseme_bank, &enc.f_v, 200u64), (&mut phoneme_bank, &enc.f_a, 201)] {
        if !bank.is_initialized() {
            let rows: Vec<Vec<f64>> = frames.rows().into_iter().map(|r| r.to_vec()).collect();
            let mut r = crate::rng::stream(state.config.seed, stream);
            let centers = clustering::kmeanspp_init(&rows, bank.config().clusters, &mut r)?;
            bank.initialize_with(centers)?;
        }
    }
    Ok((viseme_bank, phoneme_bank))
}

/// Full evaluation of `state` on `corpus`. Uninitialized banks are first
/// seeded by k-means++ over the encoded evaluation frames.
pub fn evaluate(state: &TrainerState, corpus: &Corpus, run_id: &str) -> Result<EvalReport> {
    let enc = encode_corpus(state, corpus)?;
    if enc.labels.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: enc.labels.len(),
        });
    }
    let classes = state.classes;
    let seeded = !(state.viseme_bank.is_initialized() && state.phoneme_bank.is_initialized());
    let (viseme_bank, phoneme_bank) = seeded_banks(state, &enc)?;
    let referee = ReferenceClassifier::fit(enc.f_a.view(), &enc.labels, classes)?;
    let restored = crate::transfer::Retrieval::new(
        enc.f_v.view(),
        phoneme_bank.centers_matrix().view(),
        state.config.temperature,
    )?
    .restored;
    let phoneme_match_acc = phoneme_match_accuracy(restored.view(), enc.f_a.view(), &referee)?;
    let (m1, m2) = mapping_confusion(&viseme_bank, &phoneme_bank, enc.f_v.view(), enc.f_a.view(), &enc.labels, classes)?;

    let proto_a = state.encode_audio(corpus.inventory.audio_prototypes().view())?;
    let proto_v = state.encode_visual(corpus.inventory.visual_prototypes().view())?;
    let groups = corpus.inventory.groups();
    let viseme_protos = viseme_prototypes(proto_v.view(), groups.as_slice(), groups.visemes());
    let viseme_labels: Vec<usize> = enc.labels.iter().map(|&l| groups.viseme_of(l)).collect();
    let coverage_phoneme = coverage_report(
        phoneme_bank.centers_matrix().view(),
        proto_a.view(),
        within_class_spread(enc.f_a.view(), &enc.labels, classes),
        &phoneme_bank.cluster_sizes(),
    )?;
    let coverage_viseme = coverage_report(
        viseme_bank.centers_matrix().view(),
        viseme_protos.view(),
        within_class_spread(enc.f_v.view(), &viseme_labels, groups.visemes()),
        &viseme_bank.cluster_sizes(),
    )?;
    Ok(EvalReport {
        run_id: run_id.into(),
        seed: state.config.seed,
        variant: state.config.variant.name().into(),
        frames: enc.labels.len(),
        banks_seeded_at_eval: seeded,
        referee_clean_acc: referee.clean_accuracy(),
        phoneme_match_acc,
        mapping_row_acc: m2.aligned_row_accuracy()?,
        mapping_frame_acc: m2.aligned_frame_accuracy()?,
        shared_dominant_rows: m2.shared_dominant_rows(),
        coverage_phoneme,
        coverage_viseme,
        confusion_phoneme_center: m1,
        confusion_viseme_phoneme: m2,
    })
}

/// One prototype per viseme group (the first phoneme of each group).
fn viseme_prototypes(per_phoneme: ArrayView2<f64>, groups: &[usize], visemes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((visemes, per_phoneme.ncols()));
    for g in 0..visemes {
        if let Some(p) = groups.iter().position(|&x| x == g) {
            out.row_mut(g).assign(&per_phoneme.row(p));
        }
    }
    out
}
