//! Synthetic paired two-modality corpora.
//!
//! Every phoneme owns a distinct audio prototype; phonemes are grouped into
//! viseme groups that share one visual prototype, so the visual stream alone
//! cannot tell homophenes apart. Frame labels follow a Zipf law, giving the
//! long-tail class frequencies that trip up plain online k-means.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Phoneme count `P`.
    pub phonemes: usize,
    /// Viseme-group count `V`.
    pub visemes: usize,
    /// Feature dimension `D`.
    pub dim: usize,
    /// Frames per sequence `T`.
    pub frames: usize,
    pub zipf_exponent: f64,
    /// Isotropic per-dimension noise scale around each prototype.
    pub spread: f64,
    /// Per-dimension standard deviation of the random prototypes.
    pub prototype_scale: f64,
    /// When set, every sequence also carries a noisy copy of its audio.
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            phonemes: 10,
            visemes: 6,
            dim: 16,
            frames: 50,
            zipf_exponent: 1.0,
            spread: 0.25,
            prototype_scale: 1.0,
            noise_snr_db: None,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phonemes == 0 {
            return Err(Error::config("phonemes", "must be at least 1"));
        }
        if self.visemes == 0 {
            return Err(Error::config("visemes", "must be at least 1"));
        }
        if self.visemes > self.phonemes {
            return Err(Error::config(
                "visemes",
                format!(
                    "viseme groups ({}) must not exceed phonemes ({})",
                    self.visemes, self.phonemes
                ),
            ));
        }
        if self.dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if self.frames == 0 {
            return Err(Error::config("frames", "must be at least 1"));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config("zipf_exponent", "must be a finite non-negative number"));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::config("spread", "must be a finite non-negative number"));
        }
        if !(self.prototype_scale > 0.0 && self.prototype_scale.is_finite()) {
            return Err(Error::config("prototype_scale", "must be positive"));
        }
        if let Some(snr) = self.noise_snr_db {
            if !snr.is_finite() {
                return Err(Error::config("noise_snr_db", "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeSpec {
    pub id: usize,
    pub audio_prototype: Vec<f64>,
    pub visual_prototype: Vec<f64>,
    pub spread: f64,
    pub frequency_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisemeGroupMap {
    phoneme_to_viseme: Vec<usize>,
    visemes: usize,
}

impl VisemeGroupMap {
    /// Phoneme `k < V` opens group `k`; the remaining phonemes join groups
    /// round-robin, so the tail phonemes become homophenes of the head ones.
    pub fn round_robin(phonemes: usize, visemes: usize) -> Result<Self> {
        if visemes == 0 || visemes > phonemes {
            return Err(Error::config(
                "visemes",
                format!("need 1 <= visemes <= phonemes, got {visemes} and {phonemes}"),
            ));
        }
        Self::new((0..phonemes).map(|k| k % visemes).collect(), visemes)
    }

    pub fn new(phoneme_to_viseme: Vec<usize>, visemes: usize) -> Result<Self> {
        let mut hit = vec![false; visemes];
        for &g in &phoneme_to_viseme {
            if g >= visemes {
                return Err(Error::config("phoneme_to_viseme", format!("group {g} out of range")));
            }
            hit[g] = true;
        }
        if let Some(missing) = hit.iter().position(|h| !h) {
            return Err(Error::config(
                "phoneme_to_viseme",
                format!("viseme group {missing} has no phoneme"),
            ));
        }
        Ok(Self {
            phoneme_to_viseme,
            visemes,
        })
    }

    pub fn viseme_of(&self, phoneme: usize) -> usize {
        self.phoneme_to_viseme[phoneme]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.phoneme_to_viseme
    }

    pub fn visemes(&self) -> usize {
        self.visemes
    }
}

/// One aligned sequence. Rows of every matrix are frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSequence {
    pub f_v: Array2<f64>,
    pub f_a: Array2<f64>,
    pub labels: Vec<usize>,
    pub f_a_noisy: Option<Array2<f64>>,
}

impl PairedSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Normalized Zipf weights `w_k ∝ 1 / k^s` for ranks `k = 1..=P`.
pub fn zipf_weights(phonemes: usize, exponent: f64) -> Result<Vec<f64>> {
    if phonemes == 0 {
        return Err(Error::config("phonemes", "must be at least 1"));
    }
    if !(exponent >= 0.0 && exponent.is_finite()) {
        return Err(Error::config("zipf_exponent", "must be a finite non-negative number"));
    }
    let raw: Vec<f64> = (1..=phonemes).map(|k| (k as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Phoneme prototypes and grouping. Fully determined by the config seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeInventory {
    specs: Vec<PhonemeSpec>,
    groups: VisemeGroupMap,
    dim: usize,
}

impl PhonemeInventory {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let weights = zipf_weights(config.phonemes, config.zipf_exponent)?;
        let groups = VisemeGroupMap::round_robin(config.phonemes, config.visemes)?;
        let mut rng = rng::stream(config.seed, 0);
        let gaussian_vec = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..config.dim)
                .map(|_| config.prototype_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let visual: Vec<Vec<f64>> = (0..config.visemes).map(|_| gaussian_vec(&mut rng)).collect();
        let audio: Vec<Vec<f64>> = (0..config.phonemes).map(|_| gaussian_vec(&mut rng)).collect();
        let specs = (0..config.phonemes)
            .map(|id| PhonemeSpec {
                id,
                audio_prototype: audio[id].clone(),
                visual_prototype: visual[groups.viseme_of(id)].clone(),
                spread: config.spread,
                frequency_weight: weights[id],
            })
            .collect();
        Ok(Self {
            specs,
            groups,
            dim: config.dim,
        })
    }

    pub fn from_parts(specs: Vec<PhonemeSpec>, groups: VisemeGroupMap) -> Result<Self> {
        let dim = specs.first().map(|s| s.audio_prototype.len()).unwrap_or(0);
        if specs.len() != groups.as_slice().len() {
            return Err(Error::Shape(format!(
                "{} phoneme specs but {} group entries",
                specs.len(),
                groups.as_slice().len()
            )));
        }
        for s in &specs {
            if s.audio_prototype.len() != dim || s.visual_prototype.len() != dim {
                return Err(Error::Shape(format!("prototype of phoneme {} has wrong length", s.id)));
            }
        }
        Ok(Self { specs, groups, dim })
    }

    pub fn specs(&self) -> &[PhonemeSpec] {
        &self.specs
    }

    pub fn groups(&self) -> &VisemeGroupMap {
        &self.groups
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phonemes(&self) -> usize {
        self.specs.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.frequency_weight).collect()
    }

    pub fn audio_prototypes(&self) -> Array2<f64> {
        rows_to_matrix(self.specs.iter().map(|s| s.audio_prototype.as_slice()), self.dim)
    }

    pub fn visual_prototypes(&self) -> Array2<f64> {
        rows_to_matrix(self.specs.iter().map(|s| s.visual_prototype.as_slice()), self.dim)
    }

    pub fn sample_labels<R: Rng>(&self, frames: usize, rng: &mut R) -> Vec<usize> {
        let dist = WeightedIndex::new(self.specs.iter().map(|s| s.frequency_weight))
            .expect("zipf weights are positive");
        (0..frames).map(|_| dist.sample(rng)).collect()
    }

    /// Renders frames for the given labels: prototype plus `spread`-scaled
    /// isotropic Gaussian noise, drawn independently for both modalities.
    pub fn render<R: Rng>(&self, labels: &[usize], rng: &mut R) -> Result<PairedSequence> {
        let t = labels.len();
        let mut f_v = Array2::zeros((t, self.dim));
        let mut f_a = Array2::zeros((t, self.dim));
        for (i, &label) in labels.iter().enumerate() {
            let spec = self.specs.get(label).ok_or_else(|| {
                Error::config("labels", format!("label {label} outside [0, {})", self.specs.len()))
            })?;
            for d in 0..self.dim {
                let n: f64 = rng.sample(StandardNormal);
                f_a[[i, d]] = spec.audio_prototype[d] + spec.spread * n;
            }
            for d in 0..self.dim {
                let n: f64 = rng.sample(StandardNormal);
                f_v[[i, d]] = spec.visual_prototype[d] + spec.spread * n;
            }
        }
        Ok(PairedSequence {
            f_v,
            f_a,
            labels: labels.to_vec(),
            f_a_noisy: None,
        })
    }
}

/// A generated corpus: the inventory it was drawn from plus its sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub inventory: PhonemeInventory,
    pub sequences: Vec<PairedSequence>,
}

impl Corpus {
    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(PairedSequence::len).sum()
    }

    /// Splits off the last `count` sequences as a held-out set sharing the
    /// same inventory.
    pub fn split_tail(mut self, count: usize) -> (Corpus, Corpus) {
        let at = self.sequences.len().saturating_sub(count);
        let tail = self.sequences.split_off(at);
        let held_out = Corpus {
            config: self.config.clone(),
            inventory: self.inventory.clone(),
            sequences: tail,
        };
        (self, held_out)
    }
}

/// Sequence `i` is drawn from its own RNG stream, so generation is
/// reproducible and independent of how many sequences are requested.
pub fn sample_corpus(config: &CorpusConfig, count: usize) -> Result<Corpus> {
    let inventory = PhonemeInventory::generate(config)?;
    let sequences = (0..count)
        .map(|i| sample_sequence(config, &inventory, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: config.clone(),
        inventory,
        sequences,
    })
}

fn sample_sequence(config: &CorpusConfig, inventory: &PhonemeInventory, index: usize) -> Result<PairedSequence> {
    let mut rng = rng::stream(config.seed, 1 + 2 * index as u64);
    let labels = inventory.sample_labels(config.frames, &mut rng);
    let mut seq = inventory.render(&labels, &mut rng)?;
    if let Some(snr) = config.noise_snr_db {
        let noise_seed = config.seed ^ (0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(index as u64 + 1));
        seq.f_a_noisy = Some(add_noise(seq.f_a.view(), snr, noise_seed)?);
    }
    Ok(seq)
}

/// Adds white Gaussian noise whose empirical power is exactly
/// `signal_power / 10^(snr_db / 10)`.
pub fn add_noise(f_a: ArrayView2<f64>, snr_db: f64, seed: u64) -> Result<Array2<f64>> {
    if f_a.is_empty() {
        return Err(Error::SignalPower);
    }
    let n = f_a.len() as f64;
    let signal_power = f_a.iter().map(|v| v * v).sum::<f64>() / n;
    if signal_power == 0.0 || !signal_power.is_finite() {
        return Err(Error::SignalPower);
    }
    let target = signal_power / 10f64.powf(snr_db / 10.0);
    let mut rng = rng::stream(seed, 0);
    let mut noise: Array2<f64> = Array2::from_shape_simple_fn(f_a.raw_dim(), || rng.sample(StandardNormal));
    let drawn = noise.iter().map(|v| v * v).sum::<f64>() / n;
    noise *= (target / drawn).sqrt();
    Ok(&f_a + &noise)
}

/// Empirical SNR in decibels between a clean and a noisy matrix.
pub fn empirical_snr_db(clean: ArrayView2<f64>, noisy: ArrayView2<f64>) -> f64 {
    let signal: f64 = clean.iter().map(|v| v * v).sum();
    let noise: f64 = clean.iter().zip(noisy.iter()).map(|(c, n)| (n - c) * (n - c)).sum();
    10.0 * (signal / noise).log10()
}

pub(crate) fn rows_to_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    let n = flat.len() / dim.max(1);
    Array2::from_shape_vec((n, dim), flat).expect("rows have uniform length")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    #[serde(rename = "P")]
    pub phonemes: usize,
    #[serde(rename = "V")]
    pub visemes: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    pub seed: u64,
    pub phoneme_to_viseme: Vec<usize>,
    pub sequences: usize,
    pub zipf_exponent: f64,
    pub spread: f64,
    pub prototype_scale: f64,
    pub noise_snr_db: Option<f64>,
    pub frequency_weights: Vec<f64>,
    pub files: Vec<String>,
}

fn seq_file(i: usize, part: &str) -> String {
    format!("seq_{i:05}.{part}.bin")
}

fn matrix_bytes(m: ArrayView2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    blob::push_f32(&mut out, m.iter().copied());
    out
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bytes = blob::read_file(path)?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            rows * cols * 4,
            bytes.len()
        )));
    }
    let (values, _) = blob::read_f32(&bytes, rows * cols)?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

/// Writes the corpus as little-endian float32 matrices (labels as u32) plus
/// a JSON manifest. Returns the list of files written, manifest last.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec!["audio_prototypes.bin".to_string(), "visual_prototypes.bin".to_string()];
    blob::write_file(
        &dir.join(&files[0]),
        &matrix_bytes(corpus.inventory.audio_prototypes().view()),
    )?;
    blob::write_file(
        &dir.join(&files[1]),
        &matrix_bytes(corpus.inventory.visual_prototypes().view()),
    )?;
    for (i, seq) in corpus.sequences.iter().enumerate() {
        let fv = seq_file(i, "fv");
        let fa = seq_file(i, "fa");
        let labels = seq_file(i, "labels");
        blob::write_file(&dir.join(&fv), &matrix_bytes(seq.f_v.view()))?;
        blob::write_file(&dir.join(&fa), &matrix_bytes(seq.f_a.view()))?;
        let label_bytes: Vec<u8> = seq.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
        blob::write_file(&dir.join(&labels), &label_bytes)?;
        files.extend([fv, fa, labels]);
        if let Some(noisy) = &seq.f_a_noisy {
            let name = seq_file(i, "fa_noisy");
            blob::write_file(&dir.join(&name), &matrix_bytes(noisy.view()))?;
            files.push(name);
        }
    }
    let c = &corpus.config;
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        phonemes: c.phonemes,
        visemes: c.visemes,
        dim: c.dim,
        frames: c.frames,
        seed: c.seed,
        phoneme_to_viseme: corpus.inventory.groups().as_slice().to_vec(),
        sequences: corpus.sequences.len(),
        zipf_exponent: c.zipf_exponent,
        spread: c.spread,
        prototype_scale: c.prototype_scale,
        noise_snr_db: c.noise_snr_db,
        frequency_weights: corpus.inventory.weights(),
        files: files.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    blob::write_file(&path, text.as_bytes())?;
    files.push(MANIFEST_FILE.to_string());
    Ok(files)
}

pub fn import_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: CorpusManifest = serde_json::from_slice(&blob::read_file(&path)?)?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Incompatible {
            path,
            reason: format!(
                "corpus format {} is not supported (expected {CORPUS_FORMAT_VERSION})",
                manifest.format_version
            ),
        });
    }
    let config = CorpusConfig {
        phonemes: manifest.phonemes,
        visemes: manifest.visemes,
        dim: manifest.dim,
        frames: manifest.frames,
        zipf_exponent: manifest.zipf_exponent,
        spread: manifest.spread,
        prototype_scale: manifest.prototype_scale,
        noise_snr_db: manifest.noise_snr_db,
        seed: manifest.seed,
    };
    config.validate()?;
    let (p, d, t) = (manifest.phonemes, manifest.dim, manifest.frames);
    let groups = VisemeGroupMap::new(manifest.phoneme_to_viseme.clone(), manifest.visemes)?;
    let audio = read_matrix(&dir.join("audio_prototypes.bin"), p, d)?;
    let visual = read_matrix(&dir.join("visual_prototypes.bin"), p, d)?;
    if manifest.frequency_weights.len() != p {
        return Err(Error::Format("frequency_weights length differs from P".into()));
    }
    let specs = (0..p)
        .map(|id| PhonemeSpec {
            id,
            audio_prototype: audio.row(id).to_vec(),
            visual_prototype: visual.row(id).to_vec(),
            spread: manifest.spread,
            frequency_weight: manifest.frequency_weights[id],
        })
        .collect();
    let inventory = PhonemeInventory::from_parts(specs, groups)?;
    let mut sequences = Vec::with_capacity(manifest.sequences);
    for i in 0..manifest.sequences {
        let f_v = read_matrix(&dir.join(seq_file(i, "fv")), t, d)?;
        let f_a = read_matrix(&dir.join(seq_file(i, "fa")), t, d)?;
        let label_path = dir.join(seq_file(i, "labels"));
        let raw = blob::read_file(&label_path)?;
        if raw.len() != t * 4 {
            return Err(Error::Format(format!("{}: wrong label count", label_path.display())));
        }
        let labels: Vec<usize> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= p) {
            return Err(Error::Format(format!("{}: label {bad} >= P", label_path.display())));
        }
        let f_a_noisy = if manifest.noise_snr_db.is_some() {
            Some(read_matrix(&dir.join(seq_file(i, "fa_noisy")), t, d)?)
        } else {
            None
        };
        sequences.push(PairedSequence {
            f_v,
            f_a,
            labels,
            f_a_noisy,
        });
    }
    Ok(Corpus {
        config,
        inventory,
        sequences,
    })
}
