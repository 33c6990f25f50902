//! Mutual information: the exact plug-in value for discrete counts, and the
//! Donsker-Varadhan and Jensen-Shannon neural estimators driven by a
//! statistic network `T(x, y)` applied to the concatenation `x ⊕ y`.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Activation, Adam, DenseNetwork, Gradients};
use crate::rng;

/// Row `i` of `x` is paired with row `i` of `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    x: Array2<f64>,
    y: Array2<f64>,
}

impl PairedBatch {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::InvalidBatch(format!(
                "x has {} rows, y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() < 2 {
            return Err(Error::InvalidBatch(format!("need at least 2 pairs, got {}", x.nrows())));
        }
        Ok(Self { x, y })
    }

    pub fn from_views(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Self> {
        Self::new(x.to_owned(), y.to_owned())
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// `x ⊕ y` row-wise, the statistic network's input.
    pub fn joined(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.x.view(), self.y.view()]).expect("row counts checked")
    }

    /// Same pairing with `y` rows reordered by `perm`.
    pub fn permute_y(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::InvalidBatch(format!(
                "permutation of length {} for {} rows",
                perm.len(),
                self.len()
            )));
        }
        Ok(Self {
            x: self.x.clone(),
            y: self.y.select(Axis(0), perm),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub batch_size: usize,
}

/// Uniform over the `m! - 1` non-identity permutations.
pub fn non_identity_permutation<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m < 2 {
        return Err(Error::InvalidBatch(format!("cannot derange a batch of {m}")));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Product-of-marginals sample: `x` untouched, `y` rows permuted.
pub fn shuffle_marginal<R: Rng + ?Sized>(batch: &PairedBatch, rng: &mut R) -> Result<PairedBatch> {
    let perm = non_identity_permutation(batch.len(), rng)?;
    batch.permute_y(&perm)
}

/// Plug-in MI in nats of the empirical joint given by `counts`.
pub fn exact_discrete_mi(counts: ArrayView2<u64>) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDistribution);
    }
    let n = total as f64;
    let px: Vec<f64> = counts.rows().into_iter().map(|r| r.sum() as f64 / n).collect();
    let py: Vec<f64> = counts.columns().into_iter().map(|c| c.sum() as f64 / n).collect();
    let mut mi = 0.0;
    for ((i, j), &c) in counts.indexed_iter() {
        if c == 0 {
            continue;
        }
        let pxy = c as f64 / n;
        mi += pxy * (pxy / (px[i] * py[j])).ln();
    }
    Ok(mi.max(0.0))
}

fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bound {
    DonskerVaradhan,
    JensenShannon,
}

impl Bound {
    /// Objective value from the statistic outputs, plus its derivative with
    /// respect to each joint and marginal output.
    pub fn objective(self, t_joint: &[f64], t_marginal: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let mj = t_joint.len() as f64;
        let mm = t_marginal.len() as f64;
        match self {
            Bound::DonskerVaradhan => {
                let lme = log_mean_exp(t_marginal);
                let value = mean(t_joint) - lme;
                let gj = vec![1.0 / mj; t_joint.len()];
                let gm = t_marginal.iter().map(|t| -((t - lme).exp() / mm)).collect();
                (value, gj, gm)
            }
            Bound::JensenShannon => {
                let value = -t_joint.iter().map(|&t| softplus(-t)).sum::<f64>() / mj
                    - t_marginal.iter().map(|&t| softplus(t)).sum::<f64>() / mm;
                let gj = t_joint.iter().map(|&t| sigmoid(-t) / mj).collect();
                let gm = t_marginal.iter().map(|&t| -sigmoid(t) / mm).collect();
                (value, gj, gm)
            }
        }
    }
}

fn statistic_outputs(net: &DenseNetwork, batch: &PairedBatch) -> Result<Vec<f64>> {
    check_net(net, batch)?;
    Ok(net.predict(batch.joined().view())?.column(0).to_vec())
}

fn check_net(net: &DenseNetwork, batch: &PairedBatch) -> Result<()> {
    let width = batch.x.ncols() + batch.y.ncols();
    if net.input_dim() != width || net.output_dim() != 1 {
        return Err(Error::Shape(format!(
            "statistic network maps {} -> {}, batch needs {width} -> 1",
            net.input_dim(),
            net.output_dim()
        )));
    }
    Ok(())
}

pub fn estimate(bound: Bound, net: &DenseNetwork, joint: &PairedBatch, marginal: &PairedBatch) -> Result<MiEstimate> {
    let tj = statistic_outputs(net, joint)?;
    let tm = statistic_outputs(net, marginal)?;
    Ok(MiEstimate {
        value: bound.objective(&tj, &tm).0,
        batch_size: joint.len(),
    })
}

/// `mean T(joint) - log mean exp T(marginal)`.
pub fn dv_mi_estimate(net: &DenseNetwork, joint: &PairedBatch, marginal: &PairedBatch) -> Result<MiEstimate> {
    estimate(Bound::DonskerVaradhan, net, joint, marginal)
}

/// `mean -sp(-T(joint)) - mean sp(T(marginal))`.
pub fn js_mi_estimate(net: &DenseNetwork, joint: &PairedBatch, marginal: &PairedBatch) -> Result<MiEstimate> {
    estimate(Bound::JensenShannon, net, joint, marginal)
}

/// Objective value with gradients (of the value, not of a loss) for the
/// network parameters and for both input batches.
#[derive(Clone, Debug)]
pub struct ObjectiveGradients {
    pub value: f64,
    pub params: Gradients,
    /// `d value / d (x ⊕ y)` per joint row.
    pub joint_input: Array2<f64>,
    /// `d value / d (x ⊕ y_perm)` per marginal row.
    pub marginal_input: Array2<f64>,
}

impl ObjectiveGradients {
    /// Splits an input gradient into its `x` and `y` column blocks.
    pub fn split(input: &Array2<f64>, x_dim: usize) -> (Array2<f64>, Array2<f64>) {
        let (a, b) = input.view().split_at(Axis(1), x_dim);
        (a.to_owned(), b.to_owned())
    }
}

pub fn objective_with_gradients(
    bound: Bound,
    net: &DenseNetwork,
    joint: &PairedBatch,
    marginal: &PairedBatch,
) -> Result<ObjectiveGradients> {
    check_net(net, joint)?;
    check_net(net, marginal)?;
    let cj = net.forward(joint.joined().view())?;
    let cm = net.forward(marginal.joined().view())?;
    let tj = cj.output().column(0).to_vec();
    let tm = cm.output().column(0).to_vec();
    let (value, gj, gm) = bound.objective(&tj, &tm);
    let gj = Array1::from(gj).insert_axis(Axis(1));
    let gm = Array1::from(gm).insert_axis(Axis(1));
    let mut params = net.backward(&cj, gj.view())?;
    let grad_m = net.backward(&cm, gm.view())?;
    params.accumulate_params(&grad_m);
    let joint_input = std::mem::replace(&mut params.input, Array2::zeros((0, 0)));
    Ok(ObjectiveGradients {
        value,
        params,
        joint_input,
        marginal_input: grad_m.input,
    })
}

/// `2D -> hidden... -> 1` rectifier network.
pub fn statistic_network<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<DenseNetwork> {
    bounded_statistic_network(input_dim, hidden, None, rng)
}

/// As [`statistic_network`], with the output soft-clipped to `±bound`
/// when a bound is given.
pub fn bounded_statistic_network<R: Rng + ?Sized>(
    input_dim: usize,
    hidden: &[usize],
    bound: Option<f64>,
    rng: &mut R,
) -> Result<DenseNetwork> {
    let dims: Vec<usize> = std::iter::once(input_dim).chain(hidden.iter().copied()).chain([1]).collect();
    let output = match bound {
        Some(b) if b > 0.0 && b.is_finite() => Activation::SoftClip(b),
        Some(b) => return Err(Error::config("statistic_output_bound", format!("must be positive, got {b}"))),
        None => Activation::Identity,
    };
    DenseNetwork::new(&dims, Activation::Relu, output, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineConfig {
    pub bound: Bound,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            bound: Bound::DonskerVaradhan,
            hidden: vec![64, 64],
            steps: 3000,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Fits a statistic network to paired samples by minibatch ascent on the
/// chosen bound. Each step draws a random minibatch and pairs it with an
/// in-batch shuffle as the marginal.
pub fn train_statistic_network(x: ArrayView2<f64>, y: ArrayView2<f64>, config: &MineConfig) -> Result<DenseNetwork> {
    let full = PairedBatch::from_views(x, y)?;
    if config.batch_size < 2 {
        return Err(Error::config("batch_size", "must be at least 2"));
    }
    if config.learning_rate <= 0.0 || !config.learning_rate.is_finite() {
        return Err(Error::config("learning_rate", "must be positive"));
    }
    let mut init_rng = rng::stream(config.seed, 0);
    let mut step_rng = rng::stream(config.seed, 1);
    let mut net = statistic_network(x.ncols() + y.ncols(), &config.hidden, &mut init_rng)?;
    let mut opt = Adam::new(config.learning_rate);
    let m = config.batch_size.min(full.len());
    let mut order: Vec<usize> = (0..full.len()).collect();
    let mut cursor = order.len();
    for _ in 0..config.steps {
        if cursor + m > order.len() {
            order.shuffle(&mut step_rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + m];
        cursor += m;
        let joint = PairedBatch::new(full.x.select(Axis(0), idx), full.y.select(Axis(0), idx))?;
        let marginal = shuffle_marginal(&joint, &mut step_rng)?;
        let mut g = objective_with_gradients(config.bound, &net, &joint, &marginal)?;
        g.params.scale_params(-1.0);
        net.apply_gradients(&g.params, &mut opt)?;
    }
    Ok(net)
}

/// Estimate on a whole sample set, averaging over `shuffles` independent
/// marginal permutations.
pub fn evaluate_bound(
    bound: Bound,
    net: &DenseNetwork,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    shuffles: usize,
    seed: u64,
) -> Result<f64> {
    let joint = PairedBatch::from_views(x, y)?;
    let mut r = rng::stream(seed, 2);
    let shuffles = shuffles.max(1);
    let mut total = 0.0;
    for _ in 0..shuffles {
        let marginal = shuffle_marginal(&joint, &mut r)?;
        total += estimate(bound, net, &joint, &marginal)?.value;
    }
    Ok(total / shuffles as f64)
}
