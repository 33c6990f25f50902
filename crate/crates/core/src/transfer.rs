//! Soft retrieval over a bank of centers: cosine-softmax addressing and the
//! restored frames `A · C`.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Row-stochastic `T x N` addressing weights, plus what the backward pass
/// needs.
#[derive(Clone, Debug)]
pub struct AddressingMatrix {
    weights: Array2<f64>,
    temperature: f64,
    cosines: Array2<f64>,
    frame_norms: Vec<f64>,
    unit_centers: Array2<f64>,
}

fn unit_rows(m: ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = m.to_owned();
    let mut norms = Vec::with_capacity(m.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateVector(format!("{what} row {i} has norm {n}")));
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

/// `A[i, j] = softmax_j(cos(f_v[i], c[j]) / τ)`.
pub fn addressing_scores(f_v: ArrayView2<f64>, centers: ArrayView2<f64>, temperature: f64) -> Result<AddressingMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config("temperature", format!("must be positive, got {temperature}")));
    }
    if f_v.ncols() != centers.ncols() {
        return Err(Error::Shape(format!(
            "frames have {} columns, centers have {}",
            f_v.ncols(),
            centers.ncols()
        )));
    }
    if centers.nrows() == 0 {
        return Err(Error::Shape("no centers to address".into()));
    }
    let (unit_frames, frame_norms) = unit_rows(f_v, "frame")?;
    let (unit_centers, _) = unit_rows(centers, "center")?;
    let cosines = unit_frames.dot(&unit_centers.t());
    let mut weights = cosines.mapv(|c| c / temperature);
    for mut row in weights.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(AddressingMatrix {
        weights,
        temperature,
        cosines,
        frame_norms,
        unit_centers,
    })
}

impl AddressingMatrix {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn cosines(&self) -> &Array2<f64> {
        &self.cosines
    }

    pub fn into_weights(self) -> Array2<f64> {
        self.weights
    }

    /// Pulls `d loss / d A` back to `d loss / d f_v`. Centers are treated as
    /// constants.
    pub fn backward(&self, f_v: ArrayView2<f64>, grad_weights: ArrayView2<f64>) -> Result<Array2<f64>> {
        if grad_weights.dim() != self.weights.dim() || f_v.nrows() != self.weights.nrows() {
            return Err(Error::Shape(format!(
                "gradient {:?} / frames {:?} do not match addressing {:?}",
                grad_weights.dim(),
                f_v.dim(),
                self.weights.dim()
            )));
        }
        // softmax, then the 1/τ scaling
        let inner = (&grad_weights * &self.weights).sum_axis(Axis(1)).insert_axis(Axis(1));
        let g_cos = (&self.weights * &(&grad_weights - &inner)) / self.temperature;
        // d cos(f, ĉ) / d f = ĉ/|f| - cos f/|f|²
        let mut out = g_cos.dot(&self.unit_centers);
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = self.frame_norms[i];
            let radial = g_cos.row(i).dot(&self.cosines.row(i));
            row /= n;
            row.scaled_add(-radial / (n * n), &f_v.row(i));
        }
        Ok(out)
    }
}

/// `f̂ = A · C`.
pub fn restore_audio(weights: ArrayView2<f64>, centers: ArrayView2<f64>) -> Result<Array2<f64>> {
    if weights.ncols() != centers.nrows() {
        return Err(Error::Shape(format!(
            "addressing has {} columns but there are {} centers",
            weights.ncols(),
            centers.nrows()
        )));
    }
    Ok(weights.dot(&centers))
}

/// Addressing followed by restoration, with the composite backward pass.
#[derive(Clone, Debug)]
pub struct Retrieval {
    pub addressing: AddressingMatrix,
    pub restored: Array2<f64>,
    centers: Array2<f64>,
}

impl Retrieval {
    pub fn new(f_v: ArrayView2<f64>, centers: ArrayView2<f64>, temperature: f64) -> Result<Self> {
        let addressing = addressing_scores(f_v, centers, temperature)?;
        let restored = restore_audio(addressing.weights().view(), centers)?;
        Ok(Self {
            addressing,
            restored,
            centers: centers.to_owned(),
        })
    }

    /// `d loss / d f̂` to `d loss / d f_v`.
    pub fn backward(&self, f_v: ArrayView2<f64>, grad_restored: ArrayView2<f64>) -> Result<Array2<f64>> {
        if grad_restored.dim() != self.restored.dim() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match restored frames {:?}",
                grad_restored.dim(),
                self.restored.dim()
            )));
        }
        let grad_weights = grad_restored.dot(&self.centers.t());
        self.addressing.backward(f_v, grad_weights.view())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, 0);
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn single_center_is_all_ones() {
        let a = addressing_scores(random(5, 3, 1).view(), array![[0.2, 1.0, -0.3]].view(), 0.1).unwrap();
        assert!(a.weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn equiangular_frame_splits_evenly() {
        let a = addressing_scores(array![[1.0, 1.0]].view(), array![[1.0, 0.0], [0.0, 1.0]].view(), 0.1).unwrap();
        assert!((a.weights()[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((a.weights()[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_sharpens() {
        let f = random(20, 4, 2);
        let c = random(5, 4, 3);
        let a = addressing_scores(f.view(), c.view(), 0.001).unwrap();
        for (i, row) in a.weights().rows().into_iter().enumerate() {
            let best = crate::nn::argmax_rows(a.cosines().slice(ndarray::s![i..i + 1, ..]))[0];
            assert!(row[best] >= 0.999, "row {i}: {row}");
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let c = array![[1.0, 0.0]];
        assert!(matches!(
            addressing_scores(array![[0.0, 0.0]].view(), c.view(), 0.1),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(
            addressing_scores(array![[1.0, 0.0]].view(), array![[0.0, 0.0]].view(), 0.1),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(
            addressing_scores(array![[1.0, 0.0]].view(), c.view(), 0.0),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn one_hot_restores_center() {
        let c = random(4, 3, 4);
        let a = array![[0.0, 0.0, 1.0, 0.0]];
        assert_eq!(restore_audio(a.view(), c.view()).unwrap().row(0), c.row(2));
    }

    #[test]
    fn uniform_row_gives_midpoint() {
        let c = array![[1.0, 2.0], [3.0, -2.0]];
        let r = restore_audio(array![[0.5, 0.5]].view(), c.view()).unwrap();
        assert_eq!(r, array![[2.0, 0.0]]);
    }

    #[test]
    fn restore_matches_scalar_loop() {
        let a = random(6, 4, 5).mapv(f64::abs);
        let c = random(4, 3, 6);
        let r = restore_audio(a.view(), c.view()).unwrap();
        for i in 0..6 {
            for d in 0..3 {
                let mut s = 0.0;
                for j in 0..4 {
                    s += a[[i, j]] * c[[j, d]];
                }
                assert!((s - r[[i, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn restore_shape_mismatch() {
        assert!(matches!(
            restore_audio(Array2::zeros((2, 3)).view(), Array2::zeros((4, 2)).view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn retrieval_gradient_matches_differences() {
        let f = random(3, 4, 7);
        let c = random(5, 4, 8);
        let w = random(3, 4, 9);
        let loss = |f: &Array2<f64>| (&Retrieval::new(f.view(), c.view(), 0.5).unwrap().restored * &w).sum();
        let ret = Retrieval::new(f.view(), c.view(), 0.5).unwrap();
        let g = ret.backward(f.view(), w.view()).unwrap();
        let h = 1e-5;
        for idx in [(0, 0), (1, 2), (2, 3), (0, 1)] {
            let (mut a, mut b) = (f.clone(), f.clone());
            a[idx] += h;
            b[idx] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-5 * fd.abs().max(1e-3), "{idx:?}: {fd} vs {}", g[idx]);
        }
    }
}
