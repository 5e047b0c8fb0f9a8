//! Classification models: the logits function, cross-entropy loss, and the
//! exact backpropagation gradient, all over a flat [`ParamVector`].
//!
//! Optimizers never see layer structure. [`MlpSpec`] owns the packing order:
//! layer by layer, weights first (row-major, input index major: entry
//! `(i, j)` is the weight from input unit `i` to output unit `j`), then the
//! layer's biases. The order is stable because the server averages raw
//! parameter vectors across devices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, ParamVector};

/// A mini-batch: feature rows plus class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Capacity("empty batch".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Anything that maps `(parameters, features)` to logits and can produce the
/// exact gradient of the mean softmax cross-entropy against a given label
/// assignment. The optimizer stack is written against this trait so the
/// estimator checks can run on models too small to express as an MLP.
pub trait LogitModel {
    fn param_dim(&self) -> usize;
    fn class_count(&self) -> usize;

    /// `B x C` logits for a `B x d_in` feature matrix.
    fn logits(&self, theta: &ParamVector, features: &DenseMatrix) -> Result<DenseMatrix>;

    /// Gradient of `mean_b CE(logits(theta, x_b), labels_b)` w.r.t. `theta`.
    fn gradient_for_labels(
        &self,
        theta: &ParamVector,
        features: &DenseMatrix,
        labels: &[usize],
    ) -> Result<ParamVector>;
}

/// Mean softmax cross-entropy computed from logits with the usual
/// log-sum-exp max shift.
pub fn cross_entropy_from_logits(logits: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::Domain(format!(
                "label {y} out of range for {} classes",
                row.len()
            )));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if !max.is_finite() {
            return Err(Error::Domain("non-finite logit".into()));
        }
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn predict_from_logits(logits: &DenseMatrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Layer-shape description of a ReLU MLP classifier (identity output layer).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "an MLP needs at least input and output layers".into(),
            ));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config("layer sizes must be >= 1".into()));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total parameter count: sum over layers of `n_in * n_out + n_out`.
    pub fn param_dim(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Coarse FLOP count for one forward+backward pass on a single sample,
    /// used by the energy model (2 FLOPs/weight forward, 4 backward).
    pub fn training_flops_per_sample(&self) -> f64 {
        let weight_count: usize = self.layer_sizes.windows(2).map(|w| w[0] * w[1]).sum();
        6.0 * weight_count as f64
    }

    /// Glorot-uniform weights (`U[-sqrt(6/(n_in+n_out)), +...]`), zero biases.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        let mut data = Vec::with_capacity(self.param_dim());
        for w in self.layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            for _ in 0..n_in * n_out {
                data.push(rng.gen_range(-bound..bound));
            }
            data.extend(std::iter::repeat(0.0).take(n_out));
        }
        ParamVector::from_vec(data)
    }

    fn check_theta(&self, theta: &ParamVector) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::Shape(format!(
                "parameter vector length {} but model dimension is {}",
                theta.len(),
                self.param_dim()
            )));
        }
        Ok(())
    }

    fn check_features(&self, features: &DenseMatrix) -> Result<()> {
        if features.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "feature width {} but model input dim is {}",
                features.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Offsets of each layer's weight block and bias block inside theta.
    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::new();
        let mut pos = 0;
        for w in self.layer_sizes.windows(2) {
            let wlen = w[0] * w[1];
            offsets.push((pos, pos + wlen));
            pos += wlen + w[1];
        }
        offsets
    }

    fn layer_weight(&self, theta: &ParamVector, l: usize) -> DenseMatrix {
        let (w_off, b_off) = self.layer_offsets()[l];
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        DenseMatrix::new(n_in, n_out, theta.as_slice()[w_off..b_off].to_vec()).unwrap()
    }

    fn layer_bias<'a>(&self, theta: &'a ParamVector, l: usize) -> &'a [f64] {
        let (_, b_off) = self.layer_offsets()[l];
        let n_out = self.layer_sizes[l + 1];
        &theta.as_slice()[b_off..b_off + n_out]
    }

    /// Forward pass returning each layer's output (post-activation); the
    /// last entry holds the logits.
    fn forward_trace(
        &self,
        theta: &ParamVector,
        features: &DenseMatrix,
    ) -> Result<Vec<DenseMatrix>> {
        self.check_theta(theta)?;
        self.check_features(features)?;
        let layers = self.layer_sizes.len() - 1;
        let mut acts: Vec<DenseMatrix> = Vec::with_capacity(layers);
        for l in 0..layers {
            let w = self.layer_weight(theta, l);
            let b = self.layer_bias(theta, l);
            let input = if l == 0 { features } else { &acts[l - 1] };
            let mut z = input.matmul(&w)?;
            for r in 0..z.rows() {
                let row = z.row_mut(r);
                for (v, &bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            if l + 1 < layers {
                for r in 0..z.rows() {
                    for v in z.row_mut(r) {
                        // ReLU; the subgradient at 0 is taken as 0.
                        if *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Raw `B x C` logits.
    pub fn forward_logits(
        &self,
        theta: &ParamVector,
        features: &DenseMatrix,
    ) -> Result<DenseMatrix> {
        Ok(self.forward_trace(theta, features)?.pop().unwrap())
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, theta: &ParamVector, batch: &Batch) -> Result<f64> {
        let logits = self.forward_logits(theta, &batch.features)?;
        cross_entropy_from_logits(&logits, &batch.labels)
    }

    /// Exact gradient of [`loss`](MlpSpec::loss) by backpropagation.
    pub fn gradient(&self, theta: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        self.gradient_for_labels(theta, &batch.features, &batch.labels)
    }

    /// Argmax class per feature row.
    pub fn predict(&self, theta: &ParamVector, features: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(predict_from_logits(&self.forward_logits(theta, features)?))
    }
}

impl LogitModel for MlpSpec {
    fn param_dim(&self) -> usize {
        self.param_dim()
    }

    fn class_count(&self) -> usize {
        self.output_classes()
    }

    fn logits(&self, theta: &ParamVector, features: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward_logits(theta, features)
    }

    fn gradient_for_labels(
        &self,
        theta: &ParamVector,
        features: &DenseMatrix,
        labels: &[usize],
    ) -> Result<ParamVector> {
        let acts = self.forward_trace(theta, features)?;
        let layers = self.layer_sizes.len() - 1;
        let batch = features.rows();
        if batch != labels.len() {
            return Err(Error::Consistency(format!(
                "{batch} feature rows but {} labels",
                labels.len()
            )));
        }

        // d(mean CE)/d(logits) = (softmax - onehot) / B
        let mut delta = acts[layers - 1].row_softmax()?;
        for (r, &y) in labels.iter().enumerate() {
            if y >= self.output_classes() {
                return Err(Error::Domain(format!(
                    "label {y} out of range for {} classes",
                    self.output_classes()
                )));
            }
            let row = delta.row_mut(r);
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v /= batch as f64;
            }
        }

        let mut grad = vec![0.0; self.param_dim()];
        let offsets = self.layer_offsets();
        for l in (0..layers).rev() {
            let (w_off, b_off) = offsets[l];
            let input = if l == 0 { features } else { &acts[l - 1] };

            // dW = A_{l-1}^T * delta, db = column sums of delta.
            let dw = input.matmul_transpose_self(&delta)?;
            grad[w_off..b_off].copy_from_slice(dw.as_slice());
            for r in 0..delta.rows() {
                for (c, &v) in delta.row(r).iter().enumerate() {
                    grad[b_off + c] += v;
                }
            }

            if l > 0 {
                let w = self.layer_weight(theta, l);
                let mut upstream = delta.matmul_transpose_other(&w)?;
                // Mask by the ReLU activity pattern of layer l's output.
                for r in 0..upstream.rows() {
                    let act_row = acts[l - 1].row(r);
                    for (v, &a) in upstream.row_mut(r).iter_mut().zip(act_row) {
                        if a <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                delta = upstream;
            }
        }
        Ok(ParamVector::from_vec(grad))
    }
}

/// Two-class linear-softmax classifier with the second logit pinned at zero:
/// `phi(theta, x) = (w . x + b, 0)` with `theta = (w, b)`.
///
/// With a 2-dimensional input this is the smallest nontrivial softmax model
/// (3 parameters); it exists so the curvature-estimator check has a model
/// whose exact Gauss-Newton diagonal is available in closed form.
#[derive(Debug, Clone)]
pub struct BinaryLogistic {
    input_dim: usize,
}

impl BinaryLogistic {
    pub fn new(input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        Ok(Self { input_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn score(&self, theta: &ParamVector, x: &[f64]) -> f64 {
        let w = &theta.as_slice()[..self.input_dim];
        let b = theta[self.input_dim];
        x.iter().zip(w).map(|(xi, wi)| xi * wi).sum::<f64>() + b
    }

    /// Exact diagonal of the Gauss-Newton matrix of the mean cross-entropy:
    /// `mean_b p_b (1 - p_b) * (x_b^2, 1)` with `p_b = sigma(w . x_b + b)`.
    pub fn gauss_newton_diagonal(
        &self,
        theta: &ParamVector,
        features: &DenseMatrix,
    ) -> Result<ParamVector> {
        self.check(theta, features)?;
        let mut diag = vec![0.0; self.param_dim()];
        for r in 0..features.rows() {
            let z = self.score(theta, features.row(r));
            let p = 1.0 / (1.0 + (-z).exp());
            let s = p * (1.0 - p);
            for (j, &x) in features.row(r).iter().enumerate() {
                diag[j] += s * x * x;
            }
            diag[self.input_dim] += s;
        }
        let b = features.rows() as f64;
        Ok(ParamVector::from_vec(
            diag.into_iter().map(|v| v / b).collect(),
        ))
    }

    fn check(&self, theta: &ParamVector, features: &DenseMatrix) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::Shape(format!(
                "parameter vector length {} but model dimension is {}",
                theta.len(),
                self.param_dim()
            )));
        }
        if features.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "feature width {} but model input dim is {}",
                features.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

impl LogitModel for BinaryLogistic {
    fn param_dim(&self) -> usize {
        self.input_dim + 1
    }

    fn class_count(&self) -> usize {
        2
    }

    fn logits(&self, theta: &ParamVector, features: &DenseMatrix) -> Result<DenseMatrix> {
        self.check(theta, features)?;
        let mut out = DenseMatrix::zeros(features.rows(), 2);
        for r in 0..features.rows() {
            out.set(r, 0, self.score(theta, features.row(r)));
        }
        Ok(out)
    }

    fn gradient_for_labels(
        &self,
        theta: &ParamVector,
        features: &DenseMatrix,
        labels: &[usize],
    ) -> Result<ParamVector> {
        self.check(theta, features)?;
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let mut grad = vec![0.0; self.param_dim()];
        for (r, &y) in labels.iter().enumerate() {
            if y >= 2 {
                return Err(Error::Domain(format!("label {y} out of range")));
            }
            let z = self.score(theta, features.row(r));
            let p = 1.0 / (1.0 + (-z).exp());
            // d CE / d z for logits (z, 0): p - 1{y = 0}.
            let coeff = p - if y == 0 { 1.0 } else { 0.0 };
            for (j, &x) in features.row(r).iter().enumerate() {
                grad[j] += coeff * x;
            }
            grad[self.input_dim] += coeff;
        }
        let b = labels.len() as f64;
        Ok(ParamVector::from_vec(
            grad.into_iter().map(|v| v / b).collect(),
        ))
    }
}
