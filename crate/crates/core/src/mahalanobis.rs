//! Mahalanobis-distance detector.
//!
//! For each captured layer, features of the training set are fitted with
//! class-conditional Gaussians sharing one (tied) covariance. A layer's
//! confidence is the negative squared Mahalanobis distance to the closest
//! class mean; layer confidences are combined by a logistic-regression
//! detector fitted on validation data. Inputs may first be nudged by
//! `eps · sign(∇ₓ score)` along the direction that raises the confidence of
//! the final captured layer.
//!
//! Convolutional feature maps are average-pooled over space to one value
//! per channel before fitting and scoring.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{class_stats, default_ridge, spd_factor, SpdFactor};
use crate::losses::sign;
use crate::nn::Network;
use crate::tensor::Tensor;

/// Confidence that an input is in-distribution; larger is more confident.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ConfidenceScore(f64);

impl ConfidenceScore {
    pub fn new(value: f64) -> Self {
        debug_assert!(value.is_finite(), "non-finite confidence {value}");
        Self(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Class means and tied-covariance factor of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGaussian {
    pub means: Vec<Tensor>,
    pub cov_factor: SpdFactor,
}

/// Linear combination of per-layer confidences (the logistic regression's
/// pre-sigmoid output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combiner {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Combiner {
    pub fn combine(&self, layer_scores: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(layer_scores)
            .fold(self.bias, |acc, (w, s)| acc + w * s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisState {
    pub layers: Vec<LayerGaussian>,
    pub combiner: Option<Combiner>,
    pub preproc_eps: f64,
}

/// Spatial mean per channel for `C × H × W` maps; other shapes pass through
/// flattened.
pub fn reduce_feature(feature: &Tensor) -> Tensor {
    if feature.rank() == 3 {
        let c = feature.shape()[0];
        let per = feature.len() / c;
        Tensor::vector(
            (0..c)
                .map(|ch| feature.data()[ch * per..(ch + 1) * per].iter().sum::<f64>() / per as f64)
                .collect(),
        )
    } else {
        Tensor::vector(feature.data().to_vec())
    }
}

/// Adjoint of [`reduce_feature`]: spreads a gradient on the reduced vector
/// back over the feature map.
fn expand_gradient(shape: &[usize], reduced: &[f64]) -> Tensor {
    if shape.len() == 3 {
        let per = shape[1] * shape[2];
        let data = reduced
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / per as f64, per))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("feature shape")
    } else {
        Tensor::new(shape.to_vec(), reduced.to_vec()).expect("feature shape")
    }
}

impl MahalanobisState {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.first().map_or(0, |l| l.means.len())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.cov_factor.dim()).collect()
    }

    fn check_net(&self, net: &Network) -> Result<()> {
        if net.capture_points().len() != self.layers.len() {
            return Err(Error::State(format!(
                "detector has {} layers, network captures {}",
                self.layers.len(),
                net.capture_points().len()
            )));
        }
        Ok(())
    }
}

/// Fits class means and a tied covariance at every captured layer, using
/// the true labels of `train`.
pub fn fit(net: &Network, train: &Dataset) -> Result<MahalanobisState> {
    let labels = train.labels()?;
    let traces = net.forward_batch(train.images.tensor())?;
    let k = net.num_classes();
    let mut layers = Vec::with_capacity(net.capture_points().len());
    for capture in 0..net.capture_points().len() {
        let feats: Vec<Tensor> = traces.iter().map(|t| reduce_feature(t.feature(capture))).collect();
        let stats = class_stats(&feats, labels, k)?;
        let ridge = default_ridge(&stats.tied_cov);
        let cov_factor = spd_factor(&stats.tied_cov, ridge)?;
        layers.push(LayerGaussian {
            means: stats.means,
            cov_factor,
        });
    }
    Ok(MahalanobisState {
        layers,
        combiner: None,
        preproc_eps: 0.0,
    })
}

/// Score and the gradient of the score with respect to the reduced feature.
fn score_and_grad(
    state: &MahalanobisState,
    layer: usize,
    feature: &[f64],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let g = state
        .layers
        .get(layer)
        .ok_or_else(|| Error::State(format!("layer {layer} does not exist")))?;
    if feature.len() != g.cov_factor.dim() {
        return Err(Error::Dimension(format!(
            "layer {layer} features have {} dims, got {}",
            g.cov_factor.dim(),
            feature.len()
        )));
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_class = 0;
    let mut diff = vec![0.0; feature.len()];
    for (c, mu) in g.means.iter().enumerate() {
        for ((d, &f), &m) in diff.iter_mut().zip(feature).zip(mu.data()) {
            *d = f - m;
        }
        // (f−μ)ᵀ Σ⁻¹ (f−μ) = ‖L⁻¹(f−μ)‖²
        g.cov_factor.forward_substitute(&mut diff);
        let s = -diff.iter().map(|v| v * v).sum::<f64>();
        if s > best {
            best = s;
            best_class = c;
        }
    }
    let grad = want_grad.then(|| {
        let mut w: Vec<f64> = feature
            .iter()
            .zip(g.means[best_class].data())
            .map(|(f, m)| f - m)
            .collect();
        g.cov_factor.forward_substitute(&mut w);
        g.cov_factor.back_substitute(&mut w);
        w.iter().map(|v| -2.0 * v).collect()
    });
    Ok((best, grad))
}

/// `max_c −(f − μ_c)ᵀ Σ⁻¹ (f − μ_c)` for an already reduced feature vector.
pub fn layer_score(state: &MahalanobisState, layer: usize, feature: &Tensor) -> Result<ConfidenceScore> {
    let (s, _) = score_and_grad(state, layer, feature.data(), false)?;
    Ok(ConfidenceScore::new(s))
}

/// `x + eps · sign(∇ₓ score)` for the final captured layer's score.
pub fn preprocess_input(net: &Network, state: &MahalanobisState, x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("perturbation must be >= 0, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    state.check_net(net)?;
    let trace = net.forward(x)?;
    let last = net.capture_points().len() - 1;
    let feature = trace.feature(last);
    let reduced = reduce_feature(feature);
    let (_, grad) = score_and_grad(state, last, reduced.data(), true)?;
    let grad_map = expand_gradient(feature.shape(), &grad.expect("requested"));
    let gx = net.input_gradient(&trace, last, &grad_map)?;
    let data = x
        .data()
        .iter()
        .zip(gx.data())
        .map(|(&v, &g)| v + eps * sign(g))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Per-layer confidences of one input after preprocessing with
/// `state.preproc_eps`.
pub fn layer_scores(state: &MahalanobisState, net: &Network, x: &Tensor) -> Result<Vec<f64>> {
    state.check_net(net)?;
    let x = preprocess_input(net, state, x, state.preproc_eps)?;
    let trace = net.forward(&x)?;
    (0..state.layers.len())
        .map(|l| score_and_grad(state, l, reduce_feature(trace.feature(l)).data(), false).map(|(s, _)| s))
        .collect()
}

/// [`layer_scores`] for every example of an image batch, in parallel.
pub fn layer_scores_batch(state: &MahalanobisState, net: &Network, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..images.outer_len())
        .into_par_iter()
        .map(|i| layer_scores(state, net, &net.example(images.item_slice(i))?))
        .collect()
}

/// Fits the logistic-regression combiner on per-layer confidences of
/// validation inputs (in-distribution = 1, OOD = 0).
pub fn fit_combiner(
    state: &MahalanobisState,
    net: &Network,
    val_in: &Tensor,
    val_out: &Tensor,
) -> Result<MahalanobisState> {
    let pos = layer_scores_batch(state, net, val_in)?;
    let neg = layer_scores_batch(state, net, val_out)?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Validation(
            "combiner needs in- and out-of-distribution samples".into(),
        ));
    }
    let labels: Vec<f64> = std::iter::repeat_n(1.0, pos.len())
        .chain(std::iter::repeat_n(0.0, neg.len()))
        .collect();
    let rows: Vec<Vec<f64>> = pos.into_iter().chain(neg).collect();
    let fit = logistic::fit(&rows, &labels)?;
    let mut out = state.clone();
    out.combiner = Some(Combiner {
        weights: fit.weights,
        bias: fit.bias,
    });
    Ok(out)
}

/// Combined confidence of one input.
pub fn score(state: &MahalanobisState, net: &Network, x: &Tensor) -> Result<ConfidenceScore> {
    let combiner = state
        .combiner
        .as_ref()
        .ok_or_else(|| Error::State("Mahalanobis combiner has not been fitted".into()))?;
    let scores = layer_scores(state, net, x)?;
    Ok(ConfidenceScore::new(combiner.combine(&scores)))
}

/// [`score`] for every example of an image batch, in parallel.
pub fn score_batch(state: &MahalanobisState, net: &Network, images: &Tensor) -> Result<Vec<f64>> {
    let combiner = state
        .combiner
        .as_ref()
        .ok_or_else(|| Error::State("Mahalanobis combiner has not been fitted".into()))?;
    Ok(layer_scores_batch(state, net, images)?
        .iter()
        .map(|s| combiner.combine(s))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    layer_dims: Vec<usize>,
    eps: f64,
    combiner: Option<Combiner>,
}

impl MahalanobisState {
    /// Writes `manifest.json`, `means_layer<l>.oodt` (K × d) and
    /// `cov_factor_layer<l>.oodt` (d × d lower factor).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (l, g) in self.layers.iter().enumerate() {
            Tensor::stack(&g.means)?.save(&dir.join(format!("means_layer{l}.oodt")))?;
            g.cov_factor
                .lower()
                .save(&dir.join(format!("cov_factor_layer{l}.oodt")))?;
        }
        let m = Manifest {
            num_classes: self.num_classes(),
            layer_dims: self.layer_dims(),
            eps: self.preproc_eps,
            combiner: self.combiner.clone(),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&m).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut layers = Vec::with_capacity(m.layer_dims.len());
        for (l, &d) in m.layer_dims.iter().enumerate() {
            let means_path = dir.join(format!("means_layer{l}.oodt"));
            let means = Tensor::load(&means_path)?;
            if means.shape() != [m.num_classes, d] {
                return Err(Error::Format {
                    path: means_path,
                    reason: format!("expected [{}, {d}], got {:?}", m.num_classes, means.shape()),
                });
            }
            let lower = Tensor::load(&dir.join(format!("cov_factor_layer{l}.oodt")))?;
            let cov_factor = SpdFactor::from_lower(lower)?;
            if cov_factor.dim() != d {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: format!("layer {l} factor has dim {}", cov_factor.dim()),
                });
            }
            layers.push(LayerGaussian {
                means: (0..m.num_classes)
                    .map(|c| Tensor::vector(means.item_slice(c).to_vec()))
                    .collect(),
                cov_factor,
            });
        }
        if let Some(c) = &m.combiner {
            if c.weights.len() != layers.len() {
                return Err(Error::Format {
                    path,
                    reason: "combiner weight count differs from layer count".into(),
                });
            }
        }
        Ok(Self {
            layers,
            combiner: m.combiner,
            preproc_eps: m.eps,
        })
    }
}

/// Unregularized binary logistic regression by full-batch gradient descent.
pub mod logistic {
    use crate::error::{Error, Result};

    pub const MAX_STEPS: usize = 10_000;
    pub const GRAD_TOL: f64 = 1e-6;

    #[derive(Debug, Clone, PartialEq)]
    pub struct LogisticFit {
        pub weights: Vec<f64>,
        pub bias: f64,
        pub steps: usize,
        pub grad_norm: f64,
    }

    fn sigmoid(z: f64) -> f64 {
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    }

    /// Fits `P(y = 1 | x) = σ(w·x + b)`.
    ///
    /// Columns are standardized internally and the solution is mapped back
    /// to the raw scale. Stops when the gradient norm of the mean log-loss
    /// drops below [`GRAD_TOL`] or after [`MAX_STEPS`].
    pub fn fit(rows: &[Vec<f64>], labels: &[f64]) -> Result<LogisticFit> {
        let n = rows.len();
        if n == 0 || labels.len() != n {
            return Err(Error::Validation("logistic fit needs one label per row".into()));
        }
        let pos = labels.iter().filter(|&&y| y == 1.0).count();
        if pos == 0 || pos == n {
            return Err(Error::Validation("logistic fit needs both classes".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged logistic design matrix".into()));
        }
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        for r in rows {
            for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        for s in sd.iter_mut() {
            *s = s.sqrt();
            if !(*s > 1e-300) {
                *s = 1.0;
            }
        }
        let x: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
            .collect();

        // The mean log-loss has a Lipschitz gradient with constant at most
        // (1 + d) / 4 on standardized columns.
        let lr = 4.0 / (1.0 + d as f64);
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut grad_norm = f64::INFINITY;
        let mut steps = 0;
        while steps < MAX_STEPS {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (xi, &yi) in x.iter().zip(labels) {
                let z = b + xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let r = (sigmoid(z) - yi) / n as f64;
                gb += r;
                for (g, a) in gw.iter_mut().zip(xi) {
                    *g += r * a;
                }
            }
            grad_norm = (gb * gb + gw.iter().map(|g| g * g).sum::<f64>()).sqrt();
            if grad_norm < GRAD_TOL {
                break;
            }
            b -= lr * gb;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * g;
            }
            steps += 1;
        }
        let weights: Vec<f64> = w.iter().zip(&sd).map(|(wi, s)| wi / s).collect();
        let bias = b - weights.iter().zip(&mean).map(|(wi, m)| wi * m).sum::<f64>();
        Ok(LogisticFit {
            weights,
            bias,
            steps,
            grad_norm,
        })
    }
}
