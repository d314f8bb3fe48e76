//! Feature-correlation detector built on higher-order Gram matrices.
//!
//! For every captured layer and order `p`, the Gram matrix
//! `G_p = (F^p · (F^p)ᵀ)^(1/p)` (powers elementwise, inner product over
//! spatial positions) summarizes pairwise channel correlations. Training
//! examples are grouped by the class the network *predicts* for them, and
//! each group records elementwise minima and maxima of every Gram entry.
//! A new input deviates from its predicted class's bounds by
//!
//! ```text
//! dev(v, lo, hi) = 0                  if lo <= v <= hi
//!                = (lo - v) / |lo|    if v < lo
//!                = (v - hi) / |hi|    if v > hi
//! ```
//!
//! summed over entries and orders into a layerwise deviation `δ_l`. The
//! total deviation normalizes each layer by its mean deviation on held-out
//! in-distribution data: `Δ = Σ_l δ_l / E[δ_l]`. The confidence is `−Δ`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mahalanobis::ConfidenceScore;
use crate::nn::{ForwardTrace, Network};
use crate::tensor::Tensor;

pub const DEFAULT_ORDERS: [u32; 4] = [1, 2, 4, 8];

/// Floor for bound denominators and expected deviations.
pub const DEV_FLOOR: f64 = 1e-12;

const FIT_CHUNK: usize = 256;

/// Upper triangle (row-major, diagonal included) of the order-`p` Gram
/// matrix of a feature map.
///
/// Rank-3 maps are `C × H × W`, rank-2 maps `C × S`, and rank-1 vectors are
/// treated as `C × 1`. The `1/p` root keeps the sign of negative sums (they
/// only arise for odd `p` with signed features).
pub fn gram(feature_map: &Tensor, order: u32) -> Tensor {
    assert!(order >= 1, "Gram order must be positive");
    let channels = feature_map.shape()[0];
    let spatial = feature_map.len() / channels;
    let powered: Vec<f64> = feature_map.data().iter().map(|v| v.powi(order as i32)).collect();
    let mut out = Vec::with_capacity(channels * (channels + 1) / 2);
    for i in 0..channels {
        let fi = &powered[i * spatial..(i + 1) * spatial];
        for j in i..channels {
            let fj = &powered[j * spatial..(j + 1) * spatial];
            let g = fi.iter().zip(fj).fold(0.0, |acc, (a, b)| acc + a * b);
            out.push(root(g, order));
        }
    }
    Tensor::vector(out)
}

fn root(g: f64, order: u32) -> f64 {
    match order {
        1 => g,
        2 => g.signum() * g.abs().sqrt(),
        _ => g.signum() * g.abs().powf(1.0 / order as f64),
    }
}

/// Per-(layer, order, class) bounds plus per-layer normalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBounds {
    pub orders: Vec<u32>,
    pub num_classes: usize,
    /// Captured feature-map shape per layer.
    pub layer_shapes: Vec<Vec<usize>>,
    /// `mins[layer][order][class]`.
    pub mins: Vec<Vec<Vec<Tensor>>>,
    pub maxs: Vec<Vec<Vec<Tensor>>>,
    /// `E[δ_l]`; `None` until [`calibrate_normalizer`] has run.
    pub expected_dev: Option<Vec<f64>>,
}

/// Layerwise deviations and their normalized total.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub per_layer: Vec<f64>,
    pub total: f64,
}

/// Gram vectors of every captured layer and order: `[layer][order]`.
fn trace_grams(trace: &ForwardTrace, orders: &[u32]) -> Vec<Vec<Tensor>> {
    trace
        .features()
        .into_iter()
        .map(|f| orders.iter().map(|&p| gram(f, p)).collect())
        .collect()
}

fn validate_orders(orders: &[u32]) -> Result<()> {
    if orders.is_empty() || orders.contains(&0) {
        return Err(Error::Config(format!("Gram orders must be positive, got {orders:?}")));
    }
    Ok(())
}

/// Min/max bounds from training images, grouped by predicted class.
pub fn fit_bounds(net: &Network, train_images: &Tensor, orders: &[u32]) -> Result<GramBounds> {
    validate_orders(orders)?;
    let k = net.num_classes();
    let layers = net.capture_points().len();
    let mut mins: Vec<Vec<Vec<Option<Tensor>>>> = vec![vec![vec![None; k]; orders.len()]; layers];
    let mut maxs = mins.clone();
    let n = train_images.outer_len();
    let mut start = 0;
    while start < n {
        let end = (start + FIT_CHUNK).min(n);
        let chunk: Vec<(usize, Vec<Vec<Tensor>>)> = (start..end)
            .into_par_iter()
            .map(|i| {
                let trace = net.forward(&net.example(train_images.item_slice(i))?)?;
                Ok((trace.predicted_class(), trace_grams(&trace, orders)))
            })
            .collect::<Result<_>>()?;
        for (class, grams) in chunk {
            for (l, per_order) in grams.into_iter().enumerate() {
                for (o, g) in per_order.into_iter().enumerate() {
                    merge(&mut mins[l][o][class], &g, f64::min);
                    merge(&mut maxs[l][o][class], &g, f64::max);
                }
            }
        }
        start = end;
    }
    if let Some(class) = (0..k).find(|&c| mins[0][0][c].is_none()) {
        return Err(Error::MissingClass { class });
    }
    let unwrap = |v: Vec<Vec<Vec<Option<Tensor>>>>| -> Vec<Vec<Vec<Tensor>>> {
        v.into_iter()
            .map(|lo| {
                lo.into_iter()
                    .map(|oc| oc.into_iter().map(|t| t.expect("every class seen")).collect())
                    .collect()
            })
            .collect()
    };
    Ok(GramBounds {
        orders: orders.to_vec(),
        num_classes: k,
        layer_shapes: net.capture_shapes(),
        mins: unwrap(mins),
        maxs: unwrap(maxs),
        expected_dev: None,
    })
}

fn merge(slot: &mut Option<Tensor>, g: &Tensor, pick: fn(f64, f64) -> f64) {
    match slot {
        None => *slot = Some(g.clone()),
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = pick(*a, v);
            }
        }
    }
}

/// Deviation of one value from `[lo, hi]`.
pub fn entry_deviation(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        (lo - v) / lo.abs().max(DEV_FLOOR)
    } else if v > hi {
        (v - hi) / hi.abs().max(DEV_FLOOR)
    } else {
        0.0
    }
}

/// `δ_l`: entry deviations summed over all entries and orders of one layer.
pub fn layer_deviation(
    bounds: &GramBounds,
    layer: usize,
    gram_values: &[Tensor],
    predicted_class: usize,
) -> Result<f64> {
    if predicted_class >= bounds.num_classes {
        return Err(Error::Label {
            label: predicted_class,
            num_classes: bounds.num_classes,
        });
    }
    let (mins, maxs) = match (bounds.mins.get(layer), bounds.maxs.get(layer)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::State(format!("layer {layer} has no bounds"))),
    };
    if gram_values.len() != bounds.orders.len() {
        return Err(Error::Dimension(format!(
            "{} Gram vectors for {} orders",
            gram_values.len(),
            bounds.orders.len()
        )));
    }
    let mut total = 0.0;
    for (o, g) in gram_values.iter().enumerate() {
        let lo = &mins[o][predicted_class];
        let hi = &maxs[o][predicted_class];
        if g.len() != lo.len() {
            return Err(Error::Dimension(format!(
                "layer {layer}: Gram vector of length {}, bounds have {}",
                g.len(),
                lo.len()
            )));
        }
        for ((&v, &a), &b) in g.data().iter().zip(lo.data()).zip(hi.data()) {
            total += entry_deviation(v, a, b);
        }
    }
    Ok(total)
}

/// Layerwise deviations of one input against its predicted class.
pub fn layer_deviations(bounds: &GramBounds, net: &Network, x: &Tensor) -> Result<Vec<f64>> {
    if net.capture_points().len() != bounds.mins.len() {
        return Err(Error::State(format!(
            "bounds cover {} layers, network captures {}",
            bounds.mins.len(),
            net.capture_points().len()
        )));
    }
    let trace = net.forward(x)?;
    let class = trace.predicted_class();
    trace_grams(&trace, &bounds.orders)
        .iter()
        .enumerate()
        .map(|(l, g)| layer_deviation(bounds, l, g, class))
        .collect()
}

fn layer_deviations_batch(bounds: &GramBounds, net: &Network, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..images.outer_len())
        .into_par_iter()
        .map(|i| layer_deviations(bounds, net, &net.example(images.item_slice(i))?))
        .collect()
}

/// Sets `E[δ_l]` to the mean layer deviation over a held-out partition of
/// in-distribution data, floored at [`DEV_FLOOR`].
pub fn calibrate_normalizer(bounds: &GramBounds, net: &Network, partition: &Tensor) -> Result<GramBounds> {
    if partition.is_empty() || partition.outer_len() == 0 {
        return Err(Error::Validation("empty calibration partition".into()));
    }
    let devs = layer_deviations_batch(bounds, net, partition)?;
    let n = devs.len() as f64;
    let layers = bounds.mins.len();
    let expected = (0..layers)
        .map(|l| (devs.iter().map(|d| d[l]).sum::<f64>() / n).max(DEV_FLOOR))
        .collect();
    let mut out = bounds.clone();
    out.expected_dev = Some(expected);
    Ok(out)
}

fn normalizers(bounds: &GramBounds) -> Result<&[f64]> {
    bounds
        .expected_dev
        .as_deref()
        .ok_or_else(|| Error::State("Gram bounds have not been calibrated".into()))
}

fn total_deviation(per_layer: &[f64], expected: &[f64]) -> f64 {
    per_layer.iter().zip(expected).map(|(d, e)| d / e).sum()
}

pub fn deviation(bounds: &GramBounds, net: &Network, x: &Tensor) -> Result<Deviation> {
    let expected = normalizers(bounds)?;
    let per_layer = layer_deviations(bounds, net, x)?;
    let total = total_deviation(&per_layer, expected);
    Ok(Deviation { per_layer, total })
}

/// `−Δ`: zero for inputs inside every bound, negative otherwise.
pub fn score(bounds: &GramBounds, net: &Network, x: &Tensor) -> Result<ConfidenceScore> {
    Ok(ConfidenceScore::new(-deviation(bounds, net, x)?.total))
}

/// [`score`] for every example of an image batch, in parallel.
pub fn score_batch(bounds: &GramBounds, net: &Network, images: &Tensor) -> Result<Vec<f64>> {
    let expected = normalizers(bounds)?;
    Ok(layer_deviations_batch(bounds, net, images)?
        .iter()
        .map(|d| -total_deviation(d, expected))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    orders: Vec<u32>,
    layer_shapes: Vec<Vec<usize>>,
    num_classes: usize,
    expected_dev: Option<Vec<f64>>,
}

fn bound_file(kind: &str, layer: usize, order: u32, class: usize) -> String {
    format!("{kind}_layer{layer}_p{order}_class{class}.oodt")
}

impl GramBounds {
    /// Writes `manifest.json` plus `mins_*` / `maxs_*` tensors per
    /// (layer, order, class).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for l in 0..self.mins.len() {
            for (o, &p) in self.orders.iter().enumerate() {
                for c in 0..self.num_classes {
                    self.mins[l][o][c].save(&dir.join(bound_file("mins", l, p, c)))?;
                    self.maxs[l][o][c].save(&dir.join(bound_file("maxs", l, p, c)))?;
                }
            }
        }
        let m = Manifest {
            orders: self.orders.clone(),
            layer_shapes: self.layer_shapes.clone(),
            num_classes: self.num_classes,
            expected_dev: self.expected_dev.clone(),
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
        validate_orders(&m.orders)?;
        let mut mins = Vec::new();
        let mut maxs = Vec::new();
        for (l, shape) in m.layer_shapes.iter().enumerate() {
            let channels = shape.first().copied().unwrap_or(0);
            let entries = channels * (channels + 1) / 2;
            let (mut lo_l, mut hi_l) = (Vec::new(), Vec::new());
            for &p in &m.orders {
                let (mut lo_o, mut hi_o) = (Vec::new(), Vec::new());
                for c in 0..m.num_classes {
                    let lo = Tensor::load(&dir.join(bound_file("mins", l, p, c)))?;
                    let hi = Tensor::load(&dir.join(bound_file("maxs", l, p, c)))?;
                    if lo.len() != entries || hi.len() != entries {
                        return Err(Error::Format {
                            path: path.clone(),
                            reason: format!("layer {l} order {p} class {c}: expected {entries} entries"),
                        });
                    }
                    lo_o.push(lo);
                    hi_o.push(hi);
                }
                lo_l.push(lo_o);
                hi_l.push(hi_o);
            }
            mins.push(lo_l);
            maxs.push(hi_l);
        }
        Ok(Self {
            orders: m.orders,
            num_classes: m.num_classes,
            layer_shapes: m.layer_shapes,
            mins,
            maxs,
            expected_dev: m.expected_dev,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Elementwise-loop reference: powers, pairwise sums, signed root.
    fn gram_oracle(f: &[Vec<f64>], p: u32) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..f.len() {
            for j in i..f.len() {
                let mut s = 0.0;
                for k in 0..f[i].len() {
                    let mut a = 1.0;
                    let mut b = 1.0;
                    for _ in 0..p {
                        a *= f[i][k];
                        b *= f[j][k];
                    }
                    s += a * b;
                }
                out.push(s.signum() * s.abs().powf(1.0 / p as f64));
            }
        }
        out
    }

    #[test]
    fn single_channel_cases() {
        let f = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(gram(&f, 1).data(), &[5.0]);
        assert!((gram(&f, 2).data()[0] - 17f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dense_vector_is_a_column_map() {
        let g = gram(&Tensor::vector(vec![1.0, -2.0, 3.0]), 1);
        assert_eq!(g.data(), &[1.0, -2.0, 3.0, 4.0, -6.0, 9.0]);
    }

    #[test]
    fn matches_loop_oracle() {
        let rows = vec![
            vec![0.5, 1.2, 0.0, 2.0],
            vec![1.1, 0.3, 0.7, 0.2],
            vec![0.0, 0.9, 1.5, 0.4],
        ];
        let f = Tensor::from_rows(&rows).unwrap();
        for p in [1, 2, 4, 8] {
            let got = gram(&f, p);
            for (a, b) in got.data().iter().zip(gram_oracle(&rows, p)) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "p={p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn deviation_formula() {
        assert_eq!(entry_deviation(15.0, 10.0, 20.0), 0.0);
        assert_eq!(entry_deviation(25.0, 10.0, 20.0), 0.25);
        assert_eq!(entry_deviation(-8.0, -4.0, -2.0), 1.0);
        // Zero bound: floored denominator.
        assert_eq!(entry_deviation(1e-12, -1.0, 0.0), 1.0);
    }

    fn toy_bounds() -> GramBounds {
        GramBounds {
            orders: vec![1],
            num_classes: 1,
            layer_shapes: vec![vec![2]],
            mins: vec![vec![vec![Tensor::vector(vec![10.0, -4.0, 1.0])]]],
            maxs: vec![vec![vec![Tensor::vector(vec![20.0, -2.0, 1.0])]]],
            expected_dev: None,
        }
    }

    #[test]
    fn layer_deviation_sums_entries() {
        let b = toy_bounds();
        let inside = layer_deviation(&b, 0, &[Tensor::vector(vec![12.0, -3.0, 1.0])], 0).unwrap();
        assert_eq!(inside, 0.0);
        let outside = layer_deviation(&b, 0, &[Tensor::vector(vec![25.0, -8.0, 1.0])], 0).unwrap();
        assert_eq!(outside, 1.25);
        assert!(layer_deviation(&b, 0, &[Tensor::vector(vec![0.0; 3])], 1).is_err());
    }

    #[test]
    fn uncalibrated_score_is_a_state_error() {
        let net = Network::new(
            vec![2],
            vec![crate::nn::LayerSpec::Dense { in_dim: 2, out_dim: 1 }],
            1,
            0,
        )
        .unwrap();
        assert!(matches!(
            score(&toy_bounds(), &net, &Tensor::vector(vec![0.0, 0.0])),
            Err(Error::State(_))
        ));
    }

    proptest! {
        #[test]
        fn spatial_permutation_invariance(vals in prop::collection::vec(0.0f64..3.0, 12), rot in 0usize..4, p in prop::sample::select(vec![1u32, 2, 4, 8])) {
            let f = Tensor::new(vec![3, 4], vals.clone()).unwrap();
            let permuted: Vec<f64> = (0..3).flat_map(|c| (0..4).map(move |s| (c, (s + rot) % 4))).map(|(c, s)| vals[c * 4 + s]).collect();
            let g = Tensor::new(vec![3, 4], permuted).unwrap();
            for (a, b) in gram(&f, p).data().iter().zip(gram(&g, p).data()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn equal_channels_equal_off_diagonals(row in prop::collection::vec(0.0f64..2.0, 5), p in 1u32..5) {
            let f = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
            let g = gram(&f, p);
            // Upper triangle of 3x3: (0,0) (0,1) (0,2) (1,1) (1,2) (2,2)
            prop_assert_eq!(g.data()[1], g.data()[2]);
            prop_assert_eq!(g.data()[1], g.data()[4]);
        }

        #[test]
        fn deviation_grows_away_from_bound(lo in -5.0f64..5.0, width in 0.0f64..5.0, d1 in 0.0f64..10.0, d2 in 0.0f64..10.0) {
            let hi = lo + width;
            let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(entry_deviation(hi + far, lo, hi) >= entry_deviation(hi + near, lo, hi));
            prop_assert!(entry_deviation(lo - far, lo, hi) >= entry_deviation(lo - near, lo, hi));
        }
    }
}
