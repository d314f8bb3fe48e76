//! Matrix products, Cholesky factorization of symmetric positive-definite
//! matrices, and class-conditional mean / tied covariance estimation.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Smallest ridge used by [`default_ridge`], so an all-zero covariance still
/// factors.
pub const RIDGE_FLOOR: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-9;

fn require_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!(
            "{what} must be rank 2, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Row-major matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "left operand")?;
    require_matrix(b, "right operand")?;
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, m]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..n {
        let row = &mut od[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// Matrix-vector product.
pub fn matvec(a: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    require_matrix(a, "matrix")?;
    if a.cols() != v.len() {
        return Err(Error::Dimension(format!(
            "matvec: {:?} times length {}",
            a.shape(),
            v.len()
        )));
    }
    Ok((0..a.rows()).map(|i| dot(a.item_slice(i), v)).collect())
}

/// Cholesky factor `L` (lower triangular, positive diagonal) of an SPD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    dim: usize,
    lower: Tensor,
}

impl SpdFactor {
    /// Wraps an existing lower factor, e.g. one read back from disk.
    pub fn from_lower(lower: Tensor) -> Result<Self> {
        require_matrix(&lower, "factor")?;
        let dim = lower.rows();
        if lower.cols() != dim {
            return Err(Error::Dimension("factor must be square".into()));
        }
        for i in 0..dim {
            if !(lower.at(i, i) > 0.0) {
                return Err(Error::Singular { pivot: i });
            }
            if (i + 1..dim).any(|j| lower.at(i, j) != 0.0) {
                return Err(Error::Dimension("factor is not lower triangular".into()));
            }
        }
        Ok(Self { dim, lower })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    /// Solves `L y = v` in place.
    pub fn forward_substitute(&self, v: &mut [f64]) {
        let n = self.dim;
        let l = self.lower.data();
        for i in 0..n {
            let s = dot(&l[i * n..i * n + i], &v[..i]);
            v[i] = (v[i] - s) / l[i * n + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn back_substitute(&self, v: &mut [f64]) {
        let n = self.dim;
        let l = self.lower.data();
        for i in (0..n).rev() {
            let mut s = 0.0;
            for j in i + 1..n {
                s += l[j * n + i] * v[j];
            }
            v[i] = (v[i] - s) / l[i * n + i];
        }
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let lt = self.lower.transpose().expect("factor is rank 2");
        matmul(&self.lower, &lt).expect("square factor")
    }
}

/// Factors `m + ridge·I`.
pub fn spd_factor(m: &Tensor, ridge: f64) -> Result<SpdFactor> {
    require_matrix(m, "matrix")?;
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Dimension(format!(
            "spd_factor needs a square matrix, got {:?}",
            m.shape()
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::Dimension(format!("ridge must be >= 0, got {ridge}")));
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (m.at(i, j), m.at(j, i));
            if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::Dimension(format!(
                    "matrix not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }

    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let ljj2 = {
            let row = &l.data()[j * n..j * n + j];
            m.at(j, j) + ridge - dot(row, row)
        };
        let scale = (m.at(j, j) + ridge).abs();
        // Pivots at rounding-noise level are treated as zero.
        if !ljj2.is_finite() || ljj2 <= f64::EPSILON * scale * n as f64 || ljj2 <= 0.0 {
            return Err(Error::Singular { pivot: j });
        }
        let ljj = ljj2.sqrt();
        *l.at_mut(j, j) = ljj;
        for i in j + 1..n {
            let s = {
                let d = l.data();
                dot(&d[i * n..i * n + j], &d[j * n..j * n + j])
            };
            *l.at_mut(i, j) = (m.at(i, j) - s) / ljj;
        }
    }
    Ok(SpdFactor { dim: n, lower: l })
}

/// Solves `(L Lᵀ) w = v`.
pub fn spd_solve(f: &SpdFactor, v: &Tensor) -> Result<Tensor> {
    if v.rank() != 1 || v.len() != f.dim {
        return Err(Error::Dimension(format!(
            "spd_solve: factor dim {} but right-hand side shape {:?}",
            f.dim,
            v.shape()
        )));
    }
    let mut w = v.data().to_vec();
    f.forward_substitute(&mut w);
    f.back_substitute(&mut w);
    Ok(Tensor::vector(w))
}

/// `1e-6 · trace(m) / d`, floored at [`RIDGE_FLOOR`].
pub fn default_ridge(m: &Tensor) -> f64 {
    let d = m.rows();
    let trace: f64 = (0..d).map(|i| m.at(i, i)).sum();
    (1e-6 * trace / d as f64).max(RIDGE_FLOOR)
}

/// Class means and the tied (shared) covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub means: Vec<Tensor>,
    pub tied_cov: Tensor,
}

/// Empirical class means and tied covariance normalized by the total count N.
pub fn class_stats(features: &[Tensor], labels: &[usize], num_classes: usize) -> Result<ClassStats> {
    if features.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 samples, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d || f.rank() != 1) {
        return Err(Error::Dimension(format!(
            "feature shape {:?} differs from length {d}",
            f.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Label {
            label: bad,
            num_classes,
        });
    }

    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (f, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        for (s, &v) in sums[y].iter_mut().zip(f.data()) {
            *s += v;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass { class });
    }
    let means: Vec<Tensor> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| Tensor::vector(s.into_iter().map(|v| v / c as f64).collect()))
        .collect();

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for (f, &y) in features.iter().zip(labels) {
        for ((c, &v), &mu) in centered.iter_mut().zip(f.data()).zip(means[y].data()) {
            *c = v - mu;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    let n = features.len() as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(ClassStats {
        means,
        tied_cov: Tensor::new(vec![d, d], cov)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_spd(rng: &mut impl Rng, n: usize) -> Tensor {
        let a = random_matrix(rng, n, n);
        let mut m = matmul(&a, &a.transpose().unwrap()).unwrap();
        for i in 0..n {
            *m.at_mut(i, i) += n as f64 * 0.1;
        }
        m
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.at(i, p) * b.at(p, j);
                }
                *out.at_mut(i, j) = s;
            }
        }
        out
    }

    fn frob(t: &Tensor) -> f64 {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i2 = Tensor::identity(2);
        let b = Tensor::from_rows(&[vec![3., 4.], vec![5., 6.]]).unwrap();
        assert_eq!(matmul(&i2, &b).unwrap(), b);
        let r = Tensor::from_rows(&[vec![1., 2.]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.], vec![4.]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn factor_identity() {
        let f = spd_factor(&Tensor::identity(3), 0.0).unwrap();
        assert_eq!(f.lower(), &Tensor::identity(3));
    }

    #[test]
    fn factor_two_by_two() {
        let m = Tensor::from_rows(&[vec![4., 2.], vec![2., 3.]]).unwrap();
        let f = spd_factor(&m, 0.0).unwrap();
        let l = f.lower();
        assert_eq!(l.at(0, 0), 2.0);
        assert_eq!(l.at(0, 1), 0.0);
        assert_eq!(l.at(1, 0), 1.0);
        assert!((l.at(1, 1) - 2f64.sqrt()).abs() < 1e-15);
        let back = f.reconstruct();
        assert!(frob(&back.sub(&m).unwrap()) / frob(&m) < 1e-8);
    }

    #[test]
    fn rank_deficient_needs_ridge() {
        let m = Tensor::from_rows(&[vec![1., 1.], vec![1., 1.]]).unwrap();
        assert!(spd_factor(&m, 1e-3).is_ok());
        match spd_factor(&m, 0.0) {
            Err(Error::Singular { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Tensor::from_rows(&[vec![2., 1.], vec![0., 2.]]).unwrap();
        assert!(matches!(spd_factor(&m, 0.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn solve_cases() {
        let f = spd_factor(&Tensor::identity(3), 0.0).unwrap();
        let w = spd_solve(&f, &Tensor::vector(vec![1., 2., 3.])).unwrap();
        assert_eq!(w.data(), &[1., 2., 3.]);

        let m = Tensor::from_rows(&[vec![4., 2.], vec![2., 3.]]).unwrap();
        let f = spd_factor(&m, 0.0).unwrap();
        let w = spd_solve(&f, &Tensor::vector(vec![1., 0.])).unwrap();
        assert!((w.data()[0] - 0.375).abs() < 1e-15);
        assert!((w.data()[1] + 0.25).abs() < 1e-15);
        let back = matvec(&m, w.data()).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-15 && back[1].abs() < 1e-15);

        assert!(matches!(
            spd_solve(&f, &Tensor::vector(vec![1., 2., 3.])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn solve_residual_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_spd(&mut rng, 6);
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = spd_factor(&m, 0.0).unwrap();
        let w = spd_solve(&f, &Tensor::vector(v.clone())).unwrap();
        let mw = matvec(&m, w.data()).unwrap();
        let res: f64 = mw.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(res < 1e-8, "residual {res}");
    }

    #[test]
    fn class_stats_hand_case() {
        let feats = vec![Tensor::vector(vec![0., 0.]), Tensor::vector(vec![2., 2.])];
        let s = class_stats(&feats, &[0, 0], 1).unwrap();
        assert_eq!(s.means[0].data(), &[1., 1.]);
        assert_eq!(s.tied_cov.data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn class_stats_zero_variance() {
        let feats = vec![Tensor::vector(vec![3., -1.]); 4];
        let s = class_stats(&feats, &[0, 1, 0, 1], 2).unwrap();
        assert!(s.tied_cov.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_stats_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let feats: Vec<Tensor> = (0..20)
            .map(|_| Tensor::vector((0..d).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let s = class_stats(&feats, &labels, 2).unwrap();
        for c in 0..2 {
            let members: Vec<&Tensor> = feats
                .iter()
                .zip(&labels)
                .filter(|(_, &y)| y == c)
                .map(|(f, _)| f)
                .collect();
            for k in 0..d {
                let mu = members.iter().map(|f| f.data()[k]).sum::<f64>() / members.len() as f64;
                assert!((mu - s.means[c].data()[k]).abs() < 1e-10);
            }
        }
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for (f, &y) in feats.iter().zip(&labels) {
                    let mu = &s.means[y];
                    acc += (f.data()[i] - mu.data()[i]) * (f.data()[j] - mu.data()[j]);
                }
                assert!((acc / 20.0 - s.tied_cov.at(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn class_stats_errors() {
        let feats = vec![Tensor::vector(vec![0.]), Tensor::vector(vec![1.])];
        assert!(matches!(
            class_stats(&feats, &[0, 0], 2),
            Err(Error::MissingClass { class: 1 })
        ));
        assert!(matches!(
            class_stats(&feats[..1], &[0], 1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn default_ridge_floors_zero_trace() {
        assert_eq!(default_ridge(&Tensor::zeros(&[3, 3])), RIDGE_FLOOR);
        let m = Tensor::from_rows(&[vec![2., 0.], vec![0., 4.]]).unwrap();
        assert!((default_ridge(&m) - 3e-6).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, k);
            let b = random_matrix(&mut rng, k, m);
            let c = random_matrix(&mut rng, m, p);
            let left = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let right = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn solve_inverts_product(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_spd(&mut rng, n);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mv = matvec(&m, &v).unwrap();
            let w = spd_solve(&spd_factor(&m, 0.0).unwrap(), &Tensor::vector(mv)).unwrap();
            for (a, b) in w.data().iter().zip(&v) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn tied_cov_symmetric_psd_and_order_invariant(seed in any::<u64>(), n in 4usize..30, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats: Vec<Tensor> = (0..n)
                .map(|_| Tensor::vector((0..d).map(|_| rng.random_range(-3.0..3.0)).collect()))
                .collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let s = class_stats(&feats, &labels, 3).unwrap();
            for i in 0..d {
                for j in 0..d {
                    prop_assert_eq!(s.tied_cov.at(i, j).to_bits(), s.tied_cov.at(j, i).to_bits());
                }
            }
            prop_assert!(spd_factor(&s.tied_cov, 1e-9).is_ok());

            let mut order: Vec<usize> = (0..n).collect();
            order.reverse();
            order.rotate_left(seed as usize % n);
            let pf: Vec<Tensor> = order.iter().map(|&i| feats[i].clone()).collect();
            let pl: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let s2 = class_stats(&pf, &pl, 3).unwrap();
            for (a, b) in s.means.iter().zip(&s2.means) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
            for (x, y) in s.tied_cov.data().iter().zip(s2.tied_cov.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
