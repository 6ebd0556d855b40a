use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_RTOL: f64 = 1e-10;

/// Top principal axes of a feature matrix.
#[derive(Debug, Clone)]
pub struct Principal {
    /// Feature-dimension order the components are expressed in.
    pub column_order: Vec<usize>,
    pub mean: Vec<f64>,
    /// Component `k` is `components[k]`, unit norm, length `d`.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
}

/// Canonical column order: lexicographic on the column values.
///
/// Feeding the decomposition a canonical layout makes the result independent
/// of how feature dimensions were ordered on input.
fn canonical_columns(x: &[Vec<f64>], d: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        for row in x {
            match row[a].total_cmp(&row[b]) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    });
    order
}

/// Covariance eigendecomposition of `features` (`[N × d]`), keeping `k`
/// components with the largest-magnitude loading made positive.
pub fn principal_components<S: Scalar>(features: &Tensor<S>, k: usize) -> Result<Principal> {
    if features.ndim() != 2 || features.dim(0) < 2 {
        return Err(Error::dim("principal_components", features.shape(), &[2]));
    }
    let (n, d) = (features.dim(0), features.dim(1));
    let rows: Vec<Vec<f64>> = features
        .rows()
        .map(|r| r.iter().map(|v| v.to_f64_lossless()).collect())
        .collect();
    let order = canonical_columns(&rows, d);
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][order[j]]);
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);

    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[idx[0]].max(0.0);
    let rank = if top > 0.0 {
        idx.iter().filter(|&&i| eig.eigenvalues[i] > RANK_RTOL * top).count()
    } else {
        0
    };
    if rank < k {
        return Err(Error::DegenerateRank { rank });
    }
    let components = idx[..k]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(Principal {
        column_order: order,
        mean,
        components,
        eigenvalues: idx[..k].iter().map(|&i| eig.eigenvalues[i]).collect(),
        rank,
    })
}

impl Principal {
    /// Projects each row of `features` onto the kept components.
    pub fn project<S: Scalar>(&self, features: &Tensor<S>) -> Vec<Vec<f64>> {
        features
            .rows()
            .map(|r| {
                self.components
                    .iter()
                    .map(|c| {
                        self.column_order
                            .iter()
                            .zip(&self.mean)
                            .zip(c)
                            .fold(0.0, |acc, ((&j, &m), &w)| acc + (r[j].to_f64_lossless() - m) * w)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Renders patch features as RGB: the first three principal components,
/// each min-max scaled to `[0, 1]`, laid out on an `h × w` grid.
pub fn pca_rgb<S: Scalar>(patch_features: &Tensor<S>, grid: (usize, usize)) -> Result<Tensor<S>> {
    let (h, w) = grid;
    if patch_features.ndim() != 2 || patch_features.dim(0) != h * w {
        return Err(Error::dim("pca_rgb", patch_features.shape(), &[h * w]));
    }
    if patch_features.dim(1) < 3 {
        return Err(Error::InvalidArgument(format!(
            "pca_rgb needs at least 3 feature dimensions, got {}",
            patch_features.dim(1)
        )));
    }
    let pcs = principal_components(patch_features, 3)?;
    let proj = pcs.project(patch_features);
    let mut out = Tensor::zeros(&[h, w, 3]);
    for ch in 0..3 {
        let (lo, hi) = proj
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[ch]), hi.max(p[ch])));
        let span = hi - lo;
        for (i, p) in proj.iter().enumerate() {
            let v = if span > 0.0 { (p[ch] - lo) / span } else { 0.5 };
            out.data_mut()[i * 3 + ch] = S::of(v);
        }
    }
    Ok(out)
}
