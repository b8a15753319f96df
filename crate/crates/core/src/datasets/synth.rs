use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{cholesky, haar_orthogonal, Matrix, Rng};

use super::set::{Label, LabeledSet, Space};

/// Largest absolute feature coordinate the scaling rule aims for.
pub const FEATURE_BOUND: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub informative_dims: usize,
    pub redundant_dims: usize,
    /// Number of Gaussian clusters; the first half is class 0, the rest
    /// class 1.
    pub clusters: usize,
    pub class_separation: f64,
    pub n_samples: usize,
    /// Range of the covariance eigenvalues.
    pub cov_eigen_min: f64,
    pub cov_eigen_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            informative_dims: 6,
            redundant_dims: 2,
            clusters: 4,
            class_separation: 1.0,
            n_samples: 500,
            cov_eigen_min: 0.25,
            cov_eigen_max: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn feature_dim(&self) -> usize {
        self.informative_dims + self.redundant_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.clusters % 2 != 0 {
            return Err(Error::Config(format!(
                "clusters must be even and positive, got {}",
                self.clusters
            )));
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return Err(Error::Config(format!(
                "class separation must be >= 0, got {}",
                self.class_separation
            )));
        }
        if self.informative_dims == 0 {
            return Err(Error::Config("informative_dims must be >= 1".into()));
        }
        if !(self.cov_eigen_min > 0.0) || self.cov_eigen_max < self.cov_eigen_min {
            return Err(Error::Config(format!(
                "invalid covariance eigenvalue range [{}, {}]",
                self.cov_eigen_min, self.cov_eigen_max
            )));
        }
        Ok(())
    }
}

/// The planted mixture in feature space.
///
/// Informative coordinates `x` follow `N(θ_k, Σ_k)` for a uniformly chosen
/// cluster `k`. A feature vector is `z = s·(x, Rx)` with a fixed linear map `R`
/// for the redundant coordinates and a scale `s` chosen so that every cluster
/// lies within `±0.9` in each coordinate up to three standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedDistribution {
    centroids: Vec<Vec<f64>>,
    covariances: Vec<Matrix>,
    cholesky: Vec<Matrix>,
    redundant_map: Matrix,
    scale: f64,
}

impl PlantedDistribution {
    pub fn sample(cfg: &SynthConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (k, p) = (cfg.clusters, cfg.informative_dims);
        let mut centroids: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..p).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                let d = crate::numkit::norm(&crate::numkit::sub(&centroids[i], &centroids[j]));
                min_dist = min_dist.min(d);
            }
        }
        if k > 1 && min_dist > 0.0 {
            let f = cfg.class_separation / min_dist;
            for c in centroids.iter_mut() {
                c.iter_mut().for_each(|v| *v *= f);
            }
        }
        let mut covariances = Vec::with_capacity(k);
        let mut factors = Vec::with_capacity(k);
        for _ in 0..k {
            let q = haar_orthogonal(p, rng)?;
            let eig: Vec<f64> = (0..p)
                .map(|_| rng.uniform_in(cfg.cov_eigen_min, cfg.cov_eigen_max))
                .collect();
            let cov = q.matmul(&Matrix::from_diag(&eig))?.matmul_t(&q)?.symmetrized()?;
            factors.push(cholesky(&cov)?);
            covariances.push(cov);
        }
        let redundant_map = Matrix::new(
            cfg.redundant_dims,
            p,
            rng.normal_vec(cfg.redundant_dims * p),
        )?;
        let mut bound: f64 = 0.0;
        for (mu, cov) in centroids.iter().zip(&covariances) {
            for j in 0..p {
                bound = bound.max(mu[j].abs() + 3.0 * cov[(j, j)].sqrt());
            }
            for r in 0..cfg.redundant_dims {
                let row = redundant_map.row(r);
                let mean: f64 = row.iter().zip(mu).map(|(a, b)| a * b).sum();
                let var = crate::numkit::dot(row, &cov.matvec(row)?);
                bound = bound.max(mean.abs() + 3.0 * var.sqrt());
            }
        }
        Ok(Self {
            centroids,
            covariances,
            cholesky: factors,
            redundant_map,
            scale: FEATURE_BOUND / bound,
        })
    }

    /// Cluster means in the unscaled informative coordinates.
    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Cluster covariances in the unscaled informative coordinates.
    pub fn covariances(&self) -> &[Matrix] {
        &self.covariances
    }

    pub fn redundant_map(&self) -> &Matrix {
        &self.redundant_map
    }

    /// Factor `s` mapping informative coordinates to features.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn informative_dims(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn feature_dim(&self) -> usize {
        self.informative_dims() + self.redundant_map.rows()
    }

    pub fn class_of_cluster(&self, k: usize) -> usize {
        usize::from(k >= self.clusters() / 2)
    }

    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z: Vec<f64> = x.iter().map(|v| v * self.scale).collect();
        z.extend(self.redundant_map.matvec(x)?.into_iter().map(|v| v * self.scale));
        Ok(z)
    }

    /// One feature vector from the equal-weight cluster mixture, with the
    /// class of the cluster it came from.
    pub fn sample_point(&self, rng: &mut Rng) -> Result<(Vec<f64>, usize)> {
        let c = rng.below(self.clusters());
        let e = rng.normal_vec(self.informative_dims());
        let mut x = self.cholesky[c].matvec(&e)?;
        for (xi, mi) in x.iter_mut().zip(&self.centroids[c]) {
            *xi += mi;
        }
        Ok((self.embed(&x)?, self.class_of_cluster(c)))
    }

    /// `n` labeled feature vectors, as equal a share per cluster as possible
    /// (clusters in order).
    pub fn draw(&self, n: usize, rng: &mut Rng) -> Result<LabeledSet> {
        let k = self.clusters();
        let p = self.informative_dims();
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for c in 0..k {
            let count = n / k + usize::from(c < n % k);
            for _ in 0..count {
                let e = rng.normal_vec(p);
                let mut x = self.cholesky[c].matvec(&e)?;
                for (xi, mi) in x.iter_mut().zip(&self.centroids[c]) {
                    *xi += mi;
                }
                rows.push(self.embed(&x)?);
                labels.push(Label::Class(self.class_of_cluster(c)));
            }
        }
        LabeledSet::from_rows(&rows, labels, Space::Feature)
    }

    /// Log density of each cluster at the informative part of feature `z`.
    pub fn cluster_log_densities(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for dimension {}",
                z.len(),
                self.feature_dim()
            )));
        }
        let p = self.informative_dims();
        let x: Vec<f64> = z[..p].iter().map(|v| v / self.scale).collect();
        let mut out = Vec::with_capacity(self.clusters());
        for (mu, l) in self.centroids.iter().zip(&self.cholesky) {
            // forward substitution L y = x − μ
            let mut y = vec![0.0; p];
            for i in 0..p {
                let mut s = x[i] - mu[i];
                for j in 0..i {
                    s -= l[(i, j)] * y[j];
                }
                y[i] = s / l[(i, i)];
            }
            let maha: f64 = y.iter().map(|v| v * v).sum();
            let logdet: f64 = (0..p).map(|i| 2.0 * l[(i, i)].ln()).sum();
            out.push(-0.5 * (maha + logdet));
        }
        Ok(out)
    }

    /// Class of the most likely cluster at `z`.
    pub fn oracle(&self, z: &[f64]) -> Result<usize> {
        let ld = self.cluster_log_densities(z)?;
        let mut best = 0;
        for (k, v) in ld.iter().enumerate() {
            if *v > ld[best] {
                best = k;
            }
        }
        Ok(self.class_of_cluster(best))
    }
}

/// Output of [`generate_feature_space`].
#[derive(Clone, Debug)]
pub struct FeatureSpaceSample {
    pub featureset: LabeledSet,
    pub distribution: PlantedDistribution,
}

/// Draw a planted mixture and `cfg.n_samples` labeled feature vectors from it.
pub fn generate_feature_space(cfg: &SynthConfig, rng: &mut Rng) -> Result<FeatureSpaceSample> {
    cfg.validate()?;
    if cfg.n_samples < cfg.clusters {
        return Err(Error::Config(format!(
            "n_samples {} below the cluster count {}",
            cfg.n_samples, cfg.clusters
        )));
    }
    let distribution = PlantedDistribution::sample(cfg, rng)?;
    let featureset = distribution.draw(cfg.n_samples, rng)?;
    Ok(FeatureSpaceSample {
        featureset,
        distribution,
    })
}
