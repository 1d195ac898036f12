use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};
use crate::rng::Entropy;

/// Per-component log densities are floored here before the log-sum-exp.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

/// Ridge added to every covariance before factorizing for density evaluation.
pub const DEFAULT_REGULARIZATION: f64 = 1e-9;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

/// One weighted Gaussian. `cov` is row-major `dim × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl Component {
    pub fn new(weight: f64, mean: Vec<f64>, cov: Vec<f64>) -> Self {
        Self { weight, mean, cov }
    }

    /// `N(mean, variance · I)`.
    pub fn isotropic(weight: f64, mean: Vec<f64>, variance: f64) -> Self {
        let d = mean.len();
        let mut cov = linalg::identity(d);
        cov.iter_mut().for_each(|v| *v *= variance);
        Self { weight, mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone)]
struct Factor {
    log_weight: f64,
    density: Option<Cholesky>,
    sampling: Vec<f64>,
}

/// A finite mixture of Gaussians with cached factorizations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureJson", into = "MixtureJson")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    regularization: f64,
    factors: Vec<Factor>,
    cumulative: Vec<f64>,
}

impl PartialEq for GaussianMixture {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.components == other.components
    }
}

impl GaussianMixture {
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self> {
        Self::with_regularization(dim, components, DEFAULT_REGULARIZATION)
    }

    /// `regularization = 0` disables the covariance ridge; singular components
    /// then fail density evaluation.
    pub fn with_regularization(
        dim: usize,
        components: Vec<Component>,
        regularization: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be positive".into()));
        }
        if components.is_empty() {
            return Err(Error::InvalidMixture("no components".into()));
        }
        if !(regularization >= 0.0 && regularization.is_finite()) {
            return Err(Error::InvalidMixture(format!(
                "regularization {regularization} must be finite and nonnegative"
            )));
        }
        let mut total = 0.0;
        let mut factors = Vec::with_capacity(components.len());
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov.len() != dim * dim {
                return Err(Error::InvalidMixture(format!(
                    "component {i} does not have dimension {dim}"
                )));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {i} has weight {}",
                    c.weight
                )));
            }
            if c.mean.iter().chain(&c.cov).any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {i} is not finite"
                )));
            }
            let scale = c.cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for r in 0..dim {
                for s in 0..r {
                    if (c.cov[r * dim + s] - c.cov[s * dim + r]).abs() > SYMMETRY_TOL * scale {
                        return Err(Error::InvalidMixture(format!(
                            "component {i} covariance is not symmetric"
                        )));
                    }
                }
            }
            let sampling = linalg::psd_factor(&c.cov, dim).ok_or_else(|| {
                Error::InvalidMixture(format!("component {i} covariance is not PSD"))
            })?;
            let mut reg = c.cov.clone();
            linalg::add_diagonal(&mut reg, dim, regularization);
            factors.push(Factor {
                log_weight: c.weight.ln(),
                density: Cholesky::new(&reg, dim),
                sampling,
            });
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, not 1"
            )));
        }
        let mut acc = 0.0;
        let cumulative = components
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        Ok(Self {
            dim,
            components,
            regularization,
            factors,
            cumulative,
        })
    }

    /// Like [`new`](Self::new) but rescales the weights to sum to one.
    pub fn normalized(dim: usize, mut components: Vec<Component>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        components.iter_mut().for_each(|c| c.weight /= total);
        Self::new(dim, components)
    }

    /// Single isotropic Gaussian `N(mean, variance · I)`.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(d, vec![Component::isotropic(1.0, mean, variance)])
    }

    /// Equal-weight isotropic modes evenly spaced on a circle of `radius` in the plane.
    pub fn ring(modes: usize, radius: f64, variance: f64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::InvalidMixture("ring needs at least one mode".into()));
        }
        let components = (0..modes)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / modes as f64;
                let mean = vec![radius * angle.cos(), radius * angle.sin()];
                Component::isotropic(1.0 / modes as f64, mean, variance)
            })
            .collect();
        Self::normalized(2, components)
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("standard normal is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn density_factor(&self, i: usize) -> Result<&Cholesky> {
        self.factors[i]
            .density
            .as_ref()
            .ok_or(Error::SingularCovariance { component: i })
    }

    /// `log Σ_i w_i N(x; μ_i, Σ_i)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut terms = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            if c.weight == 0.0 {
                continue;
            }
            let chol = self.density_factor(i)?;
            let lp = chol.log_normal_density(x, &c.mean).max(LOG_DENSITY_FLOOR);
            terms.push(self.factors[i].log_weight + lp);
        }
        Ok(linalg::log_sum_exp(&terms))
    }

    /// `∇_x log p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut logs = Vec::with_capacity(self.components.len());
        let mut grads = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            if c.weight == 0.0 {
                continue;
            }
            let chol = self.density_factor(i)?;
            let lp = chol.log_normal_density(x, &c.mean).max(LOG_DENSITY_FLOOR);
            logs.push(self.factors[i].log_weight + lp);
            let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(a, b)| b - a).collect();
            grads.push(chol.solve(&diff));
        }
        let norm = linalg::log_sum_exp(&logs);
        let mut out = vec![0.0; self.dim];
        for (lp, g) in logs.iter().zip(&grads) {
            let r = (lp - norm).exp();
            out.iter_mut().zip(g).for_each(|(o, gi)| *o += r * gi);
        }
        Ok(out)
    }

    /// Index of the component selected by a uniform draw `u ∈ [0, 1)`.
    fn pick(&self, u: f64) -> usize {
        let target = u * self.cumulative[self.cumulative.len() - 1];
        self.cumulative
            .iter()
            .position(|&c| target < c)
            .unwrap_or(self.components.len() - 1)
    }

    /// One draw, plus the index of the component it came from.
    pub fn sample_one_labeled<E: Entropy + ?Sized>(&self, rng: &mut E) -> (Vec<f64>, usize) {
        let k = if self.components.len() == 1 {
            0
        } else {
            self.pick(rng.uniform())
        };
        let z = rng.standard_normal_vec(self.dim);
        let c = &self.components[k];
        let x = linalg::lower_transform(&self.factors[k].sampling, self.dim, &c.mean, &z);
        (x, k)
    }

    pub fn sample_one<E: Entropy + ?Sized>(&self, rng: &mut E) -> Vec<f64> {
        self.sample_one_labeled(rng).0
    }

    /// `n` i.i.d. draws.
    pub fn sample<E: Entropy + ?Sized>(&self, rng: &mut E, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentJson {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureJson {
    dim: usize,
    components: Vec<ComponentJson>,
}

impl TryFrom<MixtureJson> for GaussianMixture {
    type Error = Error;

    fn try_from(raw: MixtureJson) -> Result<Self> {
        let d = raw.dim;
        let components = raw
            .components
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                if c.cov.len() != d || c.cov.iter().any(|row| row.len() != d) {
                    return Err(Error::InvalidMixture(format!(
                        "component {i} covariance is not {d}x{d}"
                    )));
                }
                Ok(Component::new(c.weight, c.mean, c.cov.concat()))
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(d, components)
    }
}

impl From<GaussianMixture> for MixtureJson {
    fn from(g: GaussianMixture) -> Self {
        let d = g.dim;
        MixtureJson {
            dim: d,
            components: g
                .components
                .into_iter()
                .map(|c| ComponentJson {
                    weight: c.weight,
                    mean: c.mean,
                    cov: c.cov.chunks(d).map(<[f64]>::to_vec).collect(),
                })
                .collect(),
        }
    }
}

/// Log density ratio `log q(x) - log p(x)`, kept finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogRatio(f64);

impl LogRatio {
    /// Magnitude bound; twice the density floor span.
    pub const BOUND: f64 = 2.0 * -LOG_DENSITY_FLOOR;

    pub const ONE: LogRatio = LogRatio(0.0);

    /// Clamps into `[-BOUND, BOUND]`; NaN maps to `-BOUND`.
    pub fn new(value: f64) -> Self {
        if value.is_nan() {
            return Self(-Self::BOUND);
        }
        Self(value.clamp(-Self::BOUND, Self::BOUND))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The ratio itself, `exp(value)`.
    pub fn ratio(self) -> f64 {
        self.0.exp()
    }
}

/// `log q(x) - log p(x)`.
pub fn oracle_log_ratio(q: &GaussianMixture, p: &GaussianMixture, x: &[f64]) -> Result<LogRatio> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            got: p.dim(),
        });
    }
    Ok(LogRatio::new(q.log_density(x)? - p.log_density(x)?))
}
