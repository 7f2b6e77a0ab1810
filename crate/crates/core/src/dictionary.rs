//! Polynomial dictionaries `b(z, x)` and the covariate dictionary `q(x)`.
//!
//! Coordinate ordering of `q(x)` is frozen:
//!
//! 1. the intercept,
//! 2. for each covariate `j` in column order, the powers `x_j, x_j^2, ..., x_j^degree`,
//! 3. if interactions are enabled, the products `x_j * x_m` for `j < m` in
//!    lexicographic order.
//!
//! The full basis stacks `q` in one of two layouts:
//!
//! * main-interaction: `b(z, x) = [q(x); z q(x)]`
//! * split: `b(z, x) = [z q(x); (1 - z) q(x)]`

use serde::{Deserialize, Serialize};

use crate::dataset::IvDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    MainInteraction,
    Split,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main-interaction" => Ok(Layout::MainInteraction),
            "split" => Ok(Layout::Split),
            other => Err(Error::Config(format!(
                "unknown layout `{other}` (expected main-interaction or split)"
            ))),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::MainInteraction => "main-interaction",
            Layout::Split => "split",
        })
    }
}

/// Recipe for the basis; turned into a [`Dictionary`] by [`DictionarySpec::build`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub degree: usize,
    pub interactions: bool,
    pub layout: Layout,
    pub standardize: bool,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        DictionarySpec {
            degree: 4,
            interactions: true,
            layout: Layout::MainInteraction,
            standardize: true,
        }
    }
}

impl DictionarySpec {
    /// Fourth-order polynomials of a scalar covariate plus z-interactions (`p = 10`).
    pub fn simulation_preset() -> Self {
        DictionarySpec {
            degree: 4,
            interactions: false,
            layout: Layout::MainInteraction,
            standardize: true,
        }
    }

    /// Width of `q(x)` for `k` covariates.
    pub fn q_width(&self, k: usize) -> usize {
        let pairs = if self.interactions {
            k * k.saturating_sub(1) / 2
        } else {
            0
        };
        1 + k * self.degree + pairs
    }

    /// Width of `b(z, x)` for `k` covariates.
    pub fn p(&self, k: usize) -> usize {
        2 * self.q_width(k)
    }

    /// Fixes the covariate transformation. With `standardize`, every column is
    /// centered and divided by its sample standard deviation (columns with zero
    /// spread are only centered).
    pub fn build(&self, data: &IvDataset) -> Dictionary {
        let k = data.k();
        let n = data.n() as f64;
        let mut center = vec![0.0; k];
        let mut scale = vec![1.0; k];
        if self.standardize {
            for j in 0..k {
                let mean = (0..data.n()).map(|i| data.x_row(i)[j]).sum::<f64>() / n;
                let var = if data.n() > 1 {
                    (0..data.n())
                        .map(|i| (data.x_row(i)[j] - mean).powi(2))
                        .sum::<f64>()
                        / (n - 1.0)
                } else {
                    0.0
                };
                center[j] = mean;
                if var > 0.0 {
                    scale[j] = var.sqrt();
                }
            }
        }
        Dictionary {
            spec: *self,
            k,
            center,
            scale,
        }
    }

    /// Dictionary without any covariate transformation, for callers that do
    /// not have a dataset at hand.
    pub fn raw(&self, k: usize) -> Dictionary {
        Dictionary {
            spec: DictionarySpec {
                standardize: false,
                ..*self
            },
            k,
            center: vec![0.0; k],
            scale: vec![1.0; k],
        }
    }
}

/// A dictionary with its covariate transformation fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    spec: DictionarySpec,
    k: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
}

/// Prefix of the basis used to initialize the tuning loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubDictionary {
    pub indices: Vec<usize>,
}

impl SubDictionary {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// `ceil(p / 40)` clamped to `[2, p]`.
pub fn sub_dictionary_size(p: usize) -> usize {
    p.div_ceil(40).max(2).min(p)
}

impl Dictionary {
    pub fn spec(&self) -> &DictionarySpec {
        &self.spec
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.spec.p(self.k)
    }

    pub fn q_width(&self) -> usize {
        self.spec.q_width(self.k)
    }

    /// Coordinates of `b` that are intercepts (always-one within their block).
    pub fn intercepts(&self) -> Vec<usize> {
        match self.spec.layout {
            Layout::MainInteraction => vec![0],
            Layout::Split => vec![0, self.q_width()],
        }
    }

    pub fn sub_dictionary(&self) -> SubDictionary {
        SubDictionary {
            indices: (0..sub_dictionary_size(self.p())).collect(),
        }
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.k {
            return Err(Error::Shape(format!(
                "covariate vector has width {}, dictionary expects {}",
                x.len(),
                self.k
            )));
        }
        Ok(())
    }

    /// Writes `q(x)` into `out` (length `q_width`).
    pub fn q_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_width(x)?;
        if out.len() != self.q_width() {
            return Err(Error::Shape(format!(
                "output buffer has length {}, q has width {}",
                out.len(),
                self.q_width()
            )));
        }
        out[0] = 1.0;
        let mut at = 1;
        for j in 0..self.k {
            let xj = (x[j] - self.center[j]) / self.scale[j];
            let mut power = 1.0;
            for _ in 0..self.spec.degree {
                power *= xj;
                out[at] = power;
                at += 1;
            }
        }
        if self.spec.interactions {
            for j in 0..self.k {
                let xj = (x[j] - self.center[j]) / self.scale[j];
                for m in j + 1..self.k {
                    let xm = (x[m] - self.center[m]) / self.scale[m];
                    out[at] = xj * xm;
                    at += 1;
                }
            }
        }
        Ok(())
    }

    pub fn q(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.q_width()];
        self.q_into(x, &mut out)?;
        Ok(out)
    }

    fn stack(&self, z: f64, q: &[f64], out: &mut [f64]) {
        let w = q.len();
        match self.spec.layout {
            Layout::MainInteraction => {
                for (j, &v) in q.iter().enumerate() {
                    out[j] = v;
                    out[w + j] = z * v;
                }
            }
            Layout::Split => {
                for (j, &v) in q.iter().enumerate() {
                    out[j] = z * v;
                    out[w + j] = (1.0 - z) * v;
                }
            }
        }
    }

    /// `b(z, x)`.
    pub fn expand(&self, z: f64, x: &[f64]) -> Result<Vec<f64>> {
        let q = self.q(x)?;
        let mut out = vec![0.0; self.p()];
        self.stack(z, &q, &mut out);
        Ok(out)
    }

    /// `b(1, x) - b(0, x)`.
    pub fn instrument_contrast(&self, x: &[f64]) -> Result<Vec<f64>> {
        let one = self.expand(1.0, x)?;
        let zero = self.expand(0.0, x)?;
        Ok(one.iter().zip(&zero).map(|(a, b)| a - b).collect())
    }

    /// Basis rows for every observation, evaluated at the observed instrument,
    /// at `z = 1` and at `z = 0`.
    pub fn expand_dataset(&self, data: &IvDataset) -> Result<ExpandedBasis> {
        let n = data.n();
        let p = self.p();
        let w = self.q_width();
        let mut observed = vec![0.0; n * p];
        let mut at_one = vec![0.0; n * p];
        let mut at_zero = vec![0.0; n * p];
        let mut q = vec![0.0; n * w];
        for i in 0..n {
            let qi = &mut q[i * w..(i + 1) * w];
            self.q_into(data.x_row(i), qi)?;
            let qi = &q[i * w..(i + 1) * w];
            self.stack(data.z()[i], qi, &mut observed[i * p..(i + 1) * p]);
            self.stack(1.0, qi, &mut at_one[i * p..(i + 1) * p]);
            self.stack(0.0, qi, &mut at_zero[i * p..(i + 1) * p]);
        }
        Ok(ExpandedBasis {
            n,
            p,
            q_width: w,
            observed,
            at_one,
            at_zero,
            q,
        })
    }
}

/// Row-major basis evaluations for a whole dataset.
#[derive(Debug, Clone)]
pub struct ExpandedBasis {
    pub n: usize,
    pub p: usize,
    pub q_width: usize,
    pub observed: Vec<f64>,
    pub at_one: Vec<f64>,
    pub at_zero: Vec<f64>,
    pub q: Vec<f64>,
}

impl ExpandedBasis {
    pub fn observed_row(&self, i: usize) -> &[f64] {
        &self.observed[i * self.p..(i + 1) * self.p]
    }

    pub fn one_row(&self, i: usize) -> &[f64] {
        &self.at_one[i * self.p..(i + 1) * self.p]
    }

    pub fn zero_row(&self, i: usize) -> &[f64] {
        &self.at_zero[i * self.p..(i + 1) * self.p]
    }

    pub fn q_row(&self, i: usize) -> &[f64] {
        &self.q[i * self.q_width..(i + 1) * self.q_width]
    }

    /// `b(z, x_i)` for an arbitrary instrument value.
    pub fn row_at(&self, i: usize, z: f64) -> &[f64] {
        if z == 1.0 {
            self.one_row(i)
        } else {
            self.zero_row(i)
        }
    }
}
