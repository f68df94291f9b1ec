//! Hand-crafted smoothing baselines over the T×C feature plane: Gaussian,
//! median, and mean filters with square windows and replicate edge padding.

use crate::error::Error;
use crate::features::FeatureMatrix;
use crate::tensor::correlate2d_replicate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterKind {
    Gaussian,
    Median,
    Mean,
}

impl FilterKind {
    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::Gaussian => "gaussian",
            FilterKind::Median => "median",
            FilterKind::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "gaussian" => Ok(FilterKind::Gaussian),
            "median" => Ok(FilterKind::Median),
            "mean" => Ok(FilterKind::Mean),
            other => Err(Error::Invalid(format!("unknown filter kind {other:?}"))),
        }
    }
}

/// Square-window smoothing filter. `sigma` only matters for the Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub window: usize,
    pub sigma: f64,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Invalid(format!(
                "filter window must be odd and positive, got {}",
                self.window
            )));
        }
        if self.kind == FilterKind::Gaussian && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Invalid(format!(
                "gaussian sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// The 2-D kernel for the linear kinds (outer product of the 1-D kernel);
    /// `None` for the median, which has no kernel representation.
    pub fn kernel2d(&self) -> Result<Option<Vec<f64>>, Error> {
        self.validate()?;
        let k1 = match self.kind {
            FilterKind::Gaussian => gaussian_kernel(self.window, self.sigma)?,
            FilterKind::Mean => vec![1.0 / self.window as f64; self.window],
            FilterKind::Median => return Ok(None),
        };
        let n = self.window;
        let mut k2 = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k2[i * n + j] = k1[i] * k1[j];
            }
        }
        Ok(Some(k2))
    }
}

/// Sampled, renormalized 1-D Gaussian: symmetric, positive, sums to 1.
pub fn gaussian_kernel(window: usize, sigma: f64) -> Result<Vec<f64>, Error> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Invalid(format!(
            "gaussian window must be odd and positive, got {window}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!(
            "gaussian sigma must be positive and finite, got {sigma}"
        )));
    }
    let half = (window / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    for v in &mut k {
        *v /= z;
    }
    Ok(k)
}

/// Median of a slice; an even count averages the two central values.
fn median_of(buf: &mut [f64]) -> f64 {
    buf.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        0.5 * (buf[n / 2 - 1] + buf[n / 2])
    }
}

/// Applies the filter over the feature plane with replicate edge padding.
pub fn apply_filter(spec: &FilterSpec, x: &FeatureMatrix) -> Result<FeatureMatrix, Error> {
    spec.validate()?;
    let (r, c) = (x.frames(), x.channels());
    let limit = 2 * r.min(c) - 1;
    if spec.window > limit {
        return Err(Error::Invalid(format!(
            "filter window {} exceeds limit {} for a {r} x {c} input",
            spec.window, limit
        )));
    }
    match spec.kernel2d()? {
        Some(kern) => {
            let out = correlate2d_replicate(x.data(), r, c, &kern, spec.window, spec.window);
            Ok(FeatureMatrix::new(r, c, out)?)
        }
        None => {
            let half = (spec.window / 2) as isize;
            let mut out = vec![0.0; r * c];
            let mut win = Vec::with_capacity(spec.window * spec.window);
            for t in 0..r as isize {
                for u in 0..c as isize {
                    win.clear();
                    for i in -half..=half {
                        for j in -half..=half {
                            let ti = (t + i).clamp(0, r as isize - 1) as usize;
                            let uj = (u + j).clamp(0, c as isize - 1) as usize;
                            win.push(x.data()[ti * c + uj]);
                        }
                    }
                    out[(t as usize) * c + u as usize] = median_of(&mut win);
                }
            }
            Ok(FeatureMatrix::new(r, c, out)?)
        }
    }
}
