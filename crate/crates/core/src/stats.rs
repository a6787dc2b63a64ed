//! Compensated summation and sample moments for Monte Carlo aggregation.

/// Neumaier-compensated sum. Order-sensitive only at the level of the
/// compensation term, so different reduction orders agree to ~1 ulp.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = neumaier_sum(xs.iter().copied()) / n as f64;
        if n == 1 {
            return MeanSe { mean, se: f64::NAN, n };
        }
        let ss = neumaier_sum(xs.iter().map(|x| (x - mean) * (x - mean)));
        let var = ss / (n - 1) as f64;
        MeanSe { mean, se: (var / n as f64).sqrt(), n }
    }

    /// Sample standard deviation implied by the standard error.
    pub fn sd(&self) -> f64 {
        self.se * (self.n as f64).sqrt()
    }

    /// `|mean - target| <= k * se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

/// Mean and SE of the paired difference `a_i - b_i`.
pub fn paired_difference(a: &[f64], b: &[f64]) -> MeanSe {
    assert_eq!(a.len(), b.len());
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    MeanSe::from_samples(&d)
}
