//! Ensemble statistics with order-insensitive reductions.

/// Pairwise (cascade) summation: the result depends only on the slice order,
/// never on how work was scheduled, and rounding grows like `log n`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let (a, b) = values.split_at(values.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, std_error: f64::NAN, n };
        }
        let mean = pairwise_sum(values) / n as f64;
        if n == 1 {
            return MeanSe { mean, std_error: 0.0, n };
        }
        let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&sq) / (n - 1) as f64;
        MeanSe { mean, std_error: (var / n as f64).sqrt(), n }
    }

    pub fn variance(&self) -> f64 {
        self.std_error * self.std_error * self.n as f64
    }
}

/// `diff / se`, with an exact zero difference scoring zero even when `se == 0`.
pub fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY.copysign(diff)
    } else {
        diff / se
    }
}

/// Least-squares slope of `y` against `x`, with its standard error from the
/// residuals (zero when the fit has no residual degrees of freedom).
pub fn fit_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    if x.len() <= 2 {
        return (slope, 0.0);
    }
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - my - slope * (a - mx);
            r * r
        })
        .sum();
    (slope, (rss / (n - 2.0) / sxx).sqrt())
}
