//! Small estimators shared by the Monte Carlo routines.

use alloc::vec::Vec;

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// Accumulates a stream into a fixed number of contiguous batches.
///
/// The number of samples must be known up front so that every batch gets the
/// same length (the last one absorbs the remainder).
#[derive(Debug, Clone)]
pub struct BatchMeans {
    per_batch: u64,
    batches: Vec<RunningStats>,
    current: RunningStats,
    total: RunningStats,
    max_batches: usize,
}

impl BatchMeans {
    pub fn new(expected_samples: u64, batches: usize) -> Self {
        let batches = batches.max(2);
        Self {
            per_batch: (expected_samples / batches as u64).max(1),
            batches: Vec::with_capacity(batches),
            current: RunningStats::new(),
            total: RunningStats::new(),
            max_batches: batches,
        }
    }

    pub fn push(&mut self, x: f64) {
        self.total.push(x);
        self.current.push(x);
        if self.current.count() == self.per_batch && self.batches.len() + 1 < self.max_batches {
            self.batches.push(self.current);
            self.current = RunningStats::new();
        }
    }

    pub fn finish(mut self) -> BatchSummary {
        if self.current.count() > 0 {
            self.batches.push(self.current);
        }
        let means: Vec<f64> = self.batches.iter().map(|b| b.mean()).collect();
        let across: RunningStats = means.iter().copied().collect();
        BatchSummary {
            mean: self.total.mean(),
            std_err: across.std_err(),
            batch_means: means,
            samples: self.total.count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchSummary {
    pub mean: f64,
    /// Standard error from the spread of batch means (autocorrelation aware
    /// when batches are long compared with the correlation time).
    pub std_err: f64,
    pub batch_means: Vec<f64>,
    pub samples: u64,
}

impl BatchSummary {
    /// Compares the first and second half of the batches; returns the
    /// standardized difference of their means.
    pub fn half_split_z(&self) -> f64 {
        let b = self.batch_means.len();
        if b < 4 {
            return 0.0;
        }
        let (first, second) = self.batch_means.split_at(b / 2);
        let s1: RunningStats = first.iter().copied().collect();
        let s2: RunningStats = second.iter().copied().collect();
        let se = (s1.std_err().powi(2) + s2.std_err().powi(2)).sqrt();
        if se == 0.0 {
            if s1.mean() == s2.mean() {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (s1.mean() - s2.mean()).abs() / se
        }
    }
}

/// Ordinary least squares fit `y = a + b x`; returns `(a, b, se_b)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    let se = if x.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (intercept, slope, se)
}

/// Hill estimator of the tail index from the `k` largest observations.
///
/// Returns the estimated exponent `γ` of `P(X > t) ≈ C t^{-γ}`, i.e. the
/// reciprocal of the mean log-excess over the `(k+1)`-th largest value.
/// `data` is sorted in place.
pub fn hill_tail_index(data: &mut [f64], k: usize) -> f64 {
    assert!(k >= 1 && k < data.len(), "need 1 <= k < n");
    data.sort_unstable_by(|a, b| b.partial_cmp(a).expect("NaN in Hill data"));
    let threshold = data[k].ln();
    let mean_excess = data[..k].iter().map(|x| x.ln() - threshold).sum::<f64>() / k as f64;
    1.0 / mean_excess
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_one_sample(data: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x: Vec<f64> = data.to_vec();
    x.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov survival function `P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// p-value of the two-sample KS test (asymptotic, with the usual small
/// sample correction of the effective size).
pub fn ks_two_sample_pvalue(d: f64, na: usize, nb: usize) -> f64 {
    let ne = (na as f64 * nb as f64) / (na as f64 + nb as f64);
    let s = ne.sqrt();
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}

/// p-value of the one-sample KS test.
pub fn ks_one_sample_pvalue(d: f64, n: usize) -> f64 {
    let s = (n as f64).sqrt();
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}
