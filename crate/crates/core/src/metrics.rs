//! Evaluation metrics: SSIM with maps, RMSE on the Hounsfield scale, the
//! Mann-Whitney U test, median-slice selection, and masked ROI metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::real::Real;
use crate::types::Image2D;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of the normalized intensity scale.
const SSIM_L: f64 = 1.0;

fn gaussian_window(n: usize) -> Vec<f64> {
    let half = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n * n)
        .map(|i| {
            let dy = i as f64 / n as f64;
            let dy = dy.floor() - half;
            let dx = (i % n) as f64 - half;
            (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Windowed SSIM map over the valid (fully covered) region. The window is
/// the standard 11x11 Gaussian, shrunk to the image when the image is
/// smaller.
pub fn ssim_map<T: Real>(a: &Image2D<T>, b: &Image2D<T>) -> Result<Image2D<f64>> {
    if a.size != b.size {
        return Err(TomoError::Dimension(format!(
            "ssim inputs {}x{} vs {}x{}",
            a.size, a.size, b.size, b.size
        )));
    }
    let size = a.size;
    let win = SSIM_WINDOW.min(size);
    let w = gaussian_window(win);
    let out_size = size - win + 1;
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let mut map = Image2D::zeros(out_size);
    for r0 in 0..out_size {
        for c0 in 0..out_size {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for wr in 0..win {
                for wc in 0..win {
                    let wt = w[wr * win + wc];
                    mu_a += wt * a.get(r0 + wr, c0 + wc).as_f64();
                    mu_b += wt * b.get(r0 + wr, c0 + wc).as_f64();
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for wr in 0..win {
                for wc in 0..win {
                    let wt = w[wr * win + wc];
                    let da = a.get(r0 + wr, c0 + wc).as_f64() - mu_a;
                    let db = b.get(r0 + wr, c0 + wc).as_f64() - mu_b;
                    var_a += wt * da * da;
                    var_b += wt * db * db;
                    cov += wt * da * db;
                }
            }
            let v = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            map.set(r0, c0, v);
        }
    }
    Ok(map)
}

/// Mean of the SSIM map.
pub fn ssim<T: Real>(a: &Image2D<T>, b: &Image2D<T>) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.data.iter().sum::<f64>() / map.data.len() as f64)
}

/// Root-mean-square error on normalized intensities.
pub fn rmse<T: Real>(a: &Image2D<T>, b: &Image2D<T>) -> Result<f64> {
    if a.size != b.size {
        return Err(TomoError::Dimension("rmse shape mismatch".into()));
    }
    let n = a.data.len() as f64;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok((s / n).sqrt())
}

/// RMSE after converting attenuation to Hounsfield units,
/// `HU = 1000 (mu - mu_water) / mu_water`.
pub fn rmse_hu<T: Real>(a: &Image2D<T>, b: &Image2D<T>, mu_water: f64) -> Result<f64> {
    Ok(rmse(a, b)? * 1000.0 / mu_water)
}

/// Test direction for [`mann_whitney_u`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    TwoSided,
    /// x stochastically greater than y.
    Greater,
    Less,
}

fn midranks(pooled: &[f64]) -> Vec<f64> {
    let n = pooled.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn u_statistic(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&pooled);
    let r1: f64 = ranks[..x.len()].iter().sum();
    r1 - (x.len() * (x.len() + 1)) as f64 / 2.0
}

/// Complementary error function, absolute error below 1.5e-7.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Exact distribution tail probabilities by enumerating every assignment of
/// the pooled sample to the first group.
fn exact_tails(x: &[f64], y: &[f64], u_obs: f64) -> (f64, f64) {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&pooled);
    let n = pooled.len();
    let n1 = x.len();
    let mut le = 0u64;
    let mut ge = 0u64;
    let mut total = 0u64;
    let mut chosen: Vec<usize> = (0..n1).collect();
    loop {
        let r1: f64 = chosen.iter().map(|&i| ranks[i]).sum();
        let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
        if u <= u_obs + 1e-9 {
            le += 1;
        }
        if u >= u_obs - 1e-9 {
            ge += 1;
        }
        total += 1;
        // next combination in lexicographic order
        let mut i = n1;
        loop {
            if i == 0 {
                return (le as f64 / total as f64, ge as f64 / total as f64);
            }
            i -= 1;
            if chosen[i] < n - (n1 - i) {
                chosen[i] += 1;
                for j in i + 1..n1 {
                    chosen[j] = chosen[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Mann-Whitney U test with mid-ranks. Exact enumeration for pooled sizes
/// up to 20, otherwise the normal approximation with tie-corrected variance
/// and continuity correction.
pub fn mann_whitney_u(x: &[f64], y: &[f64], alternative: Alternative) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(TomoError::DegenerateInput(
            "rank test needs at least one observation per group".into(),
        ));
    }
    let u = u_statistic(x, y);
    let n1 = x.len() as f64;
    let n2 = y.len() as f64;
    let p = if x.len() + y.len() <= 20 {
        let (p_le, p_ge) = exact_tails(x, y, u);
        match alternative {
            Alternative::Greater => p_ge,
            Alternative::Less => p_le,
            Alternative::TwoSided => (2.0 * p_le.min(p_ge)).min(1.0),
        }
    } else {
        let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
        let n = pooled.len() as f64;
        let mut sorted = pooled.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let mean = n1 * n2 / 2.0;
        let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
        if var <= 0.0 {
            return Ok((u, 1.0));
        }
        let sd = var.sqrt();
        match alternative {
            Alternative::Greater => normal_sf((u - mean - 0.5) / sd),
            Alternative::Less => normal_sf((mean - u - 0.5) / sd),
            Alternative::TwoSided => {
                let z = ((u - mean).abs() - 0.5).max(0.0) / sd;
                (2.0 * normal_sf(z)).min(1.0)
            }
        }
    };
    Ok((u, p))
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Picks the slice whose per-slice SSIM rounds to the median (3 decimals)
/// for both methods at once; when no slice matches both, the joint nearest
/// slice by L1 distance to the two medians.
pub fn median_ssim_slice(method_a: &[f64], method_b: &[f64]) -> Result<usize> {
    if method_a.is_empty() || method_a.len() != method_b.len() {
        return Err(TomoError::Dimension(
            "median slice selection needs matching nonempty score lists".into(),
        ));
    }
    let med_a = median(method_a);
    let med_b = median(method_b);
    for i in 0..method_a.len() {
        if round3(method_a[i]) == round3(med_a) && round3(method_b[i]) == round3(med_b) {
            return Ok(i);
        }
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..method_a.len() {
        let d = (method_a[i] - med_a).abs() + (method_b[i] - med_b).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Metrics for one evaluated pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub ssim: f64,
    pub rmse: f64,
    pub rmse_hu: f64,
}

/// Square bounding-box crop of the mask support with out-of-mask pixels
/// zeroed, evaluated as a fresh image pair.
pub fn roi_metrics_masked<T: Real>(
    pred: &Image2D<T>,
    gt: &Image2D<T>,
    mask: &Image2D<T>,
    mu_water: f64,
) -> Result<MetricsEntry> {
    if pred.size != gt.size || pred.size != mask.size {
        return Err(TomoError::Dimension("roi inputs differ in shape".into()));
    }
    let size = mask.size;
    let (mut r0, mut r1, mut c0, mut c1) = (size, 0usize, size, 0usize);
    for r in 0..size {
        for c in 0..size {
            if mask.get(r, c).as_f64() != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r + 1);
                c0 = c0.min(c);
                c1 = c1.max(c + 1);
            }
        }
    }
    if r1 == 0 {
        return Err(TomoError::DegenerateInput("empty roi mask".into()));
    }
    // grow the box to a square, clamped to the image
    let side = (r1 - r0).max(c1 - c0).min(size);
    let fit = |start: usize, extent: usize| -> usize {
        let center = start + extent / 2;
        let half = side / 2;
        center.saturating_sub(half).min(size - side)
    };
    let r0 = fit(r0, r1 - r0);
    let c0 = fit(c0, c1 - c0);
    let mut p = Image2D::zeros(side);
    let mut g = Image2D::zeros(side);
    for r in 0..side {
        for c in 0..side {
            if mask.get(r0 + r, c0 + c).as_f64() != 0.0 {
                p.set(r, c, pred.get(r0 + r, c0 + c));
                g.set(r, c, gt.get(r0 + r, c0 + c));
            }
        }
    }
    Ok(MetricsEntry {
        ssim: ssim(&p, &g)?,
        rmse: rmse(&p, &g)?,
        rmse_hu: rmse_hu(&p, &g, mu_water)?,
    })
}

/// Fixed square patch around `(row, col)`, clamped inside the image.
pub fn crop_patch<T: Real>(
    img: &Image2D<T>,
    row: usize,
    col: usize,
    patch: usize,
) -> Result<Image2D<T>> {
    if patch > img.size {
        return Err(TomoError::Dimension(format!(
            "patch {patch} exceeds image {}",
            img.size
        )));
    }
    let r0 = row.saturating_sub(patch / 2).min(img.size - patch);
    let c0 = col.saturating_sub(patch / 2).min(img.size - patch);
    let mut out = Image2D::zeros(patch);
    for r in 0..patch {
        for c in 0..patch {
            out.set(r, c, img.get(r0 + r, c0 + c));
        }
    }
    Ok(out)
}

/// Metrics over the 32x32 patch around a point of interest.
pub fn roi_metrics_patch<T: Real>(
    pred: &Image2D<T>,
    gt: &Image2D<T>,
    row: usize,
    col: usize,
    mu_water: f64,
) -> Result<MetricsEntry> {
    let p = crop_patch(pred, row, col, 32)?;
    let g = crop_patch(gt, row, col, 32)?;
    Ok(MetricsEntry {
        ssim: ssim(&p, &g)?,
        rmse: rmse(&p, &g)?,
        rmse_hu: rmse_hu(&p, &g, mu_water)?,
    })
}

/// Per-method score lists plus recomputable summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub ssim: Vec<f64>,
    pub rmse: Vec<f64>,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

/// Pairwise rank-test result between two methods on one metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub method_a: String,
    pub method_b: String,
    pub metric: String,
    pub n_a: usize,
    pub n_b: usize,
    pub u: f64,
    pub p: f64,
    pub significant: bool,
}

/// Evaluation report: per-item scores, summaries, and pairwise U tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alpha: f64,
    pub methods: Vec<MethodSummary>,
    pub tests: Vec<PairwiseTest>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn new() -> Self {
        Self {
            alpha: 0.05,
            methods: Vec::new(),
            tests: Vec::new(),
        }
    }

    pub fn add_method(&mut self, method: &str, ssim: Vec<f64>, rmse: Vec<f64>) {
        let (sm, ss) = mean_std(&ssim);
        let (rm, rs) = mean_std(&rmse);
        self.methods.push(MethodSummary {
            method: method.to_string(),
            ssim,
            rmse,
            ssim_mean: sm,
            ssim_std: ss,
            rmse_mean: rm,
            rmse_std: rs,
        });
    }

    /// Two-sided U tests on SSIM between every method pair.
    pub fn run_pairwise_tests(&mut self) -> Result<()> {
        self.tests.clear();
        for i in 0..self.methods.len() {
            for j in i + 1..self.methods.len() {
                let a = &self.methods[i];
                let b = &self.methods[j];
                let (u, p) = mann_whitney_u(&a.ssim, &b.ssim, Alternative::TwoSided)?;
                self.tests.push(PairwiseTest {
                    method_a: a.method.clone(),
                    method_b: b.method.clone(),
                    metric: "ssim".into(),
                    n_a: a.ssim.len(),
                    n_b: b.ssim.len(),
                    u,
                    p,
                    significant: p < self.alpha,
                });
            }
        }
        Ok(())
    }

    /// Per-item table, one row per (method, item).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,item,ssim,rmse\n");
        for m in &self.methods {
            for (i, (s, r)) in m.ssim.iter().zip(&m.rmse).enumerate() {
                out.push_str(&format!("{},{},{},{}\n", m.method, i, s, r));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl Default for MetricsReport {
    fn default() -> Self {
        Self::new()
    }
}
