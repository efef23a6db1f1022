//! Reference statistics written independently of `evaluation`.

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
pub struct Fixture {
    pub values: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub min: f64,
    pub max: f64,
}

/// Fixtures produced with numpy percentiles and matplotlib box-plot stats.
pub fn numpy_fixtures() -> Vec<Fixture> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/summary_stats.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Hyndman–Fan type 7 with one-based order statistics.
fn type7(sorted: &[f64], p: f64) -> f64 {
    let m = 1.0 + p * (sorted.len() as f64 - 1.0);
    let j = m.floor();
    let g = m - j;
    let at = |k: f64| sorted[(k as usize).clamp(1, sorted.len()) - 1];
    (1.0 - g) * at(j) + g * at(j + 1.0)
}

/// Welford moments, type-7 quartiles, 1.5 IQR whiskers.
pub fn reference(values: &[f64]) -> Fixture {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &x) in values.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    let n = values.len();
    let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (q1, median, q3) = (type7(&s, 0.25), type7(&s, 0.5), type7(&s, 0.75));
    let iqr = q3 - q1;
    let inside: Vec<f64> = s.iter().copied().filter(|&x| x >= q1 - 1.5 * iqr && x <= q3 + 1.5 * iqr).collect();
    let whisker_low = inside.iter().copied().fold(f64::INFINITY, f64::min).min(q1);
    let whisker_high = inside.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(q3);
    Fixture { values: values.to_vec(), n, mean, std, median, q1, q3, whisker_low, whisker_high, min: s[0], max: s[n - 1] }
}

/// Largest scaled difference between a summary and a reference.
pub fn max_deviation(got: &convexq::evaluation::EvalSummary, want: &Fixture) -> f64 {
    let pairs = [
        (got.mean, want.mean),
        (got.std, want.std),
        (got.median, want.median),
        (got.q1, want.q1),
        (got.q3, want.q3),
        (got.whisker_low, want.whisker_low),
        (got.whisker_high, want.whisker_high),
        (got.min, want.min),
        (got.max, want.max),
    ];
    let count_off = if got.n == want.n { 0.0 } else { f64::INFINITY };
    pairs.iter().map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(count_off, f64::max)
}
