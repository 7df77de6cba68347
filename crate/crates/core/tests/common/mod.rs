#![allow(dead_code)]

/// Largest relative discrepancy between `analytic` and central differences
/// of `f` at `x` over the listed coordinates. Components far below the
/// gradient's overall scale are compared against that scale instead.
pub fn max_fd_error<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], analytic: &[f64], coords: &[usize], h: f64) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    let mut p = x.to_vec();
    for &i in coords {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-3 * scale).max(1e-12);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    worst
}

/// `count` coordinates spread evenly over `0..n` (all of them when `n <= count`).
pub fn spread(n: usize, count: usize) -> Vec<usize> {
    if n <= count {
        return (0..n).collect();
    }
    (0..count).map(|k| k * n / count + (k * 7919) % (n / count).max(1)).map(|i| i.min(n - 1)).collect()
}
