//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

/// Plain cosine with two separate norms.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Mean cosine over all ordered pairs of distinct unmasked rows.
pub fn tok_sim(rows: &[&[f64]], mask: &[bool]) -> f64 {
    let kept: Vec<&[f64]> = rows
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(r, _)| *r)
        .collect();
    let m = kept.len();
    let mut sum = 0.0;
    for u in 0..m {
        for v in 0..m {
            if u != v {
                sum += cosine(kept[u], kept[v]);
            }
        }
    }
    sum / (m * (m - 1)) as f64
}

/// Fractional ranks by counting: 1 + #smaller + (#equal - 1) / 2.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let less = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation of the fractional ranks, accumulated naively.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
