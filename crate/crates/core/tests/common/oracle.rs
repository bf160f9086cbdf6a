//! Scalar reference implementations.
//!
//! Plain nested loops over `Vec`s in ascending index order. Nothing here
//! shares code with the library beyond the input types.

#![allow(dead_code, clippy::needless_range_loop)]

pub const MAX_N: usize = 64;

fn guard(n: usize) {
    assert!(n <= MAX_N, "oracle instances are limited to {MAX_N} tokens, got {n}");
}

pub type Mat = Vec<Vec<f64>>;

pub fn oracle_score_v(a_vv: &Mat, anchor: &[f64], lambda: f64) -> Vec<f64> {
    let n = a_vv.len();
    guard(n);
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            sum += a_vv[i][j];
        }
        out[i] = lambda * (sum / n as f64) - (1.0 - lambda) * anchor[i];
    }
    out
}

pub fn oracle_score_l(a_vv: &Mat, a_tv: &Mat, beta: f64) -> Vec<f64> {
    let n = a_vv.len();
    let m = a_tv.len();
    guard(n);
    assert!(m > 0);
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += a_vv[i][j];
        }
        let mut received = 0.0;
        for k in 0..m {
            received += a_tv[k][i];
        }
        out[i] = beta * (row / n as f64) - (1.0 - beta) * (received / m as f64);
    }
    out
}

/// `cells[i] = (row, col)`; tiles are found by integer division of coordinates.
pub fn oracle_penalty(
    scores: &[f64],
    cells: &[(usize, usize)],
    window: usize,
    coefficient: f64,
) -> Vec<f64> {
    guard(scores.len().min(MAX_N * MAX_N));
    let mut out = scores.to_vec();
    let mut done = vec![false; scores.len()];
    for i in 0..scores.len() {
        if done[i] {
            continue;
        }
        let tile = (cells[i].0 / window, cells[i].1 / window);
        let mut best = i;
        for j in 0..scores.len() {
            if (cells[j].0 / window, cells[j].1 / window) == tile {
                done[j] = true;
                if scores[j] > scores[best] {
                    best = j;
                }
            }
        }
        out[best] = scores[best] * coefficient;
    }
    out
}

/// Repeatedly takes the highest remaining score, lowest index on ties.
pub fn oracle_select(scores: &[f64], n_discard: usize) -> (Vec<usize>, Vec<usize>) {
    guard(scores.len());
    let mut taken = vec![false; scores.len()];
    for _ in 0..n_discard {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if scores[i] <= scores[b] => {}
                _ => best = Some(i),
            }
        }
        taken[best.unwrap()] = true;
    }
    let source = (0..scores.len()).filter(|&i| taken[i]).collect();
    let target = (0..scores.len()).filter(|&i| !taken[i]).collect();
    (source, target)
}

pub fn oracle_correlation_v(a_vv: &Mat, source: &[usize], target: &[usize]) -> Mat {
    guard(a_vv.len());
    let mut c = vec![vec![0.0; target.len()]; source.len()];
    for (i, &s) in source.iter().enumerate() {
        for (j, &t) in target.iter().enumerate() {
            c[i][j] = a_vv[s][t];
        }
    }
    c
}

pub fn oracle_correlation_l(
    a_vv: &Mat,
    a_tv: &Mat,
    source: &[usize],
    target: &[usize],
    gamma: f64,
    causal: bool,
) -> Mat {
    guard(a_vv.len());
    let m = a_tv.len();
    let mut c = vec![vec![0.0; target.len()]; source.len()];
    for (i, &s) in source.iter().enumerate() {
        for (j, &t) in target.iter().enumerate() {
            let direct = if causal && a_vv[t][s] > a_vv[s][t] { a_vv[t][s] } else { a_vv[s][t] };
            let mut bridge = 0.0;
            for k in 0..m {
                bridge += a_tv[k][s] * a_tv[k][t];
            }
            c[i][j] = gamma * direct + (1.0 - gamma) * (bridge / m as f64);
        }
    }
    c
}

fn insertion_sorted(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::with_capacity(values.len());
    for &x in values {
        let mut k = v.len();
        while k > 0 && v[k - 1] > x {
            k -= 1;
        }
        v.insert(k, x);
    }
    v
}

/// Type-7 quantile per row.
pub fn oracle_thresholds(c: &Mat, epsilon: f64) -> Vec<f64> {
    let mut tau = Vec::with_capacity(c.len());
    for row in c {
        guard(row.len());
        let v = insertion_sorted(row);
        let h = epsilon * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let t = if lo + 1 < v.len() { v[lo] + (h - lo as f64) * (v[lo + 1] - v[lo]) } else { v[lo] };
        tau.push(t.max(v[lo]).min(*v.last().unwrap()));
    }
    tau
}

/// `(J_i, α_i)` per source.
pub fn oracle_assignments(c: &Mat, tau: &[f64]) -> (Vec<Vec<usize>>, Mat) {
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (i, row) in c.iter().enumerate() {
        let mut js = Vec::new();
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if v >= tau[i] {
                js.push(j);
                total += v;
            }
        }
        let mut ws = Vec::new();
        for &j in &js {
            ws.push(if total > 0.0 { row[j] / total } else { 1.0 / js.len() as f64 });
        }
        targets.push(js);
        weights.push(ws);
    }
    (targets, weights)
}

/// Weighted compression by explicit per-coordinate loops.
pub fn oracle_compress(
    targets: &Mat,
    sources: &Mat,
    assigned: &[Vec<usize>],
    weights: &Mat,
) -> Mat {
    let mut out = targets.clone();
    for j in 0..targets.len() {
        let mut mass = 0.0;
        let mut acc = targets[j].clone();
        let mut any = false;
        for i in 0..sources.len() {
            for (k, &t) in assigned[i].iter().enumerate() {
                if t == j {
                    any = true;
                    mass += weights[i][k];
                    for d in 0..acc.len() {
                        acc[d] += weights[i][k] * sources[i][d];
                    }
                }
            }
        }
        if any {
            for d in 0..acc.len() {
                out[j][d] = acc[d] / (1.0 + mass);
            }
        }
    }
    out
}

/// `−cos(μ, P_i)` with keys averaged over heads; `keys[h][i]` over visual tokens.
pub fn oracle_key_mean(keys: &[Mat]) -> Vec<f64> {
    let h = keys.len();
    let n = keys[0].len();
    let d = keys[0][0].len();
    guard(n);
    let mut mean = vec![vec![0.0; d]; n];
    for i in 0..n {
        for k in 0..d {
            let mut s = 0.0;
            for head in keys {
                s += head[i][k];
            }
            mean[i][k] = s / h as f64;
        }
    }
    let mut mu = vec![0.0; d];
    for k in 0..d {
        for row in &mean {
            mu[k] += row[k];
        }
        mu[k] /= n as f64;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = Vec::with_capacity(n);
    for row in &mean {
        let (a, b) = (norm(&mu), norm(row));
        let dot: f64 = mu.iter().zip(row).map(|(x, y)| x * y).sum();
        out.push(if a == 0.0 || b == 0.0 { -0.0 } else { -(dot / (a * b)).clamp(-1.0, 1.0) });
    }
    out
}
