//! Independent reference implementations used to pin down expected values.

/// Solves `a x = b` by Gaussian elimination with partial pivoting; `None` when singular.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

pub struct DualOracle {
    pub alpha: Vec<f64>,
    pub w: Vec<f64>,
    pub rho: Option<f64>,
    pub objective: f64,
}

/// Exhaustive active-set solution of the one-class dual for tiny problems.
///
/// Every assignment of the points to {0, C, free} is tried; the free part
/// solves the bordered KKT system and the best feasible candidate wins.
pub fn ocsvm_brute_force(x: &[Vec<f64>], nu: f64) -> DualOracle {
    let n = x.len();
    assert!(n <= 10, "brute force is exponential");
    let c = 1.0 / (nu * n as f64);
    let k = |i: usize, j: usize| -> f64 { x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum() };
    let mut best: Option<DualOracle> = None;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut state = vec![0u8; n];
        let mut v = code;
        for s in state.iter_mut() {
            *s = (v % 3) as u8;
            v /= 3;
        }
        let upper: Vec<usize> = (0..n).filter(|&i| state[i] == 1).collect();
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mass = 1.0 - upper.len() as f64 * c;
        let mut alpha = vec![0.0; n];
        for &u in &upper {
            alpha[u] = c;
        }
        let mut rho = None;
        if free.is_empty() {
            if mass.abs() > 1e-12 {
                continue;
            }
        } else {
            // [K_FF  -1] [a_F]   [-K_FU C]
            // [1ᵀ     0] [rho] = [mass    ]
            let m = free.len();
            let mut a = vec![vec![0.0; m + 1]; m + 1];
            let mut b = vec![0.0; m + 1];
            for (r, &i) in free.iter().enumerate() {
                for (cc, &j) in free.iter().enumerate() {
                    a[r][cc] = k(i, j);
                }
                a[r][m] = -1.0;
                b[r] = -upper.iter().map(|&u| k(i, u) * c).sum::<f64>();
                a[m][r] = 1.0;
            }
            b[m] = mass;
            let Some(sol) = solve_linear(a, b) else { continue };
            if sol[..m].iter().any(|&v| v < -1e-12 || v > c + 1e-12) {
                continue;
            }
            for (r, &i) in free.iter().enumerate() {
                alpha[i] = sol[r].clamp(0.0, c);
            }
            rho = Some(sol[m]);
        }
        let d = x[0].len();
        let mut w = vec![0.0; d];
        for (a, xi) in alpha.iter().zip(x) {
            for (wk, v) in w.iter_mut().zip(xi) {
                *wk += a * v;
            }
        }
        let objective = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
        if best.as_ref().is_none_or(|b| objective < b.objective - 1e-15) {
            best = Some(DualOracle { alpha, w, rho, objective });
        }
    }
    best.expect("uniform weights are always feasible")
}

/// Davies-Bouldin index with cosine distance, written directly from the definition.
pub fn davies_bouldin_cosine(points: &[Vec<f32>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let aa: f64 = a.iter().map(|x| x * x).sum();
        let bb: f64 = b.iter().map(|x| x * x).sum();
        ab / (aa.sqrt() * bb.sqrt())
    };
    let k = centroids.len();
    let sigma: Vec<f64> = (0..k)
        .map(|c| {
            let members: Vec<Vec<f64>> = points
                .iter()
                .zip(assignment)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p.iter().map(|&v| v as f64).collect())
                .collect();
            members.iter().map(|m| 1.0 - cos(m, &centroids[c])).sum::<f64>() / members.len() as f64
        })
        .collect();
    let mut sum = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i != j {
                worst = worst.max((sigma[i] + sigma[j]) / (1.0 - cos(&centroids[i], &centroids[j])));
            }
        }
        sum += worst;
    }
    sum / k as f64
}
