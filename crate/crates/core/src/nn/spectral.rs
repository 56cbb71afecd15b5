use crate::error::{Error, Result};

/// Result of a power-iteration estimate of the largest singular value.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub sigma: f64,
    /// Left singular vector estimate, length `rows`.
    pub u: Vec<f64>,
    /// Right singular vector estimate, length `cols`.
    pub v: Vec<f64>,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    if n > 0 {
        e[i] = 1.0;
    }
    e
}

// v = Wᵀ u for a row-major [rows × cols] matrix.
fn mul_transposed(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        let ur = u[r];
        let row = &w[r * cols..(r + 1) * cols];
        for (vc, wc) in v.iter_mut().zip(row) {
            *vc += wc * ur;
        }
    }
    v
}

fn mul(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn iterate(w: &[f64], rows: usize, cols: usize, mut u: Vec<f64>, iters: usize) -> Option<SpectralEstimate> {
    let mut sigma = 0.0;
    let mut v = vec![0.0; cols];
    for _ in 0..iters {
        v = mul_transposed(w, rows, cols, &u);
        let nv = norm(&v);
        if nv == 0.0 {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        u = mul(w, rows, cols, &v);
        let nu = norm(&u);
        if nu == 0.0 {
            return None;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        sigma = nu;
    }
    Some(SpectralEstimate { sigma, u, v })
}

/// Power-iteration estimate of `σ_max` of a row-major `[rows × cols]` matrix.
///
/// `warm_u` continues a previous estimate. A start vector orthogonal to the
/// row space is replaced by the all-ones vector, then by basis vectors. The
/// zero matrix yields `σ = 0` with `u = e₀`, `v = e₀`.
pub fn spectral_estimate(
    weight: &[f64],
    rows: usize,
    cols: usize,
    iters: usize,
    warm_u: Option<&[f64]>,
) -> Result<SpectralEstimate> {
    if iters == 0 {
        return Err(Error::Config("power iteration needs at least 1 iteration".into()));
    }
    if weight.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!(
            "spectral estimate of a {rows}x{cols} matrix with {} values",
            weight.len()
        )));
    }
    let zero = SpectralEstimate {
        sigma: 0.0,
        u: unit(rows, 0),
        v: unit(cols, 0),
    };
    if weight.iter().all(|w| *w == 0.0) {
        return Ok(zero);
    }
    let ones = vec![1.0 / (rows as f64).sqrt(); rows];
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(rows + 2);
    if let Some(u) = warm_u.filter(|u| u.len() == rows) {
        starts.push(u.to_vec());
    }
    starts.push(ones);
    starts.extend((0..rows).map(|i| unit(rows, i)));
    for u0 in starts {
        if let Some(est) = iterate(weight, rows, cols, u0, iters) {
            return Ok(est);
        }
    }
    Ok(zero)
}
