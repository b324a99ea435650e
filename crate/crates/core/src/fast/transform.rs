use super::FastError;

/// Linear-interpolated percentile of an ascending slice (`p` in `[0,100]`).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = p.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-dimension 1st/99th percentile range.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl NormStats {
    pub fn dims(&self) -> usize {
        self.low.len()
    }

    pub fn is_constant(&self, d: usize) -> bool {
        self.high[d] <= self.low[d]
    }

    /// Maps `[low, high]` onto `[-1, 1]`, clipping outside. Constant dims map to 0.
    pub fn normalize(&self, d: usize, x: f64) -> f64 {
        if self.is_constant(d) {
            return 0.0;
        }
        (2.0 * (x - self.low[d]) / (self.high[d] - self.low[d]) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize(&self, d: usize, y: f64) -> f64 {
        if self.is_constant(d) {
            return self.low[d];
        }
        self.low[d] + (y + 1.0) * 0.5 * (self.high[d] - self.low[d])
    }

    /// `d(denormalize)/dy` for dimension `d`.
    pub fn slope(&self, d: usize) -> f64 {
        if self.is_constant(d) {
            0.0
        } else {
            0.5 * (self.high[d] - self.low[d])
        }
    }
}

/// Fits 1st/99th percentiles per dimension over every row of every chunk.
pub fn fit_norm(corpus: &[Vec<Vec<f64>>]) -> Result<NormStats, FastError> {
    let dims = corpus
        .iter()
        .flat_map(|c| c.first())
        .map(Vec::len)
        .next()
        .ok_or(FastError::EmptyCorpus)?;
    let mut low = Vec::with_capacity(dims);
    let mut high = Vec::with_capacity(dims);
    for d in 0..dims {
        let mut col: Vec<f64> = corpus.iter().flat_map(|c| c.iter().map(move |r| r[d])).collect();
        col.sort_by(f64::total_cmp);
        low.push(percentile(&col, 1.0));
        high.push(percentile(&col, 99.0));
    }
    Ok(NormStats { low, high })
}

/// Orthonormal DCT-II basis: `basis[f][t] = s_f · cos(π (t + ½) f / k)`.
fn dct_basis(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|f| {
            let s = if f == 0 { (1.0 / k as f64).sqrt() } else { (2.0 / k as f64).sqrt() };
            (0..k)
                .map(|t| s * (std::f64::consts::PI * (t as f64 + 0.5) * f as f64 / k as f64).cos())
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II along the time axis (rows) of a `k × dims` matrix.
pub fn dct2(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = rows.len();
    let dims = rows.first().map_or(0, Vec::len);
    let basis = dct_basis(k);
    (0..k)
        .map(|f| (0..dims).map(|d| (0..k).map(|t| basis[f][t] * rows[t][d]).sum()).collect())
        .collect()
}

/// Inverse of [`dct2`] (DCT-III with the same normalisation).
pub fn idct2(coeffs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = coeffs.len();
    let dims = coeffs.first().map_or(0, Vec::len);
    let basis = dct_basis(k);
    (0..k)
        .map(|t| (0..dims).map(|d| (0..k).map(|f| basis[f][t] * coeffs[f][d]).sum()).collect())
        .collect()
}

/// `round(c·γ)`, ties to even.
pub fn quantize(coeffs: &[Vec<f64>], gamma: f64) -> Result<Vec<Vec<i64>>, FastError> {
    if !(gamma > 0.0) {
        return Err(FastError::Invalid(format!("gamma must be positive, got {gamma}")));
    }
    coeffs
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| {
                    let v = (c * gamma).round_ties_even();
                    if !v.is_finite() || v.abs() > i32::MAX as f64 {
                        Err(FastError::OutOfRange(c * gamma))
                    } else {
                        Ok(v as i64)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn dequantize(ints: &[Vec<i64>], gamma: f64) -> Vec<Vec<f64>> {
    ints.iter().map(|row| row.iter().map(|&i| i as f64 / gamma).collect()).collect()
}

/// Frequency-major flattening: all dims of frequency 0, then frequency 1, …
pub fn flatten(ints: &[Vec<i64>]) -> Vec<i64> {
    ints.iter().flatten().copied().collect()
}

pub fn unflatten(seq: &[i64], k: usize, dims: usize) -> Result<Vec<Vec<i64>>, FastError> {
    if seq.len() != k * dims {
        return Err(FastError::Invalid(format!(
            "sequence of length {} cannot fill {k}×{dims}",
            seq.len()
        )));
    }
    Ok(seq.chunks(dims).map(<[i64]>::to_vec).collect())
}
