//! Block-causal multi-head attention kernels. Position `i` attends to `j`
//! iff `j <= i` and both belong to the same document.

use crate::error::{Error, Result};
use crate::real::Real;

/// First index of each position's document run. Documents must occupy
/// contiguous ranges.
pub fn document_starts(doc_ids: &[usize]) -> Result<Vec<usize>> {
    let mut starts = Vec::with_capacity(doc_ids.len());
    let mut finished = std::collections::HashSet::new();
    for i in 0..doc_ids.len() {
        if i == 0 || doc_ids[i] != doc_ids[i - 1] {
            if i > 0 {
                finished.insert(doc_ids[i - 1]);
            }
            if finished.contains(&doc_ids[i]) {
                return Err(Error::InvalidArgument(format!(
                    "document {} is not contiguous",
                    doc_ids[i]
                )));
            }
            starts.push(i);
        } else {
            starts.push(starts[i - 1]);
        }
    }
    Ok(starts)
}

/// Forward pass. `q`, `k`, `v` are `[t, width]` with heads laid out as
/// contiguous column blocks. Returns the output and the attention
/// probabilities `[heads, t, t]` (zero outside the mask).
pub fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    t: usize,
    width: usize,
    heads: usize,
    starts: &[usize],
) -> (Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); t * width];
    let mut probs = vec![T::zero(); heads * t * t];
    for h in 0..heads {
        let col = h * dh;
        for i in 0..t {
            let qi = &q[i * width + col..i * width + col + dh];
            let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let mut max = T::neg_infinity();
            for j in starts[i]..=i {
                let kj = &k[j * width + col..j * width + col + dh];
                let s = dot(qi, kj) * scale;
                row[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut denom = T::zero();
            for p in &mut row[starts[i]..=i] {
                *p = (*p - max).exp();
                denom += *p;
            }
            let oi = &mut out[i * width + col..i * width + col + dh];
            for j in starts[i]..=i {
                row[j] /= denom;
                let vj = &v[j * width + col..j * width + col + dh];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o += row[j] * x;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`forward`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    t: usize,
    width: usize,
    heads: usize,
    starts: &[usize],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); t * width];
    let mut dk = vec![T::zero(); t * width];
    let mut dv = vec![T::zero(); t * width];
    let mut dp = vec![T::zero(); t];
    for h in 0..heads {
        let col = h * dh;
        for i in 0..t {
            let row = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let go = &grad_out[i * width + col..i * width + col + dh];
            let mut weighted = T::zero();
            for j in starts[i]..=i {
                let vj = &v[j * width + col..j * width + col + dh];
                dp[j] = dot(go, vj);
                weighted += row[j] * dp[j];
                let dvj = &mut dv[j * width + col..j * width + col + dh];
                for (d, &g) in dvj.iter_mut().zip(go) {
                    *d += row[j] * g;
                }
            }
            for j in starts[i]..=i {
                let ds = row[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                for c in 0..dh {
                    dq[i * width + col + c] += ds * k[j * width + col + c];
                    dk[j * width + col + c] += ds * q[i * width + col + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// One query row against cached keys and values (`[n, width]` each), all
/// from the same document.
pub fn attend_cached<T: Real>(q: &[T], keys: &[T], values: &[T], n: usize, width: usize, heads: usize) -> Vec<T> {
    let dh = width / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); width];
    let mut scores = vec![T::zero(); n];
    for h in 0..heads {
        let col = h * dh;
        let qh = &q[col..col + dh];
        let mut max = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &keys[j * width + col..j * width + col + dh]) * scale;
            if *s > max {
                max = *s;
            }
        }
        let mut denom = T::zero();
        for s in &mut scores {
            *s = (*s - max).exp();
            denom += *s;
        }
        for (j, &s) in scores.iter().enumerate() {
            let p = s / denom;
            for c in 0..dh {
                out[col + c] += p * values[j * width + col + c];
            }
        }
    }
    out
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_follow_documents() {
        assert_eq!(document_starts(&[0, 0, 1, 1, 1, 2]).unwrap(), vec![0, 0, 2, 2, 2, 5]);
        assert!(document_starts(&[0, 1, 0]).is_err());
    }

    #[test]
    fn single_position_returns_value() {
        let (out, probs) = forward(&[0.3f64, -1.0], &[2.0, 0.5], &[7.0, -3.0], 1, 2, 1, &[0]);
        assert_eq!(out, vec![7.0, -3.0]);
        assert_eq!(probs, vec![1.0]);
    }

    #[test]
    fn no_weight_crosses_documents() {
        let t = 4;
        let q: Vec<f64> = (0..t * 2).map(|i| i as f64 * 0.1).collect();
        let k = q.clone();
        let v = q.clone();
        let starts = document_starts(&[0, 0, 1, 1]).unwrap();
        let (_, probs) = forward(&q, &k, &v, t, 2, 1, &starts);
        assert_eq!(probs[2 * t], 0.0);
        assert_eq!(probs[2 * t + 1], 0.0);
        assert_eq!(probs[3 * t + 1], 0.0);
        let row3: f64 = probs[3 * t..4 * t].iter().sum();
        assert!((row3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cached_matches_full_last_row() {
        let (t, w, h) = (5, 4, 2);
        let q: Vec<f64> = (0..t * w).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.2).collect();
        let k: Vec<f64> = (0..t * w).map(|i| ((i * 3 % 13) as f64 - 6.0) * 0.1).collect();
        let v: Vec<f64> = (0..t * w).map(|i| (i as f64).sin()).collect();
        let (full, _) = forward(&q, &k, &v, t, w, h, &[0; 5]);
        let last = attend_cached(&q[(t - 1) * w..], &k, &v, t, w, h);
        for (a, b) in last.iter().zip(&full[(t - 1) * w..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
