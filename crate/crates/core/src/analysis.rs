//! Feature-map and attention-map analysis: top-3 PCA with RGB rendering,
//! [CLS]-attention heatmaps, and the activated/salient overlap ratio.

use crate::baselines::exact_sqrt;
use crate::error::{Error, Result};
use crate::kernel::{matmul, Matrix};
use crate::selector::AttentionMap;

/// Threshold below which an eigenvalue counts as a zero-variance direction.
const ZERO_VARIANCE_TOL: f64 = 1e-12;

/// Top-3 principal directions of a (CLS-excluded) feature map.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// 3 x D component rows, orthonormal; zero rows where the data had
    /// fewer than three nonzero-variance directions.
    pub components: Matrix,
    /// (N-1) x 3 scores of the mean-centered rows.
    pub projected: Matrix,
    /// Biased variances along the three components, descending.
    pub explained_variance: [f64; 3],
    /// Set when fewer than three nonzero-variance directions exist.
    pub degenerate: bool,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvector columns), unsorted.
fn jacobi_eigh(m: &Matrix) -> (Vec<f64>, Matrix) {
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let frob: f64 = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = 1e-14 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= stop / (n as f64) {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

/// Top-3 PCA of the rows, mean-centered, via the symmetric eigenproblem on
/// whichever side of the data is smaller.
pub fn pca3(features_without_cls: &Matrix) -> Result<PcaProjection> {
    let n = features_without_cls.rows();
    let d = features_without_cls.cols();
    if n < 3 || d < 3 {
        return Err(Error::data(format!(
            "pca needs at least 3 rows and 3 dims, got {n}x{d}"
        )));
    }
    let mut centered = features_without_cls.clone();
    let mut means = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in means.iter_mut().zip(centered.row(r)) {
            *m += v;
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&means) {
            *v -= m;
        }
    }

    // eigenpairs of cov = Xc'Xc / n, computed on the smaller side
    let inv_n = 1.0 / n as f64;
    let mut pairs: Vec<(f64, Vec<f64>)> = if d <= n {
        let cov = matmul(&centered.transpose(), &centered)?.scale(inv_n);
        let (vals, vecs) = jacobi_eigh(&cov);
        (0..d)
            .map(|i| (vals[i], (0..d).map(|k| vecs[(k, i)]).collect()))
            .collect()
    } else {
        let gram = matmul(&centered, &centered.transpose())?.scale(inv_n);
        let (vals, vecs) = jacobi_eigh(&gram);
        (0..n)
            .map(|i| {
                let u: Vec<f64> = (0..n).map(|k| vecs[(k, i)]).collect();
                let mut comp = vec![0.0; d];
                for (r, &uk) in u.iter().enumerate() {
                    for (c, &x) in centered.row(r).iter().enumerate() {
                        comp[c] += uk * x;
                    }
                }
                let norm: f64 = comp.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for c in comp.iter_mut() {
                        *c /= norm;
                    }
                }
                (vals[i], comp)
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let zero_tol = ZERO_VARIANCE_TOL * pairs.first().map(|p| p.0.max(1.0)).unwrap_or(1.0);
    let mut components = Matrix::zeros(3, d);
    let mut explained = [0.0; 3];
    let mut degenerate = false;
    for (i, slot) in explained.iter_mut().enumerate() {
        match pairs.get(i) {
            Some((val, vec)) if *val > zero_tol => {
                *slot = *val;
                components.row_mut(i).copy_from_slice(vec);
            }
            _ => degenerate = true,
        }
    }
    fix_component_signs(&mut components);
    let projected = matmul(&centered, &components.transpose())?;
    Ok(PcaProjection {
        components,
        projected,
        explained_variance: explained,
        degenerate,
    })
}

/// Resolve the sign ambiguity: the largest-magnitude coordinate of each
/// component is made positive.
fn fix_component_signs(components: &mut Matrix) {
    for r in 0..components.rows() {
        let row = components.row_mut(r);
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = i;
            }
        }
        if row[best] < 0.0 {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
    }
}

/// Square RGB patch image, channel values already in [0, 255].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbPatchImage {
    pub side: usize,
    /// Row-major RGB triples, side * side of them.
    pub pixels: Vec<[u8; 3]>,
}

fn min_max_to_byte(values: &[f64]) -> Vec<u8> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0; values.len()];
    }
    let span = max - min;
    values
        .iter()
        .map(|&v| ((v - min) / span * 255.0).round() as u8)
        .collect()
}

/// PCA scores rendered as an RGB patch grid: each channel min-max
/// normalized independently, patch j at (j div g, j mod g).
pub fn render_feature_rgb(p: &PcaProjection) -> Result<RgbPatchImage> {
    let n = p.projected.rows();
    let side = exact_sqrt(n)
        .ok_or_else(|| Error::data(format!("{n} patches do not form a square grid")))?;
    let channels: Vec<Vec<u8>> = (0..3)
        .map(|c| {
            let col: Vec<f64> = (0..n).map(|r| p.projected[(r, c)]).collect();
            min_max_to_byte(&col)
        })
        .collect();
    let pixels = (0..n)
        .map(|j| [channels[0][j], channels[1][j], channels[2][j]])
        .collect();
    Ok(RgbPatchImage { side, pixels })
}

/// Which attention row to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    Index(usize),
    Mean,
}

/// Grayscale heatmap (channels replicated) of one head row or the head mean.
pub fn render_attention_heatmap(attn: &AttentionMap, head: HeadSelect) -> Result<RgbPatchImage> {
    let row: Vec<f64> = match head {
        HeadSelect::Index(h) => {
            if h >= attn.heads() {
                return Err(Error::config(format!(
                    "head {h} out of range for {} heads",
                    attn.heads()
                )));
            }
            attn.head_row(h).to_vec()
        }
        HeadSelect::Mean => attn.mean_row(),
    };
    let side = exact_sqrt(row.len()).ok_or_else(|| {
        Error::data(format!("{} tokens do not form a square grid", row.len()))
    })?;
    let bytes = min_max_to_byte(&row);
    Ok(RgbPatchImage {
        side,
        pixels: bytes.into_iter().map(|b| [b, b, b]).collect(),
    })
}

/// |A ∩ B| / |A| over token index sets. Errors on an empty reference set.
pub fn overlap_ratio(set_a: &[usize], set_b: &[usize]) -> Result<f64> {
    let mut a: Vec<usize> = set_a.to_vec();
    a.sort_unstable();
    a.dedup();
    if a.is_empty() {
        return Err(Error::data("overlap ratio undefined for an empty reference set"));
    }
    let mut b: Vec<usize> = set_b.to_vec();
    b.sort_unstable();
    b.dedup();
    let hits = a.iter().filter(|idx| b.binary_search(idx).is_ok()).count();
    Ok(hits as f64 / a.len() as f64)
}

fn top_k_by(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Activated-token set: top-k patches by PCA-score L2 magnitude.
pub fn activated_set(p: &PcaProjection, k: usize) -> Vec<usize> {
    let norms: Vec<f64> = (0..p.projected.rows())
        .map(|r| p.projected.row(r).iter().map(|v| v * v).sum::<f64>())
        .collect();
    top_k_by(&norms, k)
}

/// Salient-region set: top-k patches by head-mean [CLS] attention.
pub fn salient_set(attn: &AttentionMap, k: usize) -> Vec<usize> {
    top_k_by(&attn.mean_row(), k)
}
