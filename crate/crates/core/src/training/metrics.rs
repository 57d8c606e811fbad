use nalgebra::{Matrix3, Vector3};

use crate::error::{Result, XfiError};
use crate::tensor::Tensor;

fn points(t: &Tensor, op: &str) -> Result<Vec<Vector3<f64>>> {
    let (rows, cols) = t.dims2()?;
    if cols != 3 {
        return Err(XfiError::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects J × 3 keypoints"),
        });
    }
    Ok((0..rows).map(|r| Vector3::from_column_slice(t.row(r))).collect())
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Similarity transform `x ↦ s·R·x + t` minimizing the squared distance from `pred` to
/// `gt`, with reflections excluded.
pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let p = points(pred, "procrustes_align")?;
    let g = points(gt, "procrustes_align")?;
    if p.len() != g.len() {
        return Err(XfiError::shape("procrustes_align", pred.shape(), gt.shape()));
    }
    if p.len() < 3 {
        return Err(XfiError::Precondition("Procrustes alignment needs at least 3 joints".into()));
    }
    let n = p.len() as f64;
    let (mu_p, mu_g) = (centroid(&p), centroid(&g));
    let xs: Vec<_> = p.iter().map(|v| v - mu_p).collect();
    let ys: Vec<_> = g.iter().map(|v| v - mu_g).collect();
    let var_p = xs.iter().map(|x| x.norm_squared()).sum::<f64>() / n;
    if var_p <= f64::EPSILON * mu_p.norm_squared().max(1.0) {
        return Err(XfiError::DegenerateAlignment("predicted joints have zero spread".into()));
    }
    let cov: Matrix3<f64> = ys.iter().zip(&xs).map(|(y, x)| y * x.transpose()).sum::<Matrix3<f64>>() / n;
    let svd = cov.svd(true, true);
    let missing = || XfiError::DegenerateAlignment("singular value decomposition did not converge".into());
    let (u, v_t) = (svd.u.ok_or_else(missing)?, svd.v_t.ok_or_else(missing)?);
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        // singular values come sorted descending; flip the weakest axis
        signs[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = svd.singular_values.dot(&signs) / var_p;
    let shift = mu_g - scale * rotation * mu_p;
    let data = p
        .iter()
        .flat_map(|x| {
            let y = scale * rotation * x + shift;
            [y.x, y.y, y.z]
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}

/// `(MPJPE, PA-MPJPE)` for one `J × 3` prediction.
pub fn keypoint_metrics(pred: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    let p = points(pred, "keypoint_metrics")?;
    let g = points(gt, "keypoint_metrics")?;
    if p.len() != g.len() || p.is_empty() {
        return Err(XfiError::shape("keypoint_metrics", pred.shape(), gt.shape()));
    }
    let mpjpe = mean_distance(&p, &g);
    let aligned = points(&procrustes_align(pred, gt)?, "keypoint_metrics")?;
    Ok((mpjpe, mean_distance(&aligned, &g)))
}

/// Fraction of rows whose argmax (first index on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, classes) = logits.dims2()?;
    if rows != labels.len() {
        return Err(XfiError::shape("accuracy", &[rows, classes], &[labels.len()]));
    }
    let hits = (0..rows)
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == labels[r]
        })
        .count();
    Ok(hits as f64 / rows as f64)
}

fn clusters(n: usize, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    if labels.len() != n {
        return Err(XfiError::shape("clustering", &[n], &[labels.len()]));
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(XfiError::Precondition("clustering metrics need at least 2 distinct labels".into()));
    }
    Ok(ids
        .iter()
        .map(|&c| (0..n).filter(|&i| labels[i] == c).collect())
        .collect())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette over samples with Euclidean distance. Samples in singleton clusters
/// contribute 0.
pub fn silhouette_score(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = embeddings.dims2()?;
    let groups = clusters(n, labels)?;
    let mean_to = |i: usize, members: &[usize]| {
        let others: Vec<_> = members.iter().filter(|&&j| j != i).collect();
        others.iter().map(|&&j| distance(embeddings.row(i), embeddings.row(j))).sum::<f64>() / others.len() as f64
    };
    let cluster_of: Vec<usize> = (0..n)
        .map(|i| groups.iter().position(|g| g.contains(&i)).unwrap_or(0))
        .collect();
    let mut total = 0.0;
    for (i, &ci) in cluster_of.iter().enumerate() {
        let members = &groups[ci];
        if members.len() == 1 {
            continue;
        }
        let a = mean_to(i, members);
        let b = groups
            .iter()
            .enumerate()
            .filter(|&(cj, _)| cj != ci)
            .map(|(_, other)| mean_to(i, other))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// `[tr(B)/(k−1)] / [tr(W)/(n−k)]`.
pub fn calinski_harabasz(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, d) = embeddings.dims2()?;
    let groups = clusters(n, labels)?;
    let k = groups.len();
    if n <= k {
        return Err(XfiError::Precondition(format!(
            "Calinski–Harabasz needs more samples ({n}) than clusters ({k})"
        )));
    }
    let mean_of = |idx: &[usize]| {
        let mut c = vec![0.0; d];
        for &i in idx {
            c.iter_mut().zip(embeddings.row(i)).for_each(|(a, b)| *a += b);
        }
        c.iter_mut().for_each(|a| *a /= idx.len() as f64);
        c
    };
    let all: Vec<usize> = (0..n).collect();
    let global = mean_of(&all);
    let (mut between, mut within) = (0.0, 0.0);
    for members in &groups {
        let c = mean_of(members);
        between += members.len() as f64 * distance(&c, &global).powi(2);
        within += members.iter().map(|&i| distance(embeddings.row(i), &c).powi(2)).sum::<f64>();
    }
    if within == 0.0 {
        return Err(XfiError::Precondition("Calinski–Harabasz undefined: zero within-cluster dispersion".into()));
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Classification summary for one evaluated subset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub silhouette: f64,
    pub calinski_harabasz: f64,
}

pub fn classification_metrics(logits: &Tensor, labels: &[usize], embeddings: &Tensor) -> Result<ClassificationMetrics> {
    Ok(ClassificationMetrics {
        accuracy: accuracy(logits, labels)?,
        silhouette: silhouette_score(embeddings, labels)?,
        calinski_harabasz: calinski_harabasz(embeddings, labels)?,
    })
}
