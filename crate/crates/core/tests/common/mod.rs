//! Shared fixtures and straight-line reference implementations for the integration tests.
//! The references use plain nested vectors and loops and share no code with the crate.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfi_core::encoding::ModalityConfig;
use xfi_core::harness::ExperimentConfig;
use xfi_core::tensor::{ParameterStore, Tensor};
use xfi_core::xfusion::{FusionConfig, ModelSpec, TaskSpec, Variant};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn modality(id: &str, raw_dim: usize, d_z: usize, spatial: bool) -> ModalityConfig {
    ModalityConfig {
        id: id.into(),
        raw_dim,
        informative_mask: vec![true; d_z],
        noise_sigma: 0.0,
        p_exist: 0.5,
        is_spatial: spatial,
    }
}

/// Two tokens of width 8, two heads, two iterations.
pub fn small_fusion(variant: Variant) -> FusionConfig {
    FusionConfig {
        n_f: 2,
        d_f: 8,
        heads: 2,
        ffn_hidden: 16,
        iterations: 2,
        variant,
        ..FusionConfig::desk()
    }
}

/// Four modalities `I, D, L, R` with raw width 6; `L` is spatial.
pub fn spec(fusion: FusionConfig, d_hid: usize, task: TaskSpec) -> ModelSpec {
    let modalities = ["I", "D", "L", "R"]
        .iter()
        .enumerate()
        .map(|(i, id)| modality(id, 6, 4, i == 2))
        .collect();
    ModelSpec {
        fusion,
        d_hid,
        task,
        modalities,
    }
}

pub fn raws(rng: &mut ChaCha8Rng, batch: usize, spec: &ModelSpec) -> Vec<Tensor> {
    spec.modalities.iter().map(|m| rand_tensor(rng, batch, m.raw_dim, 1.0)).collect()
}

/// Overwrites every parameter with `U(-scale, scale)` draws.
pub fn randomize(store: &mut ParameterStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let vals: Vec<f64> = (0..store.get(&n).unwrap().numel())
            .map(|_| scale * rng.gen_range(-1.0..1.0))
            .collect();
        store.set_values(&n, &vals).unwrap();
    }
}

/// Desk preset shrunk for fast end-to-end runs.
pub fn tiny_config(steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.data.n_train = 48;
    cfg.data.n_eval = 24;
    cfg.train.steps = steps;
    cfg.train.batch_size = 4;
    cfg.model.n_f = 2;
    cfg.model.d_f = 8;
    cfg.model.heads = 2;
    cfg.model.ffn_hidden = 16;
    cfg.model.iterations = 2;
    cfg
}

pub fn temp_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("xfi-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---- straight-line references ----

pub fn to_mat(t: &Tensor) -> Mat {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::new(vec![m.len(), m[0].len()], m.concat()).unwrap()
}

fn param(store: &ParameterStore, name: &str) -> Tensor {
    store.get(name).unwrap().clone()
}

/// `x·W + b`, with `W` stored `in × out`.
pub fn affine(x: &Mat, w: &Tensor, b: Option<&Tensor>) -> Mat {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|o| {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for (i, x) in row.iter().enumerate().take(fan_in) {
                        s += x * w.data()[i * fan_out + o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn lin(store: &ParameterStore, prefix: &str, x: &Mat) -> Mat {
    affine(x, &param(store, &format!("{prefix}.w")), Some(&param(store, &format!("{prefix}.b"))))
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// Multi-head attention without projections: columns split evenly across heads.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, scale: f64) -> Mat {
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| (0..hd).map(|c| qi[h * hd + c] * kj[h * hd + c]).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in 0..hd {
                    out[i][h * hd + c] += e[j] / z * vj[h * hd + c];
                }
            }
        }
    }
    out
}

/// Adaptive average pooling with bins `[floor(j·L/n), ceil((j+1)·L/n))`.
pub fn pool(x: &Mat, n: usize) -> Mat {
    let l = x.len();
    (0..n)
        .map(|j| {
            let s = j * l / n;
            let e = ((j + 1) * l).div_ceil(n);
            (0..x[0].len())
                .map(|c| (s..e).map(|r| x[r][c]).sum::<f64>() / (e - s) as f64)
                .collect()
        })
        .collect()
}

fn ffn_residual(store: &ParameterStore, prefix: &str, z: &Mat) -> Mat {
    let h = lin(store, &format!("{prefix}.ffn1"), z);
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    add(&lin(store, &format!("{prefix}.ffn2"), &h), z)
}

/// `Z = pool(MHA(Q,K,V)) + pool(Emb_mm)`, `Emb_cm = FFN(Z) + Z`, for one sample, with the
/// attention output projection taken as the identity.
pub fn cross_modal_reference(store: &ParameterStore, prefix: &str, emb_mm: &Mat, cfg: &FusionConfig) -> Mat {
    let q = lin(store, &format!("{prefix}.q"), emb_mm);
    let k = affine(emb_mm, &param(store, &format!("{prefix}.k.w")), None);
    let v = lin(store, &format!("{prefix}.v"), emb_mm);
    let a = attention(&q, &k, &v, cfg.heads, cfg.scale);
    let z = add(&pool(&a, cfg.n_f), &pool(emb_mm, cfg.n_f));
    ffn_residual(store, prefix, &z)
}

/// `O = MHA(query(Emb_cm), K, V) + Emb_cm`, `F' = FFN(O) + O`, for one sample.
pub fn inject_reference(store: &ParameterStore, prefix: &str, emb_cm: &Mat, k: &Mat, v: &Mat, cfg: &FusionConfig) -> Mat {
    let q = lin(store, &format!("{prefix}.query"), emb_cm);
    let o = add(&attention(&q, k, v, cfg.heads, cfg.scale), emb_cm);
    ffn_residual(store, prefix, &o)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette; points in singleton clusters score 0.
pub fn silhouette_reference(points: &Mat, labels: &[usize]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels.iter().filter(|&&l| l == labels[i]).count();
        if own == 1 {
            continue;
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                a += dist(&points[i], &points[j]);
            }
        }
        a /= (own - 1) as f64;
        let mut b = f64::INFINITY;
        let mut others: Vec<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
        others.sort_unstable();
        others.dedup();
        for c in others {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            let mean = members.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / members.len() as f64;
            b = b.min(mean);
        }
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// `[tr(B)/(k−1)] / [tr(W)/(n−k)]`.
pub fn calinski_reference(points: &Mat, labels: &[usize]) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    let centroid = |idx: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; d];
        for &i in idx {
            for (acc, v) in c.iter_mut().zip(&points[i]) {
                *acc += v;
            }
        }
        c.into_iter().map(|v| v / idx.len() as f64).collect()
    };
    let all: Vec<usize> = (0..n).collect();
    let g = centroid(&all);
    let (mut between, mut within) = (0.0, 0.0);
    for c in classes {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let m = centroid(&idx);
        between += idx.len() as f64 * dist(&m, &g).powi(2);
        within += idx.iter().map(|&i| dist(&points[i], &m).powi(2)).sum::<f64>();
    }
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}

/// Rotation matrix of the unit quaternion proportional to `q`.
pub fn rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Applies `s·R·p + t` to every row of a `J × 3` tensor.
pub fn similarity(p: &Tensor, r: [[f64; 3]; 3], s: f64, t: [f64; 3]) -> Tensor {
    let data = p
        .data()
        .chunks(3)
        .flat_map(|v| (0..3).map(move |i| s * (0..3).map(|j| r[i][j] * v[j]).sum::<f64>() + t[i]))
        .collect();
    Tensor::new(p.shape().to_vec(), data).unwrap()
}
