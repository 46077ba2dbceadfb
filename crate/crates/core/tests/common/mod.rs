//! Naive nested-loop forwards, written from the model equations without
//! the library's matrix type, plus small fixtures.

#![allow(dead_code)]

use avfusion::model::Head;
use avfusion::{Matrix, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn grid(m: &Matrix) -> Grid {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn random_grid(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Grid {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_matrix(g: &Grid) -> Matrix {
    let cols = g.first().map_or(0, |r| r.len());
    Matrix::from_vec(g.len(), cols, g.iter().flatten().copied().collect()).unwrap()
}

fn head_oracle(head: &Head, x: &Grid) -> Grid {
    let mut cur = x.clone();
    let n = head.layers.len();
    for (i, layer) in head.layers.iter().enumerate() {
        let w = grid(&layer.weight);
        let b = layer.bias.row(0).to_vec();
        cur = cur
            .iter()
            .map(|row| {
                (0..b.len())
                    .map(|o| {
                        let mut s = b[o];
                        for (j, x) in row.iter().enumerate() {
                            s += x * w[j][o];
                        }
                        if i + 1 < n {
                            s.max(0.0)
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect();
    }
    cur
}

/// One attention branch: `C = tanh(X^T W_corr K / sqrt(scale))`,
/// `H = relu(W_feat X + W_c C^T)`, `X_att = W_h^T H + X`.
fn branch(x: &Grid, key: &Grid, w_corr: &Grid, w_feat: &Grid, w_c: &Grid, w_h: &Grid, scale: usize) -> Grid {
    let l = x.len();
    let dm = x[0].len();
    let dk = key[0].len();
    let k = w_feat.len();
    let mut c = vec![vec![0.0; dk]; dm];
    for i in 0..dm {
        for j in 0..dk {
            let mut s = 0.0;
            for p in 0..l {
                for q in 0..l {
                    s += x[p][i] * w_corr[p][q] * key[q][j];
                }
            }
            c[i][j] = (s / (scale as f64).sqrt()).tanh();
        }
    }
    let mut h = vec![vec![0.0; dm]; k];
    for r in 0..k {
        for i in 0..dm {
            let mut s = 0.0;
            for p in 0..l {
                s += w_feat[r][p] * x[p][i];
            }
            for j in 0..dk {
                s += w_c[r][j] * c[i][j];
            }
            h[r][i] = s.max(0.0);
        }
    }
    let mut out = vec![vec![0.0; dm]; l];
    for p in 0..l {
        for i in 0..dm {
            let mut s = x[p][i];
            for r in 0..k {
                s += w_h[r][p] * h[r][i];
            }
            out[p][i] = s;
        }
    }
    out
}

/// Raw predictions (`L x outputs`) for any model kind.
pub fn forward_oracle(model: &Model, xa: &Grid, xv: &Grid) -> Grid {
    let l = xa.len();
    match model {
        Model::Concat(p) => {
            let fused: Grid = (0..l).map(|r| xa[r].iter().chain(&xv[r]).copied().collect()).collect();
            head_oracle(&p.head, &fused)
        }
        Model::Jca(p) => {
            let joint: Grid = (0..l).map(|r| xa[r].iter().chain(&xv[r]).copied().collect()).collect();
            let d = joint[0].len();
            let att_a = branch(xa, &joint, &grid(&p.w_ja), &grid(&p.w_a), &grid(&p.w_ca), &grid(&p.w_ha), d);
            let att_v = branch(xv, &joint, &grid(&p.w_jv), &grid(&p.w_v), &grid(&p.w_cv), &grid(&p.w_hv), d);
            let fused: Grid = (0..l).map(|r| att_v[r].iter().chain(&att_a[r]).copied().collect()).collect();
            head_oracle(&p.head, &fused)
        }
        Model::VanillaCa(p) => {
            let (da, dv) = (xa[0].len(), xv[0].len());
            let att_a = branch(xa, xv, &grid(&p.w_xa), &grid(&p.w_a), &grid(&p.w_ca), &grid(&p.w_ha), dv);
            let att_v = branch(xv, xa, &grid(&p.w_xv), &grid(&p.w_v), &grid(&p.w_cv), &grid(&p.w_hv), da);
            let fused: Grid = (0..l).map(|r| att_v[r].iter().chain(&att_a[r]).copied().collect()).collect();
            head_oracle(&p.head, &fused)
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes of every file under `dir`, keyed by relative path.
pub fn tree_hashes(dir: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, sha256_hex(&std::fs::read(&p).unwrap()));
            }
        }
    }
    out
}

/// Mono 16-bit wave file with the given samples in [-1, 1].
pub fn write_wav(path: &std::path::Path, samples: &[f64], rate: u32) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample((s * 32767.0).round() as i16).unwrap();
    }
    w.finalize().unwrap();
}

pub fn sine(freq: f64, rate: u32, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect()
}
