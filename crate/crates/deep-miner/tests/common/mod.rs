//! Shared oracles for the integration suites: straight-line loop references
//! for the attention modules, the exhaustive triplet-loss oracle, and the
//! brute-force retrieval evaluator. All of them are independent of the
//! library's implementation paths they are used to check.

use deep_miner::attention::{ChamParams, SamParams};
use deep_miner::nn::Mode;
use deep_miner::tensor::Tensor;

/// 1x1 convolution by explicit loops: kernel `[Co,Ci,1,1]`, map `[Ci,H,W]`.
fn conv1x1_loops(kernel: &[f64], input: &[f64], co: usize, ci: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * hw];
    for o in 0..co {
        for i in 0..ci {
            let k = kernel[o * ci + i];
            for p in 0..hw {
                out[o * hw + p] += k * input[i * hw + p];
            }
        }
    }
    out
}

fn softmax_rows(values: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut values[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Spatial attention on one sample `[C,H,W]` by explicit loops over the
/// D = H*W positions. Supports both batchnorm modes; train mode uses the
/// sample's own statistics (batch of one map per channel).
pub fn sam_reference(
    y: &[f64],
    c: usize,
    h: usize,
    w: usize,
    p: &SamParams,
    mode: Mode,
) -> Vec<f64> {
    let d = h * w;
    let c8 = c / 8;
    let a = conv1x1_loops(&p.conv_a.to_vec(), y, c8, c, d);
    let b = conv1x1_loops(&p.conv_b.to_vec(), y, c8, c, d);

    // affinity[i][j] = sum_k a[k][i] * b[k][j]
    let mut affinity = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..c8 {
                s += a[k * d + i] * b[k * d + j];
            }
            affinity[i * d + j] = s;
        }
    }
    softmax_rows(&mut affinity, d, d);

    // context[ch][i] = sum_j y[ch][j] * affinity[i][j]
    let mut context = vec![0.0; c * d];
    for ch in 0..c {
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += y[ch * d + j] * affinity[i * d + j];
            }
            context[ch * d + i] = s;
        }
    }

    // batchnorm over the single-sample batch
    let gamma_bn = p.bn.gamma.to_vec();
    let beta_bn = p.bn.beta.to_vec();
    let eps = p.bn.eps;
    let mut normalized = vec![0.0; c * d];
    match mode {
        Mode::Train => {
            for ch in 0..c {
                let plane = &context[ch * d..(ch + 1) * d];
                let mean: f64 = plane.iter().sum::<f64>() / d as f64;
                let var: f64 =
                    plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = (-0.5 * (var + eps).ln()).exp();
                for i in 0..d {
                    normalized[ch * d + i] = (plane[i] - mean) * inv * gamma_bn[ch] + beta_bn[ch];
                }
            }
        }
        Mode::Eval => {
            let rm = p.bn.running_mean.to_vec();
            let rv = p.bn.running_var.to_vec();
            for ch in 0..c {
                let inv = 1.0 / (rv[ch] + eps).sqrt();
                let scale = gamma_bn[ch] * inv;
                let shift = beta_bn[ch] - rm[ch] * scale;
                for i in 0..d {
                    normalized[ch * d + i] = context[ch * d + i] * scale + shift;
                }
            }
        }
    }

    let gamma = p.gamma.to_vec()[0];
    y.iter()
        .zip(&normalized)
        .map(|(yv, nv)| yv + gamma * nv)
        .collect()
}

/// Channel attention on one sample `[C,H,W]` by explicit loops.
pub fn cham_reference(y: &[f64], c: usize, h: usize, w: usize, p: &ChamParams) -> Vec<f64> {
    let d = h * w;
    let c16 = c / 16;
    let mut squeezed = conv1x1_loops(&p.conv_down.to_vec(), y, c16, c, d);
    for v in squeezed.iter_mut() {
        *v = v.max(0.0);
    }
    let mut gate = conv1x1_loops(&p.conv_up.to_vec(), &squeezed, c, c16, d);
    // channel-wise softmax at every spatial position
    for pos in 0..d {
        let max = (0..c)
            .map(|ch| gate[ch * d + pos])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (gate[ch * d + pos] - max).exp();
            gate[ch * d + pos] = e;
            sum += e;
        }
        for ch in 0..c {
            gate[ch * d + pos] /= sum;
        }
    }
    y.iter()
        .enumerate()
        .map(|(i, yv)| yv * gate[i])
        .collect()
}

/// Exhaustive O(N^2) oracle for the batch-hard softplus triplet loss.
pub fn triplet_oracle(features: &[f64], n: usize, d: usize, labels: &[usize]) -> f64 {
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let diff = features[i * d + k] - features[j * d + k];
            s += diff * diff;
        }
        s.sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut hardest_pos = 0.0f64;
        let mut hardest_neg = f64::INFINITY;
        for j in 0..n {
            if labels[j] == labels[i] {
                hardest_pos = hardest_pos.max(dist(i, j));
            } else {
                hardest_neg = hardest_neg.min(dist(i, j));
            }
        }
        let x = hardest_pos - hardest_neg;
        total += x.max(0.0) + (-x.abs()).exp().ln_1p();
    }
    total
}

/// Brute-force CMC/mAP evaluator: explicit filtering, explicit sort,
/// explicit per-rank precision accumulation.
pub struct OracleEval {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<Option<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn eval_oracle(
    dist: &Tensor,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    k_max: usize,
) -> Option<OracleEval> {
    let nq = dist.shape()[0];
    let ng = dist.shape()[1];
    let dd = dist.to_vec();
    let mut per_query_ap = Vec::with_capacity(nq);
    let mut firsts = Vec::new();
    for q in 0..nq {
        let mut ranked: Vec<usize> = (0..ng)
            .filter(|&j| g_ids[j] != q_ids[q] || g_cams[j] != q_cams[q])
            .collect();
        let total_correct = ranked.iter().filter(|&&j| g_ids[j] == q_ids[q]).count();
        if total_correct == 0 {
            per_query_ap.push(None);
            continue;
        }
        ranked.sort_by(|&a, &b| {
            dd[q * ng + a]
                .partial_cmp(&dd[q * ng + b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut hits = 0;
        let mut ap = 0.0;
        let mut first = None;
        for (rank0, &j) in ranked.iter().enumerate() {
            if g_ids[j] == q_ids[q] {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if first.is_none() {
                    first = Some(rank0 + 1);
                }
            }
        }
        per_query_ap.push(Some(ap / total_correct as f64));
        firsts.push(first.unwrap());
    }
    if firsts.is_empty() {
        return None;
    }
    let valid = firsts.len() as f64;
    let cmc: Vec<f64> = (1..=k_max)
        .map(|k| firsts.iter().filter(|&&r| r <= k).count() as f64 / valid)
        .collect();
    let map = per_query_ap.iter().flatten().sum::<f64>() / valid;
    Some(OracleEval {
        cmc,
        map,
        per_query_ap,
    })
}
