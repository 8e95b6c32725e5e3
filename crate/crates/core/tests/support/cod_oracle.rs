//! Plain-loop reference for the bidirectional contrastive loss.

use cod_lab::objective::{CodConfig, NegativePool};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `l_cl` for anchor `same[i]` with positive `other[i]`.
fn term(same: &[Vec<f64>], other: &[Vec<f64>], i: usize, cfg: &CodConfig) -> f64 {
    let anchor = &same[i];
    let mut logits = Vec::new();
    if cfg.negative_pool == NegativePool::BothModalities {
        for (j, u) in same.iter().enumerate() {
            if j != i {
                logits.push(cos(anchor, u) / cfg.tau);
            }
        }
    }
    for u in other {
        logits.push(cos(anchor, u) / cfg.tau);
    }
    -cos(anchor, &other[i]) / cfg.tau + log_sum_exp(&logits)
}

pub fn cod_loss(text: &[Vec<f64>], graph: &[Vec<f64>], cfg: &CodConfig) -> f64 {
    let n = text.len();
    let mut total = 0.0;
    for i in 0..n {
        total += term(text, graph, i, cfg) + term(graph, text, i, cfg);
    }
    if cfg.batch_mean {
        0.5 * total / n as f64
    } else {
        0.5 * total
    }
}
