//! Low-rank bilinear fusion of the two branch features, the linear
//! classifier, and the three-part loss: cross-entropy, the cut-distance
//! topology loss, and their λ_g combination.
//!
//! The cut distance is built on the tape so its gradient reaches the node
//! scores z: the rank alignment is a constant permutation chosen from the
//! current values, and gradients flow through the gathered entries.

use crate::core_types::{LdsfError, Result};
use crate::nn_core::{Init, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

/// Fusion head hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Internal rank of the factored bilinear form.
    pub rank_d: usize,
    /// Dimension of the fused vector v̂.
    pub fused_c: usize,
    /// Number of target classes.
    pub classes: usize,
    /// Weight of the topology loss.
    pub lambda_g: f64,
    /// Head learning rate.
    pub lr: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            rank_d: 64,
            fused_c: 32,
            classes: 3,
            lambda_g: 0.1,
            lr: 0.005,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank_d == 0 || self.fused_c == 0 {
            return Err(LdsfError::InvalidParameter(
                "fusion dimensions must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(LdsfError::InvalidParameter(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.lambda_g < 0.0 {
            return Err(LdsfError::InvalidParameter(format!(
                "lambda_g must be non-negative, got {}",
                self.lambda_g
            )));
        }
        Ok(())
    }
}

/// Registers U, V, P, b and the linear classifier for branch feature widths
/// `n_dim` (graph branch) and `m_dim` (visual branch).
pub fn fusion_register(
    store: &mut ParamStore,
    cfg: &FusionConfig,
    n_dim: usize,
    m_dim: usize,
) -> Result<()> {
    cfg.validate()?;
    store.register("fusion.u", &[n_dim, cfg.rank_d], Init::Glorot)?;
    store.register("fusion.v", &[m_dim, cfg.rank_d], Init::Glorot)?;
    store.register("fusion.p", &[cfg.rank_d, cfg.fused_c], Init::Glorot)?;
    store.register("fusion.b", &[cfg.fused_c], Init::Zeros)?;
    store.register("fusion.cls.w", &[cfg.fused_c, cfg.classes], Init::Glorot)?;
    store.register("fusion.cls.b", &[cfg.classes], Init::Zeros)?;
    Ok(())
}

/// Scalar parameter count of the low-rank path (U, V, P, b).
pub fn low_rank_param_count(cfg: &FusionConfig, n_dim: usize, m_dim: usize) -> usize {
    cfg.rank_d * (n_dim + m_dim) + cfg.rank_d * cfg.fused_c + cfg.fused_c
}

/// Scalar parameter count of the unfactored bilinear classifier it replaces:
/// one N×M form plus bias per fused coordinate.
pub fn full_bilinear_param_count(cfg: &FusionConfig, n_dim: usize, m_dim: usize) -> usize {
    cfg.fused_c * (n_dim * m_dim + 1)
}

/// Plain-scalar reference of the unfactored bilinear form vLᵀ·W·vG + b.
/// Exists as a test oracle, not on the production path.
pub fn bilinear_reference(v_l: &[f64], v_g: &[f64], w: &[f64], b: f64) -> Result<f64> {
    let (n, m) = (v_l.len(), v_g.len());
    if w.len() != n * m {
        return Err(LdsfError::DimensionMismatch(format!(
            "bilinear W has {} entries for {n}x{m}",
            w.len()
        )));
    }
    let mut acc = b;
    for i in 0..n {
        for j in 0..m {
            acc += v_l[i] * w[i * m + j] * v_g[j];
        }
    }
    Ok(acc)
}

/// Plain-scalar reference of the rank-d factored form
/// Σ_k (U_k·vL)·(V_k·vG) + b, with U stored d×N and V stored d×M.
pub fn low_rank_reference(v_l: &[f64], v_g: &[f64], u: &[f64], v: &[f64], b: f64) -> Result<f64> {
    let (n, m) = (v_l.len(), v_g.len());
    if u.len() % n != 0 || v.len() % m != 0 || u.len() / n != v.len() / m {
        return Err(LdsfError::DimensionMismatch(format!(
            "factors {}x{n} and {}x{m} disagree on rank",
            u.len() / n,
            v.len() / m
        )));
    }
    let d = u.len() / n;
    let mut acc = b;
    for k in 0..d {
        let pl: f64 = (0..n).map(|i| u[k * n + i] * v_l[i]).sum();
        let pg: f64 = (0..m).map(|j| v[k * m + j] * v_g[j]).sum();
        acc += pl * pg;
    }
    Ok(acc)
}

/// The production fusion: v̂ = Pᵀ(ReLU(Uᵀ vL) ⊙ ReLU(Vᵀ vG)) + b.
pub fn fuse(
    tape: &mut Tape,
    v_l: Var,
    v_g: Var,
    store: &ParamStore,
    cfg: &FusionConfig,
) -> Result<Var> {
    let n = tape.value(v_l).len();
    let m = tape.value(v_g).len();
    let u = tape.param(store, "fusion.u")?;
    let v = tape.param(store, "fusion.v")?;
    let p = tape.param(store, "fusion.p")?;
    let b = tape.param(store, "fusion.b")?;
    let lu = tape.matmul(v_l, u, 1, n, cfg.rank_d)?;
    let lu = tape.relu(lu);
    let gv = tape.matmul(v_g, v, 1, m, cfg.rank_d)?;
    let gv = tape.relu(gv);
    let had = tape.mul(lu, gv)?;
    let proj = tape.matmul(had, p, 1, cfg.rank_d, cfg.fused_c)?;
    tape.add_row(proj, b, 1, cfg.fused_c)
}

/// Class logits of a fused vector.
pub fn classify(tape: &mut Tape, v_hat: Var, store: &ParamStore, cfg: &FusionConfig) -> Result<Var> {
    let w = tape.param(store, "fusion.cls.w")?;
    let b = tape.param(store, "fusion.cls.b")?;
    tape.dense(v_hat, w, b, 1, cfg.fused_c, cfg.classes)
}

/// Mean cross-entropy over a batch of per-sample logit vars.
pub fn cross_entropy_batch(
    tape: &mut Tape,
    logits: &[Var],
    labels: &[usize],
    classes: usize,
) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(LdsfError::InvalidInput(format!(
            "batch of {} logits with {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(LdsfError::InvalidInput(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut acc: Option<Var> = None;
    for (&lv, &label) in logits.iter().zip(labels) {
        let ce = tape.cross_entropy(lv, label, classes)?;
        acc = Some(match acc {
            None => ce,
            Some(prev) => tape.add(prev, ce)?,
        });
    }
    Ok(tape.scale(acc.expect("non-empty batch"), 1.0 / logits.len() as f64))
}

/// Off-diagonal A_norm entries rescaled to sum 1 (all zeros if the graph has
/// no off-diagonal weight, e.g. a single node).
fn normalized_beta(a_norm: &[f64], n: usize) -> Vec<f64> {
    let mut beta = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += a_norm[i * n + j];
            }
        }
    }
    if total > 0.0 {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    beta[i * n + j] = a_norm[i * n + j] / total;
                }
            }
        }
    }
    beta
}

/// Indices of `z` sorted by descending value (stable on ties).
fn descending_rank(z: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Rank-aligned η vector on the tape: gather by descending score, then pad
/// with zero-score virtual nodes up to `n_pad`.
fn aligned_scores(tape: &mut Tape, z: Var, order: &[usize], n_pad: usize) -> Result<Var> {
    let sorted = tape.gather(z, order)?;
    if order.len() == n_pad {
        return Ok(sorted);
    }
    let pad = tape.constant(vec![n_pad - order.len()], vec![0.0; n_pad - order.len()])?;
    tape.concat(&[sorted, pad])
}

/// β matrix permuted into rank order and zero-padded to `n_pad`.
fn aligned_beta(a_norm: &[f64], order: &[usize], n_pad: usize) -> Vec<f64> {
    let n = order.len();
    let beta = normalized_beta(a_norm, n);
    let mut out = vec![0.0; n_pad * n_pad];
    for i in 0..n {
        for j in 0..n {
            out[i * n_pad + j] = beta[order[i] * n + order[j]];
        }
    }
    out
}

/// Eq.-style cut distance between two attention-scored graphs: align nodes
/// by descending η rank, pad the smaller graph with zero-score isolated
/// nodes, and return (1/|V|)·[Σ(η−η′)² + Σ over ordered pairs of
/// (ηηβ − η′η′β′)²]. Differentiable in both z inputs.
pub fn cut_distance(
    tape: &mut Tape,
    z_a: Var,
    a_norm_a: &[f64],
    z_b: Var,
    a_norm_b: &[f64],
) -> Result<Var> {
    let na = tape.value(z_a).len();
    let nb = tape.value(z_b).len();
    if a_norm_a.len() != na * na || a_norm_b.len() != nb * nb {
        return Err(LdsfError::DimensionMismatch(format!(
            "adjacency sizes {} and {} do not match {na} and {nb} nodes",
            a_norm_a.len(),
            a_norm_b.len()
        )));
    }
    let n = na.max(nb);
    let order_a = descending_rank(tape.value(z_a));
    let order_b = descending_rank(tape.value(z_b));
    let eta_a = aligned_scores(tape, z_a, &order_a, n)?;
    let eta_b = aligned_scores(tape, z_b, &order_b, n)?;
    let beta_a = tape.constant(vec![n, n], aligned_beta(a_norm_a, &order_a, n))?;
    let beta_b = tape.constant(vec![n, n], aligned_beta(a_norm_b, &order_b, n))?;

    let diff = tape.sub(eta_a, eta_b)?;
    let sq = tape.mul(diff, diff)?;
    let node_term = tape.sum(sq);

    let edge_sq = |tape: &mut Tape, eta: Var, beta: Var| -> Result<Var> {
        let outer = tape.matmul(eta, eta, n, 1, n)?;
        tape.mul(outer, beta)
    };
    let ea = edge_sq(tape, eta_a, beta_a)?;
    let eb = edge_sq(tape, eta_b, beta_b)?;
    let ediff = tape.sub(ea, eb)?;
    let esq = tape.mul(ediff, ediff)?;
    let edge_term = tape.sum(esq);

    let total = tape.add(node_term, edge_term)?;
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// One batch sample's topology inputs.
pub struct TopoSample {
    /// Node scores from the graph readout.
    pub z: Var,
    /// That graph's normalized adjacency (row-major n×n).
    pub a_norm: Vec<f64>,
    pub label: usize,
}

/// Mean cut distance over all intra-class ordered-index pairs (i < j) in the
/// batch; `None` when no class has two samples.
pub fn topology_loss(tape: &mut Tape, samples: &[TopoSample]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if samples[i].label != samples[j].label {
                continue;
            }
            let cd = cut_distance(
                tape,
                samples[i].z,
                &samples[i].a_norm,
                samples[j].z,
                &samples[j].a_norm,
            )?;
            acc = Some(match acc {
                None => cd,
                Some(prev) => tape.add(prev, cd)?,
            });
            count += 1;
        }
    }
    Ok(acc.map(|a| tape.scale(a, 1.0 / count as f64)))
}

/// L = L_cls + λ_g·L_g (just L_cls when the batch yields no pairs).
pub fn total_loss(
    tape: &mut Tape,
    cls_loss: Var,
    topo_loss: Option<Var>,
    lambda_g: f64,
) -> Result<Var> {
    match topo_loss {
        None => Ok(cls_loss),
        Some(topo) if lambda_g == 0.0 => {
            let _ = topo;
            Ok(cls_loss)
        }
        Some(topo) => {
            let weighted = tape.scale(topo, lambda_g);
            tape.add(cls_loss, weighted)
        }
    }
}
