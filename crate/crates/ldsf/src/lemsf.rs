//! The local-EM-scattering-feature network: two heterogeneous graph layers
//! (type projection, per-meta-path multi-head node attention, semantic
//! attention across meta-paths) followed by a graph-level attention readout,
//! all with regularized blending between the attended and unattended paths.
//!
//! Everything is built on a caller-supplied [`Tape`] so the fusion stage can
//! compose both branches and the topology loss into one backward sweep.

use crate::core_types::{LdsfError, Result, ScattererKind};
use crate::graph_build::HeteroGraph;
use crate::nn_core::{Init, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Negative slope of the attention LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Number of graph convolution layers (fixed).
pub const LEMSF_LAYERS: usize = 2;
/// Node attribute dimension (A, α, γ, L, φ̄, x, y).
pub const ATTR_DIM: usize = 7;

/// Fixed enumeration of the four ordered type pairs; meta-path `p` in
/// parameter names refers to an index into this array.
pub const METAPATH_PAIRS: [(ScattererKind, ScattererKind); 4] = [
    (ScattererKind::Local, ScattererKind::Local),
    (ScattererKind::Local, ScattererKind::Distributed),
    (ScattererKind::Distributed, ScattererKind::Local),
    (ScattererKind::Distributed, ScattererKind::Distributed),
];

fn kind_tag(kind: ScattererKind) -> &'static str {
    match kind {
        ScattererKind::Local => "loc",
        ScattererKind::Distributed => "dist",
    }
}

/// Hyperparameters of the graph branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemsfConfig {
    /// Attention heads per meta-path.
    pub heads: usize,
    /// Hidden embedding width (must be divisible by `heads`).
    pub hidden: usize,
    /// Width of the semantic-attention MLP.
    pub semantic_dim: usize,
    /// Dropout probability, applied after the first layer only.
    pub dropout: f64,
    /// Blend between attended aggregation and the plain self term.
    pub alpha_lesf: f64,
    /// Blend between semantic attention and the uniform meta-path average.
    pub beta_lesf: f64,
    /// Blend between readout attention and the uniform node average.
    pub gamma_lesf: f64,
    /// Branch learning rate.
    pub lr: f64,
}

impl Default for LemsfConfig {
    fn default() -> Self {
        LemsfConfig {
            heads: 8,
            hidden: 32,
            semantic_dim: 128,
            dropout: 0.1,
            alpha_lesf: 0.8,
            beta_lesf: 0.8,
            gamma_lesf: 0.8,
            lr: 0.005,
        }
    }
}

impl LemsfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(LdsfError::InvalidParameter(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.semantic_dim == 0 {
            return Err(LdsfError::InvalidParameter("semantic_dim must be > 0".into()));
        }
        for (name, v) in [
            ("alpha_lesf", self.alpha_lesf),
            ("beta_lesf", self.beta_lesf),
            ("gamma_lesf", self.gamma_lesf),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LdsfError::InvalidParameter(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LdsfError::InvalidParameter(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Registers every LEMSF tensor under a stable name. Layer 0 projects the
/// 7 raw attributes; layer 1 projects the previous hidden state.
pub fn lemsf_register(store: &mut ParamStore, cfg: &LemsfConfig) -> Result<()> {
    cfg.validate()?;
    let dk = cfg.head_dim();
    for layer in 0..LEMSF_LAYERS {
        let in_dim = if layer == 0 { ATTR_DIM } else { cfg.hidden };
        for kind in [ScattererKind::Local, ScattererKind::Distributed] {
            store.register(
                &format!("lemsf.l{layer}.proj.{}", kind_tag(kind)),
                &[in_dim, cfg.hidden],
                Init::Glorot,
            )?;
        }
        for p in 0..METAPATH_PAIRS.len() {
            for k in 0..cfg.heads {
                let base = format!("lemsf.l{layer}.mp{p}.h{k}");
                store.register(&format!("{base}.w"), &[cfg.hidden, dk], Init::Glorot)?;
                store.register(&format!("{base}.v1"), &[dk], Init::Glorot)?;
                store.register(&format!("{base}.v2"), &[dk], Init::Glorot)?;
            }
        }
        store.register(
            &format!("lemsf.l{layer}.sem.w"),
            &[cfg.hidden, cfg.semantic_dim],
            Init::Glorot,
        )?;
        store.register(&format!("lemsf.l{layer}.sem.b"), &[cfg.semantic_dim], Init::Zeros)?;
        store.register(&format!("lemsf.l{layer}.sem.mu"), &[cfg.semantic_dim], Init::Glorot)?;
    }
    store.register("lemsf.readout.theta", &[cfg.hidden], Init::Glorot)?;
    Ok(())
}

/// Routes each node's row through the projection matrix of its own type.
pub fn type_project(
    tape: &mut Tape,
    g: &HeteroGraph,
    h: Var,
    store: &ParamStore,
    cfg: &LemsfConfig,
    layer: usize,
) -> Result<Var> {
    let n = g.node_count();
    let in_dim = tape.value(h).len() / n;
    let mut out: Option<Var> = None;
    for kind in [ScattererKind::Local, ScattererKind::Distributed] {
        let mask: Vec<f64> = g
            .node_types
            .iter()
            .map(|&t| if t == kind { 1.0 } else { 0.0 })
            .collect();
        if mask.iter().all(|&m| m == 0.0) {
            continue;
        }
        let w = tape.param(store, &format!("lemsf.l{layer}.proj.{}", kind_tag(kind)))?;
        let hw = tape.matmul(h, w, n, in_dim, cfg.hidden)?;
        let mv = tape.constant(vec![n], mask)?;
        let term = tape.mul_channels(hw, mv, n, cfg.hidden)?;
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    out.ok_or_else(|| LdsfError::InvalidInput("graph has no nodes".into()))
}

/// One head of node-level attention: scores every allowed directed pair
/// (src → dst) plus a self-pair for every destination-type node, then
/// softmax per destination. Rows of nodes outside the destination set are 0.
///
/// `hp` holds the head-projected features (n × head_dim); the concatenation
/// order of Eq.(10) is [h_dst ‖ h_src], so `v1` scores destinations and `v2`
/// sources.
pub fn node_attention(
    tape: &mut Tape,
    hp: Var,
    v1: Var,
    v2: Var,
    n: usize,
    pairs: &[(usize, usize)],
    dst_mask: &[bool],
) -> Result<Var> {
    if dst_mask.len() != n {
        return Err(LdsfError::DimensionMismatch(format!(
            "dst_mask length {} for {n} nodes",
            dst_mask.len()
        )));
    }
    let dk = tape.value(hp).len() / n;
    let s1 = tape.matmul(hp, v1, n, dk, 1)?;
    let s2 = tape.matmul(hp, v2, n, dk, 1)?;
    let scores = tape.outer_sum(s1, s2)?; // scores[dst][src]
    let scores = tape.leaky_relu(scores, LEAKY_SLOPE);
    let mut allowed = vec![false; n * n];
    for &(src, dst) in pairs {
        if src >= n || dst >= n {
            return Err(LdsfError::InvalidInput(format!(
                "meta-path pair ({src}, {dst}) out of range"
            )));
        }
        allowed[dst * n + src] = true;
    }
    for (i, &is_dst) in dst_mask.iter().enumerate() {
        if is_dst {
            allowed[i * n + i] = true;
        }
    }
    tape.masked_softmax_rows(scores, n, &allowed)
}

/// Blended aggregation of one head: α·(η̃·h) + (1−α)·h, then ELU.
pub fn aggregate_metapath(
    tape: &mut Tape,
    hp: Var,
    eta: Var,
    n: usize,
    alpha_lesf: f64,
) -> Result<Var> {
    let dk = tape.value(hp).len() / n;
    let agg = tape.matmul(eta, hp, n, n, dk)?;
    let attended = tape.scale(agg, alpha_lesf);
    let plain = tape.scale(hp, 1.0 - alpha_lesf);
    let m = tape.add(attended, plain)?;
    Ok(tape.elu(m))
}

/// Full per-meta-path embedding: K heads of project → attend → aggregate,
/// concatenated along the feature axis back to `hidden`.
#[allow(clippy::too_many_arguments)]
pub fn metapath_embed(
    tape: &mut Tape,
    g: &HeteroGraph,
    hproj: Var,
    store: &ParamStore,
    cfg: &LemsfConfig,
    layer: usize,
    path_idx: usize,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let n = g.node_count();
    let dk = cfg.head_dim();
    let dst_type = METAPATH_PAIRS[path_idx].1;
    let dst_mask: Vec<bool> = g.node_types.iter().map(|&t| t == dst_type).collect();
    let mut heads = Vec::with_capacity(cfg.heads);
    for k in 0..cfg.heads {
        let base = format!("lemsf.l{layer}.mp{path_idx}.h{k}");
        let w = tape.param(store, &format!("{base}.w"))?;
        let v1 = tape.param(store, &format!("{base}.v1"))?;
        let v2 = tape.param(store, &format!("{base}.v2"))?;
        let hp = tape.matmul(hproj, w, n, cfg.hidden, dk)?;
        let eta = node_attention(tape, hp, v1, v2, n, pairs, &dst_mask)?;
        heads.push(aggregate_metapath(tape, hp, eta, n, cfg.alpha_lesf)?);
    }
    // Flat concat is head-major [k][i][d]; reorder to node-major [i][k·dk+d].
    let flat = tape.concat(&heads)?;
    let mut idx = vec![0usize; n * cfg.hidden];
    for i in 0..n {
        for k in 0..cfg.heads {
            for d in 0..dk {
                idx[i * cfg.hidden + k * dk + d] = k * n * dk + i * dk + d;
            }
        }
    }
    tape.gather(flat, &idx)
}

/// Semantic attention across the present meta-paths. Each path is scored by
/// the mean over its end (destination-type) nodes of μᵀ·tanh(W·h + b); the
/// softmax-attended combination is blended with the uniform average. With no
/// present paths the layer falls back to the type-projected features.
#[allow(clippy::too_many_arguments)]
/// The softmax distribution over the present meta-paths (Eq.-style semantic
/// scores before the β blend). One entry per element of `embeds`.
pub fn semantic_softmax(
    tape: &mut Tape,
    g: &HeteroGraph,
    embeds: &[(usize, Var)],
    store: &ParamStore,
    cfg: &LemsfConfig,
    layer: usize,
) -> Result<Var> {
    if embeds.is_empty() {
        return Err(LdsfError::InvalidInput(
            "semantic softmax needs at least one meta-path embedding".into(),
        ));
    }
    let n = g.node_count();
    let w = tape.param(store, &format!("lemsf.l{layer}.sem.w"))?;
    let b = tape.param(store, &format!("lemsf.l{layer}.sem.b"))?;
    let mu = tape.param(store, &format!("lemsf.l{layer}.sem.mu"))?;
    let mut path_scores = Vec::with_capacity(embeds.len());
    for &(p, h_p) in embeds {
        let t = tape.dense(h_p, w, b, n, cfg.hidden, cfg.semantic_dim)?;
        let t = tape.tanh(t);
        let per_node = tape.matmul(t, mu, n, cfg.semantic_dim, 1)?;
        let dst_type = METAPATH_PAIRS[p].1;
        let end_idx: Vec<usize> = g
            .node_types
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == dst_type)
            .map(|(i, _)| i)
            .collect();
        let gathered = tape.gather(per_node, &end_idx)?;
        path_scores.push(tape.mean(gathered));
    }
    let wvec = tape.concat(&path_scores)?;
    tape.softmax_rows(wvec, embeds.len())
}

pub fn semantic_attention(
    tape: &mut Tape,
    g: &HeteroGraph,
    embeds: &[(usize, Var)],
    store: &ParamStore,
    cfg: &LemsfConfig,
    layer: usize,
    fallback: Var,
) -> Result<Var> {
    if embeds.is_empty() {
        return Ok(fallback);
    }
    let n = g.node_count();
    let n_paths = embeds.len();
    let atilde = semantic_softmax(tape, g, embeds, store, cfg, layer)?;
    let ones_col = tape.constant(vec![n, 1], vec![1.0; n])?;
    let uniform = (1.0 - cfg.beta_lesf) / n_paths as f64;
    let mut out: Option<Var> = None;
    for (slot, &(_, h_p)) in embeds.iter().enumerate() {
        let a_p = tape.gather(atilde, &[slot])?;
        let coeff = tape.scale(a_p, cfg.beta_lesf);
        let coeff = tape.add_scalar(coeff, uniform);
        let col = tape.matmul(ones_col, coeff, n, 1, 1)?;
        let term = tape.mul_channels(h_p, col, n, cfg.hidden)?;
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(out.expect("embeds checked non-empty"))
}

/// Graph-level readout: z = softmax(A_norm·H·Θ) over nodes, then the
/// γ-blended weighted node sum. Returns (graph vector, z, A_norm constant).
pub fn graph_readout(
    tape: &mut Tape,
    g: &HeteroGraph,
    h: Var,
    store: &ParamStore,
    cfg: &LemsfConfig,
) -> Result<(Var, Var, Var)> {
    let n = g.node_count();
    let a_norm = tape.constant(vec![n, n], g.a_norm.clone())?;
    let theta = tape.param(store, "lemsf.readout.theta")?;
    let htheta = tape.matmul(h, theta, n, cfg.hidden, 1)?;
    let z_raw = tape.matmul(a_norm, htheta, n, n, 1)?;
    let z = tape.softmax_rows(z_raw, n)?;
    let weighted = tape.scale(z, cfg.gamma_lesf);
    let weights = tape.add_scalar(weighted, (1.0 - cfg.gamma_lesf) / n as f64);
    let g_vec = tape.matmul(weights, h, 1, n, cfg.hidden)?;
    Ok((g_vec, z, a_norm))
}

/// Tape handles produced by one LEMSF forward pass.
pub struct LemsfOutput {
    /// Graph embedding, length `hidden`.
    pub v: Var,
    /// Node importance scores (softmax over nodes).
    pub z: Var,
    /// The raw attribute matrix as a differentiable leaf (n × 7).
    pub x: Var,
    /// Normalized adjacency constant (n × n).
    pub a_norm: Var,
    /// Final node embeddings (n × hidden).
    pub h_final: Var,
}

/// Runs the full two-layer branch on `tape`. Only non-empty meta-path
/// buckets participate; dropout applies after the first layer in training
/// mode only.
pub fn lemsf_forward(
    tape: &mut Tape,
    g: &HeteroGraph,
    store: &ParamStore,
    cfg: &LemsfConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LemsfOutput> {
    cfg.validate()?;
    let n = g.node_count();
    if n == 0 {
        return Err(LdsfError::InvalidInput("empty graph".into()));
    }
    let xdata: Vec<f64> = g.x.iter().flat_map(|row| row.iter().copied()).collect();
    let x = tape.input(vec![n, ATTR_DIM], xdata)?;
    let mut h = x;
    for layer in 0..LEMSF_LAYERS {
        let hproj = type_project(tape, g, h, store, cfg, layer)?;
        let mut embeds = Vec::new();
        for (p, pair) in METAPATH_PAIRS.iter().enumerate() {
            if let Some(pairs) = g.metapaths.get(pair) {
                if !pairs.is_empty() {
                    embeds.push((p, metapath_embed(tape, g, hproj, store, cfg, layer, p, pairs)?));
                }
            }
        }
        h = semantic_attention(tape, g, &embeds, store, cfg, layer, hproj)?;
        if layer == 0 {
            h = tape.dropout(h, cfg.dropout, training, rng)?;
        }
    }
    let (v, z, a_norm) = graph_readout(tape, g, h, store, cfg)?;
    Ok(LemsfOutput {
        v,
        z,
        x,
        a_norm,
        h_final: h,
    })
}
