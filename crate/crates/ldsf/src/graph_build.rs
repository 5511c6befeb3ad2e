//! Scattering-center sets as heterogeneous component graphs: typed nodes
//! carrying the 7-dim ASC attribute vector, fully connected edges weighted by
//! reciprocal ground-plane distance, symmetric normalization, and the four
//! single-edge meta-path buckets.

use crate::core_types::{LdsfError, Result, ScatterSet, ScattererKind, ScattererParams, RadarConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Distance floor for the reciprocal edge weight: coincident centers get
/// ω = 1/ε = 1000 instead of a singularity.
pub const DIST_EPS: f64 = 1e-3;

/// Imaging geometry needed for the slant→ground projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundGeometry {
    pub depression: f64,
    pub squint: f64,
}

impl From<&RadarConfig> for GroundGeometry {
    fn from(cfg: &RadarConfig) -> Self {
        GroundGeometry {
            depression: cfg.depression,
            squint: cfg.squint,
        }
    }
}

/// Slant-plane (range, cross-range) to ground-plane coordinates:
/// xg = xs·cosθ·cosφ with θ the depression and φ the squint; the cross-range
/// coordinate is unchanged.
pub fn slant_to_ground(xs: f64, ys: f64, depression: f64, squint: f64) -> (f64, f64) {
    (xs * depression.cos() * squint.cos(), ys)
}

/// Edge weight between two distinct centers: the reciprocal of the
/// ground-projected Euclidean distance, floored at [`DIST_EPS`].
pub fn edge_weight(ci: &ScattererParams, cj: &ScattererParams, geom: &GroundGeometry) -> f64 {
    let (xi, yi) = slant_to_ground(ci.x, ci.y, geom.depression, geom.squint);
    let (xj, yj) = slant_to_ground(cj.x, cj.y, geom.depression, geom.squint);
    let d = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
    1.0 / d.max(DIST_EPS)
}

/// Symmetric normalization (D+I)^{−1/2}(I+A)(D+I)^{−1/2} with
/// D = diag(row sums of A). `a_adj` is row-major n×n.
pub fn normalize_adjacency(a_adj: &[f64], n: usize) -> Result<Vec<f64>> {
    if a_adj.len() != n * n {
        return Err(LdsfError::DimensionMismatch(format!(
            "adjacency has {} entries, expected {}",
            a_adj.len(),
            n * n
        )));
    }
    for i in 0..n {
        if a_adj[i * n + i] != 0.0 {
            return Err(LdsfError::InvalidInput(format!(
                "adjacency diagonal must be zero (row {})",
                i
            )));
        }
        for j in 0..n {
            let w = a_adj[i * n + j];
            if !(w >= 0.0) {
                return Err(LdsfError::InvalidInput(format!(
                    "adjacency weights must be non-negative (({}, {}) = {})",
                    i, j, w
                )));
            }
            if w != a_adj[j * n + i] {
                return Err(LdsfError::InvalidInput(format!(
                    "adjacency must be symmetric (({i}, {j}))"
                )));
            }
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| a_adj[i * n + j]).sum();
            1.0 / (d + 1.0).sqrt()
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let aij = a_adj[i * n + j] + if i == j { 1.0 } else { 0.0 };
            out[i * n + j] = inv_sqrt[i] * aij * inv_sqrt[j];
        }
    }
    Ok(out)
}

/// A heterogeneous, fully connected, weighted component graph.
///
/// `x` rows follow the attribute tuple order (A, α, γ, L, φ̄, x, y).
/// `metapaths` has one bucket per ordered type pair whose *both* endpoint
/// types occur in the graph; a bucket lists every directed node pair (i, j),
/// i ≠ j, with τ(i) = source and τ(j) = destination.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub node_types: Vec<ScattererKind>,
    pub x: Vec<[f64; 7]>,
    pub a_adj: Vec<f64>,
    pub a_norm: Vec<f64>,
    pub metapaths: BTreeMap<(ScattererKind, ScattererKind), Vec<(usize, usize)>>,
}

fn attr_row(c: &ScattererParams) -> [f64; 7] {
    [c.a, c.alpha, c.gamma, c.l, c.phi_bar, c.x, c.y]
}

fn metapath_buckets(
    types: &[ScattererKind],
) -> BTreeMap<(ScattererKind, ScattererKind), Vec<(usize, usize)>> {
    let mut present: Vec<ScattererKind> = Vec::new();
    for &t in types {
        if !present.contains(&t) {
            present.push(t);
        }
    }
    let mut buckets = BTreeMap::new();
    for &src in &present {
        for &dst in &present {
            buckets.insert((src, dst), Vec::new());
        }
    }
    let n = types.len();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                buckets
                    .get_mut(&(types[i], types[j]))
                    .expect("both endpoint types are present")
                    .push((i, j));
            }
        }
    }
    buckets
}

impl HeteroGraph {
    pub fn node_count(&self) -> usize {
        self.node_types.len()
    }

    pub fn adj(&self, i: usize, j: usize) -> f64 {
        self.a_adj[i * self.node_count() + j]
    }

    pub fn norm(&self, i: usize, j: usize) -> f64 {
        self.a_norm[i * self.node_count() + j]
    }

    /// Graph JSON: nodes with type + attrs, plus the raw ω matrix. The
    /// normalized adjacency is never serialized; it is recomputed on load.
    pub fn to_json(&self) -> Result<String> {
        let n = self.node_count();
        let nodes: Vec<NodeJson> = (0..n)
            .map(|i| NodeJson {
                ty: self.node_types[i],
                attrs: self.x[i],
            })
            .collect();
        let adj: Vec<Vec<f64>> = (0..n)
            .map(|i| self.a_adj[i * n..(i + 1) * n].to_vec())
            .collect();
        Ok(serde_json::to_string_pretty(&GraphJson { nodes, adj })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let parsed: GraphJson = serde_json::from_str(s)?;
        let n = parsed.nodes.len();
        if n == 0 {
            return Err(LdsfError::InvalidInput("graph JSON has no nodes".into()));
        }
        if parsed.adj.len() != n || parsed.adj.iter().any(|row| row.len() != n) {
            return Err(LdsfError::Format(format!(
                "graph JSON adjacency is not {n}x{n}"
            )));
        }
        let node_types: Vec<ScattererKind> = parsed.nodes.iter().map(|nd| nd.ty).collect();
        let x: Vec<[f64; 7]> = parsed.nodes.iter().map(|nd| nd.attrs).collect();
        let a_adj: Vec<f64> = parsed.adj.into_iter().flatten().collect();
        let a_norm = normalize_adjacency(&a_adj, n)?;
        let metapaths = metapath_buckets(&node_types);
        Ok(HeteroGraph {
            node_types,
            x,
            a_adj,
            a_norm,
            metapaths,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    #[serde(rename = "type")]
    ty: ScattererKind,
    attrs: [f64; 7],
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<NodeJson>,
    adj: Vec<Vec<f64>>,
}

/// Builds the fully connected heterogeneous graph of a scattering-center set:
/// one typed node per center, reciprocal-ground-distance edge weights on all
/// off-diagonal pairs, normalized adjacency, and meta-path buckets.
pub fn build_graph(s: &ScatterSet, geom: &GroundGeometry) -> Result<HeteroGraph> {
    let n = s.count();
    if n == 0 {
        return Err(LdsfError::InvalidInput(
            "cannot build a graph from an empty scatter set".into(),
        ));
    }
    let node_types: Vec<ScattererKind> = s.centers.iter().map(|c| c.kind).collect();
    let x: Vec<[f64; 7]> = s.centers.iter().map(attr_row).collect();
    let mut a_adj = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let w = edge_weight(&s.centers[i], &s.centers[j], geom);
            a_adj[i * n + j] = w;
            a_adj[j * n + i] = w;
        }
    }
    let a_norm = normalize_adjacency(&a_adj, n)?;
    let metapaths = metapath_buckets(&node_types);
    Ok(HeteroGraph {
        node_types,
        x,
        a_adj,
        a_norm,
        metapaths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asc_model::synthesize_image;
    use crate::core_types::RadarConfig;
    use crate::extraction::{extract_all, ExtractionConfig};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {} ~= {} (tol {}), diff {:e}",
            a,
            b,
            tol,
            (a - b).abs()
        );
    }

    fn seeded(seed: u64) -> impl FnMut() -> f64 {
        // xorshift64*; plenty for test fuzzing.
        let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
        move || {
            state ^= state >> 12;
            state ^= state << 25;
            state ^= state >> 27;
            let bits = state.wrapping_mul(0x2545_f491_4f6c_dd1d);
            (bits >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn slant_to_ground_projection() {
        assert_eq!(slant_to_ground(10.0, -3.0, 0.0, 0.0), (10.0, -3.0));
        let (xg, yg) = slant_to_ground(10.0, 7.0, 60.0_f64.to_radians(), 0.0);
        assert_close(xg, 5.0, 1e-12);
        assert_eq!(yg, 7.0);

        // Product-to-sum identity as an independent trig path:
        // cos d · cos s = (cos(d+s) + cos(d−s)) / 2.
        let mut rng = seeded(41);
        for _ in 0..50 {
            let xs = rng() * 20.0 - 10.0;
            let ys = rng() * 20.0 - 10.0;
            let d = (rng() - 0.5) * std::f64::consts::PI * 0.9;
            let s = (rng() - 0.5) * std::f64::consts::PI;
            let (xg, yg) = slant_to_ground(xs, ys, d, s);
            let oracle = xs * 0.5 * ((d + s).cos() + (d - s).cos());
            assert_close(xg, oracle, 1e-12 * xs.abs().max(1.0));
            assert_eq!(yg, ys);
        }
    }

    #[test]
    fn edge_weight_reciprocal_distance() {
        let geom = GroundGeometry {
            depression: 0.0,
            squint: 0.0,
        };
        let a = ScattererParams::local(1.0, 0.0, 0.0, 0.0, 0.0);
        let b = ScattererParams::local(1.0, 0.0, 2.0, 0.0, 0.0);
        assert_close(edge_weight(&a, &b, &geom), 0.5, 1e-12);
        let c = ScattererParams::local(1.0, 0.0, 0.0, 4.0, 0.0);
        assert_close(edge_weight(&a, &c, &geom), 0.25, 1e-12);
        // Coincident centers hit the ε clamp.
        assert_close(edge_weight(&a, &a, &geom), 1000.0, 1e-9);
        // Depression shortens ground range: slant Δx = 4 at 60° → ground 2.
        let geom60 = GroundGeometry {
            depression: 60.0_f64.to_radians(),
            squint: 0.0,
        };
        assert_close(edge_weight(&a, &c, &geom60), 0.25, 1e-12); // Δy unaffected
        let d = ScattererParams::local(1.0, 0.0, 4.0, 0.0, 0.0);
        assert_close(edge_weight(&a, &d, &geom60), 0.5, 1e-12);
    }

    #[test]
    fn normalize_adjacency_examples() {
        assert_eq!(normalize_adjacency(&[0.0], 1).unwrap(), vec![1.0]);
        let out = normalize_adjacency(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
        for (got, want) in out.iter().zip([0.5, 0.5, 0.5, 0.5]) {
            assert_close(*got, want, 1e-15);
        }
    }

    #[test]
    fn normalize_adjacency_matches_dense_oracle() {
        let n = 5;
        let mut rng = seeded(7);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let w = rng() * 3.0;
                a[i * n + j] = w;
                a[j * n + i] = w;
            }
        }
        let got = normalize_adjacency(&a, n).unwrap();

        // Oracle: explicit triple product S · (I + A) · S with S = (D+I)^{−1/2}.
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            let d: f64 = (0..n).map(|j| a[i * n + j]).sum();
            s[i * n + i] = 1.0 / (d + 1.0).sqrt();
        }
        let mut ia = a.clone();
        for i in 0..n {
            ia[i * n + i] += 1.0;
        }
        let matmul = |l: &[f64], r: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    for j in 0..n {
                        out[i * n + j] += l[i * n + k] * r[k * n + j];
                    }
                }
            }
            out
        };
        let oracle = matmul(&matmul(&s, &ia), &s);
        for (g, o) in got.iter().zip(&oracle) {
            assert_close(*g, *o, 1e-12);
        }
    }

    #[test]
    fn normalize_adjacency_rejects_bad_input() {
        assert!(normalize_adjacency(&[0.0, 1.0, 2.0, 0.0], 2).is_err()); // asymmetric
        assert!(normalize_adjacency(&[1.0, 0.5, 0.5, 0.0], 2).is_err()); // diagonal
        assert!(normalize_adjacency(&[0.0, -1.0, -1.0, 0.0], 2).is_err()); // negative
        assert!(normalize_adjacency(&[0.0; 3], 2).is_err()); // shape
    }

    #[test]
    fn single_local_center_graph() {
        let s = ScatterSet::new(vec![ScattererParams::local(1.0, 0.0, 0.0, 0.0, 0.0)]);
        let geom = GroundGeometry {
            depression: 0.3,
            squint: 0.0,
        };
        let g = build_graph(&s, &geom).unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.a_adj, vec![0.0]);
        assert_eq!(g.a_norm, vec![1.0]);
        assert_eq!(g.metapaths.len(), 1);
        let ll = &g.metapaths[&(ScattererKind::Local, ScattererKind::Local)];
        assert!(ll.is_empty());
    }

    #[test]
    fn bucket_sizes_two_local_one_distributed() {
        let s = ScatterSet::new(vec![
            ScattererParams::local(1.0, 0.0, 0.0, 0.0, 0.0),
            ScattererParams::local(1.0, 0.0, 1.0, 0.0, 0.0),
            ScattererParams::distributed(1.0, 0.0, 2.0, 0.0, 0.0, 1.0),
        ]);
        let geom = GroundGeometry {
            depression: 0.0,
            squint: 0.0,
        };
        let g = build_graph(&s, &geom).unwrap();
        use ScattererKind::{Distributed as D, Local as L};
        assert_eq!(g.metapaths.len(), 4);
        assert_eq!(g.metapaths[&(L, L)], vec![(0, 1), (1, 0)]);
        assert_eq!(g.metapaths[&(L, D)], vec![(0, 2), (1, 2)]);
        assert_eq!(g.metapaths[&(D, L)], vec![(2, 0), (2, 1)]);
        assert_eq!(g.metapaths[&(D, D)], vec![]);
        // Every off-diagonal pair lands in exactly one bucket.
        let total: usize = g.metapaths.values().map(Vec::len).sum();
        assert_eq!(total, 3 * 2);
    }

    #[test]
    fn attr_rows_match_extraction_output() {
        let mut cfg = RadarConfig::default();
        cfg.nf = 64;
        cfg.nphi = 64;
        let truth = vec![
            ScattererParams::local(1.5, 0.0, -1.8, 0.9, 0.0),
            ScattererParams::local(1.0, 0.0, 1.5, -1.2, 0.0),
        ];
        let img = synthesize_image(&ScatterSet::new(truth), &cfg).unwrap();
        let mut ecfg = ExtractionConfig::default();
        ecfg.max_fit = 0.999;
        let (set, _) = extract_all(&img, &ecfg).unwrap();
        assert!(set.count() >= 2);
        let g = build_graph(&set, &GroundGeometry::from(&cfg)).unwrap();
        assert_eq!(g.node_count(), set.count());
        for (i, c) in set.centers.iter().enumerate() {
            assert_eq!(
                g.x[i],
                [c.a, c.alpha, c.gamma, c.l, c.phi_bar, c.x, c.y],
                "X row {i} reproduces θ exactly"
            );
            assert_eq!(g.node_types[i], c.kind);
        }
    }

    #[test]
    fn permutation_consistency() {
        let mut rng = seeded(99);
        let centers: Vec<ScattererParams> = (0..6)
            .map(|i| {
                let x = rng() * 6.0 - 3.0;
                let y = rng() * 6.0 - 3.0;
                if i % 2 == 0 {
                    ScattererParams::local(0.5 + rng(), 0.0, x, y, 0.0)
                } else {
                    ScattererParams::distributed(0.5 + rng(), 0.5, 1.0 + rng(), 0.01, x, y)
                }
            })
            .collect();
        let geom = GroundGeometry {
            depression: 0.29,
            squint: 0.05,
        };
        let g = build_graph(&ScatterSet::new(centers.clone()), &geom).unwrap();

        // Reverse the node order: perm[new] = old.
        let n = centers.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted: Vec<ScattererParams> = perm.iter().map(|&o| centers[o]).collect();
        let gp = build_graph(&ScatterSet::new(permuted), &geom).unwrap();

        for new in 0..n {
            assert_eq!(gp.x[new], g.x[perm[new]]);
            assert_eq!(gp.node_types[new], g.node_types[perm[new]]);
            for new2 in 0..n {
                assert_eq!(gp.adj(new, new2), g.adj(perm[new], perm[new2]));
                assert_close(gp.norm(new, new2), g.norm(perm[new], perm[new2]), 1e-14);
            }
        }
        // Row-sum multiset of A_norm is invariant.
        let sums = |gr: &HeteroGraph| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| gr.norm(i, j)).sum())
                .collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        for (a, b) in sums(&g).iter().zip(sums(&gp)) {
            assert_close(*a, b, 1e-12);
        }
        // Buckets map bijectively through the permutation.
        let inv: Vec<usize> = {
            let mut inv = vec![0; n];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            inv
        };
        for (key, pairs) in &g.metapaths {
            let mut mapped: Vec<(usize, usize)> =
                pairs.iter().map(|&(i, j)| (inv[i], inv[j])).collect();
            mapped.sort();
            let mut got = gp.metapaths[key].clone();
            got.sort();
            assert_eq!(mapped, got);
        }
    }

    #[test]
    fn empty_set_rejected() {
        let geom = GroundGeometry {
            depression: 0.0,
            squint: 0.0,
        };
        assert!(matches!(
            build_graph(&ScatterSet::new(vec![]), &geom),
            Err(LdsfError::InvalidInput(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let s = ScatterSet::new(vec![
            ScattererParams::local(2.0, 0.5, -1.0, 0.5, 1e-10),
            ScattererParams::distributed(1.0, -0.5, 1.8, 0.02, 1.0, -0.5),
            ScattererParams::local(0.7, 0.0, 0.3, 2.1, 0.0),
        ]);
        let geom = GroundGeometry {
            depression: 17.0_f64.to_radians(),
            squint: 0.0,
        };
        let g = build_graph(&s, &geom).unwrap();
        let json = g.to_json().unwrap();
        assert!(json.contains("\"adj\""), "raw ω matrix serialized");
        assert!(!json.contains("norm"), "A_norm never serialized");
        let g2 = HeteroGraph::from_json(&json).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn json_rejects_malformed() {
        assert!(HeteroGraph::from_json("{\"nodes\":[],\"adj\":[]}").is_err());
        let bad_shape = r#"{"nodes":[{"type":"Local","attrs":[1,0,0,0,0,0,0]}],"adj":[[0.0,1.0]]}"#;
        assert!(HeteroGraph::from_json(bad_shape).is_err());
    }
}
