//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use prosody_core::latent::GaussianLatent;
use prosody_core::syntax::{tree_to_graph, NodeKind, ParseTree, SyntaxGraph};
use prosody_core::Tensor;
use rand::Rng;

pub const PHRASES: [&str; 6] = ["S", "NP", "VP", "PP", "SBAR", "ADJP"];
pub const TAGS: [&str; 6] = ["DT", "NN", "VBD", "IN", "JJ", "RB"];

/// Random word-free tree with exactly `n` nodes. Each new node hangs off
/// a uniformly chosen earlier node, so shapes range from paths to stars.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, n: usize) -> ParseTree {
    assert!(n >= 1);
    let mut tree = ParseTree::new("S");
    let mut has_child = vec![false; n];
    let mut parents = vec![0usize; n];
    for (i, p) in parents.iter_mut().enumerate().skip(1) {
        *p = rng.random_range(0..i);
        has_child[*p] = true;
    }
    for (i, &p) in parents.iter().enumerate().skip(1) {
        let pool = if has_child[i] { &PHRASES[..] } else { &TAGS[..] };
        tree.add_child(p, pool[rng.random_range(0..pool.len())], NodeKind::Constituent);
    }
    tree
}

pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, max_nodes: usize) -> SyntaxGraph {
    let n = rng.random_range(1..=max_nodes);
    tree_to_graph(&random_tree(rng, n))
}

/// Diameter by Floyd–Warshall over the adjacency lists.
pub fn floyd_warshall_diameter(g: &SyntaxGraph) -> usize {
    let n = g.len();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
        for &j in g.neighbors(i) {
            d[i][j] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d.iter().flatten().copied().max().unwrap_or(0)
}

pub fn random_latent<R: Rng + ?Sized>(rng: &mut R, dim: usize, spread: f64) -> GaussianLatent {
    let mean = (0..dim).map(|_| rng.random_range(-spread..spread)).collect();
    let log_var = (0..dim).map(|_| rng.random_range(-spread..spread)).collect();
    GaussianLatent::new(mean, log_var).unwrap()
}

/// Log density of a diagonal Gaussian, written out from scratch.
pub fn log_density(g: &GaussianLatent, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let var = g.log_var[i].exp();
        acc += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x[i] - g.mean[i]).powi(2) / var);
    }
    acc
}

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Every regular file under `dir`, as sorted relative paths.
pub fn list_files(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
