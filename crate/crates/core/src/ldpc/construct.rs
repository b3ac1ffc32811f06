use rand::seq::SliceRandom;
use rand::Rng;

use super::matrix::count_four_cycles;
use super::{LdpcError, ParityCheckMatrix, Result};
use crate::rng::{domain, stream};

const DUPLICATE_PENALTY: usize = 1_000_000;

/// Random regular code with column weight `wc` and row weight `wr`.
///
/// Edge sockets are permuted at random and then repaired by edge swaps that
/// remove repeated entries and reduce the number of 4-cycles. The result is a
/// deterministic function of the arguments.
pub fn generate_regular_code(n: usize, wc: usize, wr: usize, seed: u64) -> Result<ParityCheckMatrix> {
    if wc < 2 || wr < 2 {
        return Err(LdpcError::InfeasibleProfile(format!("weights must be >= 2 (wc={wc}, wr={wr})")));
    }
    if n == 0 || (n * wc) % wr != 0 {
        return Err(LdpcError::InfeasibleProfile(format!("n*wc = {} is not divisible by wr = {wr}", n * wc)));
    }
    let m = n * wc / wr;
    if wc > m || wr > n {
        return Err(LdpcError::InfeasibleProfile(format!("n={n}, wc={wc}, wr={wr} admits no simple graph")));
    }

    let mut rng = stream(seed, domain::CODE_CONSTRUCTION, 0);
    let mut edge_var: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, wc)).collect();
    edge_var.shuffle(&mut rng);

    let n_edges = edge_var.len();
    let mut cost = graph_cost(&edge_var, n, m, wr);
    let budget = 40 * n_edges + 10_000;
    let mut attempts = 0;
    while cost > 0 && attempts < budget {
        let bad = bad_edges(&edge_var, n, m, wr);
        if bad.is_empty() {
            break;
        }
        for &e in &bad {
            attempts += 1;
            let f = rng.random_range(0..n_edges);
            if f / wr == e / wr || edge_var[f] == edge_var[e] {
                continue;
            }
            edge_var.swap(e, f);
            let c = graph_cost(&edge_var, n, m, wr);
            if c <= cost {
                cost = c;
            } else {
                edge_var.swap(e, f);
            }
            if cost == 0 || attempts >= budget {
                break;
            }
        }
    }
    if cost >= DUPLICATE_PENALTY {
        return Err(LdpcError::InfeasibleProfile(format!(
            "could not remove repeated entries for n={n}, wc={wc}, wr={wr}"
        )));
    }

    let row_adj = edge_var.chunks(wr).map(<[usize]>::to_vec).collect();
    ParityCheckMatrix::from_row_adjacency(n, row_adj)
}

fn column_lists(edge_var: &[usize], n: usize, wr: usize) -> Vec<Vec<usize>> {
    let mut col_adj = vec![Vec::new(); n];
    for (e, &v) in edge_var.iter().enumerate() {
        col_adj[v].push(e / wr);
    }
    col_adj
}

fn duplicate_count(edge_var: &[usize], wr: usize) -> usize {
    edge_var
        .chunks(wr)
        .map(|row| {
            let mut r = row.to_vec();
            r.sort_unstable();
            r.windows(2).filter(|w| w[0] == w[1]).count()
        })
        .sum()
}

fn graph_cost(edge_var: &[usize], n: usize, m: usize, wr: usize) -> usize {
    DUPLICATE_PENALTY * duplicate_count(edge_var, wr) + count_four_cycles(m, &column_lists(edge_var, n, wr))
}

/// Edges that sit on a repeated entry or a 4-cycle, in index order.
fn bad_edges(edge_var: &[usize], n: usize, m: usize, wr: usize) -> Vec<usize> {
    let col_adj = column_lists(edge_var, n, wr);
    let mut bad = vec![false; edge_var.len()];
    let mut shared = vec![0usize; m];
    for c1 in 0..m {
        let row = &edge_var[c1 * wr..(c1 + 1) * wr];
        for (i, &v) in row.iter().enumerate() {
            if row[..i].contains(&v) {
                bad[c1 * wr + i] = true;
            }
            for &c2 in &col_adj[v] {
                if c2 != c1 {
                    shared[c2] += 1;
                }
            }
        }
        for (i, &v) in row.iter().enumerate() {
            if col_adj[v].iter().any(|&c2| c2 != c1 && shared[c2] >= 2) {
                bad[c1 * wr + i] = true;
            }
        }
        for &v in row {
            for &c2 in &col_adj[v] {
                shared[c2] = 0;
            }
        }
    }
    bad.iter().enumerate().filter(|(_, &b)| b).map(|(e, _)| e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_infeasible_profiles() {
        assert!(generate_regular_code(10, 3, 4, 0).is_err());
        assert!(generate_regular_code(16, 1, 4, 0).is_err());
        assert!(generate_regular_code(2, 4, 4, 0).is_err());
    }

    #[test]
    fn medium_code_has_no_four_cycles() {
        let h = generate_regular_code(512, 3, 6, 11).unwrap();
        assert_eq!(h.four_cycles(), 0);
        assert!((0..h.cols()).all(|c| h.col(c).len() == 3));
        assert!((0..h.rows()).all(|r| h.row(r).len() == 6));
    }
}
