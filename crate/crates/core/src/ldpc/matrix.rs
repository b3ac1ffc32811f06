use super::gf2::BitMatrix;
use super::{LdpcError, Result};

/// Sparse binary parity-check matrix with adjacency lists in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityCheckMatrix {
    rows: usize,
    cols: usize,
    row_adj: Vec<Vec<usize>>,
    col_adj: Vec<Vec<usize>>,
}

impl ParityCheckMatrix {
    /// Build from per-check variable lists. Indices are sorted; duplicates,
    /// out-of-range indices and empty columns are rejected.
    pub fn from_row_adjacency(cols: usize, mut row_adj: Vec<Vec<usize>>) -> Result<Self> {
        let rows = row_adj.len();
        if rows == 0 || cols == 0 {
            return Err(LdpcError::InvalidMatrix("matrix must be non-empty".into()));
        }
        let mut col_adj = vec![Vec::new(); cols];
        for (r, vars) in row_adj.iter_mut().enumerate() {
            vars.sort_unstable();
            for w in vars.windows(2) {
                if w[0] == w[1] {
                    return Err(LdpcError::InvalidMatrix(format!("check {r} lists variable {} twice", w[0])));
                }
            }
            for &v in vars.iter() {
                if v >= cols {
                    return Err(LdpcError::InvalidMatrix(format!("check {r} references column {v} >= {cols}")));
                }
                col_adj[v].push(r);
            }
        }
        if let Some(v) = col_adj.iter().position(|c| c.is_empty()) {
            return Err(LdpcError::InvalidMatrix(format!("column {v} has degree 0")));
        }
        Ok(Self { rows, cols, row_adj, col_adj })
    }

    /// Build from a dense 0/1 row-major description, mainly for small fixtures.
    pub fn from_dense(dense: &[Vec<u8>]) -> Result<Self> {
        let cols = dense.first().map_or(0, |r| r.len());
        if dense.iter().any(|r| r.len() != cols) {
            return Err(LdpcError::InvalidMatrix("ragged dense matrix".into()));
        }
        let row_adj = dense
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect())
            .collect();
        Self::from_row_adjacency(cols, row_adj)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn row(&self, r: usize) -> &[usize] {
        &self.row_adj[r]
    }
    pub fn col(&self, c: usize) -> &[usize] {
        &self.col_adj[c]
    }
    pub fn row_adjacency(&self) -> &[Vec<usize>] {
        &self.row_adj
    }
    pub fn col_adjacency(&self) -> &[Vec<usize>] {
        &self.col_adj
    }
    pub fn edges(&self) -> usize {
        self.row_adj.iter().map(Vec::len).sum()
    }

    pub fn to_bit_matrix(&self) -> BitMatrix {
        let mut m = BitMatrix::zeros(self.rows, self.cols);
        for (r, vars) in self.row_adj.iter().enumerate() {
            for &v in vars {
                m.set(r, v, true);
            }
        }
        m
    }

    pub fn rank(&self) -> usize {
        self.to_bit_matrix().rank()
    }

    /// `(cols - rank) / cols`.
    pub fn rate(&self) -> f64 {
        (self.cols - self.rank()) as f64 / self.cols as f64
    }

    pub fn syndrome(&self, bits: &[u8]) -> Vec<u8> {
        self.row_adj.iter().map(|vars| vars.iter().fold(0u8, |a, &v| a ^ (bits[v] & 1))).collect()
    }

    pub fn is_codeword(&self, bits: &[u8]) -> bool {
        bits.len() == self.cols && self.row_adj.iter().all(|vars| vars.iter().fold(0u8, |a, &v| a ^ (bits[v] & 1)) == 0)
    }

    /// Number of length-4 cycles in the Tanner graph.
    pub fn four_cycles(&self) -> usize {
        count_four_cycles(self.rows, &self.col_adj)
    }
}

/// Counts 4-cycles as pairs of checks sharing two or more variables.
pub(crate) fn count_four_cycles(rows: usize, col_adj: &[Vec<usize>]) -> usize {
    let mut total = 0;
    let mut shared = vec![0usize; rows];
    let mut touched = Vec::new();
    let mut row_adj = vec![Vec::new(); rows];
    for (v, checks) in col_adj.iter().enumerate() {
        for &c in checks {
            row_adj[c].push(v);
        }
    }
    for c1 in 0..rows {
        for &v in &row_adj[c1] {
            for &c2 in &col_adj[v] {
                if c2 > c1 {
                    if shared[c2] == 0 {
                        touched.push(c2);
                    }
                    shared[c2] += 1;
                }
            }
        }
        for &c2 in &touched {
            let s = shared[c2];
            total += s * (s - 1) / 2;
            shared[c2] = 0;
        }
        touched.clear();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hamming() -> ParityCheckMatrix {
        ParityCheckMatrix::from_dense(&[
            vec![1, 0, 1, 0, 1, 0, 1],
            vec![0, 1, 1, 0, 0, 1, 1],
            vec![0, 0, 0, 1, 1, 1, 1],
        ])
        .unwrap()
    }

    #[test]
    fn hamming_shape() {
        let h = hamming();
        assert_eq!((h.rows(), h.cols(), h.rank()), (3, 7, 3));
        assert!((h.rate() - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(h.col(6), &[0, 1, 2]);
        assert!(h.is_codeword(&[0; 7]));
        assert!(!h.is_codeword(&[1, 0, 0, 0, 0, 0, 0]));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ParityCheckMatrix::from_row_adjacency(3, vec![vec![0, 0, 1, 2]]).is_err());
        assert!(ParityCheckMatrix::from_row_adjacency(3, vec![vec![0, 3]]).is_err());
        assert!(ParityCheckMatrix::from_row_adjacency(3, vec![vec![0, 1]]).is_err());
    }

    #[test]
    fn four_cycle_count() {
        // Two checks sharing three variables: C(3,2) = 3 cycles.
        let h = ParityCheckMatrix::from_row_adjacency(3, vec![vec![0, 1, 2], vec![0, 1, 2]]).unwrap();
        assert_eq!(h.four_cycles(), 3);
        assert_eq!(hamming().four_cycles(), 3);
    }
}
