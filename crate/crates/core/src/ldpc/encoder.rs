use super::gf2::{dot, pack_bits, BitMatrix};
use super::{LdpcError, ParityCheckMatrix, Result};

/// Systematic encoder derived from the reduced row echelon form of `H`.
///
/// Information bits are written verbatim at [`Encoder::info_positions`] (the
/// non-pivot columns) and each pivot column is solved from its RREF row. A
/// rank-deficient `H` yields `k = n - rank` information bits.
#[derive(Debug, Clone)]
pub struct Encoder {
    n: usize,
    info_positions: Vec<usize>,
    pivot_cols: Vec<usize>,
    /// RREF rows restricted to the information columns, packed.
    parity_rows: BitMatrix,
}

impl Encoder {
    pub fn new(h: &ParityCheckMatrix) -> Self {
        let mut m = h.to_bit_matrix();
        let pivot_cols = m.rref();
        let n = h.cols();
        let mut is_pivot = vec![false; n];
        for &p in &pivot_cols {
            is_pivot[p] = true;
        }
        let info_positions: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
        let mut parity_rows = BitMatrix::zeros(pivot_cols.len(), info_positions.len());
        for r in 0..pivot_cols.len() {
            for (j, &c) in info_positions.iter().enumerate() {
                if m.get(r, c) {
                    parity_rows.set(r, j, true);
                }
            }
        }
        Self { n, info_positions, pivot_cols, parity_rows }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn k(&self) -> usize {
        self.info_positions.len()
    }
    pub fn rank(&self) -> usize {
        self.pivot_cols.len()
    }
    /// Codeword positions carrying the information bits, in order.
    pub fn info_positions(&self) -> &[usize] {
        &self.info_positions
    }

    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() != self.k() {
            return Err(LdpcError::InfoLength { expected: self.k(), got: info.len() });
        }
        let packed = pack_bits(info);
        let mut cw = vec![0u8; self.n];
        for (&pos, &b) in self.info_positions.iter().zip(info) {
            cw[pos] = b & 1;
        }
        for (r, &p) in self.pivot_cols.iter().enumerate() {
            cw[p] = dot(self.parity_rows.row(r), &packed);
        }
        Ok(cw)
    }

    /// Read the information bits back out of a codeword.
    pub fn extract(&self, codeword: &[u8]) -> Vec<u8> {
        self.info_positions.iter().map(|&p| codeword[p]).collect()
    }
}
