use super::{LdpcError, ParityCheckMatrix, Result};

pub const DEFAULT_MAX_ITERS: usize = 50;
/// Message magnitudes are clipped to this value before the tanh rule.
pub const LLR_CLIP: f64 = 30.0;
const TANH_LIMIT: f64 = 1.0 - 1e-15;

/// `tanh(x/2) = 1 - 2/(e^x + 1)`. Plain `exp` is about three times cheaper
/// than `tanh` and the absolute error stays at the ulp level.
fn half_tanh(x: f64) -> f64 {
    1.0 - 2.0 / (x.exp() + 1.0)
}

/// `2 atanh(p) = ln((1+p)/(1-p))`.
fn twice_atanh(p: f64) -> f64 {
    ((1.0 + p) / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub bits: Vec<u8>,
    pub converged: bool,
    pub iterations: usize,
}

/// Flooding sum-product decoder. Holds edge-indexed message buffers so one
/// instance can decode many blocks without reallocating.
#[derive(Debug, Clone)]
pub struct BpDecoder {
    n: usize,
    check_ptr: Vec<usize>,
    edge_var: Vec<usize>,
    /// Edges of variable `v` are `var_edge[var_ptr[v]..var_ptr[v + 1]]`.
    var_ptr: Vec<usize>,
    var_edge: Vec<usize>,
    c2v: Vec<f64>,
    v2c: Vec<f64>,
    tanh_buf: Vec<f64>,
    prefix: Vec<f64>,
    total: Vec<f64>,
    hard: Vec<u8>,
}

impl BpDecoder {
    pub fn new(h: &ParityCheckMatrix) -> Self {
        let mut check_ptr = vec![0];
        let mut edge_var = Vec::with_capacity(h.edges());
        let mut var_edges = vec![Vec::new(); h.cols()];
        for r in 0..h.rows() {
            for &v in h.row(r) {
                var_edges[v].push(edge_var.len());
                edge_var.push(v);
            }
            check_ptr.push(edge_var.len());
        }
        let e = edge_var.len();
        let mut var_ptr = vec![0];
        let mut var_edge = Vec::with_capacity(e);
        for list in var_edges {
            var_edge.extend(list);
            var_ptr.push(var_edge.len());
        }
        let max_deg = (0..h.rows()).map(|r| h.row(r).len()).max().unwrap_or(0);
        Self {
            n: h.cols(),
            check_ptr,
            edge_var,
            var_ptr,
            var_edge,
            c2v: vec![0.0; e],
            v2c: vec![0.0; e],
            tanh_buf: vec![0.0; max_deg],
            prefix: vec![0.0; max_deg + 1],
            total: vec![0.0; h.cols()],
            hard: vec![0; h.cols()],
        }
    }

    /// Decode channel LLRs (positive favours bit 0).
    pub fn decode(&mut self, llrs: &[f64], max_iters: usize) -> Result<DecodeOutcome> {
        if llrs.len() != self.n {
            return Err(LdpcError::LlrLength { expected: self.n, got: llrs.len() });
        }
        self.c2v.iter_mut().for_each(|x| *x = 0.0);
        self.total.copy_from_slice(llrs);
        self.harden();
        if self.syndrome_ok() {
            return Ok(self.outcome(true, 0));
        }
        for it in 1..=max_iters {
            for (e, &v) in self.edge_var.iter().enumerate() {
                self.v2c[e] = (self.total[v] - self.c2v[e]).clamp(-LLR_CLIP, LLR_CLIP);
            }
            for c in 0..self.check_ptr.len() - 1 {
                let (s, t) = (self.check_ptr[c], self.check_ptr[c + 1]);
                let d = t - s;
                self.prefix[0] = 1.0;
                for i in 0..d {
                    self.tanh_buf[i] = half_tanh(self.v2c[s + i]);
                    self.prefix[i + 1] = self.prefix[i] * self.tanh_buf[i];
                }
                let mut suffix = 1.0;
                for i in (0..d).rev() {
                    let prod = (self.prefix[i] * suffix).clamp(-TANH_LIMIT, TANH_LIMIT);
                    self.c2v[s + i] = twice_atanh(prod);
                    suffix *= self.tanh_buf[i];
                }
            }
            for v in 0..self.n {
                let edges = &self.var_edge[self.var_ptr[v]..self.var_ptr[v + 1]];
                self.total[v] = llrs[v] + edges.iter().map(|&e| self.c2v[e]).sum::<f64>();
            }
            self.harden();
            if self.syndrome_ok() {
                return Ok(self.outcome(true, it));
            }
        }
        Ok(self.outcome(false, max_iters))
    }

    fn harden(&mut self) {
        for (h, &l) in self.hard.iter_mut().zip(&self.total) {
            *h = u8::from(l < 0.0);
        }
    }

    fn syndrome_ok(&self) -> bool {
        self.check_ptr
            .windows(2)
            .all(|w| self.edge_var[w[0]..w[1]].iter().fold(0u8, |a, &v| a ^ self.hard[v]) == 0)
    }

    fn outcome(&self, converged: bool, iterations: usize) -> DecodeOutcome {
        DecodeOutcome { bits: self.hard.clone(), converged, iterations }
    }
}
