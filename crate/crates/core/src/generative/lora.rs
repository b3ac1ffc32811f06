use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{GenError, Result};

/// Frozen `O×I` base matrix `W` plus trainable factors `B (O×r)` and
/// `A (r×I)`. Effective weight `W + B·A`. All matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    out_dim: usize,
    in_dim: usize,
    rank: usize,
    base: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LoraAdapter {
    pub fn new(out_dim: usize, in_dim: usize, base: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(GenError::Shape(format!("empty base {out_dim}x{in_dim}")));
        }
        if base.len() != out_dim * in_dim {
            return Err(GenError::Shape(format!("base has {} entries, expected {}", base.len(), out_dim * in_dim)));
        }
        if a.len() % in_dim != 0 {
            return Err(GenError::Shape(format!("A has {} entries, not a multiple of I={in_dim}", a.len())));
        }
        let rank = a.len() / in_dim;
        if rank == 0 || rank > out_dim.min(in_dim) {
            return Err(GenError::Shape(format!("rank {rank} outside [1, {}]", out_dim.min(in_dim))));
        }
        if b.len() != out_dim * rank {
            return Err(GenError::Shape(format!("B has {} entries, expected {}", b.len(), out_dim * rank)));
        }
        Ok(Self { out_dim, in_dim, rank, base, a, b })
    }

    /// Standard initialisation: `A ~ N(0, scale²/I)`, `B = 0`.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, base: Vec<f64>, rank: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let sd = scale / (in_dim as f64).sqrt();
        let a = (0..rank * in_dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(out_dim, in_dim, base, a, vec![0.0; out_dim * rank])
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }
    pub fn rank(&self) -> usize {
        self.rank
    }
    pub fn base(&self) -> &[f64] {
        &self.base
    }
    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Dense `W + B·A`.
    pub fn effective(&self) -> Vec<f64> {
        let mut w = self.base.clone();
        for o in 0..self.out_dim {
            for k in 0..self.rank {
                let bk = self.b[o * self.rank + k];
                if bk == 0.0 {
                    continue;
                }
                let a_row = &self.a[k * self.in_dim..(k + 1) * self.in_dim];
                for (wi, ai) in w[o * self.in_dim..(o + 1) * self.in_dim].iter_mut().zip(a_row) {
                    *wi += bk * ai;
                }
            }
        }
        w
    }

    /// `W·x`, `A·x` and the full output `W·x + B·(A·x)`.
    pub(crate) fn forward_parts(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ax = matvec(&self.a, self.rank, self.in_dim, x);
        let mut y = matvec(&self.base, self.out_dim, self.in_dim, x);
        if self.b.iter().any(|&v| v != 0.0) {
            for (o, yo) in y.iter_mut().enumerate() {
                let b_row = &self.b[o * self.rank..(o + 1) * self.rank];
                *yo += b_row.iter().zip(&ax).map(|(b, a)| b * a).sum::<f64>();
            }
        }
        (y, ax)
    }

    /// SHA-256 of the base matrix (dims then little-endian values).
    pub fn base_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.out_dim as u64).to_le_bytes());
        h.update((self.in_dim as u64).to_le_bytes());
        for v in &self.base {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

pub(crate) fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `(W + B·A)·x`. With `B = 0` the result is bit-identical to `W·x`.
pub fn lora_apply(adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != adapter.in_dim {
        return Err(GenError::Shape(format!("input length {} != I={}", x.len(), adapter.in_dim)));
    }
    Ok(adapter.forward_parts(x).0)
}

const MAGIC: &[u8; 4] = b"LORA";
const VERSION: u16 = 1;

/// Writes the trainable factors of each adapter: magic, version, layer count,
/// then per layer `O, I, r` (u64), the base hash, `A` and `B` row-major.
pub fn write_adapters<W: Write>(layers: &[&LoraAdapter], mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(layers.len() as u16).to_le_bytes())?;
    for l in layers {
        for d in [l.out_dim, l.in_dim, l.rank] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&l.base_hash())?;
        for v in l.a.iter().chain(&l.b) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads factors written by [`write_adapters`] into `layers`, checking dims,
/// rank and base hash of every layer.
pub fn read_adapters<R: Read>(layers: &mut [&mut LoraAdapter], mut r: R) -> Result<()> {
    let bad = |m: String| Err(GenError::Checkpoint(m));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return bad(format!("bad magic {magic:?}"));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    if u16::from_le_bytes(b2) != VERSION {
        return bad(format!("unsupported version {}", u16::from_le_bytes(b2)));
    }
    r.read_exact(&mut b2)?;
    let count = u16::from_le_bytes(b2) as usize;
    if count != layers.len() {
        return bad(format!("checkpoint has {count} layers, model has {}", layers.len()));
    }
    let mut b8 = [0u8; 8];
    for (i, l) in layers.iter_mut().enumerate() {
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut b8)?;
            *d = u64::from_le_bytes(b8) as usize;
        }
        if dims != [l.out_dim, l.in_dim, l.rank] {
            return bad(format!("layer {i}: dims {dims:?} != {:?}", [l.out_dim, l.in_dim, l.rank]));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        if hash != l.base_hash() {
            return bad(format!("layer {i}: base hash mismatch"));
        }
        let mut vals = vec![0.0; l.a.len() + l.b.len()];
        for v in &mut vals {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
            if !v.is_finite() {
                return bad(format!("layer {i}: non-finite value"));
            }
        }
        let na = l.a.len();
        l.a.copy_from_slice(&vals[..na]);
        l.b.copy_from_slice(&vals[na..]);
    }
    Ok(())
}
