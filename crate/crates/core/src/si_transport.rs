//! Packing quantized SI symbols into LDPC blocks, per-block erasures and
//! reconstruction of the received SI vector.

use std::io::{Read, Write};

use num_bigint::BigUint;
use rand::Rng;
use rayon::prelude::*;

use crate::channel::{db_to_linear, linear_to_db, SatelliteLink};
use crate::ldpc::{bler_lookup, BlerCurve, BpDecoder, LdpcCode, LdpcError};
use crate::modem::{awgn_llr, qpsk_map};
use crate::rng::{domain, Streams};

/// Symbol value marking an erased position. Valid symbols are `1..=Q`.
pub const ERASED: u16 = 0;
pub const MAX_Q: u32 = 256;

#[derive(Debug, thiserror::Error)]
pub enum SiError {
    #[error("quantization level {0} outside 2..={MAX_Q}")]
    InvalidQ(u32),
    #[error("symbol {value} at index {index} outside 1..={q}")]
    InvalidSymbol { index: usize, value: u16, q: u32 },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("block {block} needs {needed} information bits but only {available} are available")]
    CapacityViolation { block: usize, needed: usize, available: usize },
    #[error("{needed} bits needed but the budget is {available}")]
    BitBudget { needed: usize, available: usize },
    #[error("packed value does not fit {count} symbols of base {q}")]
    UnpackOverflow { count: usize, q: u32 },
    #[error("abstract channel mode requires a BLER curve")]
    MissingCurve,
    #[error("erasure probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no erasure patterns supplied")]
    NoPatterns,
    #[error("container: {0}")]
    Container(String),
    #[error(transparent)]
    Ldpc(#[from] LdpcError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SiError>;

fn check_q(q: u32) -> Result<()> {
    if (2..=MAX_Q).contains(&q) {
        Ok(())
    } else {
        Err(SiError::InvalidQ(q))
    }
}

/// Discrete SI vector over `{1..Q}`; received vectors may also hold
/// [`ERASED`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiVector {
    q: u32,
    symbols: Vec<u16>,
}

impl SiVector {
    pub fn new(q: u32, symbols: Vec<u16>) -> Result<Self> {
        check_q(q)?;
        if let Some((index, &value)) = symbols.iter().enumerate().find(|(_, &s)| s == 0 || u32::from(s) > q) {
            return Err(SiError::InvalidSymbol { index, value, q });
        }
        Ok(Self { q, symbols })
    }

    /// Like [`SiVector::new`] but accepts the erasure marker.
    pub fn with_erasures(q: u32, symbols: Vec<u16>) -> Result<Self> {
        check_q(q)?;
        if let Some((index, &value)) = symbols.iter().enumerate().find(|(_, &s)| u32::from(s) > q) {
            return Err(SiError::InvalidSymbol { index, value, q });
        }
        Ok(Self { q, symbols })
    }

    pub fn q(&self) -> u32 {
        self.q
    }
    pub fn m_len(&self) -> usize {
        self.symbols.len()
    }
    pub fn symbols(&self) -> &[u16] {
        &self.symbols
    }
    pub fn is_erased(&self, i: usize) -> bool {
        self.symbols[i] == ERASED
    }
    pub fn erased_count(&self) -> usize {
        self.symbols.iter().filter(|&&s| s == ERASED).count()
    }
}

/// Exact information-bit cost of `count` base-`q` symbols: the bit length of
/// `q^count - 1`, which equals `ceil(count * log2 q)`.
pub fn bits_needed(count: usize, q: u32) -> usize {
    if count == 0 {
        return 0;
    }
    if q.is_power_of_two() {
        return count * q.trailing_zeros() as usize;
    }
    let max = BigUint::from(q).pow(count as u32) - 1u32;
    max.bits() as usize
}

/// Per-block bit geometry: coded length and available information bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub block_bits: usize,
    pub info_bits: usize,
}

impl BlockSpec {
    /// `info_bits = floor(K * R)`.
    pub fn from_rate(block_bits: usize, rate: f64) -> Self {
        Self { block_bits, info_bits: (block_bits as f64 * rate + 1e-9).floor() as usize }
    }

    pub fn from_code(code: &LdpcCode) -> Self {
        Self { block_bits: code.n(), info_bits: code.k() }
    }

    pub fn rate(&self) -> f64 {
        self.info_bits as f64 / self.block_bits as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Block `n` holds a contiguous range of positions.
    #[default]
    Contiguous,
    /// Block `n` holds positions `i` with `i mod B = n`.
    Strided,
}

/// Assignment of SI positions to LDPC blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    q: u32,
    m_len: usize,
    spec: BlockSpec,
    mode: MaskMode,
    blocks: Vec<Vec<usize>>,
}

impl BlockLayout {
    pub fn b_blocks(&self) -> usize {
        self.blocks.len()
    }
    pub fn m_len(&self) -> usize {
        self.m_len
    }
    pub fn q(&self) -> u32 {
        self.q
    }
    pub fn spec(&self) -> BlockSpec {
        self.spec
    }
    pub fn block_bits(&self) -> usize {
        self.spec.block_bits
    }
    pub fn rate(&self) -> f64 {
        self.spec.rate()
    }
    pub fn mode(&self) -> MaskMode {
        self.mode
    }
    /// SI positions carried by block `n`, in transmission order.
    pub fn block(&self, n: usize) -> &[usize] {
        &self.blocks[n]
    }
    pub fn symbols_per_block(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }
    /// Binary mask `m_n` over the `M` positions.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; self.m_len];
        for &i in &self.blocks[n] {
            m[i] = true;
        }
        m
    }
    /// Information bits needed by each block.
    pub fn bits_per_block(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| bits_needed(b.len(), self.q)).collect()
    }
}

/// Split `m_len` positions into `b_blocks` groups, the first `m_len mod B`
/// one symbol larger, and check each fits the information-bit budget.
pub fn partition(m_len: usize, b_blocks: usize, q: u32, spec: BlockSpec, mode: MaskMode) -> Result<BlockLayout> {
    check_q(q)?;
    if b_blocks == 0 || m_len < b_blocks {
        return Err(SiError::InvalidLayout(format!("need M >= B >= 1, got M={m_len}, B={b_blocks}")));
    }
    let base = m_len / b_blocks;
    let extra = m_len % b_blocks;
    let size = |n: usize| base + usize::from(n < extra);
    for n in [0, b_blocks - 1] {
        let needed = bits_needed(size(n), q);
        if needed > spec.info_bits {
            return Err(SiError::CapacityViolation { block: n, needed, available: spec.info_bits });
        }
    }
    let blocks = match mode {
        MaskMode::Contiguous => {
            let mut start = 0;
            (0..b_blocks)
                .map(|n| {
                    let r: Vec<usize> = (start..start + size(n)).collect();
                    start += size(n);
                    r
                })
                .collect()
        }
        MaskMode::Strided => (0..b_blocks).map(|n| (n..m_len).step_by(b_blocks).collect()).collect(),
    };
    Ok(BlockLayout { q, m_len, spec, mode, blocks })
}

/// Mixed-radix packing: the 0-based symbols read as a big-endian base-`q`
/// number, written as `bits_needed` bits big-endian, then zero padded to
/// `k_info_bits`.
pub fn pack_block(symbols: &[u16], q: u32, k_info_bits: usize) -> Result<Vec<u8>> {
    check_q(q)?;
    let need = bits_needed(symbols.len(), q);
    if need > k_info_bits {
        return Err(SiError::BitBudget { needed: need, available: k_info_bits });
    }
    let mut out = vec![0u8; k_info_bits];
    if need == 0 {
        return Ok(out);
    }
    let digits = symbols
        .iter()
        .enumerate()
        .map(|(index, &s)| {
            if s == 0 || u32::from(s) > q {
                Err(SiError::InvalidSymbol { index, value: s, q })
            } else {
                Ok((s - 1) as u8)
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    let value = BigUint::from_radix_be(&digits, q).expect("digits below radix");
    let bits = value.to_radix_be(2);
    let bits = if bits == [0] { &[][..] } else { &bits[..] };
    out[need - bits.len()..need].copy_from_slice(bits);
    Ok(out)
}

/// Inverse of [`pack_block`]. Values of `q^count` or more are rejected since
/// they cannot come from a valid block.
pub fn unpack_block(bits: &[u8], count: usize, q: u32) -> Result<Vec<u16>> {
    check_q(q)?;
    let need = bits_needed(count, q);
    if need > bits.len() {
        return Err(SiError::BitBudget { needed: need, available: bits.len() });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let src: Vec<u8> = bits[..need].iter().map(|b| b & 1).collect();
    let value = BigUint::from_radix_be(&src, 2).expect("binary digits");
    if !q.is_power_of_two() && value >= BigUint::from(q).pow(count as u32) {
        return Err(SiError::UnpackOverflow { count, q });
    }
    let digits = value.to_radix_be(q);
    let mut out = vec![1u16; count];
    let off = count - digits.len();
    for (o, d) in out[off..].iter_mut().zip(&digits) {
        *o = u16::from(*d) + 1;
    }
    Ok(out)
}

/// The B coded blocks of one SI vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiCodeword {
    pub blocks: Vec<Vec<u8>>,
}

impl SiCodeword {
    pub fn total_bits(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

fn check_layout(si: &SiVector, layout: &BlockLayout) -> Result<()> {
    if si.m_len() != layout.m_len || si.q() != layout.q {
        return Err(SiError::LengthMismatch(format!(
            "vector (M={}, Q={}) vs layout (M={}, Q={})",
            si.m_len(),
            si.q(),
            layout.m_len,
            layout.q
        )));
    }
    Ok(())
}

fn check_code(layout: &BlockLayout, code: &LdpcCode) -> Result<()> {
    if layout.block_bits() != code.n() || layout.spec.info_bits > code.k() {
        return Err(SiError::LengthMismatch(format!(
            "layout (K={}, info={}) vs code (n={}, k={})",
            layout.block_bits(),
            layout.spec.info_bits,
            code.n(),
            code.k()
        )));
    }
    Ok(())
}

fn block_symbols(si: &SiVector, layout: &BlockLayout, n: usize) -> Vec<u16> {
    layout.blocks[n].iter().map(|&i| si.symbols[i]).collect()
}

/// Pack and LDPC-encode every block.
pub fn encode_si(si: &SiVector, layout: &BlockLayout, code: &LdpcCode) -> Result<SiCodeword> {
    check_layout(si, layout)?;
    check_code(layout, code)?;
    let blocks = (0..layout.b_blocks())
        .into_par_iter()
        .map(|n| {
            let info = pack_block(&block_symbols(si, layout, n), si.q, code.k())?;
            Ok(code.encoder().encode(&info)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SiCodeword { blocks })
}

/// Per-block erasure outcomes `X_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErasurePattern {
    pub flags: Vec<bool>,
    /// Erasure probability in force: the fixed `p`, the mean of the looked-up
    /// per-block probabilities, or the empirical rate for full-PHY runs.
    pub bler_used: f64,
    /// Per-block SNR in dB when the channel was sampled.
    pub gamma_db: Vec<f64>,
}

impl ErasurePattern {
    pub fn erased_fraction(&self) -> f64 {
        self.flags.iter().filter(|&&f| f).count() as f64 / self.flags.len().max(1) as f64
    }
}

/// Where per-block SNR values come from.
#[derive(Debug, Clone, Copy)]
pub enum SnrSource<'a> {
    Link(&'a SatelliteLink),
    ConstantDb(f64),
}

impl SnrSource<'_> {
    fn draw_db<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            SnrSource::Link(l) => linear_to_db(l.sample(rng).gamma_tr),
            SnrSource::ConstantDb(g) => *g,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ChannelMode<'a> {
    /// Encode, modulate, add noise and BP-decode every block.
    FullPhy { code: &'a LdpcCode, snr: SnrSource<'a>, max_iters: usize },
    /// Erase block `n` with probability `bler_lookup(curve, gamma_n)`.
    Abstract { curve: Option<&'a BlerCurve>, snr: SnrSource<'a> },
    /// Erase every block independently with probability `p`.
    Fixed { p: f64 },
}

/// Replace the symbols of flagged blocks with [`ERASED`].
pub fn apply_erasures(si: &SiVector, layout: &BlockLayout, flags: &[bool]) -> Result<SiVector> {
    check_layout(si, layout)?;
    if flags.len() != layout.b_blocks() {
        return Err(SiError::LengthMismatch(format!("{} flags for {} blocks", flags.len(), layout.b_blocks())));
    }
    let mut symbols = si.symbols.clone();
    for (n, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        for &i in &layout.blocks[n] {
            symbols[i] = ERASED;
        }
    }
    Ok(SiVector { q: si.q, symbols })
}

/// Send `si` through the channel. Block `n` draws its SNR, erasure uniform and
/// noise from streams indexed by `n`, so outcomes do not depend on scheduling.
pub fn transmit(si: &SiVector, layout: &BlockLayout, mode: &ChannelMode, seed: u64) -> Result<(SiVector, ErasurePattern)> {
    check_layout(si, layout)?;
    let streams = Streams::new(seed);
    let b = layout.b_blocks();
    let draw_gamma = |snr: &SnrSource, n: usize| snr.draw_db(&mut streams.rng(domain::BLOCK_SNR, n as u64));
    let uniform = |n: usize| streams.rng(domain::ERASURE, n as u64).random::<f64>();

    match *mode {
        ChannelMode::Fixed { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(SiError::InvalidProbability(p));
            }
            let flags: Vec<bool> = (0..b).map(|n| uniform(n) < p).collect();
            let received = apply_erasures(si, layout, &flags)?;
            Ok((received, ErasurePattern { flags, bler_used: p, gamma_db: Vec::new() }))
        }
        ChannelMode::Abstract { curve, snr } => {
            let curve = curve.ok_or(SiError::MissingCurve)?;
            let mut flags = Vec::with_capacity(b);
            let mut gamma_db = Vec::with_capacity(b);
            let mut p_sum = 0.0;
            for n in 0..b {
                let g = draw_gamma(&snr, n);
                let p = bler_lookup(curve, g)?;
                flags.push(uniform(n) < p);
                gamma_db.push(g);
                p_sum += p;
            }
            let received = apply_erasures(si, layout, &flags)?;
            Ok((received, ErasurePattern { flags, bler_used: p_sum / b as f64, gamma_db }))
        }
        ChannelMode::FullPhy { code, snr, max_iters } => {
            check_code(layout, code)?;
            let outcomes = (0..b)
                .into_par_iter()
                .map_init(
                    || BpDecoder::new(code.h()),
                    |dec, n| -> Result<(f64, Option<Vec<u16>>)> {
                        let g = draw_gamma(&snr, n);
                        let syms = block_symbols(si, layout, n);
                        let info = pack_block(&syms, si.q, code.k())?;
                        let cw = code.encoder().encode(&info)?;
                        let tx = qpsk_map(&cw).map_err(|e| SiError::LengthMismatch(e.to_string()))?;
                        let mut rng = streams.rng(domain::PHY_BLOCK, n as u64);
                        let llr = awgn_llr(&tx, db_to_linear(g), &mut rng)
                            .map_err(|e| SiError::LengthMismatch(e.to_string()))?;
                        let out = dec.decode(&llr, max_iters)?;
                        if !out.converged {
                            return Ok((g, None));
                        }
                        let rx_info = code.encoder().extract(&out.bits);
                        Ok((g, unpack_block(&rx_info, syms.len(), si.q).ok()))
                    },
                )
                .collect::<Result<Vec<_>>>()?;
            let mut symbols = si.symbols.clone();
            let mut flags = Vec::with_capacity(b);
            let mut gamma_db = Vec::with_capacity(b);
            for (n, (g, rx)) in outcomes.into_iter().enumerate() {
                gamma_db.push(g);
                flags.push(rx.is_none());
                for (k, &i) in layout.blocks[n].iter().enumerate() {
                    symbols[i] = rx.as_ref().map_or(ERASED, |r| r[k]);
                }
            }
            let pattern = ErasurePattern { bler_used: 0.0, flags, gamma_db };
            let bler_used = pattern.erased_fraction();
            Ok((SiVector { q: si.q, symbols }, ErasurePattern { bler_used, ..pattern }))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErasureSummary {
    pub patterns: usize,
    pub mean_bler: f64,
    pub per_block: Vec<f64>,
}

/// Empirical mean erasure rate and per-block marginals.
pub fn erasure_stats(patterns: &[ErasurePattern]) -> Result<ErasureSummary> {
    let first = patterns.first().ok_or(SiError::NoPatterns)?;
    let b = first.flags.len();
    let mut counts = vec![0u64; b];
    for p in patterns {
        if p.flags.len() != b {
            return Err(SiError::LengthMismatch(format!("pattern with {} blocks, expected {b}", p.flags.len())));
        }
        for (c, &f) in counts.iter_mut().zip(&p.flags) {
            *c += u64::from(f);
        }
    }
    let n = patterns.len() as f64;
    let per_block: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mean_bler = counts.iter().sum::<u64>() as f64 / (n * b.max(1) as f64);
    Ok(ErasureSummary { patterns: patterns.len(), mean_bler, per_block })
}

const MAGIC: &[u8; 4] = b"GSCS";
const VERSION: u16 = 1;

/// Received vector and erasure pattern in a little-endian binary container:
/// magic `GSCS`, version u16, Q u16, M u64, B u32, p f64, M symbols u16,
/// B flags u8.
#[derive(Debug, Clone, PartialEq)]
pub struct SiContainer {
    pub received: SiVector,
    pub pattern: ErasurePattern,
}

impl SiContainer {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.received.q as u16).to_le_bytes())?;
        w.write_all(&(self.received.m_len() as u64).to_le_bytes())?;
        w.write_all(&(self.pattern.flags.len() as u32).to_le_bytes())?;
        w.write_all(&self.pattern.bler_used.to_le_bytes())?;
        let mut buf = Vec::with_capacity(2 * self.received.m_len() + self.pattern.flags.len());
        for s in &self.received.symbols {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        buf.extend(self.pattern.flags.iter().map(|&f| u8::from(f)));
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 4 + 2 + 2 + 8 + 4 + 8];
        r.read_exact(&mut head).map_err(|_| SiError::Container("truncated header".into()))?;
        if &head[0..4] != MAGIC {
            return Err(SiError::Container("bad magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(SiError::Container(format!("unsupported version {version}")));
        }
        let q = u32::from(u16::from_le_bytes([head[6], head[7]]));
        let m = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let b = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
        let p = f64::from_le_bytes(head[20..28].try_into().unwrap());
        let mut body = vec![0u8; 2 * m + b];
        r.read_exact(&mut body).map_err(|_| SiError::Container("truncated body".into()))?;
        let symbols = body[..2 * m].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let flags = body[2 * m..]
            .iter()
            .map(|&f| match f {
                0 => Ok(false),
                1 => Ok(true),
                x => Err(SiError::Container(format!("flag byte {x}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let received = SiVector::with_erasures(q, symbols)?;
        Ok(Self { received, pattern: ErasurePattern { flags, bler_used: p, gamma_db: Vec::new() } })
    }
}
