//! Fixtures shared by the benchmarks.

use gsc_core::channel::db_to_linear;
use gsc_core::latent::{synth_dataset, LatentTensor, SynthConfig};
use gsc_core::ldpc::LdpcCode;
use gsc_core::modem::{awgn_llr, qpsk_map};
use gsc_core::rng::stream;

/// Channel LLRs for the all-zero codeword of `code` at `snr_db` (Es/N0).
pub fn noisy_llrs(code: &LdpcCode, snr_db: f64, seed: u64) -> Vec<f64> {
    let symbols = qpsk_map(&vec![0u8; code.n()]).expect("even length");
    awgn_llr(&symbols, db_to_linear(snr_db), &mut stream(seed, 0x10, 0)).expect("valid snr")
}

/// `n` synthetic latent tensors of the given shape.
pub fn latents(dims: [usize; 4], n: usize) -> Vec<LatentTensor> {
    synth_dataset(&SynthConfig { dims, ..SynthConfig::default() }, n, 3).expect("valid synth config")
}
