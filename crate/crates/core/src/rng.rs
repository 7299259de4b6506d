//! Seeded random stream.
//!
//! Uniforms come from ChaCha8 (`rand_chacha`), whose output stream is fixed by
//! the algorithm and independent of platform endianness or word size. A
//! uniform in `[0, 1)` takes the top 53 bits of one 64-bit word. Standard
//! normals use the Box–Muller transform on two uniforms; the second value of
//! each pair is kept and returned by the next call.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{FdnError, Result};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

/// Serializable snapshot of an [`Rng`]. Every field is an integer (or an exact
/// f64) so it survives a round trip through the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
    pub spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's widening multiply; the bias for n << 2^64 is negligible
        // and the mapping is fully deterministic.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli_half(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // u1 in (0, 1] keeps ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
            spare: self.spare,
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        if let Some(s) = state.spare {
            if !s.is_finite() {
                return Err(FdnError::format("rng spare value is not finite"));
            }
        }
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Ok(Rng {
            inner,
            spare: state.spare,
        })
    }

    /// Encodes the state as 16-bit chunks stored in f64 (all exactly
    /// representable): 16 seed words, 4 stream words, 8 position words,
    /// then a spare flag and the spare value.
    pub fn state_to_f64(&self) -> Vec<f64> {
        let st = self.state();
        let mut out = Vec::with_capacity(30);
        for pair in st.seed.chunks(2) {
            out.push(u16::from_le_bytes([pair[0], pair[1]]) as f64);
        }
        for i in 0..4 {
            out.push(((st.stream >> (16 * i)) & 0xffff) as f64);
        }
        for i in 0..8 {
            out.push(((st.word_pos >> (16 * i)) & 0xffff) as f64);
        }
        match st.spare {
            Some(v) => {
                out.push(1.0);
                out.push(v);
            }
            None => {
                out.push(0.0);
                out.push(0.0);
            }
        }
        out
    }

    pub fn state_from_f64(words: &[f64]) -> Result<Self> {
        if words.len() != 30 {
            return Err(FdnError::format(format!(
                "rng state needs 30 words, got {}",
                words.len()
            )));
        }
        let word = |v: f64| -> Result<u64> {
            if v.fract() != 0.0 || !(0.0..65536.0).contains(&v) {
                return Err(FdnError::format("rng state word out of range"));
            }
            Ok(v as u64)
        };
        let mut seed = [0u8; 32];
        for i in 0..16 {
            let w = word(words[i])? as u16;
            seed[2 * i..2 * i + 2].copy_from_slice(&w.to_le_bytes());
        }
        let mut stream = 0u64;
        for i in 0..4 {
            stream |= word(words[16 + i])? << (16 * i);
        }
        let mut word_pos = 0u128;
        for i in 0..8 {
            word_pos |= (word(words[20 + i])? as u128) << (16 * i);
        }
        let spare = match words[28] {
            f if f == 0.0 => None,
            f if f == 1.0 => Some(words[29]),
            _ => return Err(FdnError::format("rng spare flag must be 0 or 1")),
        };
        Rng::from_state(&RngState {
            seed,
            stream,
            word_pos,
            spare,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(1);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn below_covers_range() {
        let mut r = Rng::new(3);
        let mut seen = [false; 5];
        for _ in 0..200 {
            seen[r.below(5)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn state_round_trip_continues_stream() {
        let mut r = Rng::new(9);
        r.normal(); // leaves a spare behind
        let words = r.state_to_f64();
        let mut restored = Rng::state_from_f64(&words).unwrap();
        for _ in 0..17 {
            assert_eq!(r.normal().to_bits(), restored.normal().to_bits());
        }
    }
}
