//! Counter-based pseudo-random source.
//!
//! The stream is `splitmix64(key + (counter + 1) * GAMMA)`: any position can
//! be reached directly, and independent sub-streams are obtained by hashing
//! tags into the key. Normal variates use Box–Muller with the pure-Rust
//! `libm` routines so the output does not depend on the platform math
//! library.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix(seed ^ 0x5D1E_57D1_u64),
            counter: 0,
        }
    }

    /// Independent stream keyed by `tag`; does not advance `self`.
    pub fn derive(&self, tag: u64) -> Self {
        Self {
            key: mix(self.key ^ mix(tag.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    /// Stream keyed by a path of tags, e.g. `[domain, step, substream]`.
    pub fn derive_path(&self, tags: &[u64]) -> Self {
        tags.iter().fold(self.clone(), |r, &t| r.derive(t))
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `(0, 1]` with 53 bits of resolution.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Two independent standard normals.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    /// Tensor of i.i.d. standard normal entries.
    pub fn sample_normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n + 1);
        while data.len() < n {
            let (a, b) = self.normal_pair();
            data.push(T::from_f64_lossy(a));
            data.push(T::from_f64_lossy(b));
        }
        data.truncate(n);
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }
}
