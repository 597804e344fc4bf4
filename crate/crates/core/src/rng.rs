//! Seeded, counter-based random streams.
//!
//! Every matrix that is ever drawn gets its own ChaCha stream identified by
//! what it is (teacher, inputs, or a parameter of a given layer/rank), so the
//! values are independent of the order in which ranks or threads happen to
//! initialize them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;

/// Which parameter of a layer a stream belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Local,
    Compressor,
    /// Decompressor for the phantom received from the given source rank.
    Decompressor(usize),
    /// Full (unsharded) dense/TP weight matrix of a layer.
    DenseWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Teacher,
    Inputs,
    Param {
        layer: usize,
        rank: usize,
        kind: ParamKind,
    },
    /// Free-form stream for tests and synthetic measurements.
    Aux(u64),
}

impl Stream {
    fn id(self) -> u64 {
        const TAG_SHIFT: u32 = 56;
        match self {
            Stream::Teacher => 1 << TAG_SHIFT,
            Stream::Inputs => 2 << TAG_SHIFT,
            Stream::Param { layer, rank, kind } => {
                let (tag, index) = match kind {
                    ParamKind::Local => (3u64, 0u64),
                    ParamKind::Compressor => (4, 0),
                    ParamKind::Decompressor(src) => (5, src as u64),
                    ParamKind::DenseWeight => (6, 0),
                };
                (tag << TAG_SHIFT)
                    | ((layer as u64 & 0xffff) << 36)
                    | ((rank as u64 & 0x3ffff) << 18)
                    | (index & 0x3ffff)
            }
            Stream::Aux(x) => (7 << TAG_SHIFT) ^ x,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// I.i.d. standard normal entries.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64, stream: Stream) -> Matrix {
    let mut rng = stream_rng(seed, stream);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Uniform in `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, seed: u64, stream: Stream) -> Matrix {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = stream_rng(seed, stream);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-s..=s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a = gaussian_matrix(3, 3, 7, Stream::Teacher);
        let b = gaussian_matrix(3, 3, 7, Stream::Inputs);
        assert_ne!(a, b);
        assert_eq!(a, gaussian_matrix(3, 3, 7, Stream::Teacher));
        let p = |rank| Stream::Param {
            layer: 0,
            rank,
            kind: ParamKind::Decompressor(1),
        };
        assert_ne!(
            glorot_uniform(2, 2, 7, p(0)),
            glorot_uniform(2, 2, 7, p(2))
        );
    }

    #[test]
    fn glorot_bounds() {
        let m = glorot_uniform(10, 6, 1, Stream::Aux(0));
        let s = (6.0f64 / 16.0).sqrt();
        assert!(m.data().iter().all(|v| v.abs() <= s));
    }
}
