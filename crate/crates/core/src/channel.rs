//! Transport-block erasure channel.
//!
//! A message of `len` floats is segmented into `ceil(len / tb_floats)`
//! transport blocks; each block is erased independently with probability
//! `per`. Erased coordinates are replaced by `fill` at the receiver.
//! There are no retransmissions. Exactly one RNG draw is consumed per
//! block regardless of outcome, so erasure patterns are a pure function
//! of the stream and the message length.

use rand::Rng;

use crate::error::{Error, Result};

/// Floats carried per transport block.
pub const DEFAULT_TB_FLOATS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErasureChannel {
    /// Transport-block erasure probability in `[0, 1]`.
    pub per: f64,
    /// Floats per transport block, at least 1.
    pub tb_floats: usize,
    /// Value substituted for erased coordinates.
    pub fill: f64,
}

/// Block accounting for one transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransmissionRecord {
    pub blocks_sent: usize,
    pub blocks_erased: usize,
}

impl TransmissionRecord {
    pub fn absorb(&mut self, other: TransmissionRecord) {
        self.blocks_sent += other.blocks_sent;
        self.blocks_erased += other.blocks_erased;
    }
}

impl ErasureChannel {
    pub fn new(per: f64, tb_floats: usize, fill: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&per) {
            return Err(Error::Domain(format!(
                "erasure probability {per} outside [0, 1]"
            )));
        }
        if tb_floats == 0 {
            return Err(Error::Domain(
                "transport block size must be positive".into(),
            ));
        }
        if !fill.is_finite() {
            return Err(Error::Domain(format!("fill value {fill} is not finite")));
        }
        Ok(ErasureChannel {
            per,
            tb_floats,
            fill,
        })
    }

    /// Error-free channel with the same block size, used for accounting.
    pub fn noiseless(&self) -> ErasureChannel {
        ErasureChannel { per: 0.0, ..*self }
    }

    /// Number of transport blocks needed for `len` floats.
    pub fn n_blocks(&self, len: usize) -> usize {
        len.div_ceil(self.tb_floats)
    }

    /// Draws one erasure pattern: a 0/1 keep mask per coordinate, constant
    /// within each transport block.
    pub fn erasure_mask<R: Rng>(&self, len: usize, rng: &mut R) -> (Vec<f64>, TransmissionRecord) {
        let blocks = self.n_blocks(len);
        let mut mask = vec![1.0; len];
        let mut erased = 0;
        for b in 0..blocks {
            let u: f64 = rng.gen();
            if u < self.per {
                erased += 1;
                let lo = b * self.tb_floats;
                let hi = ((b + 1) * self.tb_floats).min(len);
                mask[lo..hi].fill(0.0);
            }
        }
        (
            mask,
            TransmissionRecord {
                blocks_sent: blocks,
                blocks_erased: erased,
            },
        )
    }

    /// Receiver-side view of `payload` under `mask`.
    pub fn apply_mask(&self, payload: &[f64], mask: &[f64]) -> Vec<f64> {
        debug_assert_eq!(payload.len(), mask.len());
        payload
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m == 1.0 { v } else { self.fill })
            .collect()
    }

    /// One transmission: segment, erase blocks, fill at the receiver.
    pub fn transmit<R: Rng>(&self, payload: &[f64], rng: &mut R) -> (Vec<f64>, TransmissionRecord) {
        let (mask, record) = self.erasure_mask(payload.len(), rng);
        (self.apply_mask(payload, &mask), record)
    }
}
