//! Beacon payload codec and broadcast channel model.
//!
//! Frame layout (15 bytes, multi-byte fields little-endian):
//!
//! ```text
//! 0      version (= 1)
//! 1..3   node_id  u16
//! 3      seq      u8, wrapping
//! 4..8   n_m      u32, measurement pulse count
//! 8..12  n_h      u32, harvest pulse count
//! 12     flags    bit0 n_m valid, bit1 counter clipped, bit2 stall detected
//! 13..15 crc      CRC-16/CCITT-FALSE over bytes 0..13, low byte first
//! ```
//!
//! Beacon logs hold one frame per line as uppercase hex without separators.

use std::io::{self, BufRead, Write};

use bitflags::bitflags;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const FRAME_LEN: usize = 15;
pub const VERSION: u8 = 1;
const BODY_LEN: usize = FRAME_LEN - 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("bad frame length: expected {FRAME_LEN} bytes, got {0}")]
    BadLength(usize),
    #[error("bad crc: frame carries {received:#06x}, computed {computed:#06x}")]
    BadCrc { received: u16, computed: u16 },
    #[error("unknown beacon version {0}")]
    UnknownVersion(u8),
    #[error("field out of range: {0}")]
    FieldOutOfRange(String),
    #[error("not a hex frame: {0}")]
    BadHex(String),
    #[error("invalid channel configuration: {0}")]
    InvalidChannel(String),
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct BeaconFlags: u8 {
        const N_M_VALID = 0b001;
        const COUNTER_CLIPPED = 0b010;
        const STALL_DETECTED = 0b100;
    }
}

/// Measurement report broadcast by the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Beacon {
    pub version: u8,
    pub node_id: u16,
    pub seq: u8,
    pub n_m: u32,
    pub n_h: u32,
    pub flags: BeaconFlags,
}

impl Beacon {
    pub fn new(node_id: u16, seq: u8, n_m: u32, n_h: u32, flags: BeaconFlags) -> Self {
        Self {
            version: VERSION,
            node_id,
            seq,
            n_m,
            n_h,
            flags,
        }
    }

    /// Builds a beacon from wide counts, rejecting counts that do not fit 32 bits.
    pub fn from_counts(
        node_id: u16,
        seq: u8,
        n_m: u64,
        n_h: u64,
        flags: BeaconFlags,
    ) -> Result<Self, WireError> {
        let narrow = |name: &str, v: u64| {
            u32::try_from(v).map_err(|_| WireError::FieldOutOfRange(format!("{name}={v}")))
        };
        Ok(Self::new(
            node_id,
            seq,
            narrow("n_m", n_m)?,
            narrow("n_h", n_h)?,
            flags,
        ))
    }
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        crc ^= (byte as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
        }
    }
    crc
}

pub fn encode_beacon(b: &Beacon) -> Result<[u8; FRAME_LEN], WireError> {
    if b.version != VERSION {
        return Err(WireError::FieldOutOfRange(format!("version={}", b.version)));
    }
    if b.flags.bits() & !BeaconFlags::all().bits() != 0 {
        return Err(WireError::FieldOutOfRange(format!(
            "flags={:#04x} sets reserved bits",
            b.flags.bits()
        )));
    }
    let mut out = [0u8; FRAME_LEN];
    out[0] = b.version;
    out[1..3].copy_from_slice(&b.node_id.to_le_bytes());
    out[3] = b.seq;
    out[4..8].copy_from_slice(&b.n_m.to_le_bytes());
    out[8..12].copy_from_slice(&b.n_h.to_le_bytes());
    out[12] = b.flags.bits();
    let crc = crc16_ccitt_false(&out[..BODY_LEN]);
    out[13..15].copy_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_beacon(bytes: &[u8]) -> Result<Beacon, WireError> {
    if bytes.len() != FRAME_LEN {
        return Err(WireError::BadLength(bytes.len()));
    }
    let received = u16::from_le_bytes([bytes[13], bytes[14]]);
    let computed = crc16_ccitt_false(&bytes[..BODY_LEN]);
    if received != computed {
        return Err(WireError::BadCrc { received, computed });
    }
    if bytes[0] != VERSION {
        return Err(WireError::UnknownVersion(bytes[0]));
    }
    let flags = BeaconFlags::from_bits(bytes[12]).ok_or_else(|| {
        WireError::FieldOutOfRange(format!("flags={:#04x} sets reserved bits", bytes[12]))
    })?;
    Ok(Beacon {
        version: bytes[0],
        node_id: u16::from_le_bytes([bytes[1], bytes[2]]),
        seq: bytes[3],
        n_m: u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice")),
        n_h: u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice")),
        flags,
    })
}

/// One log line for a frame: uppercase hex, no separators.
pub fn frame_to_hex(frame: &[u8]) -> String {
    hex::encode_upper(frame)
}

/// Parses one log line back into raw bytes. Surrounding whitespace is ignored;
/// lowercase digits are accepted.
/// 1-based line number and the frame bytes or parse error.
pub type LogLine = (usize, Result<Vec<u8>, WireError>);

pub fn hex_to_frame(line: &str) -> Result<Vec<u8>, WireError> {
    hex::decode(line.trim()).map_err(|e| WireError::BadHex(e.to_string()))
}

pub fn write_log<W: Write, F: AsRef<[u8]>>(mut w: W, frames: &[F]) -> io::Result<()> {
    for f in frames {
        writeln!(w, "{}", frame_to_hex(f.as_ref()))?;
    }
    Ok(())
}

/// Reads a beacon log into per-line results; blank lines are skipped, the
/// line number (1-based) is kept for diagnostics.
pub fn read_log<R: BufRead>(r: R) -> io::Result<Vec<LogLine>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((idx + 1, hex_to_frame(&line)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelConfig {
    pub loss_probability: f64,
    pub duplicate_probability: f64,
}

impl ChannelConfig {
    pub fn lossless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), WireError> {
        for (name, p) in [
            ("loss_probability", self.loss_probability),
            ("duplicate_probability", self.duplicate_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(WireError::InvalidChannel(format!("{name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Passes frames through a lossy broadcast channel. Each frame is dropped
/// with `loss_probability`; a delivered frame is repeated once with
/// `duplicate_probability`. Order is preserved and the outcome depends only
/// on `seed`.
pub fn channel_pass<F: Clone>(
    frames: &[F],
    cfg: &ChannelConfig,
    seed: u64,
) -> Result<Vec<F>, WireError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let lost = rng.random::<f64>() < cfg.loss_probability;
        let dup = rng.random::<f64>() < cfg.duplicate_probability;
        if lost {
            continue;
        }
        out.push(f.clone());
        if dup {
            out.push(f.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> Beacon {
        Beacon::new(0x1234, 7, 1629, 1_953_600, BeaconFlags::N_M_VALID)
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
    }

    #[test]
    fn layout_is_bit_exact() {
        let f = encode_beacon(&reference()).unwrap();
        assert_eq!(f.len(), FRAME_LEN);
        assert_eq!(f[0], 1);
        assert_eq!(&f[1..3], &[0x34, 0x12]);
        assert_eq!(f[3], 7);
        assert_eq!(&f[4..8], &[0x5D, 0x06, 0x00, 0x00]);
        assert_eq!(&f[8..12], &1_953_600u32.to_le_bytes());
        assert_eq!(f[12], 0b001);
        let crc = crc16_ccitt_false(&f[..13]);
        assert_eq!(&f[13..], &crc.to_le_bytes());
    }

    #[test]
    fn zero_beacon_is_deterministic() {
        let b = Beacon::new(0, 0, 0, 0, BeaconFlags::empty());
        let f = encode_beacon(&b).unwrap();
        let mut body = [0u8; 13];
        body[0] = 1;
        assert_eq!(&f[..13], &body);
        assert_eq!(u16::from_le_bytes([f[13], f[14]]), crc16_ccitt_false(&body));
        assert_eq!(f, encode_beacon(&b).unwrap());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let f = encode_beacon(&reference()).unwrap();
        assert_eq!(decode_beacon(&f[..14]), Err(WireError::BadLength(14)));
        assert_eq!(decode_beacon(&[]), Err(WireError::BadLength(0)));

        let mut bad = f;
        bad[5] ^= 0x01;
        assert!(matches!(decode_beacon(&bad), Err(WireError::BadCrc { .. })));

        let mut v2 = f;
        v2[0] = 2;
        let crc = crc16_ccitt_false(&v2[..13]);
        v2[13..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(decode_beacon(&v2), Err(WireError::UnknownVersion(2)));
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let f = encode_beacon(&reference()).unwrap();
        let mut rejected = 0;
        for bit in 0..FRAME_LEN * 8 {
            let mut g = f;
            g[bit / 8] ^= 1 << (bit % 8);
            if let Err(WireError::BadCrc { .. }) = decode_beacon(&g) {
                rejected += 1;
            }
        }
        assert_eq!(rejected, 120);
    }

    #[test]
    fn encode_rejects_out_of_range_fields() {
        let mut b = reference();
        b.version = 3;
        assert!(matches!(encode_beacon(&b), Err(WireError::FieldOutOfRange(_))));
        let mut b = reference();
        b.flags = BeaconFlags::from_bits_retain(0x80);
        assert!(matches!(encode_beacon(&b), Err(WireError::FieldOutOfRange(_))));
        assert!(Beacon::from_counts(1, 0, 1 << 32, 0, BeaconFlags::empty()).is_err());
    }

    #[test]
    fn hex_log_roundtrip() {
        let frames = vec![
            encode_beacon(&reference()).unwrap(),
            encode_beacon(&Beacon::new(1, 2, 3, 4, BeaconFlags::all())).unwrap(),
        ];
        let mut buf = Vec::new();
        write_log(&mut buf, &frames).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().all(|l| l.len() == 30 && l == l.to_uppercase()));
        let parsed = read_log(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].1.as_deref().unwrap(), &frames[0][..]);
        assert!(hex_to_frame("ZZ").is_err());
    }

    #[test]
    fn channel_identity_and_total_loss() {
        let frames: Vec<u32> = (0..100).collect();
        let out = channel_pass(&frames, &ChannelConfig::lossless(), 9).unwrap();
        assert_eq!(out, frames);
        let cfg = ChannelConfig {
            loss_probability: 1.0,
            duplicate_probability: 0.5,
        };
        assert!(channel_pass(&frames, &cfg, 9).unwrap().is_empty());
    }

    #[test]
    fn channel_loss_is_binomial() {
        let frames: Vec<u32> = (0..10_000).collect();
        let cfg = ChannelConfig {
            loss_probability: 0.5,
            duplicate_probability: 0.0,
        };
        let out = channel_pass(&frames, &cfg, 2024).unwrap();
        // σ = sqrt(n·p·(1-p)) = 50
        assert!((out.len() as i64 - 5000).abs() <= 150, "{}", out.len());
        assert_eq!(out, channel_pass(&frames, &cfg, 2024).unwrap());
    }

    #[test]
    fn channel_rejects_bad_probabilities() {
        let cfg = ChannelConfig {
            loss_probability: 1.5,
            duplicate_probability: 0.0,
        };
        assert!(channel_pass(&[1u8], &cfg, 0).is_err());
    }

    fn any_beacon() -> impl Strategy<Value = Beacon> {
        (any::<u16>(), any::<u8>(), any::<u32>(), any::<u32>(), 0u8..8).prop_map(
            |(id, seq, n_m, n_h, flags)| {
                Beacon::new(id, seq, n_m, n_h, BeaconFlags::from_bits_truncate(flags))
            },
        )
    }

    proptest! {
        #[test]
        fn channel_preserves_order(
            loss in 0.0f64..=1.0,
            dup in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let frames: Vec<u32> = (0..200).collect();
            let cfg = ChannelConfig { loss_probability: loss, duplicate_probability: dup };
            let out = channel_pass(&frames, &cfg, seed).unwrap();
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(out.windows(3).all(|w| !(w[0] == w[1] && w[1] == w[2])));
        }

        #[test]
        fn encode_decode_identity(b in any_beacon()) {
            let f = encode_beacon(&b).unwrap();
            prop_assert_eq!(decode_beacon(&f).unwrap(), b);
        }
    }
}
