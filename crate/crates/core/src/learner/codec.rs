//! Model byte format, little-endian:
//!
//! ```text
//! "FMOD" | 0x01 | u16 layer_count | u32 reserved | 5 zero bytes (header = 16 bytes)
//! layer_count x u32 layer size
//! params as f64, layer order
//! ```

use super::{param_count, LearnerError, ModelState};

pub const MODEL_MAGIC: &[u8; 4] = b"FMOD";
pub const MODEL_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 16;

pub fn serialize_model(model: &ModelState) -> Vec<u8> {
    let arch = model.arch();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * arch.len() + 8 * model.params().len());
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(arch.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&[0u8; 5]);
    for &size in arch {
        out.extend_from_slice(&(size as u32).to_le_bytes());
    }
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ModelState, LearnerError> {
    if bytes.len() < HEADER_LEN {
        return Err(LearnerError::CorruptModelBytes("truncated header"));
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(LearnerError::CorruptModelBytes("bad magic"));
    }
    if bytes[4] != MODEL_VERSION {
        return Err(LearnerError::CorruptModelBytes("unsupported version"));
    }
    let layers = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let arch_end = HEADER_LEN + 4 * layers;
    if bytes.len() < arch_end {
        return Err(LearnerError::CorruptModelBytes("truncated layer table"));
    }
    let arch: Vec<usize> = bytes[HEADER_LEN..arch_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if arch.len() < 2 || arch.contains(&0) {
        return Err(LearnerError::CorruptModelBytes("invalid layer table"));
    }
    let count = param_count(&arch);
    let expected_len = count
        .checked_mul(8)
        .and_then(|p| p.checked_add(arch_end))
        .ok_or(LearnerError::CorruptModelBytes("layer table overflows"))?;
    if bytes.len() != expected_len {
        return Err(LearnerError::CorruptModelBytes("length does not match layer table"));
    }
    let params = bytes[arch_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelState::from_parts(arch, params)
}

#[cfg(test)]
mod tests {
    use super::super::init_model;
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact_and_sized() {
        let m = init_model(&[64, 32, 10], 3).unwrap();
        let bytes = serialize_model(&m);
        assert_eq!(bytes.len(), 16 + 4 * 3 + 8 * m.params().len());
        assert_eq!(&bytes[..4], b"FMOD");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..7], &[3, 0]);
        let back = deserialize_model(&bytes).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = serialize_model(&init_model(&[4, 3], 1).unwrap());
        assert!(deserialize_model(&bytes[..bytes.len() - 1]).is_err());
        assert!(deserialize_model(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            deserialize_model(&bad),
            Err(LearnerError::CorruptModelBytes("bad magic"))
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 8]);
        assert!(deserialize_model(&long).is_err());
        let mut huge = bytes;
        huge[5] = 0xff;
        assert!(deserialize_model(&huge).is_err());
    }
}
