//! Hybrid envelope encryption for model payloads.
//!
//! A fresh AES-256-GCM key encrypts the payload and RSA-OAEP (SHA-256,
//! 2048-bit modulus) wraps that key for the recipient. All randomness comes
//! from a caller-supplied RNG so a seeded simulation replays exactly; keys
//! derived that way are only fit for simulation.
//!
//! Wire format of a serialized [`Envelope`], little-endian throughout:
//!
//! ```text
//! "FENV" | 0x01 | u16 wrapped_len | wrapped_key | nonce[12] | u64 ct_len | ciphertext | tag[16]
//! ```

use std::fmt;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce, Tag};
use rand::{CryptoRng, RngCore};
use rsa::pkcs1::{DecodeRsaPublicKey, EncodeRsaPublicKey};
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use sha2::Sha256;
use thiserror::Error;

pub const RSA_BITS: usize = 2048;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const ENVELOPE_MAGIC: &[u8; 4] = b"FENV";
pub const ENVELOPE_VERSION: u8 = 0x01;

/// Associated data bound into every ciphertext.
const AAD: &[u8] = b"FENV\x01";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("plaintext is empty")]
    EmptyPlaintext,
    #[error("ciphertext failed authentication")]
    AuthenticationFailed,
    #[error("wrapped key could not be unwrapped")]
    UnwrapFailed,
    #[error("key wrapping failed: {0}")]
    WrapFailed(String),
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
    #[error("invalid public key encoding")]
    InvalidPublicKey,
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(&'static str),
}

/// 256-bit AES key. Never printed or serialized in the clear.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; 32]);

impl SymmetricKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Self(key)
    }

    fn cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new(&self.0.into())
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey(RsaPublicKey);

impl PublicKey {
    /// PKCS#1 DER encoding, the form registered on the ledger.
    pub fn to_der(&self) -> Vec<u8> {
        self.0
            .to_pkcs1_der()
            .expect("RSA public key always encodes")
            .as_bytes()
            .to_vec()
    }

    pub fn from_der(der: &[u8]) -> Result<Self, CryptoError> {
        RsaPublicKey::from_pkcs1_der(der)
            .map(Self)
            .map_err(|_| CryptoError::InvalidPublicKey)
    }
}

#[derive(Clone)]
pub struct PrivateKey(RsaPrivateKey);

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Result<Self, CryptoError> {
        Self::generate_with_bits(rng, RSA_BITS)
    }

    /// Smaller moduli are only meant for fast tests.
    pub fn generate_with_bits<R: RngCore + CryptoRng>(
        rng: &mut R,
        bits: usize,
    ) -> Result<Self, CryptoError> {
        let private = RsaPrivateKey::new(rng, bits)
            .map_err(|e| CryptoError::KeyGeneration(e.to_string()))?;
        let public = RsaPublicKey::from(&private);
        Ok(Self {
            public: PublicKey(public),
            private: PrivateKey(private),
        })
    }
}

pub fn generate_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> Result<KeyPair, CryptoError> {
    KeyPair::generate(rng)
}

/// Output of the symmetric layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sealed {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

pub fn encrypt<R: RngCore + CryptoRng>(
    key: &SymmetricKey,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<Sealed, CryptoError> {
    if plaintext.is_empty() {
        return Err(CryptoError::EmptyPlaintext);
    }
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut buf = plaintext.to_vec();
    let tag = key
        .cipher()
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), AAD, &mut buf)
        .map_err(|_| CryptoError::AuthenticationFailed)?;
    Ok(Sealed {
        nonce,
        ciphertext: buf,
        tag: tag.into(),
    })
}

pub fn decrypt(
    key: &SymmetricKey,
    nonce: &[u8; NONCE_LEN],
    ciphertext: &[u8],
    tag: &[u8; TAG_LEN],
) -> Result<Vec<u8>, CryptoError> {
    let mut buf = ciphertext.to_vec();
    key.cipher()
        .decrypt_in_place_detached(
            Nonce::from_slice(nonce),
            AAD,
            &mut buf,
            Tag::from_slice(tag),
        )
        .map_err(|_| CryptoError::AuthenticationFailed)?;
    Ok(buf)
}

pub fn wrap_key<R: RngCore + CryptoRng>(
    public: &PublicKey,
    key: &SymmetricKey,
    rng: &mut R,
) -> Result<Vec<u8>, CryptoError> {
    public
        .0
        .encrypt(rng, Oaep::new::<Sha256>(), &key.0)
        .map_err(|e| CryptoError::WrapFailed(e.to_string()))
}

pub fn unwrap_key(private: &PrivateKey, wrapped: &[u8]) -> Result<SymmetricKey, CryptoError> {
    let raw = private
        .0
        .decrypt(Oaep::new::<Sha256>(), wrapped)
        .map_err(|_| CryptoError::UnwrapFailed)?;
    let key: [u8; 32] = raw.try_into().map_err(|_| CryptoError::UnwrapFailed)?;
    Ok(SymmetricKey(key))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub wrapped_key: Vec<u8>,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl Envelope {
    pub fn to_bytes(&self) -> Vec<u8> {
        let wrapped_len =
            u16::try_from(self.wrapped_key.len()).expect("wrapped key longer than u16::MAX");
        let mut out = Vec::with_capacity(
            4 + 1 + 2 + self.wrapped_key.len() + NONCE_LEN + 8 + self.ciphertext.len() + TAG_LEN,
        );
        out.extend_from_slice(ENVELOPE_MAGIC);
        out.push(ENVELOPE_VERSION);
        out.extend_from_slice(&wrapped_len.to_le_bytes());
        out.extend_from_slice(&self.wrapped_key);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != ENVELOPE_MAGIC {
            return Err(CryptoError::MalformedEnvelope("bad magic"));
        }
        if r.take(1)?[0] != ENVELOPE_VERSION {
            return Err(CryptoError::MalformedEnvelope("unsupported version"));
        }
        let wrapped_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let wrapped_key = r.take(wrapped_len)?.to_vec();
        let nonce: [u8; NONCE_LEN] = r.take(NONCE_LEN)?.try_into().unwrap();
        let ct_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let ct_len = usize::try_from(ct_len)
            .map_err(|_| CryptoError::MalformedEnvelope("ciphertext length overflow"))?;
        let ciphertext = r.take(ct_len)?.to_vec();
        let tag: [u8; TAG_LEN] = r.take(TAG_LEN)?.try_into().unwrap();
        if !r.buf.is_empty() {
            return Err(CryptoError::MalformedEnvelope("trailing bytes"));
        }
        Ok(Self {
            wrapped_key,
            nonce,
            ciphertext,
            tag,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CryptoError> {
        if self.buf.len() < n {
            return Err(CryptoError::MalformedEnvelope("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
}

/// Encrypts `model_bytes` under a fresh symmetric key wrapped for `recipient`.
pub fn seal_model<R: RngCore + CryptoRng>(
    recipient: &PublicKey,
    model_bytes: &[u8],
    rng: &mut R,
) -> Result<Envelope, CryptoError> {
    let mut envelopes = seal_model_for_group(&[recipient], model_bytes, rng)?;
    Ok(envelopes.pop().expect("one recipient yields one envelope"))
}

/// Encrypts once and wraps the same symmetric key for every recipient. The
/// returned envelopes share nonce, ciphertext and tag and differ only in
/// `wrapped_key`.
pub fn seal_model_for_group<R: RngCore + CryptoRng>(
    recipients: &[&PublicKey],
    model_bytes: &[u8],
    rng: &mut R,
) -> Result<Vec<Envelope>, CryptoError> {
    let key = SymmetricKey::generate(rng);
    let sealed = encrypt(&key, model_bytes, rng)?;
    recipients
        .iter()
        .map(|public| {
            Ok(Envelope {
                wrapped_key: wrap_key(public, &key, rng)?,
                nonce: sealed.nonce,
                ciphertext: sealed.ciphertext.clone(),
                tag: sealed.tag,
            })
        })
        .collect()
}

/// Re-wraps the key of an envelope the holder of `private` can open for a
/// new set of recipients without touching the ciphertext.
pub fn grant_access<R: RngCore + CryptoRng>(
    private: &PrivateKey,
    envelope: &Envelope,
    recipients: &[&PublicKey],
    rng: &mut R,
) -> Result<Vec<Envelope>, CryptoError> {
    let key = unwrap_key(private, &envelope.wrapped_key)?;
    recipients
        .iter()
        .map(|public| {
            Ok(Envelope {
                wrapped_key: wrap_key(public, &key, rng)?,
                ..envelope.clone()
            })
        })
        .collect()
}

pub fn open_model(private: &PrivateKey, envelope: &Envelope) -> Result<Vec<u8>, CryptoError> {
    let key = unwrap_key(private, &envelope.wrapped_key)?;
    decrypt(&key, &envelope.nonce, &envelope.ciphertext, &envelope.tag)
}
