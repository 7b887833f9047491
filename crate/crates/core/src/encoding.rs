//! Canonical byte encoding for everything that gets hashed or signed.
//!
//! The rules are deliberately small so another implementation can reproduce
//! them byte for byte:
//!
//! * integers are fixed-width big-endian (`u8`, `u32`, `u64`),
//! * variable-length byte strings and UTF-8 strings are prefixed with their
//!   length as a big-endian `u32`,
//! * digests and public keys are written raw (32 bytes, no prefix),
//! * lists are a `u32` element count followed by the elements,
//! * structs are their fields in declaration order, nothing else.
//!
//! JSON is never hashed. See `docs/canonical-encoding.md` for the per-type
//! field layouts.

use crate::crypto::Digest;

/// Append-only builder for canonical bytes.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts an encoding with a domain-separation tag.
    pub fn tagged(tag: &str) -> Self {
        let mut enc = Self::new();
        enc.str(tag);
        enc
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        let len = u32::try_from(v.len()).expect("canonical field larger than 4 GiB");
        self.u32(len);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    /// Fixed-width 32 byte value, written without a prefix.
    pub fn raw32(&mut self, v: &[u8; 32]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.raw32(d.as_bytes())
    }

    pub fn list<T>(&mut self, items: &[T], mut each: impl FnMut(&mut Self, &T)) -> &mut Self {
        let len = u32::try_from(items.len()).expect("canonical list too long");
        self.u32(len);
        for item in items {
            each(self, item);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }
}

/// Types with a canonical byte encoding.
pub trait Canonical {
    fn encode(&self, enc: &mut Encoder);

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_big_endian_and_length_prefixed() {
        let mut enc = Encoder::new();
        enc.u8(7).u32(1).u64(2).bytes(b"ab").bool(true);
        assert_eq!(
            enc.finish(),
            vec![7, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 2, b'a', b'b', 1]
        );
    }

    #[test]
    fn lists_carry_a_count() {
        let mut enc = Encoder::new();
        enc.list(&[1u8, 2, 3], |e, v| {
            e.u8(*v);
        });
        assert_eq!(enc.finish(), vec![0, 0, 0, 3, 1, 2, 3]);
    }
}
