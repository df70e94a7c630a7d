//! Bit layout of a watermarked single-precision word.
//!
//! Bits are numbered from the most significant end: `b0` is the sign,
//! `b1..b8` the exponent, `b9..b31` the fraction.
//!
//! ```text
//!  b0        b10 b11 b12            b22 b23       b31
//! +-------------+---+------------------+------------+
//! | info (11)   | a |  mutual (11)     | digest (9) |
//! +-------------+---+------------------+------------+
//! ```

use crate::error::{Error, Result};

pub const INFO_BITS: u32 = 11;
pub const MUTUAL_BITS: u32 = 11;
pub const DIGEST_BITS: u32 = 9;

pub const INFO_MASK: u32 = (1 << INFO_BITS) - 1;
pub const MUTUAL_MASK: u32 = (1 << MUTUAL_BITS) - 1;
pub const DIGEST_MASK: u32 = (1 << DIGEST_BITS) - 1;

const INFO_SHIFT: u32 = 21;
const ADAPTIVE_SHIFT: u32 = 20;
const MUTUAL_SHIFT: u32 = 9;

/// Mask selecting `b11` within a word.
pub const ADAPTIVE_MASK: u32 = 1 << ADAPTIVE_SHIFT;

/// Raw IEEE-754 single-precision bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ParamWord(pub u32);

impl ParamWord {
    pub fn from_f32(x: f32) -> Self {
        ParamWord(float_to_word(x))
    }

    pub fn to_f32(self) -> f32 {
        word_to_float(self.0)
    }

    pub fn fields(self) -> ParamFields {
        split(self.0)
    }

    pub fn info(self) -> u16 {
        info_of(self.0)
    }
}

impl From<f32> for ParamWord {
    fn from(x: f32) -> Self {
        ParamWord::from_f32(x)
    }
}

/// A word decomposed into its four watermark fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ParamFields {
    pub info: u16,
    pub adaptive: u8,
    pub mutual: u16,
    pub digest: u16,
}

#[inline]
pub fn float_to_word(x: f32) -> u32 {
    x.to_bits()
}

#[inline]
pub fn word_to_float(w: u32) -> f32 {
    f32::from_bits(w)
}

#[inline]
pub fn split(w: u32) -> ParamFields {
    ParamFields {
        info: (w >> INFO_SHIFT) as u16,
        adaptive: ((w >> ADAPTIVE_SHIFT) & 1) as u8,
        mutual: ((w >> MUTUAL_SHIFT) & MUTUAL_MASK) as u16,
        digest: (w & DIGEST_MASK) as u16,
    }
}

/// Reassembles a word, rejecting any field wider than its slot.
pub fn assemble(f: ParamFields) -> Result<u32> {
    check_range("info", f.info as u32, INFO_MASK)?;
    check_range("adaptive", f.adaptive as u32, 1)?;
    check_range("mutual", f.mutual as u32, MUTUAL_MASK)?;
    check_range("digest", f.digest as u32, DIGEST_MASK)?;
    Ok(((f.info as u32) << INFO_SHIFT)
        | ((f.adaptive as u32) << ADAPTIVE_SHIFT)
        | ((f.mutual as u32) << MUTUAL_SHIFT)
        | f.digest as u32)
}

fn check_range(field: &'static str, value: u32, max: u32) -> Result<()> {
    if value > max {
        return Err(Error::FieldRange { field, value, max });
    }
    Ok(())
}

#[inline]
pub fn set_adaptive(w: u32, bit: u8) -> u32 {
    if bit & 1 == 1 {
        w | ADAPTIVE_MASK
    } else {
        w & !ADAPTIVE_MASK
    }
}

#[inline]
pub fn info_of(w: u32) -> u16 {
    (w >> INFO_SHIFT) as u16
}

#[inline]
pub fn adaptive_of(w: u32) -> u8 {
    ((w >> ADAPTIVE_SHIFT) & 1) as u8
}

#[inline]
pub fn mutual_of(w: u32) -> u16 {
    ((w >> MUTUAL_SHIFT) & MUTUAL_MASK) as u16
}

#[inline]
pub fn digest_of(w: u32) -> u16 {
    (w & DIGEST_MASK) as u16
}

/// Top 23 bits (info, adaptive, mutual): the input of the self-check digest.
#[inline]
pub fn prefix23(w: u32) -> u32 {
    w >> DIGEST_BITS
}

/// Replaces the mutual field.
#[inline]
pub(crate) fn with_mutual(w: u32, mutual: u16) -> u32 {
    (w & !(MUTUAL_MASK << MUTUAL_SHIFT)) | (((mutual as u32) & MUTUAL_MASK) << MUTUAL_SHIFT)
}

/// Replaces the digest field.
#[inline]
pub(crate) fn with_digest(w: u32, digest: u16) -> u32 {
    (w & !DIGEST_MASK) | ((digest as u32) & DIGEST_MASK)
}
