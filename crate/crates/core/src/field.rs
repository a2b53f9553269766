//! Arithmetic in the binary extension fields GF(2^4), GF(2^8) and GF(2^16).
//!
//! Symbols are carried around as plain `u16` values in the hot paths
//! ([`Field::mul_raw`] and friends); [`FieldElement`] is the checked,
//! width-tagged form used at API boundaries.

use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

/// Raw symbol value. Always `< 2^w` for the field it belongs to.
pub type Symbol = u16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("field width mismatch: {0} bits vs {1} bits")]
    WidthMismatch(u8, u8),
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("value {value:#x} does not fit in {bits} bits")]
    OutOfRange { value: u32, bits: u8 },
    #[error("unsupported field width {0} (expected 4, 8 or 16)")]
    UnsupportedWidth(u32),
    #[error("polynomial {0:#x} is not irreducible of the expected degree")]
    Reducible(u32),
    #[error("symbol buffer too short: need {need} bytes, got {got}")]
    ShortBuffer { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Width {
    W4,
    W8,
    W16,
}

impl Width {
    pub const ALL: [Width; 3] = [Width::W4, Width::W8, Width::W16];

    pub fn bits(self) -> u8 {
        match self {
            Width::W4 => 4,
            Width::W8 => 8,
            Width::W16 => 16,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self, FieldError> {
        match bits {
            4 => Ok(Width::W4),
            8 => Ok(Width::W8),
            16 => Ok(Width::W16),
            other => Err(FieldError::UnsupportedWidth(other)),
        }
    }

    /// Number of field elements, `2^w`.
    pub fn order(self) -> usize {
        1usize << self.bits()
    }

    /// Standard reduction polynomial for this width.
    pub fn default_polynomial(self) -> u32 {
        match self {
            Width::W4 => 0x13,     // x^4 + x + 1
            Width::W8 => 0x11B,    // x^8 + x^4 + x^3 + x + 1
            Width::W16 => 0x1100B, // x^16 + x^12 + x^3 + x + 1
        }
    }

    /// Smallest supported width whose field has at least `elements` elements.
    pub fn smallest_holding(elements: usize) -> Option<Width> {
        Width::ALL.into_iter().find(|w| w.order() >= elements)
    }

    /// Bytes needed to pack `count` symbols of this width.
    pub fn packed_len(self, count: usize) -> usize {
        match self {
            Width::W4 => count.div_ceil(2),
            Width::W8 => count,
            Width::W16 => count * 2,
        }
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GF(2^{})", self.bits())
    }
}

/// A width-tagged field element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldElement {
    value: Symbol,
    width: Width,
}

impl FieldElement {
    pub fn new(value: u32, width: Width) -> Result<Self, FieldError> {
        if value >= width.order() as u32 {
            return Err(FieldError::OutOfRange { value, bits: width.bits() });
        }
        Ok(FieldElement { value: value as Symbol, width })
    }

    pub fn value(self) -> Symbol {
        self.value
    }

    pub fn width(self) -> Width {
        self.width
    }
}

/// Log/antilog tables for one GF(2^w).
pub struct Field {
    width: Width,
    polynomial: u32,
    mask: Symbol,
    // exp is doubled so that exp[log a + log b] needs no reduction.
    exp: Vec<Symbol>,
    log: Vec<u32>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("width", &self.width)
            .field("polynomial", &format_args!("{:#x}", self.polynomial))
            .finish()
    }
}

static FIELDS: [OnceLock<Field>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];

impl Field {
    /// The shared field instance with the default reduction polynomial.
    pub fn get(width: Width) -> &'static Field {
        let slot = match width {
            Width::W4 => &FIELDS[0],
            Width::W8 => &FIELDS[1],
            Width::W16 => &FIELDS[2],
        };
        slot.get_or_init(|| {
            Field::with_polynomial(width, width.default_polynomial()).expect("default polynomials are irreducible")
        })
    }

    pub fn with_polynomial(width: Width, polynomial: u32) -> Result<Field, FieldError> {
        let bits = width.bits() as u32;
        if degree(polynomial) != Some(bits) || !is_irreducible(polynomial) {
            return Err(FieldError::Reducible(polynomial));
        }
        let order = width.order();
        let group = order - 1;
        let generator = (2..order as u32)
            .find(|&g| multiplicative_order(g, polynomial, bits) == group)
            .expect("the multiplicative group of a finite field is cyclic");

        let mut exp = vec![0 as Symbol; 2 * group];
        let mut log = vec![0u32; order];
        let mut x = 1u32;
        for i in 0..group {
            exp[i] = x as Symbol;
            log[x as usize] = i as u32;
            x = clmul_reduce(x, generator, polynomial, bits);
        }
        for i in group..2 * group {
            exp[i] = exp[i - group];
        }
        Ok(Field { width, polynomial, mask: (order - 1) as Symbol, exp, log })
    }

    pub fn width(&self) -> Width {
        self.width
    }

    pub fn polynomial(&self) -> u32 {
        self.polynomial
    }

    pub fn order(&self) -> usize {
        self.width.order()
    }

    pub fn element(&self, value: u32) -> Result<FieldElement, FieldError> {
        FieldElement::new(value, self.width)
    }

    fn check(&self, a: FieldElement) -> Result<(), FieldError> {
        if a.width != self.width {
            return Err(FieldError::WidthMismatch(a.width.bits(), self.width.bits()));
        }
        Ok(())
    }

    pub fn add(&self, a: FieldElement, b: FieldElement) -> Result<FieldElement, FieldError> {
        self.check(a)?;
        self.check(b)?;
        Ok(FieldElement { value: a.value ^ b.value, width: self.width })
    }

    pub fn mul(&self, a: FieldElement, b: FieldElement) -> Result<FieldElement, FieldError> {
        self.check(a)?;
        self.check(b)?;
        Ok(FieldElement { value: self.mul_raw(a.value, b.value), width: self.width })
    }

    pub fn inv(&self, a: FieldElement) -> Result<FieldElement, FieldError> {
        self.check(a)?;
        Ok(FieldElement { value: self.inv_raw(a.value)?, width: self.width })
    }

    #[inline]
    pub fn mul_raw(&self, a: Symbol, b: Symbol) -> Symbol {
        if a == 0 || b == 0 {
            0
        } else {
            self.exp[(self.log[a as usize] + self.log[b as usize]) as usize]
        }
    }

    #[inline]
    pub fn inv_raw(&self, a: Symbol) -> Result<Symbol, FieldError> {
        if a == 0 {
            return Err(FieldError::ZeroInverse);
        }
        let group = self.order() - 1;
        Ok(self.exp[(group - self.log[a as usize] as usize) % group])
    }

    #[inline]
    pub fn div_raw(&self, a: Symbol, b: Symbol) -> Result<Symbol, FieldError> {
        Ok(self.mul_raw(a, self.inv_raw(b)?))
    }

    pub fn pow_raw(&self, a: Symbol, e: u64) -> Symbol {
        if e == 0 {
            return 1;
        }
        if a == 0 {
            return 0;
        }
        let group = (self.order() - 1) as u64;
        let l = (self.log[a as usize] as u64 * (e % group)) % group;
        self.exp[l as usize]
    }

    /// Dot product of two equal-length symbol slices.
    #[inline]
    pub fn dot(&self, a: &[Symbol], b: &[Symbol]) -> Symbol {
        a.iter().zip(b).fold(0, |acc, (&x, &y)| acc ^ self.mul_raw(x, y))
    }

    /// `acc += scale * src`, element-wise.
    #[inline]
    pub fn axpy(&self, acc: &mut [Symbol], scale: Symbol, src: &[Symbol]) {
        if scale == 0 {
            return;
        }
        for (a, &s) in acc.iter_mut().zip(src) {
            *a ^= self.mul_raw(scale, s);
        }
    }

    /// Maps an arbitrary integer onto the field by truncation to `w` bits.
    pub fn truncate(&self, v: u64) -> Symbol {
        (v as Symbol) & self.mask
    }

    /// Uniform random symbol.
    pub fn random<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Symbol {
        self.truncate(rng.next_u32() as u64)
    }

    /// Field encoding of a small index, used for evaluation points.
    pub fn point(&self, index: usize) -> Symbol {
        debug_assert!(index < self.order());
        index as Symbol
    }
}

fn degree(p: u32) -> Option<u32> {
    if p == 0 {
        None
    } else {
        Some(31 - p.leading_zeros())
    }
}

fn poly_mod(mut a: u32, m: u32) -> u32 {
    let dm = degree(m).expect("nonzero modulus");
    while let Some(da) = degree(a) {
        if da < dm {
            break;
        }
        a ^= m << (da - dm);
    }
    a
}

// Trial division by every polynomial of degree 1..=deg/2.
fn is_irreducible(p: u32) -> bool {
    let Some(d) = degree(p) else { return false };
    if d == 0 {
        return false;
    }
    for divisor in 2u32..(1 << (d / 2 + 1)) {
        if poly_mod(p, divisor) == 0 {
            return false;
        }
    }
    true
}

fn clmul_reduce(a: u32, b: u32, poly: u32, bits: u32) -> u32 {
    let mut acc = 0u32;
    let mut a = a;
    let mut b = b;
    while b != 0 {
        if b & 1 == 1 {
            acc ^= a;
        }
        b >>= 1;
        a <<= 1;
        if a & (1 << bits) != 0 {
            a ^= poly;
        }
    }
    acc
}

fn multiplicative_order(g: u32, poly: u32, bits: u32) -> usize {
    let mut x = g;
    let mut n = 1;
    while x != 1 {
        x = clmul_reduce(x, g, poly, bits);
        n += 1;
        if n > (1 << bits) {
            return 0;
        }
    }
    n
}

/// Packs symbols little-endian; width 4 puts two symbols per byte, low nibble first.
pub fn pack_symbols(width: Width, symbols: &[Symbol]) -> Vec<u8> {
    let mut out = Vec::with_capacity(width.packed_len(symbols.len()));
    match width {
        Width::W4 => {
            for pair in symbols.chunks(2) {
                let lo = (pair[0] & 0xF) as u8;
                let hi = pair.get(1).map_or(0, |&s| (s & 0xF) as u8);
                out.push(lo | (hi << 4));
            }
        }
        Width::W8 => out.extend(symbols.iter().map(|&s| s as u8)),
        Width::W16 => {
            for &s in symbols {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
    }
    out
}

pub fn unpack_symbols(width: Width, bytes: &[u8], count: usize) -> Result<Vec<Symbol>, FieldError> {
    let need = width.packed_len(count);
    if bytes.len() < need {
        return Err(FieldError::ShortBuffer { need, got: bytes.len() });
    }
    let out = match width {
        Width::W4 => (0..count)
            .map(|i| {
                let b = bytes[i / 2];
                if i % 2 == 0 {
                    (b & 0xF) as Symbol
                } else {
                    (b >> 4) as Symbol
                }
            })
            .collect(),
        Width::W8 => bytes[..count].iter().map(|&b| b as Symbol).collect(),
        Width::W16 => bytes[..need].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
    };
    Ok(out)
}
