//! IEEE-754 binary16 conversions.
//!
//! Half-precision values are stored as raw 16-bit patterns; arithmetic
//! happens in f32 after widening. Narrowing rounds to nearest, ties to even.

const F16_SIGN: u16 = 0x8000;
const F16_EXP: u16 = 0x7C00;
const F16_MAN: u16 = 0x03FF;

/// Widen a binary16 bit pattern to f32. Exact for every input, including
/// subnormals, infinities, and NaN (payload is shifted into the high
/// mantissa bits so a later narrow restores it).
pub fn f16_to_f32(bits: u16) -> f32 {
    let sign = ((bits & F16_SIGN) as u32) << 16;
    let exp = ((bits & F16_EXP) >> 10) as u32;
    let man = (bits & F16_MAN) as u32;

    let out = if exp == 0 {
        if man == 0 {
            sign
        } else {
            // subnormal: renormalize (value = man * 2^-24)
            let mut e: i32 = -14;
            let mut m = man;
            while m & 0x400 == 0 {
                m <<= 1;
                e -= 1;
            }
            let m = m & 0x3FF;
            sign | (((e + 127) as u32) << 23) | (m << 13)
        }
    } else if exp == 0x1F {
        // inf / nan
        sign | 0x7F80_0000 | (man << 13)
    } else {
        sign | ((exp + 127 - 15) << 23) | (man << 13)
    };
    f32::from_bits(out)
}

/// Narrow an f32 to a binary16 bit pattern, rounding to nearest-even.
/// Overflow produces an infinity; underflow produces a signed zero.
/// NaN payloads are truncated to the top 10 bits (forced non-zero).
pub fn f32_to_f16(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        if man == 0 {
            return sign | F16_EXP;
        }
        let payload = (man >> 13) as u16;
        return sign | F16_EXP | if payload == 0 { 0x0200 } else { payload };
    }

    let unbiased = exp - 127;
    if unbiased >= 16 {
        return sign | F16_EXP;
    }
    if unbiased >= -14 {
        // normal half; rounding may carry into the exponent (and up to inf)
        let e16 = (unbiased + 15) as u32;
        let m16 = man >> 13;
        let rem = man & 0x1FFF;
        let mut h = (sign as u32) | (e16 << 10) | m16;
        if rem > 0x1000 || (rem == 0x1000 && (m16 & 1) == 1) {
            h += 1;
        }
        return h as u16;
    }
    if unbiased >= -25 {
        // subnormal half: shift the full 24-bit significand down
        let full = man | 0x0080_0000;
        let shift = (-1 - unbiased) as u32;
        let keep = full >> shift;
        let rem = full & ((1u32 << shift) - 1);
        let half = 1u32 << (shift - 1);
        let mut m = keep;
        if rem > half || (rem == half && (keep & 1) == 1) {
            m += 1;
        }
        return sign | (m as u16);
    }
    sign
}
