//! Minimal IEEE 754 binary16 conversion, round-to-nearest-even. Used when
//! storing encodings in detection buffers at 16-bit precision.

pub fn f32_to_f16_bits(value: f32) -> u16 {
    let x = value.to_bits();
    let sign = (x >> 16) & 0x8000;
    let mut exponent = ((x >> 23) & 0xFF) as i32;
    let mantissa = x & 0x007F_FFFF;
    if exponent == 255 {
        return (sign | 0x7C00 | if mantissa != 0 { 0x0200 } else { 0 }) as u16;
    }
    exponent = exponent - 127 + 15;
    if exponent >= 0x1F {
        return (sign | 0x7C00) as u16;
    }
    if exponent <= 0 {
        if exponent < -10 {
            return sign as u16;
        }
        let m = mantissa | 0x0080_0000;
        let shift = (14 - exponent) as u32;
        let mut half = m >> shift;
        let rem = m & ((1u32 << shift) - 1);
        let halfway = 1u32 << (shift - 1);
        if rem > halfway || (rem == halfway && (half & 1) == 1) {
            half += 1;
        }
        return (sign | half) as u16;
    }
    let mut half = sign | ((exponent as u32) << 10) | (mantissa >> 13);
    let rem = mantissa & 0x1FFF;
    if rem > 0x1000 || (rem == 0x1000 && (half & 1) == 1) {
        half += 1;
    }
    half as u16
}

pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1F) as u32;
    let frac = (h & 0x3FF) as u32;
    let bits = if exp == 0 {
        if frac == 0 {
            sign
        } else {
            let mut e: i32 = 127 - 15 + 1;
            let mut f = frac;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            f &= 0x3FF;
            sign | ((e as u32) << 23) | (f << 13)
        }
    } else if exp == 0x1F {
        sign | 0x7F80_0000 | (frac << 13)
    } else {
        sign | ((exp + 127 - 15) << 23) | (frac << 13)
    };
    f32::from_bits(bits)
}

/// Round an f64 through binary16 precision.
pub fn round_f16(v: f64) -> f64 {
    f16_bits_to_f32(f32_to_f16_bits(v as f32)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_round_trip() {
        for v in [0.0f32, 1.0, -1.0, 0.5, 2.0, 65504.0, -0.25, 1024.0] {
            assert_eq!(f16_bits_to_f32(f32_to_f16_bits(v)), v);
        }
    }

    #[test]
    fn round_trip_is_idempotent() {
        for i in 0..10_000u32 {
            let v = (i as f32 - 5000.0) * 0.037;
            let once = f16_bits_to_f32(f32_to_f16_bits(v));
            let twice = f16_bits_to_f32(f32_to_f16_bits(once));
            assert_eq!(once, twice, "v = {v}");
        }
    }

    #[test]
    fn overflow_goes_to_infinity() {
        assert_eq!(f32_to_f16_bits(1e6), 0x7C00);
        assert_eq!(f32_to_f16_bits(-1e6), 0xFC00);
    }

    #[test]
    fn relative_error_within_f16_precision() {
        for i in 1..1000u32 {
            let v = i as f32 * 0.0137;
            let r = f16_bits_to_f32(f32_to_f16_bits(v));
            assert!(((r - v) / v).abs() < 1e-3, "v = {v}, r = {r}");
        }
    }
}
