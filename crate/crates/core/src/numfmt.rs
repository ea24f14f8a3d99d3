//! Canonical text formatting for floats written to CSV files.

/// Formats `v` with 17 significant digits in the style of C's `%.17g`:
/// fixed notation for exponents in `[-5, 17)`, scientific otherwise,
/// trailing zeros removed. The output parses back to the identical `f64`.
pub fn g17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.16e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, v))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

#[cfg(test)]
mod tests {
    use super::g17;

    #[test]
    fn familiar_values() {
        assert_eq!(g17(1.0), "1");
        assert_eq!(g17(0.5), "0.5");
        assert_eq!(g17(0.1), "0.10000000000000001");
        assert_eq!(g17(1234.0), "1234");
        assert_eq!(g17(1e-7), "9.9999999999999995e-08");
        assert_eq!(g17(0.0), "0");
    }

    #[test]
    fn round_trips() {
        for &v in &[0.3, 1.0 / 3.0, 2.0f64.sqrt(), 1e300, -4.5e-12, 123456789.123, 0.99] {
            assert_eq!(g17(v).parse::<f64>().unwrap(), v);
        }
    }
}
