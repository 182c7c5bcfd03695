//! Exact parsing of parameter counts such as `7e9`, `70000000000` or `1.3e9`.

/// Parses a nonnegative decimal, optionally in scientific notation, that
/// must denote a whole number. No floating point is involved, so `7e9` is
/// exactly 7,000,000,000.
pub fn parse_param_count(text: &str) -> Result<u128, String> {
    let s = text.trim().replace('_', "");
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(at) => {
            let exp: i32 = s[at + 1..]
                .parse()
                .map_err(|_| format!("`{text}`: malformed exponent"))?;
            (&s[..at], exp)
        }
        None => (s.as_str(), 0),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty()
        || !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit())
    {
        return Err(format!("`{text}` is not a number"));
    }
    let digits = format!("{int_part}{frac_part}");
    let scale = exponent - frac_part.len() as i32;
    let digits = digits.trim_start_matches('0');
    if digits.is_empty() {
        return Ok(0);
    }
    let (digits, scale) = if scale < 0 {
        let cut = (-scale) as usize;
        let (keep, drop) = if cut >= digits.len() {
            ("", digits)
        } else {
            digits.split_at(digits.len() - cut)
        };
        if drop.chars().any(|c| c != '0') {
            return Err(format!("`{text}` is not a whole number of parameters"));
        }
        (keep, 0)
    } else {
        (digits, scale as u32)
    };
    let too_large = || format!("`{text}` is too large");
    let base: u128 = if digits.is_empty() {
        0
    } else {
        digits.parse().map_err(|_| too_large())?
    };
    10u128
        .checked_pow(scale)
        .and_then(|p| base.checked_mul(p))
        .ok_or_else(too_large)
}
