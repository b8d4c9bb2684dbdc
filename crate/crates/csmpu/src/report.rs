//! Report formatting shared by CSV emitters: floats carry 6 significant
//! digits, empty cells stay empty.

/// `%.6g`-style formatting: 6 significant digits, scientific notation
/// outside `[1e-4, 1e6)`, trailing zeros trimmed.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&exp) {
        format!("{v:.5e}")
    } else {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}
